//! Few-shot episodes: feature banks, sampling, modality absence, kNN
//! label inference and multi-episode evaluation.

mod bank;
mod episode;
mod eval;
mod knn;

use std::collections::BTreeMap;

pub use bank::{FeatureBank, Label, Split};
pub use episode::{
    apply_absence, sample_episode, AbsenceConfig, AbsenceMode, Episode, EpisodeConfig, ModalityMask, QueryRecord,
    SupportRecord,
};
pub use eval::{ci95, episode_seed, evaluate, run_episode, EpisodeOutcome, EvalConfig, EvalEcho, EvalReport};
pub use knn::{knn_classify, knn_classify_all};

use crate::error::{Error, Result};
use crate::model::{generate_seeded, ClassConditions, DcvaeParams, FeatureKind};

/// Mean of a class's feature vectors.
pub fn class_prototype<R: AsRef<[f64]>>(features: &[R]) -> Result<Vec<f64>> {
    let first = features
        .first()
        .ok_or_else(|| Error::Degenerate("prototype of an empty class".into()))?;
    let dim = first.as_ref().len();
    let mut acc = vec![0.0; dim];
    for f in features {
        let f = f.as_ref();
        if f.len() != dim {
            return Err(Error::dim("class_prototype", (1, dim), (1, f.len())));
        }
        acc.iter_mut().zip(f).for_each(|(a, v)| *a += v);
    }
    let n = features.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Mean over classes of the distance between the real and synthetic
/// prototypes.
pub fn synthesis_dis(real: &BTreeMap<Label, Vec<Vec<f64>>>, synthetic: &BTreeMap<Label, Vec<Vec<f64>>>) -> Result<f64> {
    for l in real.keys().chain(synthetic.keys()) {
        if !real.contains_key(l) || !synthetic.contains_key(l) {
            return Err(Error::Input(format!("class {l} appears on one side only")));
        }
    }
    if real.is_empty() {
        return Err(Error::Degenerate("no classes to compare".into()));
    }
    let mut total = 0.0;
    for (l, r) in real {
        let pr = class_prototype(r)?;
        let ps = class_prototype(&synthetic[l])?;
        if pr.len() != ps.len() {
            return Err(Error::dim("synthesis_dis", (1, pr.len()), (1, ps.len())));
        }
        total += pr.iter().zip(&ps).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    }
    Ok(total / real.len() as f64)
}

/// `synthesis_dis` over every class of a bank. Each class is conditioned on
/// its semantics and the prototype of all its features, and `n` features of
/// each kind are drawn with a per-class seed.
pub fn bank_synthesis_dis(
    params: &DcvaeParams,
    bank: &FeatureBank,
    kinds: &[FeatureKind],
    n: usize,
    seed: u64,
) -> Result<f64> {
    if n == 0 || kinds.is_empty() {
        return Err(Error::Config("bank_synthesis_dis needs n > 0 and at least one kind".into()));
    }
    let mut real = BTreeMap::new();
    let mut synthetic = BTreeMap::new();
    for (label, proto) in bank.prototypes() {
        let cond = ClassConditions {
            semantic: bank.semantic(label).map(<[f64]>::to_vec),
            visual: Some(proto),
        };
        let sets = generate_seeded(params, &cond, kinds, n, episode_seed(seed, label.0 as usize, 2))?;
        let rows: Vec<Vec<f64>> = sets.iter().flat_map(|s| s.features.iter_rows().map(<[f64]>::to_vec)).collect();
        real.insert(label, bank.indices_of(label).iter().map(|&i| bank.feature(i).to_vec()).collect());
        synthetic.insert(label, rows);
    }
    synthesis_dis(&real, &synthetic)
}
