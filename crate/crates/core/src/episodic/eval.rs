use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::episodic::bank::{FeatureBank, Label};
use crate::episodic::episode::{apply_absence, sample_episode, AbsenceConfig, EpisodeConfig};
use crate::episodic::knn::knn_classify;
use crate::episodic::synthesis_dis;
use crate::error::{Error, Result};
use crate::model::{generate, ClassConditions, DcvaeParams, FeatureKind, HyperParams};
use crate::numerics::Matrix;
use crate::training::{finetune, handle_visual_absent, support_prototypes};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub episode: EpisodeConfig,
    pub episodes: usize,
    pub absence: AbsenceConfig,
    /// Kinds synthesized for every class whose conditions allow them.
    pub kinds: Vec<FeatureKind>,
    pub seed: u64,
    /// Worker threads; 1 runs serially.
    pub workers: usize,
}

impl EvalConfig {
    /// 5-way with the protocol defaults taken from `hp`.
    pub fn from_hyper(hp: &HyperParams, n_way: usize, k_shot: usize) -> Self {
        Self {
            episode: EpisodeConfig::new(n_way, k_shot, hp.queries_per_class),
            episodes: hp.episodes,
            absence: AbsenceConfig::full(),
            kinds: vec![FeatureKind::Semantic, FeatureKind::Mixed],
            seed: 0,
            workers: 1,
        }
    }

    pub fn validate(&self, hp: &HyperParams) -> Result<()> {
        self.episode.validate()?;
        self.absence.validate()?;
        hp.validate()?;
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if hp.synth_count > 0 && self.kinds.is_empty() {
            return Err(Error::Config("feature kinds must be nonempty when n > 0".into()));
        }
        Ok(())
    }
}

/// Configuration echoed into every report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalEcho {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub episodes: usize,
    pub synth_count: usize,
    pub knn_k: usize,
    pub eta_s: f64,
    pub eta_v: f64,
    pub absence_mode: String,
    pub kinds: String,
    pub lambda_kl: f64,
    pub loss_terms: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    /// Percent of queries classified correctly.
    pub accuracy: f64,
    /// Synthesis discrepancy; `None` when nothing was synthesized.
    pub dis: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
    pub dis: Option<f64>,
    pub echo: EvalEcho,
}

/// Half-width of the normal 95% interval, using the population deviation.
pub fn ci95(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Seed of one random stream of one episode. Streams: 0 sampling,
/// 1 absence, 2 fine-tuning and synthesis.
pub fn episode_seed(seed: u64, index: usize, stream: u64) -> u64 {
    let mut h = seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h ^= (stream + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^ (h >> 31)
}

/// One episode: sample, mask, fine-tune a private copy, synthesize,
/// classify the queries.
pub fn run_episode(
    bank: &FeatureBank,
    params: &DcvaeParams,
    hp: &HyperParams,
    cfg: &EvalConfig,
    index: usize,
) -> Result<EpisodeOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(cfg.seed, index, 0));
    let episode = sample_episode(bank, cfg.episode, &mut rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(cfg.seed, index, 1));
    let episode = apply_absence(&episode, &cfg.absence, &mut rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(cfg.seed, index, 2));

    let protos = support_prototypes(&episode.support)?;
    let semantics: BTreeMap<Label, &[f64]> = episode
        .support
        .iter()
        .filter_map(|r| r.semantic.as_deref().map(|s| (r.label, s)))
        .collect();
    let visual_absent: Vec<Label> = episode.classes.iter().copied().filter(|c| !protos.contains_key(c)).collect();

    let n = hp.synth_count;
    let needs_model = n > 0 || !visual_absent.is_empty();
    let tuned;
    let model = if needs_model {
        let mut p = params.clone();
        finetune(&mut p, &episode.support, hp.finetune_steps(cfg.episode.k_shot), hp, &mut rng)?;
        tuned = p;
        &tuned
    } else {
        params
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<Label> = Vec::new();
    for r in &episode.support {
        if let Some(f) = &r.feature {
            rows.push(f.clone());
            labels.push(r.label);
        }
    }
    let mut synthetic: BTreeMap<Label, Vec<Vec<f64>>> = BTreeMap::new();
    let mut push_synthetic = |label: Label, m: &Matrix, rows: &mut Vec<Vec<f64>>, labels: &mut Vec<Label>| {
        for row in m.iter_rows() {
            rows.push(row.to_vec());
            labels.push(label);
            synthetic.entry(label).or_default().push(row.to_vec());
        }
    };
    for &c in &episode.classes {
        if visual_absent.contains(&c) {
            let s = semantics.get(&c).ok_or_else(|| Error::Contract(format!("class {c} lost both modalities")))?;
            let feats = handle_visual_absent(model, s, n.max(1), &mut rng)?;
            push_synthetic(c, &feats, &mut rows, &mut labels);
            continue;
        }
        if n == 0 {
            continue;
        }
        let cond = ClassConditions {
            semantic: semantics.get(&c).map(|s| s.to_vec()),
            visual: protos.get(&c).cloned(),
        };
        let mut kinds: Vec<FeatureKind> = cfg.kinds.iter().copied().filter(|&k| cond.supports(k)).collect();
        if kinds.is_empty() {
            // no semantics for this class: prototype-conditioned generation
            kinds.push(FeatureKind::Visual);
        }
        for set in generate(model, &cond, &kinds, n, &mut rng)? {
            push_synthetic(c, &set.features, &mut rows, &mut labels);
        }
    }

    let support = Matrix::from_rows(&rows)?;
    let mut correct = 0usize;
    for q in &episode.query {
        if knn_classify(&support, &labels, &q.feature, hp.knn_k)? == q.label {
            correct += 1;
        }
    }
    let accuracy = 100.0 * correct as f64 / episode.query.len() as f64;

    let dis = if synthetic.len() == episode.classes.len() {
        let mut real: BTreeMap<Label, Vec<Vec<f64>>> = BTreeMap::new();
        for q in &episode.query {
            real.entry(q.label).or_default().push(q.feature.clone());
        }
        Some(synthesis_dis(&real, &synthetic)?)
    } else {
        None
    };
    Ok(EpisodeOutcome { accuracy, dis })
}

/// Runs `cfg.episodes` independent episodes and aggregates them in episode
/// order, so the report does not depend on `cfg.workers`.
pub fn evaluate(bank: &FeatureBank, params: &DcvaeParams, hp: &HyperParams, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate(hp)?;
    let dims = params.dims();
    if bank.feature_dim() != dims.feature_dim || bank.semantic_dim() != dims.semantic_dim {
        return Err(Error::dim(
            "evaluate (bank vs model)",
            (bank.feature_dim(), bank.semantic_dim()),
            (dims.feature_dim, dims.semantic_dim),
        ));
    }
    let outcomes: Vec<EpisodeOutcome> = if cfg.workers == 1 {
        (0..cfg.episodes)
            .map(|i| run_episode(bank, params, hp, cfg, i))
            .collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        pool.install(|| {
            (0..cfg.episodes)
                .into_par_iter()
                .map(|i| run_episode(bank, params, hp, cfg, i))
                .collect::<Result<Vec<_>>>()
        })?
    };
    let accuracies: Vec<f64> = outcomes.iter().map(|o| o.accuracy).collect();
    let (mean, ci) = ci95(&accuracies);
    let dis_values: Vec<f64> = outcomes.iter().filter_map(|o| o.dis).collect();
    let dis = (!dis_values.is_empty()).then(|| dis_values.iter().sum::<f64>() / dis_values.len() as f64);
    Ok(EvalReport {
        accuracies,
        mean,
        ci95: ci,
        dis,
        echo: EvalEcho {
            n_way: cfg.episode.n_way,
            k_shot: cfg.episode.k_shot,
            queries_per_class: cfg.episode.queries_per_class,
            episodes: cfg.episodes,
            synth_count: hp.synth_count,
            knn_k: hp.knn_k,
            eta_s: cfg.absence.eta_s,
            eta_v: cfg.absence.eta_v,
            absence_mode: cfg.absence.mode.to_string(),
            kinds: FeatureKind::list_label(&cfg.kinds),
            lambda_kl: hp.lambda_kl,
            loss_terms: hp.loss_terms.label(),
            seed: cfg.seed,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodic::bank::Split;
    use crate::model::ModelDims;
    use rand::Rng;

    #[test]
    fn ci_of_hand_list() {
        let (m, c) = ci95(&[100.0, 0.0]);
        assert_eq!(m, 50.0);
        assert!((c - 1.96 * 50.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    fn toy_bank() -> FeatureBank {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut feats = Vec::new();
        let mut sems = Vec::new();
        for c in 0..6 {
            let centre: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            for _ in 0..8 {
                feats.push((format!("k{c}"), centre.iter().map(|m| m + rng.random_range(-0.3..0.3)).collect()));
            }
            sems.push((format!("k{c}"), centre[..3].to_vec()));
        }
        FeatureBank::from_named(Split::Test, feats, sems).unwrap()
    }

    fn quick_hp(n: usize) -> HyperParams {
        HyperParams {
            synth_count: n,
            finetune_steps_1shot: 2,
            ..HyperParams::default()
        }
    }

    #[test]
    fn serial_and_parallel_reports_agree() {
        let bank = toy_bank();
        let params = DcvaeParams::init_seeded(ModelDims::compact(6, 3, 4, 8), 0).unwrap();
        let hp = quick_hp(5);
        let mut cfg = EvalConfig::from_hyper(&hp, 3, 1);
        cfg.episode.queries_per_class = 4;
        cfg.episodes = 6;
        cfg.absence = AbsenceConfig::new(0.0, 1.0 / 3.0);
        let serial = evaluate(&bank, &params, &hp, &cfg).unwrap();
        cfg.workers = 3;
        let parallel = evaluate(&bank, &params, &hp, &cfg).unwrap();
        assert_eq!(serial, parallel);
        assert_eq!(serial.accuracies.len(), 6);
        assert!(serial.accuracies.iter().all(|a| (0.0..=100.0).contains(a)));
        assert!(serial.dis.is_some());
    }

    #[test]
    fn baseline_needs_no_model_updates() {
        let bank = toy_bank();
        let params = DcvaeParams::init_seeded(ModelDims::compact(6, 3, 4, 8), 0).unwrap();
        let hp = quick_hp(0);
        let mut cfg = EvalConfig::from_hyper(&hp, 3, 1);
        cfg.episode.queries_per_class = 4;
        cfg.episodes = 3;
        let report = evaluate(&bank, &params, &hp, &cfg).unwrap();
        assert_eq!(report.dis, None);
        // the baseline is plain 1-NN over the support features
        for i in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(0, i, 0));
            let ep = sample_episode(&bank, cfg.episode, &mut rng).unwrap();
            let support = Matrix::from_rows(&ep.support.iter().map(|r| r.feature.clone().unwrap()).collect::<Vec<_>>()).unwrap();
            let labels: Vec<Label> = ep.support.iter().map(|r| r.label).collect();
            let correct = ep
                .query
                .iter()
                .filter(|q| knn_classify(&support, &labels, &q.feature, 5).unwrap() == q.label)
                .count();
            assert_eq!(report.accuracies[i], 100.0 * correct as f64 / ep.query.len() as f64);
        }
    }
}
