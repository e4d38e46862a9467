//! Optimization loops: full-modality pretraining, per-episode fine-tuning
//! and the subbatch strategy for support sets with missing modalities.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::episodic::{class_prototype, FeatureBank, Label, SupportRecord};
use crate::error::{Error, Result};
use crate::model::{
    generate, ClassConditions, DcvaeParams, FeatureKind, Group, GroupSet, HyperParams, LossBreakdown, ModelGraph,
};
use crate::numerics::{AdamConfig, AdamState, Matrix};

/// Indices of a batch split by modality mask.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SubbatchPlan {
    pub full: Vec<usize>,
    pub semantic_absent: Vec<usize>,
    pub visual_absent: Vec<usize>,
}

impl SubbatchPlan {
    pub fn len(&self) -> usize {
        self.full.len() + self.semantic_absent.len() + self.visual_absent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn partition_subbatches(records: &[SupportRecord]) -> Result<SubbatchPlan> {
    let mut plan = SubbatchPlan::default();
    for (i, r) in records.iter().enumerate() {
        match (r.feature.is_some(), r.semantic.is_some()) {
            (true, true) => plan.full.push(i),
            (true, false) => plan.semantic_absent.push(i),
            (false, true) => plan.visual_absent.push(i),
            (false, false) => {
                return Err(Error::Contract(format!("support record {i} (label {}) has no modality", r.label)));
            }
        }
    }
    Ok(plan)
}

/// Groups updated by a semantic-absent step.
pub fn semantic_absent_groups() -> GroupSet {
    GroupSet::of(&[Group::Encoder, Group::VisualDecoder])
}

/// Adam with separate moments per parameter group. Frozen groups are never
/// touched, including their step counters.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedAdam {
    states: Vec<AdamState>,
}

impl GroupedAdam {
    pub fn new(params: &DcvaeParams, config: AdamConfig) -> Self {
        Self {
            states: Group::ALL.iter().map(|&g| AdamState::new(params.group(g), config)).collect(),
        }
    }

    pub fn for_hyper(params: &DcvaeParams, hp: &HyperParams) -> Self {
        Self::new(
            params,
            AdamConfig {
                lr: hp.lr,
                ..AdamConfig::default()
            },
        )
    }

    pub fn state(&self, g: Group) -> &AdamState {
        &self.states[g.index()]
    }

    fn apply(&mut self, params: &mut DcvaeParams, g: &ModelGraph, root: crate::Var, trainable: GroupSet) -> Result<()> {
        if trainable.is_empty() {
            return Err(Error::Contract("optimization step with every group frozen".into()));
        }
        let grads = g.group_gradients(root)?;
        for group in trainable.iter() {
            self.states[group.index()].step(params.group_mut(group), grads.group(group))?;
        }
        Ok(())
    }
}

/// Inputs of a full-modality step; `v` holds each sample's class prototype.
#[derive(Clone, Debug, PartialEq)]
pub struct FullBatch {
    pub x: Matrix,
    pub s: Matrix,
    pub v: Matrix,
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::new(rows, cols, data).expect("noise shape")
}

/// One Adam step on the full objective with every group trainable.
pub fn step_full<R: Rng + ?Sized>(
    params: &mut DcvaeParams,
    opt: &mut GroupedAdam,
    batch: &FullBatch,
    hp: &HyperParams,
    rng: &mut R,
) -> Result<LossBreakdown> {
    if batch.x.rows() == 0 {
        return Err(Error::Contract("empty full-modality subbatch".into()));
    }
    let noise = standard_normal(rng, batch.x.rows(), params.dims().latent_dim);
    let mut g = ModelGraph::new(params, GroupSet::all());
    let x = g.input(batch.x.clone());
    let s = g.input(batch.s.clone());
    let v = g.input(batch.v.clone());
    let z = g.input(noise);
    let fv = g.forward(x, s, v, z)?;
    let lv = g.loss_total(&fv, x, s, v, hp)?;
    opt.apply(params, &g, lv.total, GroupSet::all())?;
    Ok(g.breakdown(&lv))
}

/// One Adam step on the visual-only objective; only the encoder and the
/// visual decoder move.
pub fn step_semantic_absent<R: Rng + ?Sized>(
    params: &mut DcvaeParams,
    opt: &mut GroupedAdam,
    x: &Matrix,
    v: &Matrix,
    hp: &HyperParams,
    rng: &mut R,
) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::Contract("empty semantic-absent subbatch".into()));
    }
    let trainable = semantic_absent_groups();
    let noise = standard_normal(rng, x.rows(), params.dims().latent_dim);
    let mut g = ModelGraph::new(params, trainable);
    let xv = g.input(x.clone());
    let vv = g.input(v.clone());
    let z = g.input(noise);
    let root = g.loss_visual_only(xv, vv, z, hp)?;
    opt.apply(params, &g, root, trainable)?;
    g.value(root).item()
}

/// Synthesizes `n` features from the semantic decoder for a class that has
/// no visual support. Never updates parameters.
pub fn handle_visual_absent<R: Rng + ?Sized>(
    params: &DcvaeParams,
    semantic: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<Matrix> {
    let cond = ClassConditions {
        semantic: Some(semantic.to_vec()),
        visual: None,
    };
    let mut sets = generate(params, &cond, &[FeatureKind::Semantic], n, rng)?;
    Ok(sets.pop().expect("one kind").features)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SubbatchKind {
    Full,
    SemanticAbsent,
    VisualAbsent,
}

impl SubbatchKind {
    pub fn name(self) -> &'static str {
        match self {
            SubbatchKind::Full => "full",
            SubbatchKind::SemanticAbsent => "semantic_absent",
            SubbatchKind::VisualAbsent => "visual_absent",
        }
    }
}

impl fmt::Display for SubbatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub kind: SubbatchKind,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "step,subbatch_type,total,bcvae,ts,rc,gfc";

    pub fn push(&mut self, kind: SubbatchKind, loss: LossBreakdown) {
        let step = self.rows.len();
        self.rows.push(LogRow { step, kind, loss });
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss.total).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            let l = &r.loss;
            writeln!(w, "{},{},{},{},{},{},{}", r.step, r.kind, l.total, l.bcvae, l.ts, l.rc, l.gfc)?;
        }
        Ok(())
    }
}

/// Exponential moving average of a series; `None` when empty.
pub fn ema(values: &[f64], alpha: f64) -> Option<f64> {
    let (first, rest) = values.split_first()?;
    Some(rest.iter().fold(*first, |acc, v| alpha * v + (1.0 - alpha) * acc))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Per-row class prototypes over the rows of one batch.
pub fn batch_prototypes(x: &Matrix, labels: &[Label]) -> Result<Matrix> {
    if x.rows() != labels.len() {
        return Err(Error::dim("batch_prototypes", x.shape(), (labels.len(), x.cols())));
    }
    let mut members: BTreeMap<Label, Vec<&[f64]>> = BTreeMap::new();
    for (row, l) in x.iter_rows().zip(labels) {
        members.entry(*l).or_default().push(row);
    }
    let protos: BTreeMap<Label, Vec<f64>> = members
        .into_iter()
        .map(|(l, rows)| Ok((l, class_prototype(&rows)?)))
        .collect::<Result<_>>()?;
    Matrix::from_rows(&labels.iter().map(|l| protos[l].as_slice()).collect::<Vec<_>>())
}

/// Shuffled minibatch training on a full-modality bank. The visual
/// condition of every sample is its class prototype within the minibatch.
pub fn pretrain(params: &mut DcvaeParams, bank: &FeatureBank, cfg: &PretrainConfig, hp: &HyperParams) -> Result<TrainLog> {
    hp.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let dims = *params.dims();
    if bank.feature_dim() != dims.feature_dim || bank.semantic_dim() != dims.semantic_dim {
        return Err(Error::dim(
            "pretrain (bank vs model)",
            (bank.feature_dim(), bank.semantic_dim()),
            (dims.feature_dim, dims.semantic_dim),
        ));
    }
    let mut log = TrainLog::default();
    if cfg.epochs == 0 || bank.is_empty() {
        return Ok(log);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = GroupedAdam::for_hyper(params, hp);
    let mut order: Vec<usize> = (0..bank.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let labels: Vec<Label> = chunk.iter().map(|&i| bank.label(i)).collect();
            let x = bank.features().select_rows(chunk);
            let semantics: Vec<&[f64]> = labels.iter().map(|&l| bank.semantic(l).expect("bank invariant")).collect();
            let batch = FullBatch {
                v: batch_prototypes(&x, &labels)?,
                s: Matrix::from_rows(&semantics)?,
                x,
            };
            let loss = step_full(params, &mut opt, &batch, hp, &mut rng)?;
            log.push(SubbatchKind::Full, loss);
        }
    }
    Ok(log)
}

/// Per-class visual prototypes over the visual-present records.
pub fn support_prototypes(support: &[SupportRecord]) -> Result<BTreeMap<Label, Vec<f64>>> {
    let mut by_class: BTreeMap<Label, Vec<&[f64]>> = BTreeMap::new();
    for r in support {
        if let Some(f) = &r.feature {
            by_class.entry(r.label).or_default().push(f);
        }
    }
    by_class.into_iter().map(|(l, rows)| Ok((l, class_prototype(&rows)?))).collect()
}

/// Fine-tunes on a support set with a fresh optimizer. Every step runs the
/// full subbatch, then the semantic-absent one; visual-absent records take
/// no optimization step.
pub fn finetune<R: Rng + ?Sized>(
    params: &mut DcvaeParams,
    support: &[SupportRecord],
    steps: usize,
    hp: &HyperParams,
    rng: &mut R,
) -> Result<TrainLog> {
    let plan = partition_subbatches(support)?;
    let protos = support_prototypes(support)?;
    let rows = |idx: &[usize], pick: fn(&SupportRecord) -> &[f64]| -> Result<Matrix> {
        Matrix::from_rows(&idx.iter().map(|&i| pick(&support[i])).collect::<Vec<_>>())
    };
    let protos_of = |idx: &[usize]| -> Result<Matrix> {
        Matrix::from_rows(&idx.iter().map(|&i| protos[&support[i].label].as_slice()).collect::<Vec<_>>())
    };
    fn feature(r: &SupportRecord) -> &[f64] {
        r.feature.as_deref().expect("planned")
    }
    fn semantic(r: &SupportRecord) -> &[f64] {
        r.semantic.as_deref().expect("planned")
    }

    let full = if plan.full.is_empty() {
        None
    } else {
        Some(FullBatch {
            x: rows(&plan.full, feature)?,
            s: rows(&plan.full, semantic)?,
            v: protos_of(&plan.full)?,
        })
    };
    let sem_absent = if plan.semantic_absent.is_empty() {
        None
    } else {
        Some((rows(&plan.semantic_absent, feature)?, protos_of(&plan.semantic_absent)?))
    };

    let mut log = TrainLog::default();
    if full.is_none() && sem_absent.is_none() {
        return Ok(log);
    }
    let mut opt = GroupedAdam::for_hyper(params, hp);
    for _ in 0..steps {
        if let Some(batch) = &full {
            let loss = step_full(params, &mut opt, batch, hp, rng)?;
            log.push(SubbatchKind::Full, loss);
        }
        if let Some((x, v)) = &sem_absent {
            let total = step_semantic_absent(params, &mut opt, x, v, hp, rng)?;
            log.push(
                SubbatchKind::SemanticAbsent,
                LossBreakdown {
                    total,
                    bcvae: total,
                    ..LossBreakdown::default()
                },
            );
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;

    fn dims() -> ModelDims {
        ModelDims::compact(6, 3, 4, 8)
    }

    fn record(label: u32, feature: bool, semantic: bool, rng: &mut ChaCha8Rng) -> SupportRecord {
        SupportRecord {
            label: Label(label),
            feature: feature.then(|| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()),
            semantic: semantic.then(|| vec![label as f64 * 0.5 + 0.2, 0.3, -0.4]),
        }
    }

    #[test]
    fn partition_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let recs = vec![record(0, true, true, &mut rng), record(1, true, false, &mut rng), record(2, false, true, &mut rng)];
        let plan = partition_subbatches(&recs).unwrap();
        assert_eq!(plan.full, vec![0]);
        assert_eq!(plan.semantic_absent, vec![1]);
        assert_eq!(plan.visual_absent, vec![2]);
        let mut bad = recs.clone();
        bad[1].feature = None;
        assert!(matches!(partition_subbatches(&bad), Err(Error::Contract(_))));
    }

    #[test]
    fn full_step_moves_every_group_deterministically() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p0 = DcvaeParams::init_seeded(dims(), 2).unwrap();
        let batch = FullBatch {
            x: standard_normal(&mut rng, 4, 6),
            s: standard_normal(&mut rng, 4, 3),
            v: standard_normal(&mut rng, 4, 6),
        };
        let hp = HyperParams::default();
        let run = || {
            let mut p = p0.clone();
            let mut opt = GroupedAdam::for_hyper(&p, &hp);
            step_full(&mut p, &mut opt, &batch, &hp, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            p
        };
        let a = run();
        assert_eq!(a, run());
        for g in Group::ALL {
            assert_ne!(a.group(g), p0.group(g), "{g} did not move");
        }
    }

    #[test]
    fn full_step_descends_on_toy_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = DcvaeParams::init_seeded(dims(), 4).unwrap();
        let batch = FullBatch {
            x: standard_normal(&mut rng, 4, 6),
            s: standard_normal(&mut rng, 4, 3),
            v: standard_normal(&mut rng, 4, 6),
        };
        let hp = HyperParams {
            lr: 1e-3,
            ..HyperParams::default()
        };
        let mut opt = GroupedAdam::for_hyper(&p, &hp);
        let losses: Vec<f64> = (0..50)
            .map(|_| step_full(&mut p, &mut opt, &batch, &hp, &mut rng).unwrap().total)
            .collect();
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn semantic_absent_step_respects_freeze_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p0 = DcvaeParams::init_seeded(dims(), 3).unwrap();
        let mut p = p0.clone();
        let hp = HyperParams::default();
        let mut opt = GroupedAdam::for_hyper(&p, &hp);
        let opt0 = opt.clone();
        let x = standard_normal(&mut rng, 3, 6);
        let v = standard_normal(&mut rng, 3, 6);
        for _ in 0..5 {
            step_semantic_absent(&mut p, &mut opt, &x, &v, &hp, &mut rng).unwrap();
        }
        for g in Group::ALL {
            if semantic_absent_groups().contains(g) {
                assert_ne!(p.group(g), p0.group(g));
            } else {
                assert_eq!(p.group(g), p0.group(g));
                assert_eq!(opt.state(g), opt0.state(g));
            }
        }
    }

    #[test]
    fn finetune_reduces_to_full_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let support: Vec<_> = (0..3).map(|c| record(c, true, true, &mut rng)).collect();
        let hp = HyperParams::default();
        let p0 = DcvaeParams::init_seeded(dims(), 6).unwrap();

        let mut a = p0.clone();
        let log = finetune(&mut a, &support, 7, &hp, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(log.len(), 7);

        let mut b = p0.clone();
        let mut opt = GroupedAdam::for_hyper(&b, &hp);
        let batch = FullBatch {
            x: Matrix::from_rows(&support.iter().map(|r| r.feature.clone().unwrap()).collect::<Vec<_>>()).unwrap(),
            s: Matrix::from_rows(&support.iter().map(|r| r.semantic.clone().unwrap()).collect::<Vec<_>>()).unwrap(),
            v: Matrix::from_rows(&support.iter().map(|r| r.feature.clone().unwrap()).collect::<Vec<_>>()).unwrap(),
        };
        let mut r = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..7 {
            step_full(&mut b, &mut opt, &batch, &hp, &mut r).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn visual_absent_support_leaves_model_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let support: Vec<_> = (0..3).map(|c| record(c, false, true, &mut rng)).collect();
        let p0 = DcvaeParams::init_seeded(dims(), 7).unwrap();
        let mut p = p0.clone();
        let log = finetune(&mut p, &support, 10, &HyperParams::default(), &mut rng).unwrap();
        assert!(log.is_empty());
        assert_eq!(p, p0);
        let feats = handle_visual_absent(&p, support[0].semantic.as_ref().unwrap(), 4, &mut rng).unwrap();
        assert_eq!(feats.shape(), (4, 6));
        assert_eq!(p, p0);
    }

    #[test]
    fn log_csv_layout() {
        let mut log = TrainLog::default();
        log.push(SubbatchKind::Full, LossBreakdown { total: 1.5, bcvae: 1.0, ts: 0.25, rc: 0.125, gfc: 0.125 });
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,subbatch_type,total,bcvae,ts,rc,gfc\n0,full,1.5,1,0.25,0.125,0.125\n");
    }

    #[test]
    fn ema_of_constant_series() {
        assert_eq!(ema(&[], 0.1), None);
        assert_eq!(ema(&[2.0, 2.0, 2.0], 0.3), Some(2.0));
    }
}
