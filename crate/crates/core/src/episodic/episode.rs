use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::episodic::bank::{FeatureBank, Label};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityMask {
    pub has_visual: bool,
    pub has_semantic: bool,
}

impl ModalityMask {
    pub const FULL: ModalityMask = ModalityMask {
        has_visual: true,
        has_semantic: true,
    };

    pub fn is_valid(self) -> bool {
        self.has_visual || self.has_semantic
    }
}

/// One labeled support sample; either modality may be missing.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportRecord {
    pub label: Label,
    pub feature: Option<Vec<f64>>,
    pub semantic: Option<Vec<f64>>,
}

impl SupportRecord {
    pub fn mask(&self) -> ModalityMask {
        ModalityMask {
            has_visual: self.feature.is_some(),
            has_semantic: self.semantic.is_some(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryRecord {
    pub label: Label,
    pub feature: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
}

impl EpisodeConfig {
    pub fn new(n_way: usize, k_shot: usize, queries_per_class: usize) -> Self {
        Self {
            n_way,
            k_shot,
            queries_per_class,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 || self.queries_per_class == 0 {
            return Err(Error::Config(format!(
                "episode needs n_way, k_shot and queries_per_class ≥ 1, got {}/{}/{}",
                self.n_way, self.k_shot, self.queries_per_class
            )));
        }
        Ok(())
    }

    pub fn total_queries(&self) -> usize {
        self.n_way * self.queries_per_class
    }
}

/// Support records are grouped by class in the order of `classes`, `k_shot`
/// per class; queries likewise, `queries_per_class` per class.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub classes: Vec<Label>,
    pub support: Vec<SupportRecord>,
    pub query: Vec<QueryRecord>,
    pub config: EpisodeConfig,
    /// Bank rows used for the support and query sets.
    pub support_rows: Vec<usize>,
    pub query_rows: Vec<usize>,
}

/// Samples `n_way` distinct classes, then `k_shot` support and
/// `queries_per_class` disjoint query rows per class.
pub fn sample_episode<R: Rng + ?Sized>(bank: &FeatureBank, cfg: EpisodeConfig, rng: &mut R) -> Result<Episode> {
    cfg.validate()?;
    let need = cfg.k_shot + cfg.queries_per_class;
    let eligible: Vec<Label> = bank
        .classes()
        .into_iter()
        .filter(|&c| bank.indices_of(c).len() >= need)
        .collect();
    if eligible.len() < cfg.n_way {
        return Err(Error::Capacity(format!(
            "{}-way episode needs {} classes with at least {need} features each; the bank has {} (short by {})",
            cfg.n_way,
            cfg.n_way,
            eligible.len(),
            cfg.n_way - eligible.len()
        )));
    }
    let mut classes: Vec<Label> = eligible.choose_multiple(rng, cfg.n_way).copied().collect();
    classes.shuffle(rng);

    let mut support = Vec::with_capacity(cfg.n_way * cfg.k_shot);
    let mut query = Vec::with_capacity(cfg.total_queries());
    let mut support_rows = Vec::with_capacity(support.capacity());
    let mut query_rows = Vec::with_capacity(query.capacity());
    for &c in &classes {
        let rows: Vec<usize> = bank.indices_of(c).choose_multiple(rng, need).copied().collect();
        let semantic = bank.semantic(c).expect("bank invariant").to_vec();
        for &i in &rows[..cfg.k_shot] {
            support.push(SupportRecord {
                label: c,
                feature: Some(bank.feature(i).to_vec()),
                semantic: Some(semantic.clone()),
            });
            support_rows.push(i);
        }
        for &i in &rows[cfg.k_shot..] {
            query.push(QueryRecord {
                label: c,
                feature: bank.feature(i).to_vec(),
            });
            query_rows.push(i);
        }
    }
    Ok(Episode {
        classes,
        support,
        query,
        config: cfg,
        support_rows,
        query_rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum AbsenceMode {
    /// Records are picked uniformly.
    #[default]
    Random,
    /// Whole classes lose one modality; no class loses both kinds.
    CrossModal,
}

impl AbsenceMode {
    pub fn name(self) -> &'static str {
        match self {
            AbsenceMode::Random => "random",
            AbsenceMode::CrossModal => "cross_modal",
        }
    }
}

impl fmt::Display for AbsenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AbsenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(AbsenceMode::Random),
            "cross_modal" => Ok(AbsenceMode::CrossModal),
            other => Err(Error::Config(format!("unknown absence mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct AbsenceConfig {
    /// Fraction of support records without semantics.
    pub eta_s: f64,
    /// Fraction of support records without visual features.
    pub eta_v: f64,
    pub mode: AbsenceMode,
}

impl AbsenceConfig {
    pub fn new(eta_s: f64, eta_v: f64) -> Self {
        Self {
            eta_s,
            eta_v,
            mode: AbsenceMode::Random,
        }
    }

    pub fn full() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta_s", self.eta_s), ("eta_v", self.eta_v)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.eta_s + self.eta_v > 1.0 + 1e-9 {
            return Err(Error::Config(format!(
                "eta_s + eta_v must not exceed 1, got {} + {}",
                self.eta_s, self.eta_v
            )));
        }
        Ok(())
    }

    /// Number of support records losing semantics and visual features.
    pub fn counts(&self, support_size: usize) -> (usize, usize) {
        let count = |eta: f64| ((eta * support_size as f64) + 1e-9).floor() as usize;
        (count(self.eta_s), count(self.eta_v))
    }
}

/// Removes modalities from the support set. Queries are never touched.
pub fn apply_absence<R: Rng + ?Sized>(episode: &Episode, cfg: &AbsenceConfig, rng: &mut R) -> Result<Episode> {
    cfg.validate()?;
    let nk = episode.support.len();
    let (n_s, n_v) = cfg.counts(nk);
    if n_s + n_v > nk {
        return Err(Error::Config(format!("{n_s} + {n_v} removals exceed {nk} support records")));
    }
    let mut out = episode.clone();
    if n_s == 0 && n_v == 0 {
        return Ok(out);
    }
    let (drop_s, drop_v): (Vec<usize>, Vec<usize>) = match cfg.mode {
        AbsenceMode::Random => {
            let mut order: Vec<usize> = (0..nk).collect();
            order.shuffle(rng);
            (order[..n_s].to_vec(), order[n_s..n_s + n_v].to_vec())
        }
        AbsenceMode::CrossModal => {
            // class-major order: semantic removals from the front, visual
            // removals from the back
            let mut classes = episode.classes.clone();
            classes.shuffle(rng);
            let order: Vec<usize> = classes
                .iter()
                .flat_map(|&c| (0..nk).filter(move |&i| episode.support[i].label == c))
                .collect();
            let drop_s = order[..n_s].to_vec();
            let drop_v = order[nk - n_v..].to_vec();
            let label_of = |i: &usize| episode.support[*i].label;
            if drop_s.iter().map(label_of).any(|l| drop_v.iter().map(label_of).any(|m| m == l)) {
                return Err(Error::Config(format!(
                    "cross-modal absence with eta_s={} and eta_v={} would split a class between both modalities",
                    cfg.eta_s, cfg.eta_v
                )));
            }
            (drop_s, drop_v)
        }
    };
    for i in drop_s {
        out.support[i].semantic = None;
    }
    for i in drop_v {
        out.support[i].feature = None;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodic::bank::Split;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank(classes: usize, per_class: usize) -> FeatureBank {
        let mut feats = Vec::new();
        let mut sems = Vec::new();
        for c in 0..classes {
            let name = format!("c{c:02}");
            for j in 0..per_class {
                feats.push((name.clone(), vec![c as f64, j as f64]));
            }
            sems.push((name, vec![c as f64]));
        }
        FeatureBank::from_named(Split::Test, feats, sems).unwrap()
    }

    #[test]
    fn five_way_one_shot_layout() {
        let b = bank(8, 20);
        let ep = sample_episode(&b, EpisodeConfig::new(5, 1, 15), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 75);
        for c in &ep.classes {
            assert_eq!(ep.query.iter().filter(|q| q.label == *c).count(), 15);
        }
        for r in &ep.support_rows {
            assert!(!ep.query_rows.contains(r));
        }
        let again = sample_episode(&b, EpisodeConfig::new(5, 1, 15), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(ep, again);
    }

    #[test]
    fn capacity_error_names_shortfall() {
        let b = bank(4, 20);
        let err = sample_episode(&b, EpisodeConfig::new(5, 1, 15), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
        assert!(err.to_string().contains("short by 1"), "{err}");
    }

    #[test]
    fn absence_extremes() {
        let b = bank(6, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = sample_episode(&b, EpisodeConfig::new(5, 2, 3), &mut rng).unwrap();
        assert_eq!(apply_absence(&ep, &AbsenceConfig::full(), &mut rng).unwrap(), ep);
        let vis_only = apply_absence(&ep, &AbsenceConfig::new(1.0, 0.0), &mut rng).unwrap();
        assert!(vis_only.support.iter().all(|r| r.feature.is_some() && r.semantic.is_none()));
        let sem_only = apply_absence(&ep, &AbsenceConfig::new(0.0, 1.0), &mut rng).unwrap();
        assert!(sem_only.support.iter().all(|r| r.feature.is_none() && r.semantic.is_some()));
        assert_eq!(sem_only.query, ep.query);
        assert!(apply_absence(&ep, &AbsenceConfig::new(0.7, 0.4), &mut rng).is_err());
    }

    #[test]
    fn cross_modal_keeps_classes_single_sided() {
        let b = bank(6, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ep = sample_episode(&b, EpisodeConfig::new(5, 2, 3), &mut rng).unwrap();
        let cfg = AbsenceConfig {
            eta_s: 0.4,
            eta_v: 0.4,
            mode: AbsenceMode::CrossModal,
        };
        let out = apply_absence(&ep, &cfg, &mut rng).unwrap();
        for c in &ep.classes {
            let recs: Vec<_> = out.support.iter().filter(|r| r.label == *c).collect();
            let lost_s = recs.iter().any(|r| r.semantic.is_none());
            let lost_v = recs.iter().any(|r| r.feature.is_none());
            assert!(!(lost_s && lost_v));
        }
        let bad = AbsenceConfig {
            eta_s: 0.3,
            eta_v: 0.7,
            mode: AbsenceMode::CrossModal,
        };
        // 3 + 7 records over 2-shot classes: the second class is split
        assert!(apply_absence(&ep, &bad, &mut rng).is_err());
    }
}
