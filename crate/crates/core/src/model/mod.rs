//! The generator network, its objective, and feature synthesis.

mod checkpoint;
mod generate;
pub mod gradcheck;
mod graph;
pub mod loss;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use generate::{generate, generate_seeded, ClassConditions, SyntheticSet};
pub use graph::{Condition, ForwardVars, GroupGradients, LatentVars, LossVars, ModelGraph};
pub use loss::{LossBreakdown, LossTerms};
pub use params::{BoundParams, DcvaeParams, Group, GroupSet, ModelDims};

/// Which mixing coefficient weighs the retrieved-semantics side of the
/// function-consistency term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GfcEta {
    /// `σ(G(ŝ))`, from the retrieved semantics.
    #[default]
    Retrieved,
    /// `σ(G(s))`, the pass's own coefficient on both sides.
    Original,
}

impl FromStr for GfcEta {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrieved" => Ok(GfcEta::Retrieved),
            "original" => Ok(GfcEta::Original),
            other => Err(Error::Config(format!("gfc_eta must be retrieved|original, got `{other}`"))),
        }
    }
}

impl fmt::Display for GfcEta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GfcEta::Retrieved => "retrieved",
            GfcEta::Original => "original",
        })
    }
}

/// The three kinds of synthetic feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureKind {
    /// `x_s`, decoded from the semantic condition.
    Semantic,
    /// `x_v`, decoded from the class prototype.
    Visual,
    /// `x̂`, the adaptive blend of the two.
    Mixed,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] = [FeatureKind::Semantic, FeatureKind::Visual, FeatureKind::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Semantic => "x_s",
            FeatureKind::Visual => "x_v",
            FeatureKind::Mixed => "x_hat",
        }
    }

    pub fn needs_semantic(self) -> bool {
        matches!(self, FeatureKind::Semantic | FeatureKind::Mixed)
    }

    pub fn needs_visual(self) -> bool {
        matches!(self, FeatureKind::Visual | FeatureKind::Mixed)
    }

    /// Parses `x_s+x_hat` or `x_s,x_hat`.
    pub fn parse_list(spec: &str) -> Result<Vec<FeatureKind>> {
        let mut kinds = Vec::new();
        for part in spec.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            let k: FeatureKind = part.parse()?;
            if !kinds.contains(&k) {
                kinds.push(k);
            }
        }
        Ok(kinds)
    }

    pub fn list_label(kinds: &[FeatureKind]) -> String {
        kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join("+")
    }

    /// The seven non-empty combinations of feature kinds.
    pub fn combinations() -> Vec<Vec<FeatureKind>> {
        (1u8..8)
            .map(|mask| {
                FeatureKind::ALL
                    .into_iter()
                    .enumerate()
                    .filter(|(i, _)| mask & (1 << i) != 0)
                    .map(|(_, k)| k)
                    .collect()
            })
            .collect()
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x_s" => Ok(FeatureKind::Semantic),
            "x_v" => Ok(FeatureKind::Visual),
            "x_hat" => Ok(FeatureKind::Mixed),
            other => Err(Error::Config(format!("unknown feature kind `{other}` (x_s|x_v|x_hat)"))),
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// KL weight.
    pub lambda_kl: f64,
    /// Denominator offset of the representation-consistency term.
    pub epsilon_rc: f64,
    pub lr: f64,
    /// Synthetic features per class and kind.
    pub synth_count: usize,
    pub knn_k: usize,
    pub finetune_steps_1shot: usize,
    pub finetune_steps_5shot: usize,
    pub episodes: usize,
    pub queries_per_class: usize,
    pub gfc_eta: GfcEta,
    pub loss_terms: LossTerms,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda_kl: 10.0,
            epsilon_rc: 0.1,
            lr: 1e-4,
            synth_count: 100,
            knn_k: 5,
            finetune_steps_1shot: 50,
            finetune_steps_5shot: 100,
            episodes: 600,
            queries_per_class: 15,
            gfc_eta: GfcEta::Retrieved,
            loss_terms: LossTerms::all(),
        }
    }
}

impl HyperParams {
    /// KL weight suggested for attribute-style semantics.
    pub const LAMBDA_ATTRIBUTES: f64 = 100.0;

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lambda", self.lambda_kl)?;
        positive("epsilon", self.epsilon_rc)?;
        positive("lr", self.lr)?;
        for (name, v) in [
            ("knn_k", self.knn_k),
            ("finetune_steps_1shot", self.finetune_steps_1shot),
            ("finetune_steps_5shot", self.finetune_steps_5shot),
            ("episodes", self.episodes),
            ("queries_per_class", self.queries_per_class),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.loss_terms.any() {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        Ok(())
    }

    /// Fine-tuning steps for a `k_shot` support set.
    pub fn finetune_steps(&self, k_shot: usize) -> usize {
        if k_shot >= 5 {
            self.finetune_steps_5shot
        } else {
            self.finetune_steps_1shot
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    pub mu: Matrix,
    pub log_var: Matrix,
}

/// Values produced by one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationBundle {
    pub z: Matrix,
    pub x_s: Matrix,
    pub x_v: Matrix,
    pub eta: Matrix,
    pub x_hat: Matrix,
    pub s_hat: Matrix,
    pub v_hat: Matrix,
    pub x_hat_s: Matrix,
    pub x_hat_v: Matrix,
}

impl GenerationBundle {
    fn from_graph(g: &ModelGraph, fv: &ForwardVars) -> Self {
        let v = |var| g.value(var).clone();
        Self {
            z: v(fv.z),
            x_s: v(fv.x_s),
            x_v: v(fv.x_v),
            eta: v(fv.eta),
            x_hat: v(fv.x_hat),
            s_hat: v(fv.s_hat),
            v_hat: v(fv.v_hat),
            x_hat_s: v(fv.x_hat_s),
            x_hat_v: v(fv.x_hat_v),
        }
    }
}

fn frozen(params: &DcvaeParams) -> ModelGraph {
    ModelGraph::new(params, GroupSet::none())
}

pub fn encode(params: &DcvaeParams, x: &Matrix) -> Result<LatentDistribution> {
    let mut g = frozen(params);
    let x = g.input(x.clone());
    let lat = g.encode(x)?;
    Ok(LatentDistribution {
        mu: g.value(lat.mu).clone(),
        log_var: g.value(lat.log_var).clone(),
    })
}

pub fn decode(params: &DcvaeParams, which: Condition, condition: &Matrix, z: &Matrix) -> Result<Matrix> {
    let mut g = frozen(params);
    let (c, z) = (g.input(condition.clone()), g.input(z.clone()));
    let out = g.decode(which, c, z)?;
    Ok(g.value(out).clone())
}

/// Returns `(x̂, η)`.
pub fn mix(params: &DcvaeParams, s: &Matrix, x_s: &Matrix, x_v: &Matrix) -> Result<(Matrix, Matrix)> {
    let mut g = frozen(params);
    let (s, xs, xv) = (g.input(s.clone()), g.input(x_s.clone()), g.input(x_v.clone()));
    let (x_hat, eta) = g.mix(s, xs, xv)?;
    Ok((g.value(x_hat).clone(), g.value(eta).clone()))
}

/// Returns `(ŝ, v̂)`.
pub fn retrieve_conditions(params: &DcvaeParams, x_hat: &Matrix) -> Result<(Matrix, Matrix)> {
    let mut g = frozen(params);
    let x = g.input(x_hat.clone());
    let (s, v) = g.retrieve_conditions(x)?;
    Ok((g.value(s).clone(), g.value(v).clone()))
}

pub fn forward(
    params: &DcvaeParams,
    x: &Matrix,
    s: &Matrix,
    v: &Matrix,
    noise: &Matrix,
) -> Result<(LatentDistribution, GenerationBundle)> {
    let mut g = frozen(params);
    let vars = [x, s, v, noise].map(|m| g.input(m.clone()));
    let fv = g.forward(vars[0], vars[1], vars[2], vars[3])?;
    let latent = LatentDistribution {
        mu: g.value(fv.latent.mu).clone(),
        log_var: g.value(fv.latent.log_var).clone(),
    };
    Ok((latent, GenerationBundle::from_graph(&g, &fv)))
}

pub fn loss_bcvae(bundle: &GenerationBundle, latent: &LatentDistribution, x: &Matrix, hp: &HyperParams) -> Result<f64> {
    let mut t = crate::numerics::Tape::new();
    let vars = [x, &bundle.x_s, &bundle.x_v, &latent.mu, &latent.log_var].map(|m| t.constant(m.clone()));
    let l = loss::bcvae(&mut t, vars[0], vars[1], vars[2], vars[3], vars[4], hp.lambda_kl)?;
    t.value(l).item()
}

pub fn loss_ts(bundle: &GenerationBundle) -> Result<f64> {
    let mut t = crate::numerics::Tape::new();
    let (a, b) = (t.constant(bundle.x_s.clone()), t.constant(bundle.x_v.clone()));
    let l = loss::twin_similarity(&mut t, a, b)?;
    t.value(l).item()
}

pub fn loss_rc(bundle: &GenerationBundle, s: &Matrix, v: &Matrix, hp: &HyperParams) -> Result<f64> {
    let mut t = crate::numerics::Tape::new();
    let vars = [s, &bundle.s_hat, v, &bundle.v_hat].map(|m| t.constant(m.clone()));
    let l = loss::representation_consistency(&mut t, vars[0], vars[1], vars[2], vars[3], hp.epsilon_rc)?;
    t.value(l).item()
}

/// Needs the parameters because the retrieved-side coefficient is `σ(G(ŝ))`.
pub fn loss_gfc(params: &DcvaeParams, bundle: &GenerationBundle, hp: &HyperParams) -> Result<f64> {
    let mut g = frozen(params);
    let vars = [&bundle.x_hat_s, &bundle.x_v, &bundle.x_s, &bundle.x_hat_v, &bundle.eta, &bundle.s_hat]
        .map(|m| g.input(m.clone()));
    let eta_left = match hp.gfc_eta {
        GfcEta::Retrieved => g.mixing_coefficient(vars[5])?,
        GfcEta::Original => vars[4],
    };
    let l = loss::function_consistency(&mut g.tape, vars[0], vars[1], eta_left, vars[2], vars[3], vars[4])?;
    g.value(l).item()
}

pub fn loss_total(
    params: &DcvaeParams,
    x: &Matrix,
    s: &Matrix,
    v: &Matrix,
    noise: &Matrix,
    hp: &HyperParams,
) -> Result<(f64, LossBreakdown)> {
    let mut g = frozen(params);
    let vars = [x, s, v, noise].map(|m| g.input(m.clone()));
    let fv = g.forward(vars[0], vars[1], vars[2], vars[3])?;
    let lv = g.loss_total(&fv, vars[0], vars[1], vars[2], hp)?;
    let b = g.breakdown(&lv);
    Ok((b.total, b))
}
