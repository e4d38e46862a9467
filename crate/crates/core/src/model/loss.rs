//! The four objective terms, recorded on a tape.
//!
//! Every term is a batch mean of a per-row quantity, so the KL weight keeps
//! its meaning across batch sizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kl_standard_normal, Tape, Var};

/// Which terms enter the total objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub bcvae: bool,
    pub ts: bool,
    pub rc: bool,
    pub gfc: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self::all()
    }
}

impl LossTerms {
    pub fn all() -> Self {
        Self {
            bcvae: true,
            ts: true,
            rc: true,
            gfc: true,
        }
    }

    pub fn bcvae_only() -> Self {
        Self {
            bcvae: true,
            ts: false,
            rc: false,
            gfc: false,
        }
    }

    pub fn with_ts() -> Self {
        Self {
            ts: true,
            ..Self::bcvae_only()
        }
    }

    pub fn with_ts_rc() -> Self {
        Self {
            rc: true,
            ..Self::with_ts()
        }
    }

    /// The progressive ablation ladder: bcvae, +ts, +ts+rc, all.
    pub fn ablation_ladder() -> [LossTerms; 4] {
        [Self::bcvae_only(), Self::with_ts(), Self::with_ts_rc(), Self::all()]
    }

    pub fn any(&self) -> bool {
        self.bcvae || self.ts || self.rc || self.gfc
    }

    /// Parses a comma-separated list such as `bcvae,ts,rc`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut t = Self {
            bcvae: false,
            ts: false,
            rc: false,
            gfc: false,
        };
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "bcvae" => t.bcvae = true,
                "ts" => t.ts = true,
                "rc" => t.rc = true,
                "gfc" => t.gfc = true,
                "all" => t = Self::all(),
                other => return Err(Error::Config(format!("unknown loss term `{other}`"))),
            }
        }
        if !t.any() {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        Ok(t)
    }

    pub fn label(&self) -> String {
        let names = [(self.bcvae, "bcvae"), (self.ts, "ts"), (self.rc, "rc"), (self.gfc, "gfc")];
        names
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Per-term values of one objective evaluation. Disabled terms read 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub bcvae: f64,
    pub ts: f64,
    pub rc: f64,
    pub gfc: f64,
}

/// Batch mean of per-row squared Euclidean distance.
pub fn mean_row_sq_dist(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let batch = tape.shape(a).0.max(1) as f64;
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / batch))
}

/// Twin reconstruction of `x` by both decoders plus `λ·KL`.
pub fn bcvae(tape: &mut Tape, x: Var, x_s: Var, x_v: Var, mu: Var, log_var: Var, lambda: f64) -> Result<Var> {
    let rs = mean_row_sq_dist(tape, x_s, x)?;
    let rv = mean_row_sq_dist(tape, x_v, x)?;
    let kl = kl_standard_normal(tape, mu, log_var)?;
    let kl = tape.scale(kl, lambda);
    let r = tape.add(rs, rv)?;
    tape.add(r, kl)
}

/// Reconstruction by the visual decoder alone plus `λ·KL`; the objective of
/// samples whose semantics are missing.
pub fn visual_only(tape: &mut Tape, x: Var, x_v: Var, mu: Var, log_var: Var, lambda: f64) -> Result<Var> {
    let rv = mean_row_sq_dist(tape, x_v, x)?;
    let kl = kl_standard_normal(tape, mu, log_var)?;
    let kl = tape.scale(kl, lambda);
    tape.add(rv, kl)
}

/// Squared distance between the twin features.
pub fn twin_similarity(tape: &mut Tape, x_s: Var, x_v: Var) -> Result<Var> {
    mean_row_sq_dist(tape, x_s, x_v)
}

/// `‖v − v̂‖² / (cos(s, ŝ) + ε)` per row.
///
/// The cosine is floored at 0 so the denominator stays at least `ε`; the
/// unclamped ratio turns negative or unbounded once `cos < −ε`.
pub fn representation_consistency(tape: &mut Tape, s: Var, s_hat: Var, v: Var, v_hat: Var, epsilon: f64) -> Result<Var> {
    let batch = tape.shape(v).0.max(1) as f64;
    let d = tape.sub(v, v_hat)?;
    let sq = tape.square(d);
    let num = tape.row_sum(sq);
    let cos = tape.cosine_rows(s, s_hat)?;
    let cos = tape.clamp_min(cos, 0.0);
    let den = tape.offset(cos, epsilon);
    let ratio = tape.div(num, den)?;
    let s = tape.sum(ratio);
    Ok(tape.scale(s, 1.0 / batch))
}

/// `‖H(x̂_s, x_v; η̂) − H(x_s, x̂_v; η)‖²` per row.
#[allow(clippy::too_many_arguments)]
pub fn function_consistency(
    tape: &mut Tape,
    x_hat_s: Var,
    x_v: Var,
    eta_left: Var,
    x_s: Var,
    x_hat_v: Var,
    eta_right: Var,
) -> Result<Var> {
    let left = tape.mix(x_hat_s, x_v, eta_left)?;
    let right = tape.mix(x_s, x_hat_v, eta_right)?;
    mean_row_sq_dist(tape, left, right)
}
