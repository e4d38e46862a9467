use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::graph::{Condition, ModelGraph};
use crate::model::params::{DcvaeParams, GroupSet};
use crate::model::FeatureKind;
use crate::numerics::Matrix;

/// The conditions available for one class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassConditions {
    pub semantic: Option<Vec<f64>>,
    /// Class prototype.
    pub visual: Option<Vec<f64>>,
}

impl ClassConditions {
    pub fn supports(&self, kind: FeatureKind) -> bool {
        (!kind.needs_semantic() || self.semantic.is_some()) && (!kind.needs_visual() || self.visual.is_some())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    pub kind: FeatureKind,
    /// `n×D`, one synthetic feature per row.
    pub features: Matrix,
}

fn repeat_row(row: &[f64], n: usize) -> Matrix {
    let mut data = Vec::with_capacity(row.len() * n);
    for _ in 0..n {
        data.extend_from_slice(row);
    }
    Matrix::new(n, row.len(), data).expect("repeat shape")
}

/// Draws `n` features of every requested kind, each from fresh `z ~ N(0, I)`.
///
/// All kinds are checked against the available conditions before anything
/// is drawn.
pub fn generate<R: Rng + ?Sized>(
    params: &DcvaeParams,
    conditions: &ClassConditions,
    kinds: &[FeatureKind],
    n: usize,
    rng: &mut R,
) -> Result<Vec<SyntheticSet>> {
    let dims = *params.dims();
    if conditions.semantic.is_none() && conditions.visual.is_none() {
        return Err(Error::MissingModality("no condition given".into()));
    }
    for &kind in kinds {
        if kind.needs_semantic() && conditions.semantic.is_none() {
            return Err(Error::MissingModality(format!("{kind} requires a semantic condition")));
        }
        if kind.needs_visual() && conditions.visual.is_none() {
            return Err(Error::MissingModality(format!("{kind} requires a visual condition")));
        }
    }
    if let Some(s) = &conditions.semantic {
        if s.len() != dims.semantic_dim {
            return Err(Error::dim("generate (semantic)", (1, s.len()), (1, dims.semantic_dim)));
        }
    }
    if let Some(v) = &conditions.visual {
        if v.len() != dims.feature_dim {
            return Err(Error::dim("generate (visual)", (1, v.len()), (1, dims.feature_dim)));
        }
    }

    let mut out = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        if n == 0 {
            out.push(SyntheticSet {
                kind,
                features: Matrix::zeros(0, dims.feature_dim),
            });
            continue;
        }
        let noise: Vec<f64> = (0..n * dims.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut g = ModelGraph::new(params, GroupSet::none());
        let z = g.input(Matrix::new(n, dims.latent_dim, noise)?);
        let s = conditions.semantic.as_ref().map(|s| g.input(repeat_row(s, n)));
        let v = conditions.visual.as_ref().map(|v| g.input(repeat_row(v, n)));
        let features = match kind {
            FeatureKind::Semantic => g.decode(Condition::Semantic, s.expect("checked"), z)?,
            FeatureKind::Visual => g.decode(Condition::Visual, v.expect("checked"), z)?,
            FeatureKind::Mixed => {
                let s = s.expect("checked");
                let xs = g.decode(Condition::Semantic, s, z)?;
                let xv = g.decode(Condition::Visual, v.expect("checked"), z)?;
                g.mix(s, xs, xv)?.0
            }
        };
        out.push(SyntheticSet {
            kind,
            features: g.value(features).clone(),
        });
    }
    Ok(out)
}

pub fn generate_seeded(
    params: &DcvaeParams,
    conditions: &ClassConditions,
    kinds: &[FeatureKind],
    n: usize,
    seed: u64,
) -> Result<Vec<SyntheticSet>> {
    generate(params, conditions, kinds, n, &mut ChaCha8Rng::seed_from_u64(seed))
}
