//! Analytic vs. central-difference gradients for every loss term and
//! parameter group.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::graph::ModelGraph;
use crate::model::params::{DcvaeParams, Group, GroupSet, ModelDims};
use crate::model::{HyperParams, LossTerms};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossTerm {
    Bcvae,
    Ts,
    Rc,
    Gfc,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [LossTerm::Bcvae, LossTerm::Ts, LossTerm::Rc, LossTerm::Gfc, LossTerm::Total];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Bcvae => "bcvae",
            LossTerm::Ts => "ts",
            LossTerm::Rc => "rc",
            LossTerm::Gfc => "gfc",
            LossTerm::Total => "total",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub dims: ModelDims,
    pub batch: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, and the bound on numeric
    /// gradients of cells the term cannot reach.
    pub abs_floor: f64,
    pub hyper: HyperParams,
    /// Negative control: perturb the analytic gradient of one cell.
    pub corrupt: Option<(LossTerm, Group)>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: ModelDims::compact(16, 4, 8, 12),
            batch: 4,
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            hyper: HyperParams::default(),
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckCell {
    pub term: LossTerm,
    pub group: Group,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over the
    /// group's parameters; `None` when the group is not on any path to the
    /// term.
    pub rel_err: Option<f64>,
    /// Largest elementwise `|analytic − numeric|`.
    pub max_abs_err: f64,
    /// Largest finite-difference magnitude; must be ~0 for unreached cells.
    pub max_numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub cells: Vec<GradcheckCell>,
    pub tolerance: f64,
    pub params_checked: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cells.iter().all(|c| c.passed)
    }

    pub fn cell(&self, term: LossTerm, group: Group) -> Option<&GradcheckCell> {
        self.cells.iter().find(|c| c.term == term && c.group == group)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.cells
            .iter()
            .filter_map(|c| c.rel_err)
            .fold(0.0, f64::max)
    }
}

struct Inputs {
    x: Matrix,
    s: Matrix,
    v: Matrix,
    noise: Matrix,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::new(rows, cols, data).expect("shape")
}

fn term_values(params: &DcvaeParams, inp: &Inputs, hp: &HyperParams) -> Result<[f64; 5]> {
    let mut g = ModelGraph::new(params, GroupSet::none());
    let vars = [&inp.x, &inp.s, &inp.v, &inp.noise].map(|m| g.input(m.clone()));
    let fv = g.forward(vars[0], vars[1], vars[2], vars[3])?;
    let lv = g.loss_total(&fv, vars[0], vars[1], vars[2], hp)?;
    let b = g.breakdown(&lv);
    Ok([b.bcvae, b.ts, b.rc, b.gfc, b.total])
}

pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = DcvaeParams::init(cfg.dims, &mut rng)?;
    let d = cfg.dims;
    let inputs = Inputs {
        x: uniform(&mut rng, cfg.batch, d.feature_dim),
        s: uniform(&mut rng, cfg.batch, d.semantic_dim),
        v: uniform(&mut rng, cfg.batch, d.feature_dim),
        noise: uniform(&mut rng, cfg.batch, d.latent_dim),
    };
    let hp = HyperParams {
        loss_terms: LossTerms::all(),
        ..cfg.hyper.clone()
    };

    // analytic, one backward per term
    let mut g = ModelGraph::new(&params, GroupSet::all());
    let vars = [&inputs.x, &inputs.s, &inputs.v, &inputs.noise].map(|m| g.input(m.clone()));
    let fv = g.forward(vars[0], vars[1], vars[2], vars[3])?;
    let lv = g.loss_total(&fv, vars[0], vars[1], vars[2], &hp)?;
    let roots = [
        lv.bcvae.expect("enabled"),
        lv.ts.expect("enabled"),
        lv.rc.expect("enabled"),
        lv.gfc.expect("enabled"),
        lv.total,
    ];
    let mut analytic = Vec::with_capacity(5);
    for root in roots {
        analytic.push(g.group_gradients(root)?);
    }
    if let Some((term, group)) = cfg.corrupt {
        // 1% of the cell norm: well above tolerance, well below a real bug
        let cell = analytic[term.index()].group_mut(group);
        let norm = cell.iter().flat_map(|m| m.data()).map(|v| v * v).sum::<f64>().sqrt();
        let first = &mut cell[0];
        let v = first.data()[0];
        first.data_mut()[0] = v + 1e-2 * norm.max(1e-3);
    }

    // numeric, every parameter perturbed once for all terms
    let mut cells = Vec::new();
    let mut params_checked = 0;
    for group in Group::ALL {
        let mut diff_sq = [0.0f64; 5];
        let mut a_sq = [0.0f64; 5];
        let mut n_sq = [0.0f64; 5];
        let mut max_abs = [0.0f64; 5];
        let mut max_numeric = [0.0f64; 5];
        let n_tensors = params.group(group).len();
        for t in 0..n_tensors {
            let len = params.group(group)[t].len();
            for i in 0..len {
                let mut plus = params.clone();
                plus.group_mut(group)[t].data_mut()[i] += cfg.step;
                let mut minus = params.clone();
                minus.group_mut(group)[t].data_mut()[i] -= cfg.step;
                let fp = term_values(&plus, &inputs, &hp)?;
                let fm = term_values(&minus, &inputs, &hp)?;
                for term in LossTerm::ALL {
                    let k = term.index();
                    let numeric = (fp[k] - fm[k]) / (2.0 * cfg.step);
                    let a = analytic[k].group(group)[t].data()[i];
                    diff_sq[k] += (a - numeric) * (a - numeric);
                    a_sq[k] += a * a;
                    n_sq[k] += numeric * numeric;
                    max_abs[k] = max_abs[k].max((a - numeric).abs());
                    max_numeric[k] = max_numeric[k].max(numeric.abs());
                }
                params_checked += 1;
            }
        }
        for term in LossTerm::ALL {
            let k = term.index();
            let reached = analytic[k].reached(group);
            let cell = if reached {
                let rel = diff_sq[k].sqrt() / a_sq[k].sqrt().max(n_sq[k].sqrt()).max(cfg.abs_floor);
                GradcheckCell {
                    term,
                    group,
                    rel_err: Some(rel),
                    max_abs_err: max_abs[k],
                    max_numeric: max_numeric[k],
                    passed: rel < cfg.tolerance,
                }
            } else {
                GradcheckCell {
                    term,
                    group,
                    rel_err: None,
                    max_abs_err: max_abs[k],
                    max_numeric: max_numeric[k],
                    passed: max_numeric[k] < cfg.abs_floor,
                }
            };
            cells.push(cell);
        }
    }
    cells.sort_by_key(|c| (c.term.index(), c.group.index()));
    Ok(GradcheckReport {
        cells,
        tolerance: cfg.tolerance,
        params_checked,
    })
}
