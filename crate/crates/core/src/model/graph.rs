use crate::error::{Error, Result};
use crate::model::loss::{self, LossBreakdown};
use crate::model::params::{BoundParams, DcvaeParams, Group, GroupSet, ModelDims};
use crate::model::{GfcEta, HyperParams};
use crate::numerics::{reparameterize, Gradients, Matrix, Tape, Var};

/// Which condition a decoder consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    Semantic,
    Visual,
}

#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub mu: Var,
    pub log_var: Var,
}

/// Tape handles for every product of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub latent: LatentVars,
    pub z: Var,
    pub x_s: Var,
    pub x_v: Var,
    pub eta: Var,
    pub x_hat: Var,
    pub s_hat: Var,
    pub v_hat: Var,
    pub x_hat_s: Var,
    pub x_hat_v: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub bcvae: Option<Var>,
    pub ts: Option<Var>,
    pub rc: Option<Var>,
    pub gfc: Option<Var>,
}

/// A tape with the model parameters bound to it.
pub struct ModelGraph {
    pub tape: Tape,
    bound: BoundParams,
    dims: ModelDims,
}

impl ModelGraph {
    pub fn new(params: &DcvaeParams, trainable: GroupSet) -> Self {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, trainable);
        Self {
            tape,
            bound,
            dims: *params.dims(),
        }
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.tape.constant(m)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.tape.value(v)
    }

    fn check_width(&self, op: &'static str, v: Var, width: usize) -> Result<()> {
        let shape = self.tape.shape(v);
        if shape.1 != width {
            return Err(Error::dim(op, shape, (shape.0, width)));
        }
        Ok(())
    }

    fn check_batch(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.tape.shape(a), self.tape.shape(b));
        if sa.0 != sb.0 {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    /// Affine layers with ReLU between them (not after the last).
    fn mlp(&mut self, layers: &[Var], input: Var) -> Result<Var> {
        let mut h = input;
        let n = layers.len() / 2;
        for (i, wb) in layers.chunks(2).enumerate() {
            h = self.tape.affine(h, wb[0], wb[1])?;
            if i + 1 < n {
                h = self.tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn encode(&mut self, x: Var) -> Result<LatentVars> {
        self.check_width("encode", x, self.dims.feature_dim)?;
        let p = self.bound.group(Group::Encoder).to_vec();
        let h = self.mlp(&p[0..4], x)?;
        let h = self.tape.relu(h);
        let mu = self.tape.affine(h, p[4], p[5])?;
        let log_var = self.tape.affine(h, p[6], p[7])?;
        Ok(LatentVars { mu, log_var })
    }

    pub fn decode(&mut self, which: Condition, condition: Var, z: Var) -> Result<Var> {
        let (group, width) = match which {
            Condition::Semantic => (Group::SemanticDecoder, self.dims.semantic_dim),
            Condition::Visual => (Group::VisualDecoder, self.dims.feature_dim),
        };
        self.check_width("decode (condition)", condition, width)?;
        self.check_width("decode (latent)", z, self.dims.latent_dim)?;
        self.check_batch("decode", condition, z)?;
        let input = self.tape.concat_cols(condition, z)?;
        let p = self.bound.group(group).to_vec();
        self.mlp(&p, input)
    }

    /// `σ(G(s))`, one coefficient per row.
    pub fn mixing_coefficient(&mut self, s: Var) -> Result<Var> {
        self.check_width("mixer", s, self.dims.semantic_dim)?;
        let p = self.bound.group(Group::Mixer).to_vec();
        let g = self.mlp(&p, s)?;
        Ok(self.tape.sigmoid(g))
    }

    /// Returns `(x̂, η)` with `x̂ = η·x_s + (1−η)·x_v`.
    pub fn mix(&mut self, s: Var, x_s: Var, x_v: Var) -> Result<(Var, Var)> {
        self.check_batch("mix", s, x_s)?;
        let eta = self.mixing_coefficient(s)?;
        let x_hat = self.tape.mix(x_s, x_v, eta)?;
        Ok((x_hat, eta))
    }

    /// Returns `(ŝ, v̂) = (R_s(x̂), R_v(x̂))`.
    pub fn retrieve_conditions(&mut self, x_hat: Var) -> Result<(Var, Var)> {
        self.check_width("retrieve_conditions", x_hat, self.dims.feature_dim)?;
        let ps = self.bound.group(Group::SemanticRetriever).to_vec();
        let pv = self.bound.group(Group::VisualRetriever).to_vec();
        let s_hat = self.mlp(&ps, x_hat)?;
        let v_hat = self.mlp(&pv, x_hat)?;
        Ok((s_hat, v_hat))
    }

    /// Full pass. One latent draw `z` feeds all four decoder calls.
    pub fn forward(&mut self, x: Var, s: Var, v: Var, noise: Var) -> Result<ForwardVars> {
        self.check_batch("forward (x, s)", x, s)?;
        self.check_batch("forward (x, v)", x, v)?;
        self.check_batch("forward (x, noise)", x, noise)?;
        self.check_width("forward (v)", v, self.dims.feature_dim)?;
        self.check_width("forward (noise)", noise, self.dims.latent_dim)?;

        let latent = self.encode(x)?;
        let z = reparameterize(&mut self.tape, latent.mu, latent.log_var, noise)?;
        let x_s = self.decode(Condition::Semantic, s, z)?;
        let x_v = self.decode(Condition::Visual, v, z)?;
        let (x_hat, eta) = self.mix(s, x_s, x_v)?;
        let (s_hat, v_hat) = self.retrieve_conditions(x_hat)?;
        let x_hat_s = self.decode(Condition::Semantic, s_hat, z)?;
        let x_hat_v = self.decode(Condition::Visual, v_hat, z)?;
        Ok(ForwardVars {
            latent,
            z,
            x_s,
            x_v,
            eta,
            x_hat,
            s_hat,
            v_hat,
            x_hat_s,
            x_hat_v,
        })
    }

    pub fn loss_bcvae(&mut self, fv: &ForwardVars, x: Var, hp: &HyperParams) -> Result<Var> {
        loss::bcvae(&mut self.tape, x, fv.x_s, fv.x_v, fv.latent.mu, fv.latent.log_var, hp.lambda_kl)
    }

    pub fn loss_ts(&mut self, fv: &ForwardVars) -> Result<Var> {
        loss::twin_similarity(&mut self.tape, fv.x_s, fv.x_v)
    }

    pub fn loss_rc(&mut self, fv: &ForwardVars, s: Var, v: Var, hp: &HyperParams) -> Result<Var> {
        loss::representation_consistency(&mut self.tape, s, fv.s_hat, v, fv.v_hat, hp.epsilon_rc)
    }

    pub fn loss_gfc(&mut self, fv: &ForwardVars, hp: &HyperParams) -> Result<Var> {
        let eta_left = match hp.gfc_eta {
            GfcEta::Retrieved => self.mixing_coefficient(fv.s_hat)?,
            GfcEta::Original => fv.eta,
        };
        loss::function_consistency(&mut self.tape, fv.x_hat_s, fv.x_v, eta_left, fv.x_s, fv.x_hat_v, fv.eta)
    }

    /// Sum of the enabled terms in `hp.loss_terms`.
    pub fn loss_total(&mut self, fv: &ForwardVars, x: Var, s: Var, v: Var, hp: &HyperParams) -> Result<LossVars> {
        let terms = hp.loss_terms;
        if !terms.any() {
            return Err(Error::Config("no loss term enabled".into()));
        }
        let bcvae = terms.bcvae.then(|| self.loss_bcvae(fv, x, hp)).transpose()?;
        let ts = terms.ts.then(|| self.loss_ts(fv)).transpose()?;
        let rc = terms.rc.then(|| self.loss_rc(fv, s, v, hp)).transpose()?;
        let gfc = terms.gfc.then(|| self.loss_gfc(fv, hp)).transpose()?;

        let mut total: Option<Var> = None;
        for t in [bcvae, ts, rc, gfc].into_iter().flatten() {
            total = Some(match total {
                None => t,
                Some(acc) => self.tape.add(acc, t)?,
            });
        }
        Ok(LossVars {
            total: total.expect("at least one term"),
            bcvae,
            ts,
            rc,
            gfc,
        })
    }

    /// Objective for samples without semantics: encoder plus visual decoder.
    pub fn loss_visual_only(&mut self, x: Var, v: Var, noise: Var, hp: &HyperParams) -> Result<Var> {
        self.check_batch("visual-only (x, v)", x, v)?;
        self.check_batch("visual-only (x, noise)", x, noise)?;
        let latent = self.encode(x)?;
        let z = reparameterize(&mut self.tape, latent.mu, latent.log_var, noise)?;
        let x_v = self.decode(Condition::Visual, v, z)?;
        loss::visual_only(&mut self.tape, x, x_v, latent.mu, latent.log_var, hp.lambda_kl)
    }

    pub fn breakdown(&self, lv: &LossVars) -> LossBreakdown {
        let val = |v: Option<Var>| v.map_or(0.0, |v| self.tape.value(v).data()[0]);
        LossBreakdown {
            total: self.tape.value(lv.total).data()[0],
            bcvae: val(lv.bcvae),
            ts: val(lv.ts),
            rc: val(lv.rc),
            gfc: val(lv.gfc),
        }
    }

    /// Backward from `root`, gathered per group in parameter layout.
    pub fn group_gradients(&self, root: Var) -> Result<GroupGradients> {
        let mut grads = self.tape.backward(root)?;
        Ok(GroupGradients::collect(&self.bound, &mut grads))
    }
}

/// Gradients laid out like [`DcvaeParams`]; unreached tensors are zero.
#[derive(Clone, Debug)]
pub struct GroupGradients {
    groups: [Vec<Matrix>; 6],
    reached: [bool; 6],
}

impl GroupGradients {
    fn collect(bound: &BoundParams, grads: &mut Gradients) -> Self {
        let reached = Group::ALL.map(|g| bound.group(g).iter().any(|v| grads.reached(*v)));
        let groups = Group::ALL.map(|g| bound.group(g).iter().map(|v| grads.take(*v)).collect());
        Self { groups, reached }
    }

    pub fn group(&self, g: Group) -> &[Matrix] {
        &self.groups[g.index()]
    }

    pub fn group_mut(&mut self, g: Group) -> &mut [Matrix] {
        &mut self.groups[g.index()]
    }

    /// Whether any tensor of `g` lies on a path to the root.
    pub fn reached(&self, g: Group) -> bool {
        self.reached[g.index()]
    }

    pub fn max_abs(&self, g: Group) -> f64 {
        self.group(g)
            .iter()
            .flat_map(|m| m.data().iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}
