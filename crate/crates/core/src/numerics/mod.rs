//! Dense matrices, a reverse-mode tape, and Adam.

mod adam;
mod matrix;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use matrix::Matrix;
pub use tape::{Gradients, Tape, Var};

use crate::error::Result;

/// Closed-form `KL(N(μ, σ²) ‖ N(0, I))`, summed over latent dimensions and
/// averaged over the batch. Records on the tape and returns a `1×1` node.
pub fn kl_standard_normal(tape: &mut Tape, mu: Var, log_var: Var) -> Result<Var> {
    let batch = tape.shape(mu).0.max(1) as f64;
    let mu2 = tape.square(mu);
    let var = tape.exp(log_var);
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, log_var)?;
    let c = tape.offset(b, -1.0);
    let s = tape.sum(c);
    Ok(tape.scale(s, 0.5 / batch))
}

/// `z = μ + exp(logσ²/2) ⊙ noise`, with `noise` supplied by the caller.
pub fn reparameterize(tape: &mut Tape, mu: Var, log_var: Var, noise: Var) -> Result<Var> {
    let half = tape.scale(log_var, 0.5);
    let std = tape.exp(half);
    let spread = tape.mul(std, noise)?;
    tape.add(mu, spread)
}

/// Value-level KL, for callers outside a tape.
pub fn kl_value(mu: &Matrix, log_var: &Matrix) -> Result<f64> {
    let mut tape = Tape::new();
    let (m, l) = (tape.constant(mu.clone()), tape.constant(log_var.clone()));
    let kl = kl_standard_normal(&mut tape, m, l)?;
    tape.value(kl).item()
}

/// Row-wise cosine similarity, `B×1`.
pub fn cosine_similarity(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.cosine_rows(x, y)?;
    Ok(tape.value(c).clone())
}
