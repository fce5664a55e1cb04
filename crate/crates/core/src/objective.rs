//! Training losses: cross-entropy on the original prediction plus a
//! Jensen-Shannon divergence consistency term between the original and
//! mixed predictions.
//!
//! All divergences use natural log, so JSD ranges over [0, ln 2]; the gamma
//! weight absorbs the base constant. Logs of probabilities are clamped at
//! 1e-12 so saturated softmax outputs never produce -inf.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

pub const LOG_CLAMP_FLOOR: f64 = 1e-12;

/// Loss components for one batch. `total = ce + gamma * jsd`.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub ce: f64,
    pub jsd: f64,
    pub gamma: f64,
    pub total: f64,
}

/// Mean over the batch of -log p[label], from log-probabilities.
pub fn cross_entropy(tape: &mut Tape, log_p: Var, labels: &[usize]) -> Result<Var> {
    tape.gather_nll_mean(log_p, labels)
}

/// KL(p || q) from two log-probability tensors, averaged over the batch.
/// Terms where p vanishes contribute zero; log q is clamped at ln(1e-12).
pub fn kl_divergence(tape: &mut Tape, log_p: Var, log_q: Var) -> Result<Var> {
    let shape = tape.value(log_p).shape().to_vec();
    if shape != tape.value(log_q).shape() {
        return Err(Error::Shape(format!(
            "kl_divergence: {:?} vs {:?}",
            shape,
            tape.value(log_q).shape()
        )));
    }
    // both logs pass through the same clamp so KL(p, p) is exactly zero
    let p = tape.exp(log_p);
    let q = tape.exp(log_q);
    let lq = tape.ln_clamped(q, LOG_CLAMP_FLOOR);
    kl_from_probs(tape, p, lq)
}

/// Jensen-Shannon divergence between two log-probability tensors, averaged
/// over the batch. The mixture is formed in probability space and re-logged.
/// Symmetric by construction; range [0, ln 2].
pub fn jsd(tape: &mut Tape, log_p: Var, log_q: Var) -> Result<Var> {
    let shape = tape.value(log_p).shape().to_vec();
    if shape != tape.value(log_q).shape() {
        return Err(Error::Shape(format!(
            "jsd: {:?} vs {:?}",
            shape,
            tape.value(log_q).shape()
        )));
    }
    let p = tape.exp(log_p);
    let q = tape.exp(log_q);
    let sum = tape.add(p, q)?;
    let mean = tape.scale(sum, 0.5);
    let log_mean = tape.ln_clamped(mean, LOG_CLAMP_FLOOR);
    let kl_p = kl_from_probs(tape, p, log_mean)?;
    let kl_q = kl_from_probs(tape, q, log_mean)?;
    let total = tape.add(kl_p, kl_q)?;
    Ok(tape.scale(total, 0.5))
}

/// Batch-mean KL(p || q) from probabilities and a log-denominator.
fn kl_from_probs(tape: &mut Tape, p: Var, log_q: Var) -> Result<Var> {
    let batch = tape.value(p).shape()[0] as f64;
    // log p recomputed through the clamp so p = 0 terms vanish exactly
    let lp = tape.ln_clamped(p, LOG_CLAMP_FLOOR);
    let neg_lq = tape.scale(log_q, -1.0);
    let diff = tape.add(lp, neg_lq)?;
    let terms = tape.mul(p, diff)?;
    let total = tape.sum_all(terms);
    Ok(tape.scale(total, 1.0 / batch))
}

/// Combined objective: CE(p_orig, labels) + gamma * JSD(p_mix, p_orig).
///
/// The gold label is consumed only by the cross-entropy term on the original
/// prediction; no loss term pairs the label with the mixed prediction.
pub fn combined_loss(
    tape: &mut Tape,
    p_orig: Var,
    p_mix: Var,
    labels: &[usize],
    gamma: f64,
) -> Result<(Var, LossBreakdown)> {
    if gamma < 0.0 {
        return Err(Error::Contract(format!("combined_loss: gamma {gamma} < 0")));
    }
    let ce = cross_entropy(tape, p_orig, labels)?;
    let jsd_term = jsd(tape, p_mix, p_orig)?;
    let weighted = tape.scale(jsd_term, gamma);
    let total = tape.add(ce, weighted)?;
    let breakdown = LossBreakdown {
        ce: tape.value(ce).item(),
        jsd: tape.value(jsd_term).item(),
        gamma,
        total: tape.value(total).item(),
    };
    Ok((total, breakdown))
}
