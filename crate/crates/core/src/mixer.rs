//! Two-step hidden-space interpolation.
//!
//! Step I mixes the N perturbed hidden states under Dirichlet weights.
//! Step II mixes that synthetic state back into the original under a
//! Beta-drawn weight constrained to [0.5, 1], keeping the result closer to
//! the original than to the synthetic point.

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};
use serde::Serialize;

use crate::encoder::{
    classify, forward_from_layer, forward_to_layer, EncoderConfig, HiddenState, ModelVars,
};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{Tape, Var};
use crate::text::Batch;

/// Interpolation hyperparameters.
#[derive(Debug, Clone)]
pub struct MixConfig {
    /// Beta(alpha, alpha) parameter for the Step II weight.
    pub alpha: f64,
    /// Dirichlet(tau, ..., tau) parameter for the Step I weights.
    pub tau: f64,
    /// Candidate interpolation layers, each in [0, L].
    pub layer_set: Vec<usize>,
    /// Number of perturbed samples N.
    pub n_aug: usize,
    /// Sample one lambda per example instead of one per batch.
    pub per_example_lambda: bool,
}

impl MixConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.alpha <= 0.0 || self.tau <= 0.0 {
            return Err(Error::Config("alpha and tau must be positive".to_string()));
        }
        if self.layer_set.is_empty() {
            return Err(Error::Config("layer_set must be non-empty".to_string()));
        }
        if let Some(&bad) = self.layer_set.iter().find(|&&l| l > num_layers) {
            return Err(Error::Config(format!(
                "layer {bad} invalid for {num_layers}-layer encoder"
            )));
        }
        if self.n_aug < 1 {
            return Err(Error::Config("n_aug must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Realized per-batch mixing record, logged for debugging.
#[derive(Debug, Clone, Serialize)]
pub struct MixPlan {
    pub layer: usize,
    pub weights: Vec<f64>,
    pub lambda: Vec<f64>,
}

/// Uniform draw from the interpolation layer set.
pub fn select_layer(layer_set: &[usize], stream: &mut Stream) -> Result<usize> {
    if layer_set.is_empty() {
        return Err(Error::Contract("select_layer: empty layer set".to_string()));
    }
    Ok(layer_set[stream.gen_range(0..layer_set.len())])
}

/// Dirichlet(tau, ..., tau) via normalized Gamma(tau, 1) draws.
pub fn sample_dirichlet(n: usize, tau: f64, stream: &mut Stream) -> Result<Vec<f64>> {
    if n < 1 || tau <= 0.0 {
        return Err(Error::Contract(format!("sample_dirichlet: n={n}, tau={tau}")));
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let gamma = Gamma::new(tau, 1.0)
        .map_err(|e| Error::Numeric(format!("gamma({tau}): {e}")))?;
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(stream)).collect();
        let sum: f64 = draws.iter().sum();
        // At very small tau every draw can underflow to 0; resample.
        if sum > 0.0 && sum.is_finite() {
            return Ok(draws.into_iter().map(|g| g / sum).collect());
        }
    }
}

/// Beta(alpha, alpha) draw reflected to [0.5, 1]: lambda = max(l, 1 - l).
pub fn sample_beta_constrained(alpha: f64, stream: &mut Stream) -> Result<f64> {
    if alpha <= 0.0 {
        return Err(Error::Contract(format!("sample_beta_constrained: alpha={alpha}")));
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::Numeric(format!("beta({alpha}): {e}")))?;
    let l: f64 = beta.sample(stream);
    Ok(l.max(1.0 - l))
}

fn check_aligned(states: &[&HiddenState]) -> Result<()> {
    let first = states[0];
    for s in &states[1..] {
        if s.layer != first.layer {
            return Err(Error::Contract(format!(
                "mix: layer mismatch {} vs {}",
                s.layer, first.layer
            )));
        }
        if s.batch != first.batch || s.seq != first.seq {
            return Err(Error::Shape(format!(
                "mix: shape mismatch ({}, {}) vs ({}, {})",
                s.batch, s.seq, first.batch, first.seq
            )));
        }
    }
    Ok(())
}

/// Step I: convex combination of N same-layer hidden states.
pub fn mix_step1(
    tape: &mut Tape,
    states: &[&HiddenState],
    weights: &[f64],
    pooling_mask: &crate::tensor::Tensor,
) -> Result<HiddenState> {
    if states.is_empty() || states.len() != weights.len() {
        return Err(Error::Contract(format!(
            "mix_step1: {} states vs {} weights",
            states.len(),
            weights.len()
        )));
    }
    check_aligned(states)?;
    let mut acc = tape.scale(states[0].values, weights[0]);
    for (s, &w) in states[1..].iter().zip(&weights[1..]) {
        let term = tape.scale(s.values, w);
        acc = tape.add(acc, term)?;
    }
    Ok(HiddenState {
        layer: states[0].layer,
        values: acc,
        mask: pooling_mask.clone(),
        batch: states[0].batch,
        seq: states[0].seq,
    })
}

/// Step II: lambda * h_orig + (1 - lambda) * h_aug.
///
/// `lambda` holds one weight per example when per-example sampling is on,
/// or a single shared weight. Every weight must already be constrained to
/// [0.5, 1].
pub fn mix_step2(
    tape: &mut Tape,
    h_orig: &HiddenState,
    h_aug: &HiddenState,
    lambda: &[f64],
) -> Result<HiddenState> {
    check_aligned(&[h_orig, h_aug])?;
    if lambda.iter().any(|&l| !(0.5..=1.0).contains(&l)) {
        return Err(Error::Contract(format!(
            "mix_step2: lambda {lambda:?} outside [0.5, 1]; constrain upstream"
        )));
    }
    let values = if lambda.len() == 1 {
        let a = tape.scale(h_orig.values, lambda[0]);
        let b = tape.scale(h_aug.values, 1.0 - lambda[0]);
        tape.add(a, b)?
    } else {
        if lambda.len() != h_orig.batch {
            return Err(Error::Shape(format!(
                "mix_step2: {} lambdas for batch {}",
                lambda.len(),
                h_orig.batch
            )));
        }
        let inv: Vec<f64> = lambda.iter().map(|l| 1.0 - l).collect();
        let a = tape.scale_rows(h_orig.values, lambda)?;
        let b = tape.scale_rows(h_aug.values, &inv)?;
        tape.add(a, b)?
    };
    Ok(HiddenState {
        layer: h_orig.layer,
        values,
        mask: h_orig.mask.clone(),
        batch: h_orig.batch,
        seq: h_orig.seq,
    })
}

/// Random streams consumed by one mixing forward pass.
pub struct MixStreams<'a> {
    pub layer: &'a mut Stream,
    pub dirichlet: &'a mut Stream,
    pub beta: &'a mut Stream,
    pub noise: &'a mut Stream,
}

/// Per-example deferred embedding-noise sigmas for one perturbed batch
/// (0.0 where the perturbation was token-level).
pub type NoiseSigmas = Vec<f64>;

/// One full interpolation forward pass.
///
/// Returns `(p_mix, p_orig, plan)` as log-probability vars on the tape. The
/// original's forward to layer i is shared between the plain path (continued
/// to the classifier for `p_orig`) and the mixed path. Layer choice and
/// Dirichlet weights are drawn once per mini-batch; lambda is per batch or
/// per example depending on the config.
#[allow(clippy::too_many_arguments)]
pub fn doublemix_forward(
    tape: &mut Tape,
    vars: &ModelVars,
    enc_config: &EncoderConfig,
    batch: &Batch,
    perturbed: &[(Batch, NoiseSigmas)],
    config: &MixConfig,
    streams: &mut MixStreams<'_>,
) -> Result<(Var, Var, MixPlan)> {
    if perturbed.len() != config.n_aug {
        return Err(Error::Contract(format!(
            "doublemix_forward: {} perturbed batches for n_aug={}",
            perturbed.len(),
            config.n_aug
        )));
    }
    let layer = select_layer(&config.layer_set, streams.layer)?;
    let weights = sample_dirichlet(config.n_aug, config.tau, streams.dirichlet)?;
    let lambda: Vec<f64> = if config.per_example_lambda {
        (0..batch.labels.len())
            .map(|_| sample_beta_constrained(config.alpha, streams.beta))
            .collect::<Result<_>>()?
    } else {
        vec![sample_beta_constrained(config.alpha, streams.beta)?]
    };

    // Shared forward of the original to layer i.
    let h_orig = forward_to_layer(tape, vars, enc_config, batch, layer, None)?;
    let pooled_orig = forward_from_layer(tape, vars, enc_config, &h_orig)?;
    let p_orig = classify(tape, vars, pooled_orig)?;

    let mut h_perturbed = Vec::with_capacity(config.n_aug);
    for (pb, sigmas) in perturbed {
        let h =
            forward_to_layer(tape, vars, enc_config, pb, layer, Some((sigmas, streams.noise)))?;
        h_perturbed.push(h);
    }
    let refs: Vec<&HiddenState> = h_perturbed.iter().collect();
    // The mixed state is treated as a perturbation of the original, so the
    // original's mask drives pooling.
    let h_aug = mix_step1(tape, &refs, &weights, &batch.mask)?;
    let h_mix = mix_step2(tape, &h_orig, &h_aug, &lambda)?;
    let pooled_mix = forward_from_layer(tape, vars, enc_config, &h_mix)?;
    let p_mix = classify(tape, vars, pooled_mix)?;

    Ok((p_mix, p_orig, MixPlan { layer, weights, lambda }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn select_layer_singleton_and_frequency() {
        let mut s = rng::derive(0, "layer");
        for _ in 0..20 {
            assert_eq!(select_layer(&[3], &mut s).unwrap(), 3);
        }
        let set = [9usize, 10, 12];
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            let l = select_layer(&set, &mut s).unwrap();
            counts[set.iter().position(|&x| x == l).unwrap()] += 1;
        }
        for c in counts {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 1.0 / 3.0).abs() < 0.02, "freq {freq}");
        }
    }

    #[test]
    fn select_layer_deterministic() {
        let a: Vec<usize> = {
            let mut s = rng::derive(5, "layer");
            (0..10).map(|_| select_layer(&[1, 2, 3], &mut s).unwrap()).collect()
        };
        let b: Vec<usize> = {
            let mut s = rng::derive(5, "layer");
            (0..10).map(|_| select_layer(&[1, 2, 3], &mut s).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn dirichlet_simplex_and_moments() {
        let mut s = rng::derive(1, "dirichlet");
        assert_eq!(sample_dirichlet(1, 1.0, &mut s).unwrap(), vec![1.0]);

        let n = 4;
        let mut mean = vec![0.0; n];
        let draws = 10_000;
        for _ in 0..draws {
            let w = sample_dirichlet(n, 1.0, &mut s).unwrap();
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&x| x >= 0.0));
            for (m, x) in mean.iter_mut().zip(&w) {
                *m += x;
            }
        }
        for m in mean {
            let m = m / draws as f64;
            assert!((m - 1.0 / n as f64).abs() < 0.02, "per-coordinate mean {m}");
        }
    }

    #[test]
    fn dirichlet_small_tau_stays_on_simplex() {
        let mut s = rng::derive(2, "dirichlet");
        for _ in 0..2000 {
            let w = sample_dirichlet(3, 0.05, &mut s).unwrap();
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&x| x.is_finite() && x >= 0.0));
        }
    }

    #[test]
    fn beta_constrained_range() {
        let mut s = rng::derive(3, "beta");
        for _ in 0..10_000 {
            let l = sample_beta_constrained(0.75, &mut s).unwrap();
            assert!((0.5..=1.0).contains(&l), "lambda {l}");
        }
    }

    #[test]
    fn beta_reflection_rule() {
        // reflection is l.max(1 - l): spot-check both branches
        assert_eq!(0.3f64.max(1.0 - 0.3), 0.7);
        assert_eq!(0.5f64.max(1.0 - 0.5), 0.5);
    }

    fn state(tape: &mut Tape, layer: usize, data: Vec<f64>) -> HiddenState {
        let batch = 1;
        let seq = 2;
        let d = data.len() / 2;
        let v = tape.leaf(
            crate::tensor::Tensor::new(vec![batch, seq, d], data).unwrap(),
            false,
        );
        HiddenState {
            layer,
            values: v,
            mask: crate::tensor::Tensor::filled(vec![batch, seq], 1.0),
            batch,
            seq,
        }
    }

    #[test]
    fn step1_vertex_and_arithmetic() {
        let mut tape = Tape::new();
        let a = state(&mut tape, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let b = state(&mut tape, 1, vec![5.0, 6.0, 7.0, 8.0]);
        let mask = a.mask.clone();

        let vertex = mix_step1(&mut tape, &[&a, &b], &[1.0, 0.0], &mask).unwrap();
        assert_eq!(tape.value(vertex.values).data(), tape.value(a.values).data());

        let mixed = mix_step1(&mut tape, &[&a, &b], &[0.25, 0.75], &mask).unwrap();
        let expect: Vec<f64> = [1.0, 2.0, 3.0, 4.0]
            .iter()
            .zip([5.0, 6.0, 7.0, 8.0])
            .map(|(&x, y)| 0.25 * x + 0.75 * y)
            .collect();
        assert_eq!(tape.value(mixed.values).data(), &expect[..]);
    }

    #[test]
    fn step1_layer_mismatch_errors() {
        let mut tape = Tape::new();
        let a = state(&mut tape, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let b = state(&mut tape, 2, vec![5.0, 6.0, 7.0, 8.0]);
        let mask = a.mask.clone();
        assert!(mix_step1(&mut tape, &[&a, &b], &[0.5, 0.5], &mask).is_err());
    }

    #[test]
    fn step2_endpoints_and_contract() {
        let mut tape = Tape::new();
        let orig = state(&mut tape, 1, vec![0.0, 0.0, 0.0, 0.0]);
        let aug = state(&mut tape, 1, vec![2.0, 2.0, 2.0, 2.0]);

        let at_one = mix_step2(&mut tape, &orig, &aug, &[1.0]).unwrap();
        assert!(tape.value(at_one.values).data().iter().all(|&x| x == 0.0));

        let mid = mix_step2(&mut tape, &orig, &aug, &[0.5]).unwrap();
        assert!(tape.value(mid.values).data().iter().all(|&x| x == 1.0));

        assert!(mix_step2(&mut tape, &orig, &aug, &[0.3]).is_err());
    }

    #[test]
    fn step2_mixed_point_favors_original() {
        let mut s = rng::derive(6, "geom");
        for _ in 0..200 {
            let mut tape = Tape::new();
            let ho: Vec<f64> = (0..4).map(|_| s.gen_range(-1.0..1.0)).collect();
            let ha: Vec<f64> = (0..4).map(|_| s.gen_range(-1.0..1.0)).collect();
            let orig = state(&mut tape, 0, ho.clone());
            let aug = state(&mut tape, 0, ha.clone());
            let lambda = sample_beta_constrained(0.75, &mut s).unwrap();
            let mix = mix_step2(&mut tape, &orig, &aug, &[lambda]).unwrap();
            let m = tape.value(mix.values).data();
            let d_orig: f64 =
                m.iter().zip(&ho).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let d_aug: f64 =
                m.iter().zip(&ha).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            assert!(d_orig <= d_aug + 1e-12);
        }
    }

    #[test]
    fn per_example_lambda_scales_rows() {
        let mut tape = Tape::new();
        let batch = 2;
        let orig = {
            let v = tape.leaf(
                crate::tensor::Tensor::new(vec![batch, 1, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap(),
                false,
            );
            HiddenState {
                layer: 0,
                values: v,
                mask: crate::tensor::Tensor::filled(vec![batch, 1], 1.0),
                batch,
                seq: 1,
            }
        };
        let aug = {
            let v = tape.leaf(
                crate::tensor::Tensor::new(vec![batch, 1, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap(),
                false,
            );
            HiddenState {
                layer: 0,
                values: v,
                mask: crate::tensor::Tensor::filled(vec![batch, 1], 1.0),
                batch,
                seq: 1,
            }
        };
        let mix = mix_step2(&mut tape, &orig, &aug, &[1.0, 0.5]).unwrap();
        assert_eq!(tape.value(mix.values).data(), &[0.0, 0.0, 0.5, 0.5]);
    }
}
