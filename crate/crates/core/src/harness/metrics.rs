//! Accuracy and macro-F1 evaluation, plus multi-seed reporting.

use serde::Serialize;

use crate::encoder::{bind, forward_full, EncoderModel};
use crate::error::Result;
use crate::rng;
use crate::tensor::Tape;
use crate::text::{pad_batch, Batch, Dataset, Vocabulary};

/// Scores for one evaluation pass.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// One seed's training outcome.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub seed: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub epochs_ran: usize,
    /// Dev accuracy after each epoch.
    pub per_epoch: Vec<f64>,
    /// Mean cross-entropy term over all training steps.
    pub mean_train_ce: f64,
    /// Mean divergence term over all training steps; reported even when its
    /// weight in the total loss is zero.
    pub mean_train_jsd: f64,
    /// Same-class Step II partners that fell back to the example itself.
    #[serde(skip_serializing_if = "is_zero")]
    pub same_class_fallbacks: usize,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

/// Mean and (population) standard deviation across seeds.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub runs: Vec<RunRecord>,
    pub mean: Metrics,
    pub std: Metrics,
}

impl MetricsReport {
    pub fn from_runs(runs: Vec<RunRecord>) -> Self {
        let n = runs.len() as f64;
        let mean_acc = runs.iter().map(|r| r.accuracy).sum::<f64>() / n;
        let mean_f1 = runs.iter().map(|r| r.macro_f1).sum::<f64>() / n;
        let var = |f: &dyn Fn(&RunRecord) -> f64, m: f64| {
            runs.iter().map(|r| (f(r) - m) * (f(r) - m)).sum::<f64>() / n
        };
        let std_acc = var(&|r| r.accuracy, mean_acc).sqrt();
        let std_f1 = var(&|r| r.macro_f1, mean_f1).sqrt();
        Self {
            runs,
            mean: Metrics { accuracy: mean_acc, macro_f1: mean_f1 },
            std: Metrics { accuracy: std_acc, macro_f1: std_f1 },
        }
    }
}

/// Batches in dataset order (no shuffling) for evaluation.
pub(crate) fn eval_batches(
    dataset: &Dataset,
    vocab: &Vocabulary,
    batch_size: usize,
) -> Vec<Batch> {
    let indices: Vec<usize> = (0..dataset.len()).collect();
    indices
        .chunks(batch_size)
        .map(|chunk| {
            let rows: Vec<Vec<usize>> = chunk
                .iter()
                .map(|&i| vocab.encode(&dataset.examples[i].tokens))
                .collect();
            let labels: Vec<usize> =
                chunk.iter().map(|&i| dataset.examples[i].label).collect();
            let seq = rows.iter().map(Vec::len).max().unwrap_or(0);
            pad_batch(&rows, &labels, chunk, seq)
        })
        .collect()
}

/// Argmax per row, ties broken by the lowest class index.
pub(crate) fn argmax_rows(log_p: &crate::tensor::Tensor) -> Vec<usize> {
    let cols = log_p.shape()[1];
    log_p
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (c, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Unweighted mean of per-class F1. A class absent from both gold and
/// predictions contributes an F1 of 0.
pub fn macro_f1(gold: &[usize], predicted: &[usize], num_classes: usize) -> f64 {
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fne = vec![0usize; num_classes];
    for (&g, &p) in gold.iter().zip(predicted) {
        if g == p {
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fne[g] += 1;
        }
    }
    let mut total = 0.0;
    for c in 0..num_classes {
        let denom = 2 * tp[c] + fp[c] + fne[c];
        if denom > 0 {
            total += 2.0 * tp[c] as f64 / denom as f64;
        }
    }
    total / num_classes as f64
}

fn evaluate_inner(
    model: &EncoderModel,
    vocab: &Vocabulary,
    dataset: &Dataset,
    batch_size: usize,
    noise: Option<(f64, u64)>,
) -> Result<Metrics> {
    let mut gold = Vec::with_capacity(dataset.len());
    let mut predicted = Vec::with_capacity(dataset.len());
    let mut noise_stream = noise.map(|(_, seed)| rng::derive(seed, "eval_noise"));
    for batch in eval_batches(dataset, vocab, batch_size) {
        let mut tape = Tape::new();
        let vars = bind(model, &mut tape, false);
        let sigmas = noise.map(|(sigma, _)| vec![sigma; batch.labels.len()]);
        let noise_arg = match (&sigmas, &mut noise_stream) {
            (Some(s), Some(stream)) => Some((s.as_slice(), &mut *stream)),
            _ => None,
        };
        let p = forward_full(&mut tape, &vars, &model.config, &batch, noise_arg)?;
        predicted.extend(argmax_rows(tape.value(p)));
        gold.extend(batch.labels.iter().copied());
    }
    let correct = gold.iter().zip(&predicted).filter(|(g, p)| g == p).count();
    Ok(Metrics {
        accuracy: correct as f64 / gold.len().max(1) as f64,
        macro_f1: macro_f1(&gold, &predicted, dataset.num_classes()),
    })
}

/// Clean evaluation: accuracy and macro-F1 over the dataset.
pub fn evaluate(
    model: &EncoderModel,
    vocab: &Vocabulary,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<Metrics> {
    evaluate_inner(model, vocab, dataset, batch_size, None)
}

/// Robustness evaluation with Gaussian test-time noise injected at the
/// embedding layer (PAD positions untouched).
pub fn evaluate_noisy(
    model: &EncoderModel,
    vocab: &Vocabulary,
    dataset: &Dataset,
    batch_size: usize,
    sigma: f64,
    seed: u64,
) -> Result<Metrics> {
    evaluate_inner(model, vocab, dataset, batch_size, Some((sigma, seed)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn macro_f1_perfect() {
        assert_eq!(macro_f1(&[0, 1, 0, 1], &[0, 1, 0, 1], 2), 1.0);
    }

    #[test]
    fn macro_f1_all_predicted_class_zero() {
        // balanced binary set, everything predicted 0:
        // class 0: precision 0.5, recall 1 -> F1 = 2/3; class 1: F1 = 0
        let gold = [0, 0, 1, 1];
        let pred = [0, 0, 0, 0];
        let f1 = macro_f1(&gold, &pred, 2);
        assert!((f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_empty_gold_class_counts_zero() {
        // 3 classes but class 2 never appears anywhere
        let gold = [0, 1, 0];
        let pred = [0, 1, 1];
        let f1 = macro_f1(&gold, &pred, 3);
        // class 0: tp=1 fp=0 fn=1 -> 2/3; class 1: tp=1 fp=1 fn=0 -> 2/3; class 2: 0
        assert!((f1 - (2.0 / 3.0 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let t = Tensor::new(vec![2, 3], vec![0.5, 0.5, 0.1, 0.1, 0.9, 0.9]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }
}
