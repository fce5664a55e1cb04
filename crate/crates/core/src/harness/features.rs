//! Pooled last-layer feature extraction, a small from-scratch PCA, and the
//! CSV feature dump.

use std::io::Write;
use std::path::Path;

use crate::encoder::{bind, forward_from_layer, forward_to_layer, EncoderModel};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use crate::text::{batch_iter, Dataset, Vocabulary};

/// Pooled last-layer representation for every example, in dataset order.
/// Returns a `[num_examples, embed_dim]` matrix.
pub fn pooled_features(
    model: &EncoderModel,
    vocab: &Vocabulary,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<Tensor> {
    let enc_config = model.config.clone();
    let dim = enc_config.embed_dim;
    let mut rows = vec![vec![0.0; dim]; dataset.len()];
    // Epoch number is irrelevant here; any fixed shuffle works because rows
    // are written back by example position.
    for batch in batch_iter(dataset, vocab, batch_size, 0, 0) {
        let mut tape = Tape::new();
        let vars = bind(model, &mut tape, false);
        let h = forward_to_layer(&mut tape, &vars, &enc_config, &batch, 0, None)?;
        let pooled = forward_from_layer(&mut tape, &vars, &enc_config, &h)?;
        let values = tape.value(pooled);
        for (r, &member) in batch.members.iter().enumerate() {
            rows[member].copy_from_slice(&values.data()[r * dim..(r + 1) * dim]);
        }
    }
    Tensor::new(
        vec![dataset.len(), dim],
        rows.into_iter().flatten().collect(),
    )
}

fn center_columns(matrix: &Tensor) -> (Vec<f64>, usize, usize) {
    let (n, d) = (matrix.shape()[0], matrix.shape()[1]);
    let mut centered = matrix.data().to_vec();
    for j in 0..d {
        let mean: f64 = (0..n).map(|i| centered[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            centered[i * d + j] -= mean;
        }
    }
    (centered, n, d)
}

fn covariance_times(cov_input: &[f64], n: usize, d: usize, v: &[f64]) -> Vec<f64> {
    // (Xᵀ X / n) v computed as Xᵀ (X v) / n, avoiding the d×d matrix.
    let mut xv = vec![0.0; n];
    for i in 0..n {
        xv[i] = (0..d).map(|j| cov_input[i * d + j] * v[j]).sum();
    }
    let mut out = vec![0.0; d];
    for j in 0..d {
        out[j] = (0..n).map(|i| cov_input[i * d + j] * xv[i]).sum::<f64>() / n as f64;
    }
    out
}

fn power_iterate(centered: &[f64], n: usize, d: usize, seed_dim: usize) -> Vec<f64> {
    // A deterministic, non-degenerate start: basis vector e_{seed_dim} plus a
    // small ramp so it is never orthogonal to the leading component.
    let mut v: Vec<f64> = (0..d).map(|j| 1e-3 * (j + 1) as f64).collect();
    v[seed_dim % d] += 1.0;
    for _ in 0..500 {
        let next = covariance_times(centered, n, d, &v);
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return v; // zero-variance data: any unit vector works
        }
        let next: Vec<f64> = next.iter().map(|x| x / norm).collect();
        let diff: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = next;
        if diff < 1e-13 {
            break;
        }
    }
    v
}

/// Top-2 principal directions of the centered feature matrix via power
/// iteration with deflation. Returns `(centered, pc1, pc2)` where the
/// projections are `centered · pc`.
pub fn pca_top2(matrix: &Tensor) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if matrix.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "pca_top2: expected a matrix, got shape {:?}",
            matrix.shape()
        )));
    }
    let (mut centered, n, d) = center_columns(matrix);
    if n < 2 || d < 2 {
        return Err(Error::Contract(format!(
            "pca_top2: need at least a 2x2 matrix, got {n}x{d}"
        )));
    }
    let pc1 = power_iterate(&centered, n, d, 0);

    // Deflate: remove the pc1 component from every row, then repeat.
    let scores1: Vec<f64> = (0..n)
        .map(|i| (0..d).map(|j| centered[i * d + j] * pc1[j]).sum())
        .collect();
    for i in 0..n {
        for j in 0..d {
            centered[i * d + j] -= scores1[i] * pc1[j];
        }
    }
    let pc2 = power_iterate(&centered, n, d, 1);

    // Recompute the original centered data for the caller's projections.
    let (centered, _, _) = center_columns(matrix);
    Ok((centered, pc1, pc2))
}

/// Writes one CSV row per example: id, label, the pooled feature columns,
/// then the two principal-component projections.
pub fn dump_features(
    model: &EncoderModel,
    vocab: &Vocabulary,
    dataset: &Dataset,
    batch_size: usize,
    out_path: &Path,
) -> Result<()> {
    let features = pooled_features(model, vocab, dataset, batch_size)?;
    let d = features.shape()[1];
    let (centered, pc1, pc2) = pca_top2(&features)?;

    let mut file = std::fs::File::create(out_path)?;
    let mut header = String::from("id,label");
    for j in 0..d {
        header.push_str(&format!(",f{j}"));
    }
    header.push_str(",pc1,pc2");
    writeln!(file, "{header}")?;

    for (i, example) in dataset.examples.iter().enumerate() {
        let row = &features.data()[i * d..(i + 1) * d];
        let crow = &centered[i * d..(i + 1) * d];
        let p1: f64 = crow.iter().zip(&pc1).map(|(x, v)| x * v).sum();
        let p2: f64 = crow.iter().zip(&pc2).map(|(x, v)| x * v).sum();
        let cols: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
        writeln!(file, "{},{},{},{p1},{p2}", example.id, example.label, cols.join(","))?;
    }
    Ok(())
}
