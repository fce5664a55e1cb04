//! L-layer differentiable text encoder with split execution and a two-layer
//! classifier head.
//!
//! Layer 0 is the embedding output; layers 1..L are position-wise dense+tanh
//! blocks. The forward pass can stop at any layer and resume from it, which
//! is the hook the interpolation core plugs into.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{Tape, Tensor, Var};
use crate::text::Batch;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_classes: usize,
}

impl EncoderConfig {
    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.embed_dim == 0
            || self.hidden_dim == 0
            || self.num_layers == 0
            || self.num_classes < 2
        {
            return Err(Error::Config(format!("invalid encoder dimensions: {self:?}")));
        }
        Ok(())
    }
}

/// Encoder + classifier weights. Mutated only by the trainer between steps.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub embedding: Tensor,
    pub blocks: Vec<(Tensor, Tensor)>,
    pub cls1: (Tensor, Tensor),
    pub cls2: (Tensor, Tensor),
}

fn glorot(shape: [usize; 2], stream: &mut Stream) -> Tensor {
    let s = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    let data = (0..shape[0] * shape[1]).map(|_| stream.gen_range(-s..s)).collect();
    Tensor::new(shape.to_vec(), data).expect("glorot shape")
}

/// Glorot-uniform weights, zero biases, deterministic under the stream.
pub fn init_model(config: &EncoderConfig, stream: &mut Stream) -> Result<EncoderModel> {
    config.validate()?;
    let d = config.embed_dim;
    let embedding = glorot([config.vocab_size, d], stream);
    let blocks = (0..config.num_layers)
        .map(|_| (glorot([d, d], stream), Tensor::zeros(vec![d])))
        .collect();
    let cls1 = (glorot([d, config.hidden_dim], stream), Tensor::zeros(vec![config.hidden_dim]));
    let cls2 = (
        glorot([config.hidden_dim, config.num_classes], stream),
        Tensor::zeros(vec![config.num_classes]),
    );
    Ok(EncoderModel { config: config.clone(), embedding, blocks, cls1, cls2 })
}

impl EncoderModel {
    /// Parameters in a stable order: encoder group first, classifier second.
    pub fn params(&self) -> (Vec<&Tensor>, Vec<&Tensor>) {
        let mut enc = vec![&self.embedding];
        for (w, b) in &self.blocks {
            enc.push(w);
            enc.push(b);
        }
        let cls = vec![&self.cls1.0, &self.cls1.1, &self.cls2.0, &self.cls2.1];
        (enc, cls)
    }

    pub fn params_mut(&mut self) -> (Vec<&mut Tensor>, Vec<&mut Tensor>) {
        let mut enc = vec![&mut self.embedding];
        for (w, b) in &mut self.blocks {
            enc.push(w);
            enc.push(b);
        }
        let cls =
            vec![&mut self.cls1.0, &mut self.cls1.1, &mut self.cls2.0, &mut self.cls2.1];
        (enc, cls)
    }
}

/// Tape handles for one forward pass over a model's parameters.
pub struct ModelVars {
    pub embedding: Var,
    pub blocks: Vec<(Var, Var)>,
    pub cls1: (Var, Var),
    pub cls2: (Var, Var),
}

impl ModelVars {
    /// Leaf vars in the same order as [`EncoderModel::params`].
    pub fn param_vars(&self) -> (Vec<Var>, Vec<Var>) {
        let mut enc = vec![self.embedding];
        for &(w, b) in &self.blocks {
            enc.push(w);
            enc.push(b);
        }
        let cls = vec![self.cls1.0, self.cls1.1, self.cls2.0, self.cls2.1];
        (enc, cls)
    }
}

/// Registers the model's parameters on a tape.
pub fn bind(model: &EncoderModel, tape: &mut Tape, requires_grad: bool) -> ModelVars {
    ModelVars {
        embedding: tape.leaf(model.embedding.clone(), requires_grad),
        blocks: model
            .blocks
            .iter()
            .map(|(w, b)| (tape.leaf(w.clone(), requires_grad), tape.leaf(b.clone(), requires_grad)))
            .collect(),
        cls1: (
            tape.leaf(model.cls1.0.clone(), requires_grad),
            tape.leaf(model.cls1.1.clone(), requires_grad),
        ),
        cls2: (
            tape.leaf(model.cls2.0.clone(), requires_grad),
            tape.leaf(model.cls2.1.clone(), requires_grad),
        ),
    }
}

/// Activations at a named encoder layer.
pub struct HiddenState {
    pub layer: usize,
    pub values: Var,
    pub mask: Tensor,
    pub batch: usize,
    pub seq: usize,
}

/// i.i.d. N(0, sigma_r^2) noise per element, zeroed at PAD positions.
/// One sigma per example row.
pub fn embedding_noise(
    batch: usize,
    seq: usize,
    dim: usize,
    mask: &Tensor,
    sigmas: &[f64],
    stream: &mut Stream,
) -> Tensor {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = vec![0.0; batch * seq * dim];
    for r in 0..batch {
        let sigma = sigmas[r];
        for p in 0..seq {
            // draw for every position to keep the stream layout independent
            // of the mask, then zero PAD positions
            for c in 0..dim {
                let eps: f64 = normal.sample(stream);
                if sigma > 0.0 && mask.data()[r * seq + p] != 0.0 {
                    data[(r * seq + p) * dim + c] = sigma * eps;
                }
            }
        }
    }
    Tensor::new(vec![batch, seq, dim], data).expect("noise shape")
}

fn apply_block(
    tape: &mut Tape,
    h: Var,
    w: Var,
    b: Var,
    batch: usize,
    seq: usize,
    dim: usize,
) -> Result<Var> {
    let flat = tape.reshape(h, vec![batch * seq, dim])?;
    let lin = tape.matmul(flat, w)?;
    let lin = tape.add_bias(lin, b)?;
    let act = tape.tanh(lin);
    tape.reshape(act, vec![batch, seq, dim])
}

/// Runs embedding lookup, optional layer-0 noise, then blocks 1..=i.
pub fn forward_to_layer(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &EncoderConfig,
    batch: &Batch,
    layer: usize,
    noise: Option<(&[f64], &mut Stream)>,
) -> Result<HiddenState> {
    if layer > config.num_layers {
        return Err(Error::Contract(format!(
            "layer {layer} out of range for {}-layer encoder",
            config.num_layers
        )));
    }
    let (b, s) = (batch.ids.shape()[0], batch.ids.shape()[1]);
    let d = config.embed_dim;
    let mut h = tape.embedding_lookup(vars.embedding, &batch.ids)?;
    if let Some((sigmas, stream)) = noise {
        if sigmas.iter().any(|&x| x > 0.0) {
            let eps = embedding_noise(b, s, d, &batch.mask, sigmas, stream);
            h = tape.add_values(h, &eps)?;
        }
    }
    for &(w, bias) in vars.blocks.iter().take(layer) {
        h = apply_block(tape, h, w, bias, b, s, d)?;
    }
    Ok(HiddenState { layer, values: h, mask: batch.mask.clone(), batch: b, seq: s })
}

/// Applies blocks i+1..=L then masked mean pooling: -> [batch, d].
pub fn forward_from_layer(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &EncoderConfig,
    h: &HiddenState,
) -> Result<Var> {
    if h.layer > config.num_layers {
        return Err(Error::Contract(format!("hidden state at invalid layer {}", h.layer)));
    }
    let mut v = h.values;
    for &(w, bias) in vars.blocks.iter().skip(h.layer) {
        v = apply_block(tape, v, w, bias, h.batch, h.seq, config.embed_dim)?;
    }
    tape.masked_mean_pool(v, &h.mask)
}

/// Two-layer classifier head over pooled features: -> log-probs [batch, C].
pub fn classify(tape: &mut Tape, vars: &ModelVars, pooled: Var) -> Result<Var> {
    let l1 = tape.matmul(pooled, vars.cls1.0)?;
    let l1 = tape.add_bias(l1, vars.cls1.1)?;
    let a1 = tape.relu(l1);
    let l2 = tape.matmul(a1, vars.cls2.0)?;
    let l2 = tape.add_bias(l2, vars.cls2.1)?;
    tape.log_softmax(l2)
}

/// Full unsplit forward pass to log-probs.
pub fn forward_full(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &EncoderConfig,
    batch: &Batch,
    noise: Option<(&[f64], &mut Stream)>,
) -> Result<Var> {
    let h = forward_to_layer(tape, vars, config, batch, config.num_layers, noise)?;
    let pooled = tape.masked_mean_pool(h.values, &h.mask)?;
    classify(tape, vars, pooled)
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: EncoderConfig,
    vocab_hash: u64,
    embedding: Vec<f64>,
    blocks: Vec<(Vec<f64>, Vec<f64>)>,
    cls1: (Vec<f64>, Vec<f64>),
    cls2: (Vec<f64>, Vec<f64>),
}

/// Writes a model checkpoint as versioned JSON.
pub fn save_checkpoint(model: &EncoderModel, vocab_hash: u64, path: &std::path::Path) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        vocab_hash,
        embedding: model.embedding.data().to_vec(),
        blocks: model
            .blocks
            .iter()
            .map(|(w, b)| (w.data().to_vec(), b.data().to_vec()))
            .collect(),
        cls1: (model.cls1.0.data().to_vec(), model.cls1.1.data().to_vec()),
        cls2: (model.cls2.0.data().to_vec(), model.cls2.1.data().to_vec()),
    };
    let json = serde_json::to_string(&file)
        .map_err(|e| Error::Data(format!("checkpoint serialize: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Loads a checkpoint, returning the model and the stored vocabulary hash.
pub fn load_checkpoint(path: &std::path::Path) -> Result<(EncoderModel, u64)> {
    let json = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let file: CheckpointFile = serde_json::from_str(&json)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            file.version
        )));
    }
    let c = &file.config;
    c.validate()?;
    let d = c.embed_dim;
    let model = EncoderModel {
        config: c.clone(),
        embedding: Tensor::new(vec![c.vocab_size, d], file.embedding)?,
        blocks: file
            .blocks
            .into_iter()
            .map(|(w, b)| Ok((Tensor::new(vec![d, d], w)?, Tensor::new(vec![d], b)?)))
            .collect::<Result<Vec<_>>>()?,
        cls1: (
            Tensor::new(vec![d, c.hidden_dim], file.cls1.0)?,
            Tensor::new(vec![c.hidden_dim], file.cls1.1)?,
        ),
        cls2: (
            Tensor::new(vec![c.hidden_dim, c.num_classes], file.cls2.0)?,
            Tensor::new(vec![c.num_classes], file.cls2.1)?,
        ),
    };
    if model.blocks.len() != c.num_layers {
        return Err(Error::Data("checkpoint block count mismatch".to_string()));
    }
    Ok((model, file.vocab_hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::text::pad_batch;

    fn toy_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 7,
            embed_dim: 4,
            hidden_dim: 5,
            num_layers: 3,
            num_classes: 2,
        }
    }

    fn toy_batch() -> Batch {
        pad_batch(&[vec![2, 3, 4], vec![5, 6]], &[0, 1], &[0, 1], 3)
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = toy_config();
        let a = init_model(&cfg, &mut rng::derive(9, "init")).unwrap();
        let b = init_model(&cfg, &mut rng::derive(9, "init")).unwrap();
        assert_eq!(a.embedding.data(), b.embedding.data());
        assert_eq!(a.blocks[2].0.data(), b.blocks[2].0.data());
        assert!(a.blocks.iter().all(|(_, bias)| bias.data().iter().all(|&x| x == 0.0)));
        let s = (6.0 / (cfg.vocab_size + cfg.embed_dim) as f64).sqrt();
        assert!(a.embedding.data().iter().all(|&x| x.abs() <= s));
    }

    #[test]
    fn init_rejects_bad_dims() {
        let mut cfg = toy_config();
        cfg.num_classes = 1;
        assert!(init_model(&cfg, &mut rng::derive(0, "init")).is_err());
    }

    #[test]
    fn split_consistency_at_every_layer() {
        let cfg = toy_config();
        let model = init_model(&cfg, &mut rng::derive(1, "init")).unwrap();
        let batch = toy_batch();

        let mut tape = Tape::new();
        let vars = bind(&model, &mut tape, false);
        let full = forward_full(&mut tape, &vars, &cfg, &batch, None).unwrap();
        let full_vals = tape.value(full).data().to_vec();

        for i in 0..=cfg.num_layers {
            let mut tape = Tape::new();
            let vars = bind(&model, &mut tape, false);
            let h = forward_to_layer(&mut tape, &vars, &cfg, &batch, i, None).unwrap();
            let pooled = forward_from_layer(&mut tape, &vars, &cfg, &h).unwrap();
            let p = classify(&mut tape, &vars, pooled).unwrap();
            let split_vals = tape.value(p).data();
            for (a, b) in full_vals.iter().zip(split_vals) {
                assert!((a - b).abs() < 1e-12, "layer {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn layer_out_of_range_errors() {
        let cfg = toy_config();
        let model = init_model(&cfg, &mut rng::derive(1, "init")).unwrap();
        let mut tape = Tape::new();
        let vars = bind(&model, &mut tape, false);
        assert!(forward_to_layer(&mut tape, &vars, &cfg, &toy_batch(), 4, None).is_err());
    }

    #[test]
    fn layer_zero_is_raw_embedding() {
        let cfg = toy_config();
        let model = init_model(&cfg, &mut rng::derive(1, "init")).unwrap();
        let batch = toy_batch();
        let mut tape = Tape::new();
        let vars = bind(&model, &mut tape, false);
        let h = forward_to_layer(&mut tape, &vars, &cfg, &batch, 0, None).unwrap();
        let vals = tape.value(h.values).data();
        let d = cfg.embed_dim;
        // first example, first token is id 2
        assert_eq!(&vals[..d], &model.embedding.data()[2 * d..3 * d]);
    }

    #[test]
    fn zero_classifier_weights_give_uniform_distribution() {
        let cfg = toy_config();
        let mut model = init_model(&cfg, &mut rng::derive(1, "init")).unwrap();
        model.cls2.0 = Tensor::zeros(vec![cfg.hidden_dim, cfg.num_classes]);
        model.cls2.1 = Tensor::zeros(vec![cfg.num_classes]);
        let mut tape = Tape::new();
        let vars = bind(&model, &mut tape, false);
        let p = forward_full(&mut tape, &vars, &cfg, &toy_batch(), None).unwrap();
        let expected = (1.0f64 / cfg.num_classes as f64).ln();
        for &lp in tape.value(p).data() {
            assert!((lp - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn pad_positions_never_influence_pooled_output() {
        let cfg = toy_config();
        let model = init_model(&cfg, &mut rng::derive(1, "init")).unwrap();
        let batch = toy_batch();

        let run = |m: &EncoderModel| {
            let mut tape = Tape::new();
            let vars = bind(m, &mut tape, false);
            let p = forward_full(&mut tape, &vars, &cfg, &batch, None).unwrap();
            tape.value(p).data().to_vec()
        };
        let base = run(&model);
        let mut poked = model.clone();
        // PAD row of the embedding table
        for x in &mut poked.embedding.data_mut()[..cfg.embed_dim] {
            *x += 3.5;
        }
        assert_eq!(base, run(&poked));
    }

    #[test]
    fn noise_respects_mask_and_sigma_zero() {
        let batch = pad_batch(&[vec![2, 3], vec![4, 5, 6]], &[0, 1], &[0, 1], 3);
        let mask = batch.mask.clone();
        let eps = embedding_noise(2, 3, 4, &mask, &[0.5, 0.0], &mut rng::derive(2, "noise"));
        // second example: sigma 0 -> untouched everywhere
        for p in 0..3 {
            for c in 0..4 {
                assert_eq!(eps.data()[(3 + p) * 4 + c], 0.0);
            }
        }
        // first example: PAD at position 2 -> zero noise there
        for c in 0..4 {
            assert_eq!(eps.data()[2 * 4 + c], 0.0);
        }
        assert!(eps.data()[..8].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn noise_empirical_std() {
        let b = 10;
        let s = 100;
        let d = 100;
        let mask = Tensor::filled(vec![b, s], 1.0);
        let sigma = 0.3;
        let eps = embedding_noise(b, s, d, &mask, &vec![sigma; b], &mut rng::derive(3, "noise"));
        let n = eps.numel() as f64;
        let mean: f64 = eps.data().iter().sum::<f64>() / n;
        let var: f64 = eps.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!((std - sigma).abs() / sigma < 0.02, "std {std}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = toy_config();
        let model = init_model(&cfg, &mut rng::derive(5, "init")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&model, 42, &path).unwrap();
        let (loaded, hash) = load_checkpoint(&path).unwrap();
        assert_eq!(hash, 42);
        assert_eq!(loaded.embedding, model.embedding);
        assert_eq!(loaded.cls2.0, model.cls2.0);
        assert_eq!(loaded.config, cfg);
    }
}
