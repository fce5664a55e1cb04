use super::{IntTensor, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Step {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Scale { a: Var, c: f64 },
    ScaleRows { a: Var, weights: Vec<f64> },
    AddValues { a: Var },
    Tanh { a: Var },
    Relu { a: Var },
    Exp { a: Var },
    LnClamped { a: Var, floor: f64 },
    LogSoftmax { a: Var },
    Reshape { a: Var },
    EmbeddingLookup { table: Var, ids: Vec<usize> },
    MaskedMeanPool { h: Var, mask: Vec<f64>, counts: Vec<f64> },
    PermuteRows { a: Var, perm: Vec<usize> },
    SumAll { a: Var },
    GatherNllMean { log_p: Var, labels: Vec<usize> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    step: Step,
}

/// Records primitive applications in topological order.
///
/// A tape is built fresh for every training step and dropped afterwards;
/// gradients accumulate across repeated [`Tape::backward`] calls until the
/// tape itself is discarded.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, step: Step) -> Var {
        self.nodes.push(Node { value, requires_grad, grad: None, step });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input tensor. Gradients are collected only for
    /// `requires_grad` leaves.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Step::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if `backward` has touched it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Clears accumulated gradients on every node.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let row = &db[p * n..(p + 1) * n];
                for j in 0..n {
                    out[i * n + j] += aip * row[j];
                }
            }
        }
        let value = Tensor::new(vec![m, n], out).expect("matmul shape");
        Ok(self.push(value, false, Step::Matmul { a, b }))
    }

    fn binary_shapes(&self, op: &str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa == sb {
            Ok(sa.to_vec())
        } else if self.value(b).is_scalar() {
            Ok(sa.to_vec())
        } else if self.value(a).is_scalar() {
            Ok(sb.to_vec())
        } else {
            Err(shape_err(op, sa, sb))
        }
    }

    /// Elementwise sum; equal shapes or scalar-vs-tensor broadcasting only.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("add", a, b)?;
        let da = self.value(a).data();
        let db = self.value(b).data();
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel)
            .map(|i| da[i % da.len()] + db[i % db.len()])
            .collect();
        let value = Tensor::new(shape, data).expect("add shape");
        Ok(self.push(value, false, Step::Add { a, b }))
    }

    /// Elementwise product; equal shapes or scalar-vs-tensor broadcasting only.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("mul", a, b)?;
        let da = self.value(a).data();
        let db = self.value(b).data();
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel)
            .map(|i| da[i % da.len()] * db[i % db.len()])
            .collect();
        let value = Tensor::new(shape, data).expect("mul shape");
        Ok(self.push(value, false, Step::Mul { a, b }))
    }

    /// Adds a bias vector to the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(bias).shape().to_vec();
        let n = *sa.last().ok_or_else(|| shape_err("add_bias", &sa, &sb))?;
        if sb != [n] {
            return Err(shape_err("add_bias", &sa, &sb));
        }
        let da = self.value(a).data();
        let db = self.value(bias).data();
        let data: Vec<f64> = da.iter().enumerate().map(|(i, x)| x + db[i % n]).collect();
        let value = Tensor::new(sa, data).expect("add_bias shape");
        Ok(self.push(value, false, Step::AddBias { a, bias }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())
            .expect("scale shape");
        self.push(value, false, Step::Scale { a, c })
    }

    /// Multiplies every row (leading axis) by a constant per-row weight.
    pub fn scale_rows(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let rows = *shape.first().ok_or_else(|| {
            Error::Shape("scale_rows: rank-0 input".to_string())
        })?;
        if rows != weights.len() {
            return Err(Error::Shape(format!(
                "scale_rows: {} rows vs {} weights",
                rows,
                weights.len()
            )));
        }
        let stride = t.numel() / rows.max(1);
        let data: Vec<f64> = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * weights[i / stride])
            .collect();
        let value = Tensor::new(shape, data).expect("scale_rows shape");
        Ok(self.push(value, false, Step::ScaleRows { a, weights: weights.to_vec() }))
    }

    /// Adds a constant tensor (no gradient to the constant).
    pub fn add_values(&mut self, a: Var, values: &Tensor) -> Result<Var> {
        let t = self.value(a);
        if t.shape() != values.shape() {
            return Err(shape_err("add_values", t.shape(), values.shape()));
        }
        let data: Vec<f64> = t.data().iter().zip(values.data()).map(|(x, c)| x + c).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("add_values shape");
        Ok(self.push(value, false, Step::AddValues { a }))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.tanh()).collect())
            .expect("tanh shape");
        self.push(value, false, Step::Tanh { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.max(0.0)).collect())
            .expect("relu shape");
        self.push(value, false, Step::Relu { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.exp()).collect())
            .expect("exp shape");
        self.push(value, false, Step::Exp { a })
    }

    /// Natural log with the argument clamped below at `floor`.
    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|x| x.max(floor).ln()).collect(),
        )
        .expect("ln shape");
        self.push(value, false, Step::LnClamped { a, floor })
    }

    /// Row-wise log-softmax over the last axis of a 2-D tensor,
    /// stabilized by max-subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if shape.len() != 2 || shape[1] < 2 {
            return Err(Error::Shape(format!(
                "log_softmax: need [batch, classes>=2], got {shape:?}"
            )));
        }
        if t.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("log_softmax: non-finite input".to_string()));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            for c in 0..cols {
                data[r * cols + c] = row[c] - lse;
            }
        }
        let value = Tensor::new(shape, data).expect("log_softmax shape");
        Ok(self.push(value, false, Step::LogSoftmax { a }))
    }

    /// View with a different shape; element count must match.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(shape_err("reshape", t.shape(), &shape));
        }
        let value = Tensor::new(shape, t.data().to_vec()).expect("reshape");
        Ok(self.push(value, false, Step::Reshape { a }))
    }

    /// Gathers rows of `table` ([V, d]) by token id; gradients scatter-add back.
    pub fn embedding_lookup(&mut self, table: Var, ids: &IntTensor) -> Result<Var> {
        let t = self.value(table);
        let ts = t.shape();
        if ts.len() != 2 {
            return Err(Error::Shape(format!("embedding table must be [V, d], got {ts:?}")));
        }
        let (vocab, dim) = (ts[0], ts[1]);
        for (pos, &id) in ids.data().iter().enumerate() {
            if id >= vocab {
                return Err(Error::Index(format!(
                    "token id {id} at position {pos} out of range for vocab size {vocab}"
                )));
            }
        }
        let mut shape = ids.shape().to_vec();
        shape.push(dim);
        let mut data = Vec::with_capacity(ids.data().len() * dim);
        for &id in ids.data() {
            data.extend_from_slice(&t.data()[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::new(shape, data).expect("lookup shape");
        Ok(self.push(value, false, Step::EmbeddingLookup { table, ids: ids.data().to_vec() }))
    }

    /// Mean over unmasked sequence positions: [b, s, d] x mask [b, s] -> [b, d].
    pub fn masked_mean_pool(&mut self, h: Var, mask: &Tensor) -> Result<Var> {
        let t = self.value(h);
        let shape = t.shape();
        if shape.len() != 3 || mask.shape() != &shape[..2] {
            return Err(shape_err("masked_mean_pool", shape, mask.shape()));
        }
        let (b, s, d) = (shape[0], shape[1], shape[2]);
        let mut counts = vec![0.0; b];
        for r in 0..b {
            counts[r] = mask.data()[r * s..(r + 1) * s].iter().sum();
            if counts[r] == 0.0 {
                return Err(Error::Contract(format!(
                    "masked_mean_pool: row {r} is fully masked"
                )));
            }
        }
        let mut data = vec![0.0; b * d];
        for r in 0..b {
            for p in 0..s {
                let m = mask.data()[r * s + p];
                if m == 0.0 {
                    continue;
                }
                for c in 0..d {
                    data[r * d + c] += m * t.data()[(r * s + p) * d + c];
                }
            }
            for c in 0..d {
                data[r * d + c] /= counts[r];
            }
        }
        let value = Tensor::new(vec![b, d], data).expect("pool shape");
        Ok(self.push(
            value,
            false,
            Step::MaskedMeanPool { h, mask: mask.data().to_vec(), counts },
        ))
    }

    /// Reorders rows (leading axis) by a permutation.
    pub fn permute_rows(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let rows = *shape.first().ok_or_else(|| {
            Error::Shape("permute_rows: rank-0 input".to_string())
        })?;
        if perm.len() != rows || perm.iter().any(|&p| p >= rows) {
            return Err(Error::Index(format!(
                "permute_rows: permutation {perm:?} invalid for {rows} rows"
            )));
        }
        let stride = t.numel() / rows.max(1);
        let mut data = vec![0.0; t.numel()];
        for (r, &src) in perm.iter().enumerate() {
            data[r * stride..(r + 1) * stride]
                .copy_from_slice(&t.data()[src * stride..(src + 1) * stride]);
        }
        let value = Tensor::new(shape, data).expect("permute shape");
        Ok(self.push(value, false, Step::PermuteRows { a, perm: perm.to_vec() }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), false, Step::SumAll { a })
    }

    /// Mean negative log-likelihood: -(1/b) * sum_i log_p[i, labels[i]].
    pub fn gather_nll_mean(&mut self, log_p: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(log_p);
        let shape = t.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Shape(format!(
                "gather_nll_mean: log_p {shape:?} vs {} labels",
                labels.len()
            )));
        }
        let cols = shape[1];
        for (i, &l) in labels.iter().enumerate() {
            if l >= cols {
                return Err(Error::Index(format!(
                    "label {l} at row {i} out of range for {cols} classes"
                )));
            }
        }
        let b = labels.len() as f64;
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -t.data()[i * cols + l])
            .sum();
        Ok(self.push(
            Tensor::scalar(total / b),
            false,
            Step::GatherNllMean { log_p, labels: labels.to_vec() },
        ))
    }

    /// Reverse pass from a scalar loss. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut d: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; self.nodes[i].value.numel()]).collect();
        d[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            if d[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut d[i]);
            match &self.nodes[i].step {
                Step::Leaf => {}
                Step::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let sa = self.nodes[a.0].value.shape().to_vec();
                    let sb = self.nodes[b.0].value.shape().to_vec();
                    let (m, k, nn) = (sa[0], sa[1], sb[1]);
                    let da = self.nodes[a.0].value.data();
                    let db = self.nodes[b.0].value.data();
                    // dA += G * B^T ; dB += A^T * G
                    for r in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for c in 0..nn {
                                acc += g[r * nn + c] * db[p * nn + c];
                            }
                            d[a.0][r * k + p] += acc;
                        }
                    }
                    for p in 0..k {
                        for c in 0..nn {
                            let mut acc = 0.0;
                            for r in 0..m {
                                acc += da[r * k + p] * g[r * nn + c];
                            }
                            d[b.0][p * nn + c] += acc;
                        }
                    }
                }
                Step::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    let la = d[a.0].len();
                    for (j, &gj) in g.iter().enumerate() {
                        d[a.0][j % la] += gj;
                    }
                    let lb = d[b.0].len();
                    for (j, &gj) in g.iter().enumerate() {
                        d[b.0][j % lb] += gj;
                    }
                }
                Step::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let va = self.nodes[a.0].value.data().to_vec();
                    let vb = self.nodes[b.0].value.data().to_vec();
                    let la = va.len();
                    let lb = vb.len();
                    for (j, &gj) in g.iter().enumerate() {
                        d[a.0][j % la] += gj * vb[j % lb];
                        d[b.0][j % lb] += gj * va[j % la];
                    }
                }
                Step::AddBias { a, bias } => {
                    let (a, bias) = (*a, *bias);
                    let n_bias = d[bias.0].len();
                    for (j, &gj) in g.iter().enumerate() {
                        d[a.0][j] += gj;
                        d[bias.0][j % n_bias] += gj;
                    }
                }
                Step::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    for (j, &gj) in g.iter().enumerate() {
                        d[a.0][j] += gj * c;
                    }
                }
                Step::ScaleRows { a, weights } => {
                    let a = *a;
                    let stride = g.len() / weights.len().max(1);
                    let weights = weights.clone();
                    for (j, &gj) in g.iter().enumerate() {
                        d[a.0][j] += gj * weights[j / stride];
                    }
                }
                Step::AddValues { a } | Step::Reshape { a } => {
                    let a = *a;
                    for (j, &gj) in g.iter().enumerate() {
                        d[a.0][j] += gj;
                    }
                }
                Step::Tanh { a } => {
                    let a = *a;
                    let y = self.nodes[i].value.data().to_vec();
                    for (j, &gj) in g.iter().enumerate() {
                        d[a.0][j] += gj * (1.0 - y[j] * y[j]);
                    }
                }
                Step::Relu { a } => {
                    let a = *a;
                    let x = self.nodes[a.0].value.data().to_vec();
                    for (j, &gj) in g.iter().enumerate() {
                        if x[j] > 0.0 {
                            d[a.0][j] += gj;
                        }
                    }
                }
                Step::Exp { a } => {
                    let a = *a;
                    let y = self.nodes[i].value.data().to_vec();
                    for (j, &gj) in g.iter().enumerate() {
                        d[a.0][j] += gj * y[j];
                    }
                }
                Step::LnClamped { a, floor } => {
                    let (a, floor) = (*a, *floor);
                    let x = self.nodes[a.0].value.data().to_vec();
                    for (j, &gj) in g.iter().enumerate() {
                        if x[j] > floor {
                            d[a.0][j] += gj / x[j];
                        }
                    }
                }
                Step::LogSoftmax { a } => {
                    let a = *a;
                    let y = self.nodes[i].value.data().to_vec();
                    let shape = self.nodes[i].value.shape().to_vec();
                    let (rows, cols) = (shape[0], shape[1]);
                    for r in 0..rows {
                        let gsum: f64 = g[r * cols..(r + 1) * cols].iter().sum();
                        for c in 0..cols {
                            let idx = r * cols + c;
                            d[a.0][idx] += g[idx] - y[idx].exp() * gsum;
                        }
                    }
                }
                Step::EmbeddingLookup { table, ids } => {
                    let table = *table;
                    let dim = self.nodes[table.0].value.shape()[1];
                    let ids = ids.clone();
                    for (pos, &id) in ids.iter().enumerate() {
                        for c in 0..dim {
                            d[table.0][id * dim + c] += g[pos * dim + c];
                        }
                    }
                }
                Step::MaskedMeanPool { h, mask, counts } => {
                    let h = *h;
                    let shape = self.nodes[h.0].value.shape().to_vec();
                    let (b, s, dim) = (shape[0], shape[1], shape[2]);
                    let mask = mask.clone();
                    let counts = counts.clone();
                    for r in 0..b {
                        for p in 0..s {
                            let m = mask[r * s + p];
                            if m == 0.0 {
                                continue;
                            }
                            for c in 0..dim {
                                d[h.0][(r * s + p) * dim + c] += g[r * dim + c] * m / counts[r];
                            }
                        }
                    }
                }
                Step::PermuteRows { a, perm } => {
                    let a = *a;
                    let perm = perm.clone();
                    let stride = g.len() / perm.len().max(1);
                    for (r, &src) in perm.iter().enumerate() {
                        for c in 0..stride {
                            d[a.0][src * stride + c] += g[r * stride + c];
                        }
                    }
                }
                Step::SumAll { a } => {
                    let a = *a;
                    let gj = g[0];
                    for slot in d[a.0].iter_mut() {
                        *slot += gj;
                    }
                }
                Step::GatherNllMean { log_p, labels } => {
                    let log_p = *log_p;
                    let cols = self.nodes[log_p.0].value.shape()[1];
                    let b = labels.len() as f64;
                    let labels = labels.clone();
                    let gj = g[0];
                    for (r, &l) in labels.iter().enumerate() {
                        d[log_p.0][r * cols + l] -= gj / b;
                    }
                }
            }
            // restore the buffer: leaves read their totals from `d` below
            d[i] = g;
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if node.requires_grad {
                let acc = node.grad.get_or_insert_with(|| vec![0.0; node.value.numel()]);
                for (slot, &gj) in acc.iter_mut().zip(&d[i]) {
                    *slot += gj;
                }
            }
        }
        Ok(())
    }
}
