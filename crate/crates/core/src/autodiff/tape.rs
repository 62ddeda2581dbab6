//! Operation tape and the differentiable primitives recorded on it.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::kernels::{self, gemm};
use super::{Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, trans_b: bool },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, c: f64 },
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax { x: Var, temperature: f64 },
    MaskedSoftmax { x: Var },
    Embedding { table: Var, ids: Vec<usize> },
    IndexRows { x: Var, rows: Vec<usize> },
    Reshape(Var),
    SwapAxes12 { x: Var, dims: [usize; 4] },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    SoftCrossEntropy { logits: Var, target: Vec<f64>, temperature: f64, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed primitives. Nodes are appended in execution
/// order, so every node's inputs precede it; backward walks the list in
/// exact reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an input tensor. Its gradient is tracked iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Clears every leaf gradient.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err("matmul", sa, sb));
        }
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n, false, trans_b);
        let needs = self.wants(a) || self.wants(b);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, m, k, n, trans_b }, needs))
    }

    /// Batched product over the leading axes: `[..., m, k] · [..., k, n]`
    /// (or `[..., n, k]` transposed when `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 3 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let r = sa.len();
        let batch: usize = sa[..r - 2].iter().product();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let out = kernels::batched_gemm(
            self.value(a).data(),
            self.value(b).data(),
            batch,
            m,
            k,
            n,
            false,
            trans_b,
        );
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let needs = self.wants(a) || self.wants(b);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::BatchMatMul { a, b, batch, m, k, n, trans_b }, needs))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let needs = self.wants(a) || self.wants(b);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let needs = self.wants(a) || self.wants(b);
        Ok(self.push(t, Op::Sub(a, b), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let needs = self.wants(a) || self.wants(b);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    /// Adds a `[d]` vector to every trailing-axis slice of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.last_dim();
        if tb.numel() != d || tb.shape().len() != 1 {
            return Err(shape_err("add_bias", tx.shape(), tb.shape()));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(d) {
            row.iter_mut().zip(tb.data()).for_each(|(o, b)| *o += b);
        }
        let t = Tensor::new(tx.shape(), out)?;
        let needs = self.wants(x) || self.wants(bias);
        Ok(self.push(t, Op::AddBias { x, bias }, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape(), tx.data().iter().map(|v| v * c).collect())?;
        let needs = self.wants(x);
        Ok(self.push(t, Op::Scale { x, c }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let needs = self.wants(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), needs))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.data().iter().sum::<f64>() / tx.numel() as f64;
        let needs = self.wants(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), needs))
    }

    /// Exact GELU, `x·Φ(x)` with `Φ` from the error function.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out = tx
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + erf(v * FRAC_1_SQRT_2)))
            .collect();
        let t = Tensor::new(tx.shape(), out)?;
        let needs = self.wants(x);
        Ok(self.push(t, Op::Gelu(x), needs))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape(), tx.data().iter().map(|v| v.tanh()).collect())?;
        let needs = self.wants(x);
        Ok(self.push(t, Op::Tanh(x), needs))
    }

    /// Normalizes each trailing-axis slice to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        for p in [gain, bias] {
            let tp = self.value(p);
            if tp.shape() != [d] {
                return Err(shape_err("layer_norm", tx.shape(), tp.shape()));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let needs = self.wants(x) || self.wants(gain) || self.wants(bias);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std }, needs))
    }

    /// `softmax(x / temperature)` over the trailing axis.
    pub fn scaled_softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(TensorError::InvalidParameter(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        let tx = self.value(x);
        if tx.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::NaN("scaled_softmax"));
        }
        let d = tx.last_dim();
        let mut out = vec![0.0; tx.numel()];
        for (src, dst) in tx.data().chunks(d).zip(out.chunks_mut(d)) {
            kernels::softmax_row(src, temperature, dst);
        }
        let t = Tensor::new(tx.shape(), out)?;
        let needs = self.wants(x);
        Ok(self.push(t, Op::Softmax { x, temperature }, needs))
    }

    /// Attention softmax over `[batch, heads, queries, keys]` scores where only
    /// the first `key_lens[b]` keys of batch element `b` are visible. Hidden
    /// keys get probability exactly zero.
    pub fn masked_softmax(&mut self, x: Var, key_lens: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 4 || s[0] != key_lens.len() {
            return Err(shape_err("masked_softmax", s, &[key_lens.len()]));
        }
        let keys = s[3];
        if key_lens.iter().any(|&l| l == 0 || l > keys) {
            return Err(TensorError::InvalidParameter(format!(
                "key lengths must lie in 1..={keys}, got {key_lens:?}"
            )));
        }
        let rows_per_batch = s[1] * s[2];
        let mut out = vec![0.0; tx.numel()];
        for (r, (src, dst)) in tx.data().chunks(keys).zip(out.chunks_mut(keys)).enumerate() {
            let len = key_lens[r / rows_per_batch];
            kernels::softmax_row(&src[..len], 1.0, &mut dst[..len]);
        }
        let t = Tensor::new(s, out)?;
        let needs = self.wants(x);
        Ok(self.push(t, Op::MaskedSoftmax { x }, needs))
    }

    /// Row lookup: `table[ids[i]]` for each id, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(shape_err("embedding", tt.shape(), &[ids.len()]));
        }
        let (rows, d) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index { index: bad, bound: rows });
        }
        if ids.is_empty() {
            return Err(TensorError::InvalidShape(vec![0, d]));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        let needs = self.wants(table);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, needs))
    }

    /// Gathers rows of a `[n, d]` matrix.
    pub fn index_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(shape_err("index_rows", tx.shape(), &[rows.len()]));
        }
        let (n, d) = (tx.shape()[0], tx.shape()[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= n) {
            return Err(TensorError::Index { index: bad, bound: n });
        }
        if rows.is_empty() {
            return Err(TensorError::InvalidShape(vec![0, d]));
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            out.extend_from_slice(&tx.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[rows.len(), d], out)?;
        let needs = self.wants(x);
        Ok(self.push(t, Op::IndexRows { x, rows: rows.to_vec() }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if shape.iter().product::<usize>() != tx.numel() {
            return Err(shape_err("reshape", tx.shape(), shape));
        }
        let t = Tensor::new(shape, tx.data().to_vec())?;
        let needs = self.wants(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Swaps axes 1 and 2 of a rank-4 tensor (`[b, s, h, d] ↔ [b, h, s, d]`).
    pub fn swap_axes_12(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 4 {
            return Err(shape_err("swap_axes_12", s, &[4]));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = swap12(tx.data(), dims);
        let t = Tensor::new(&[dims[0], dims[2], dims[1], dims[3]], out)?;
        let needs = self.wants(x);
        Ok(self.push(t, Op::SwapAxes12 { x, dims }, needs))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape().len() != 2 || tl.shape()[0] != targets.len() {
            return Err(shape_err("cross_entropy", tl.shape(), &[targets.len()]));
        }
        let v = tl.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::Index { index: bad, bound: v });
        }
        let mut probs = vec![0.0; tl.numel()];
        let mut logp = vec![0.0; v];
        let mut loss = 0.0;
        for (r, row) in tl.data().chunks(v).enumerate() {
            kernels::log_softmax_row(row, 1.0, &mut logp);
            loss -= logp[targets[r]];
            for (p, lp) in probs[r * v..(r + 1) * v].iter_mut().zip(&logp) {
                *p = lp.exp();
            }
        }
        loss /= targets.len() as f64;
        let needs = self.wants(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            needs,
        ))
    }

    /// Mean over rows of `−Σ_v target[v] · log softmax(logits / temperature)[v]`.
    /// `target` is a constant `[n, V]` matrix (typically a teacher's scaled
    /// distribution).
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &Tensor, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(TensorError::InvalidParameter(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        let tl = self.value(logits);
        if tl.shape().len() != 2 || tl.shape() != target.shape() {
            return Err(shape_err("soft_cross_entropy", tl.shape(), target.shape()));
        }
        let (n, v) = (tl.shape()[0], tl.shape()[1]);
        let mut probs = vec![0.0; tl.numel()];
        let mut logp = vec![0.0; v];
        let mut loss = 0.0;
        for r in 0..n {
            kernels::log_softmax_row(&tl.data()[r * v..(r + 1) * v], temperature, &mut logp);
            let q = &target.data()[r * v..(r + 1) * v];
            for j in 0..v {
                if q[j] != 0.0 {
                    loss -= q[j] * logp[j];
                }
                probs[r * v + j] = logp[j].exp();
            }
        }
        loss /= n as f64;
        let needs = self.wants(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy { logits, target: target.data().to_vec(), temperature, probs },
            needs,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients are added into the
    /// accumulators of trainable leaves; calling twice without
    /// [`Tape::zero_grad`] doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                if self.nodes[idx].value.requires_grad() {
                    self.nodes[idx].value.accumulate_grad(&g);
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match grads[v.0].as_mut() {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                None => grads[v.0] = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n, trans_b } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    // dA = dC · Bᵀ, with B stored [k×n] or [n×k]
                    send(a, gemm(g, bv, m, n, k, false, !trans_b));
                }
                if self.wants(b) {
                    if trans_b {
                        // B stored [n×k]: dB = dCᵀ · A
                        send(b, gemm(g, av, n, m, k, true, false));
                    } else {
                        send(b, gemm(av, g, k, m, n, true, false));
                    }
                }
            }
            &Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    send(a, kernels::batched_gemm(g, bv, batch, m, n, k, false, !trans_b));
                }
                if self.wants(b) {
                    if trans_b {
                        send(b, kernels::batched_gemm(g, av, batch, n, m, k, true, false));
                    } else {
                        send(b, kernels::batched_gemm(av, g, batch, k, m, n, true, false));
                    }
                }
            }
            &Op::Add(a, b) => {
                send(a, g.to_vec());
                send(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                send(a, g.to_vec());
                send(b, g.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    send(a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if self.wants(b) {
                    send(b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            &Op::AddBias { x, bias } => {
                send(x, g.to_vec());
                if self.wants(bias) {
                    let d = self.value(bias).numel();
                    let mut gb = vec![0.0; d];
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    send(bias, gb);
                }
            }
            &Op::Scale { x, c } => send(x, g.iter().map(|v| v * c).collect()),
            &Op::Sum(x) => send(x, vec![g[0]; self.value(x).numel()]),
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                send(x, vec![g[0] / n as f64; n]);
            }
            &Op::Gelu(x) => {
                let xv = self.value(x).data();
                let dx = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &g)| {
                        let cdf = 0.5 * (1.0 + erf(v * FRAC_1_SQRT_2));
                        let pdf = (-0.5 * v * v).exp() / (2.0 * PI).sqrt();
                        g * (cdf + v * pdf)
                    })
                    .collect();
                send(x, dx);
            }
            &Op::Tanh(x) => {
                let y = node.value.data();
                send(x, y.iter().zip(g).map(|(y, g)| g * (1.0 - y * y)).collect());
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    let mut gg = vec![0.0; d];
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                    send(*gain, gg);
                }
                if self.wants(*bias) {
                    let mut gb = vec![0.0; d];
                    for grow in g.chunks(d) {
                        gb.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                    }
                    send(*bias, gb);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, ((grow, hrow), drow)) in
                        g.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).enumerate()
                    {
                        let mut mean_dy = 0.0;
                        let mut mean_dy_h = 0.0;
                        for j in 0..d {
                            let dyh = grow[j] * gv[j];
                            mean_dy += dyh;
                            mean_dy_h += dyh * hrow[j];
                        }
                        mean_dy /= d as f64;
                        mean_dy_h /= d as f64;
                        for j in 0..d {
                            let dyh = grow[j] * gv[j];
                            drow[j] = inv_std[r] * (dyh - mean_dy - hrow[j] * mean_dy_h);
                        }
                    }
                    send(*x, dx);
                }
            }
            &Op::Softmax { x, temperature } => {
                let d = node.value.last_dim();
                let dx = softmax_backward(node.value.data(), g, d, 1.0 / temperature);
                send(x, dx);
            }
            &Op::MaskedSoftmax { x } => {
                let d = node.value.last_dim();
                // Hidden keys carry p = 0, so the generic rule already zeroes them.
                let dx = softmax_backward(node.value.data(), g, d, 1.0);
                send(x, dx);
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let d = tt.shape()[1];
                let mut gt = vec![0.0; tt.numel()];
                for (r, &i) in ids.iter().enumerate() {
                    let src = &g[r * d..(r + 1) * d];
                    gt[i * d..(i + 1) * d].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
                send(*table, gt);
            }
            Op::IndexRows { x, rows } => {
                let tx = self.value(*x);
                let d = tx.shape()[1];
                let mut gx = vec![0.0; tx.numel()];
                for (r, &i) in rows.iter().enumerate() {
                    let src = &g[r * d..(r + 1) * d];
                    gx[i * d..(i + 1) * d].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
                send(*x, gx);
            }
            &Op::Reshape(x) => send(x, g.to_vec()),
            &Op::SwapAxes12 { x, dims } => {
                send(x, swap12(g, [dims[0], dims[2], dims[1], dims[3]]));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.value(*logits).last_dim();
                let scale = g[0] / targets.len() as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * v + t] -= scale;
                }
                send(*logits, dx);
            }
            Op::SoftCrossEntropy { logits, target, temperature, probs } => {
                let v = self.value(*logits).last_dim();
                let n = probs.len() / v;
                let scale = g[0] / (n as f64 * temperature);
                let mut dx = vec![0.0; probs.len()];
                for r in 0..n {
                    let q = &target[r * v..(r + 1) * v];
                    let mass: f64 = q.iter().sum();
                    for j in 0..v {
                        dx[r * v + j] = scale * (probs[r * v + j] * mass - q[j]);
                    }
                }
                send(*logits, dx);
            }
        }
    }
}

fn softmax_backward(p: &[f64], g: &[f64], d: usize, factor: f64) -> Vec<f64> {
    let mut dx = vec![0.0; p.len()];
    for ((prow, grow), drow) in p.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
        let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
        for j in 0..d {
            drow[j] = factor * prow[j] * (grow[j] - dot);
        }
    }
    dx
}

fn swap12(src: &[f64], [a, b, c, d]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let from = ((i * b + j) * c + k) * d;
                let to = ((i * c + k) * b + j) * d;
                out[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
    }
    out
}
