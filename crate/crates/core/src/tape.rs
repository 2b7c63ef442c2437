//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward rule needs. Nodes are only ever appended, so the tape is in
//! topological order by construction and `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm behaviour: batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Smallest divisor used by [`Tape::l2_normalize_rows`].
pub const NORM_FLOOR: f64 = 1e-12;

/// Fill value used by [`Tape::mask_fill`]; `exp` of it underflows to exactly zero.
pub const MASK_VALUE: f32 = -1.0e9;

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased (n - 1) variance, used for the running-statistics update.
    pub var_unbiased: Vec<f32>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddRowVector(Var, Var),
    Relu(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Conv2d { input: Var, weight: Var, geom: ConvGeom, cols: Vec<f32> },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32>, train: bool },
    MaxPool2 { input: Var, argmax: Vec<u32> },
    GlobalAvgPool(Var),
    Sum(Var),
    Mean(Var),
    L2NormalizeRows { input: Var, inv_norms: Vec<f32>, clamped: Vec<bool> },
    LogSoftmaxRows(Var),
    SoftmaxRows(Var),
    MaskFill { input: Var, indices: Vec<usize> },
    Gather { input: Var, indices: Vec<usize> },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn col_len(&self) -> usize {
        self.col_rows() * self.col_cols()
    }
}

/// Recorded computation. Create one per forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// A tape that never saves backward state; `backward` on it yields no gradients.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let requires_grad = self.grad_enabled;
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, inputs: &[Var]) -> bool {
        self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.tracks(&[x]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.tracks(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.binary(a, b, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.binary(a, b, value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.binary(a, b, value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let value = self.value(x).scale(factor);
        self.unary(x, value, Op::Scale(x, factor))
    }

    /// `x[N, K] + b[K]`, broadcasting `b` over rows.
    pub fn add_row_vector(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if xs.len() != 2 || bs != [xs[1]] {
            return Err(Error::Shape(format!("add_row_vector: {xs:?} + {bs:?}")));
        }
        let cols = xs[1];
        let bias = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(cols) {
            for (v, bb) in row.iter_mut().zip(&bias) {
                *v += bb;
            }
        }
        Ok(self.binary(x, b, value, Op::AddRowVector(x, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.unary(x, value, Op::Relu(x))
    }

    /// `a[M, K] · b[K, N]`, or `a · bᵀ` with `b[N, K]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape(format!("matmul needs 2-D operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {sa:?} x {sb:?}{}",
                if trans_b { "^T" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            if trans_b { Layout::Transposed } else { Layout::Normal },
            &mut out,
            0.0,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.binary(a, b, value, Op::MatMul { a, b, trans_b }))
    }

    /// Cross-correlation without bias: `input[N, C, H, W]` with `weight[K, C, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 4 || sw.len() != 4 {
            return Err(Error::Shape(format!("conv2d needs 4-D input and weight, got {si:?}, {sw:?}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (k, cw, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if c != cw {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input {si:?} has {c} channels, weight {sw:?} expects {cw}"
            )));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let save = self.tracks(&[input, weight]);
        let col_len = geom.col_len();
        let out_per = k * geom.col_cols();
        let mut out = vec![0.0; n * out_per];
        let mut cols = if save { vec![0.0; n * col_len] } else { Vec::new() };
        let mut scratch = if save { Vec::new() } else { vec![0.0; col_len] };
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let in_per = c * h * w;
        for s in 0..n {
            let col = if save { &mut cols[s * col_len..(s + 1) * col_len] } else { &mut scratch[..] };
            im2col(&x[s * in_per..(s + 1) * in_per], &geom, col);
            gemm(
                k,
                geom.col_rows(),
                geom.col_cols(),
                wt,
                Layout::Normal,
                col,
                Layout::Normal,
                &mut out[s * out_per..(s + 1) * out_per],
                0.0,
            );
        }
        let value = Tensor::new(vec![n, k, geom.ho, geom.wo], out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, geom, cols }, save))
    }

    /// Batch normalization over `[N, C, H, W]` (or `[N, C]`).
    ///
    /// Eval mode computes `(x - running_mean) / sqrt(running_var + eps) * gamma + beta`.
    /// Train mode normalizes with biased batch variance and returns the batch
    /// statistics so the caller can update its running estimates.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("batch norm eps must be positive, got {eps}")));
        }
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("batch_norm input {shape:?} has no channel axis")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        for (what, len) in [
            ("gamma", self.value(gamma).numel()),
            ("beta", self.value(beta).numel()),
            ("running_mean", running_mean.len()),
            ("running_var", running_var.len()),
        ] {
            if len != c {
                return Err(Error::Shape(format!("batch_norm {what} has {len} entries for {c} channels")));
            }
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let count = n * inner;
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        let mut stats = None;
        match mode {
            Mode::Eval => {
                for ch in 0..c {
                    let denom = (running_var[ch] + eps).sqrt();
                    inv_std[ch] = 1.0 / denom;
                    for s in 0..n {
                        let base = (s * c + ch) * inner;
                        for i in base..base + inner {
                            let centered = x[i] - running_mean[ch];
                            xhat[i] = centered / denom;
                            out[i] = centered / denom * g[ch] + b[ch];
                        }
                    }
                }
            }
            Mode::Train => {
                let mut means = vec![0.0; c];
                let mut unbiased = vec![0.0; c];
                for ch in 0..c {
                    let mut sum = 0.0f64;
                    for s in 0..n {
                        let base = (s * c + ch) * inner;
                        sum += x[base..base + inner].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mean = sum / count as f64;
                    let mut sq = 0.0f64;
                    for s in 0..n {
                        let base = (s * c + ch) * inner;
                        sq += x[base..base + inner].iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
                    }
                    let var = sq / count as f64;
                    let istd = 1.0 / (var + eps as f64).sqrt();
                    means[ch] = mean as f32;
                    unbiased[ch] = if count > 1 { (sq / (count - 1) as f64) as f32 } else { 0.0 };
                    inv_std[ch] = istd as f32;
                    for s in 0..n {
                        let base = (s * c + ch) * inner;
                        for i in base..base + inner {
                            let xh = ((x[i] as f64 - mean) * istd) as f32;
                            xhat[i] = xh;
                            out[i] = xh * g[ch] + b[ch];
                        }
                    }
                }
                stats = Some(BatchStats { mean: means, var_unbiased: unbiased });
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.tracks(&[input, gamma, beta]);
        if !rg {
            xhat = Vec::new();
        }
        let op = Op::BatchNorm { input, gamma, beta, xhat, inv_std, train: mode == Mode::Train };
        Ok((self.push(value, op, rg), stats))
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || shape[2] < 2 || shape[3] < 2 {
            return Err(Error::Shape(format!("max_pool2 needs [N, C, H>=2, W>=2], got {shape:?}")));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        for plane in 0..n * c {
            let ib = plane * h * w;
            let ob = plane * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = ib + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ib + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out[ob + oy * wo + ox] = src[best];
                    argmax[ob + oy * wo + ox] = best as u32;
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.unary(x, value, Op::MaxPool2 { input: x, argmax }))
    }

    /// Mean over spatial axes: `[N, C, H, W]` to `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool needs 4-D input, got {shape:?}")));
        }
        let inner = shape[2] * shape[3];
        let data: Vec<f32> = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / inner as f64) as f32)
            .collect();
        let value = Tensor::new(vec![shape[0], shape[1]], data)?;
        Ok(self.unary(x, value, Op::GlobalAvgPool(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.unary(x, value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel() as f32);
        self.unary(x, value, Op::Mean(x))
    }

    /// Scale every row of a 2-D tensor to unit Euclidean norm.
    ///
    /// The divisor is clamped at [`NORM_FLOOR`], so an all-zero row (e.g. a
    /// projection whose hidden units are all inactive) maps to zero instead of failing.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("l2_normalize_rows needs 2-D input, got {shape:?}")));
        }
        let cols = shape[1];
        let mut out = self.value(x).data().to_vec();
        let mut inv_norms = Vec::with_capacity(shape[0]);
        let mut clamped = Vec::with_capacity(shape[0]);
        for (r, row) in out.chunks_mut(cols).enumerate() {
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::InvalidArgument(format!("cannot normalize row {r} with norm {norm}")));
            }
            let denom = norm.max(NORM_FLOOR);
            for v in row.iter_mut() {
                *v = (*v as f64 / denom) as f32;
            }
            inv_norms.push((1.0 / denom) as f32);
            clamped.push(norm < NORM_FLOOR);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.unary(x, value, Op::L2NormalizeRows { input: x, inv_norms, clamped }))
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = row_softmax(self.value(x), true)?;
        Ok(self.unary(x, value, Op::LogSoftmaxRows(x)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = row_softmax(self.value(x), false)?;
        Ok(self.unary(x, value, Op::SoftmaxRows(x)))
    }

    /// Overwrite the given flat positions with [`MASK_VALUE`]; they receive no gradient.
    pub fn mask_fill(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let mut value = self.value(x).clone();
        let n = value.numel();
        for &i in indices {
            if i >= n {
                return Err(Error::Shape(format!("mask index {i} out of range for {n} elements")));
            }
            value.data_mut()[i] = MASK_VALUE;
        }
        Ok(self.unary(x, value, Op::MaskFill { input: x, indices: indices.to_vec() }))
    }

    /// Pick the given flat positions into a 1-D tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("gather with no indices".into()));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            data.push(
                *src.get(i).ok_or_else(|| Error::Shape(format!("gather index {i} out of range for {}", src.len())))?,
            );
        }
        let value = Tensor::new(vec![indices.len()], data)?;
        Ok(self.unary(x, value, Op::Gather { input: x, indices: indices.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.unary(x, value, Op::Reshape(x)))
    }

    /// Gradients of the scalar `loss` with respect to every node that requires one.
    /// Linear piece selected by every ReLU element (active or not) and every
    /// max-pool window (winning index). Two forwards with equal patterns lie on
    /// the same smooth piece of the graph.
    pub fn branch_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => out.extend(self.value(*x).data().iter().map(|&v| u32::from(v > 0.0))),
                Op::MaxPool2 { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, shapes: self.shapes() });
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes: self.shapes() })
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        self.nodes.iter().map(|n| n.value.shape().to_vec()).collect()
    }

    fn accumulate<'g>(&self, grads: &'g mut [Option<Vec<f32>>], v: Var) -> Option<&'g mut [f32]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.accumulate(grads, v) {
                        add_into(d, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.accumulate(grads, *a) {
                    add_into(d, g);
                }
                if let Some(d) = self.accumulate(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                if let Some(d) = self.accumulate(grads, *a) {
                    d.iter_mut().zip(g.iter().zip(&bv)).for_each(|(x, (gg, bb))| *x += gg * bb);
                }
                if let Some(d) = self.accumulate(grads, *b) {
                    d.iter_mut().zip(g.iter().zip(&av)).for_each(|(x, (gg, aa))| *x += gg * aa);
                }
            }
            Op::Scale(x, f) => {
                if let Some(d) = self.accumulate(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(a, b)| *a += f * b);
                }
            }
            Op::AddRowVector(x, b) => {
                if let Some(d) = self.accumulate(grads, *x) {
                    add_into(d, g);
                }
                let cols = self.value(*b).numel();
                if let Some(d) = self.accumulate(grads, *b) {
                    for row in g.chunks(cols) {
                        add_into(d, row);
                    }
                }
            }
            Op::Relu(x) => {
                let out = node.value.data();
                if let Some(d) = self.accumulate(grads, *x) {
                    for ((dv, &gv), &o) in d.iter_mut().zip(g).zip(out) {
                        if o > 0.0 {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = node.value.shape()[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // dA[m,k] = dC[m,n] · B^T  (B^T is [n,k]; with trans_b B itself is [n,k])
                if let Some(d) = self.accumulate(grads, *a) {
                    let bl = if *trans_b { Layout::Normal } else { Layout::Transposed };
                    gemm(m, n, k, g, Layout::Normal, bv, bl, d, 1.0);
                }
                if let Some(d) = self.accumulate(grads, *b) {
                    if *trans_b {
                        // dB[n,k] = dC^T · A
                        gemm(n, m, k, g, Layout::Transposed, av, Layout::Normal, d, 1.0);
                    } else {
                        // dB[k,n] = A^T · dC
                        gemm(k, m, n, av, Layout::Transposed, g, Layout::Normal, d, 1.0);
                    }
                }
            }
            Op::Conv2d { input, weight, geom, cols } => {
                let col_len = geom.col_len();
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let out_per = geom.k * ncols;
                if let Some(d) = self.accumulate(grads, *weight) {
                    for s in 0..geom.n {
                        // dW[K, CKK] += dY[K, P] · cols[CKK, P]^T
                        gemm(
                            geom.k,
                            ncols,
                            rows,
                            &g[s * out_per..(s + 1) * out_per],
                            Layout::Normal,
                            &cols[s * col_len..(s + 1) * col_len],
                            Layout::Transposed,
                            d,
                            1.0,
                        );
                    }
                }
                let wt = self.value(*weight).data();
                let in_per = geom.c * geom.h * geom.w;
                if let Some(d) = self.accumulate(grads, *input) {
                    let mut dcol = vec![0.0; col_len];
                    for s in 0..geom.n {
                        // dcols[CKK, P] = W^T · dY
                        gemm(
                            rows,
                            geom.k,
                            ncols,
                            wt,
                            Layout::Transposed,
                            &g[s * out_per..(s + 1) * out_per],
                            Layout::Normal,
                            &mut dcol,
                            0.0,
                        );
                        col2im(&dcol, geom, &mut d[s * in_per..(s + 1) * in_per]);
                    }
                }
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                let shape = node.value.shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for ch in 0..c {
                    for s in 0..n {
                        let base = (s * c + ch) * inner;
                        for i in base..base + inner {
                            dgamma[ch] += (g[i] * xhat[i]) as f64;
                            dbeta[ch] += g[i] as f64;
                        }
                    }
                }
                if let Some(d) = self.accumulate(grads, *input) {
                    let m = (n * inner) as f64;
                    for ch in 0..c {
                        let scale = gam[ch] * inv_std[ch];
                        for s in 0..n {
                            let base = (s * c + ch) * inner;
                            for i in base..base + inner {
                                d[i] += if *train {
                                    let t = m * g[i] as f64 - dbeta[ch] - xhat[i] as f64 * dgamma[ch];
                                    (scale as f64 * t / m) as f32
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                }
                if let Some(d) = self.accumulate(grads, *gamma) {
                    d.iter_mut().zip(&dgamma).for_each(|(x, y)| *x += *y as f32);
                }
                if let Some(d) = self.accumulate(grads, *beta) {
                    d.iter_mut().zip(&dbeta).for_each(|(x, y)| *x += *y as f32);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if let Some(d) = self.accumulate(grads, *input) {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        d[src as usize] += gv;
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let inner = s[2] * s[3];
                if let Some(d) = self.accumulate(grads, *x) {
                    for (plane, &gv) in d.chunks_mut(inner).zip(g) {
                        let share = gv / inner as f32;
                        plane.iter_mut().for_each(|v| *v += share);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.accumulate(grads, *x) {
                    d.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(d) = self.accumulate(grads, *x) {
                    let share = g[0] / d.len() as f32;
                    d.iter_mut().for_each(|v| *v += share);
                }
            }
            Op::L2NormalizeRows { input, inv_norms, clamped } => {
                let y = node.value.data();
                let cols = node.value.shape()[1];
                if let Some(d) = self.accumulate(grads, *input) {
                    for (r, &inv) in inv_norms.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let yr = &y[span.clone()];
                        let gr = &g[span.clone()];
                        // A clamped row was divided by a constant.
                        let dot: f32 = if clamped[r] { 0.0 } else { yr.iter().zip(gr).map(|(a, b)| a * b).sum() };
                        for ((dv, &yv), &gv) in d[span].iter_mut().zip(yr).zip(gr) {
                            *dv += (gv - yv * dot) * inv;
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                let y = node.value.data();
                let cols = node.value.shape()[1];
                if let Some(d) = self.accumulate(grads, *x) {
                    for ((drow, yrow), grow) in d.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let gsum: f32 = grow.iter().sum();
                        for ((dv, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                            *dv += gv - yv.exp() * gsum;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let cols = node.value.shape()[1];
                if let Some(d) = self.accumulate(grads, *x) {
                    for ((drow, yrow), grow) in d.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let dot: f32 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for ((dv, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                            *dv += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::MaskFill { input, indices } => {
                if let Some(d) = self.accumulate(grads, *input) {
                    let mut masked = g.to_vec();
                    for &i in indices {
                        masked[i] = 0.0;
                    }
                    add_into(d, &masked);
                }
            }
            Op::Gather { input, indices } => {
                if let Some(d) = self.accumulate(grads, *input) {
                    for (&i, &gv) in indices.iter().zip(g) {
                        d[i] += gv;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.accumulate(grads, *x) {
                    add_into(d, g);
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, if any gradient reached it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, or zeros for nodes disconnected from the loss.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn row_softmax(t: &Tensor, log: bool) -> Result<Tensor> {
    if t.ndim() != 2 {
        return Err(Error::Shape(format!("softmax needs 2-D input, got {:?}", t.shape())));
    }
    let cols = t.shape()[1];
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let lse = row.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln() as f32;
        for v in row.iter_mut() {
            let ls = *v - max - lse;
            *v = if log { ls } else { ls.exp() };
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

#[derive(Clone, Copy)]
enum Layout {
    Normal,
    /// Read a stored `[cols, rows]` row-major buffer as its transpose.
    Transposed,
}

/// `c[m, n] = a[m, k] · b[k, n] + beta · c`, with either operand optionally stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], la: Layout, b: &[f32], lb: Layout, c: &mut [f32], beta: f32) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = match la {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: slice lengths are checked above against the logical dimensions
    // and the strides describe exactly those buffers.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let p = g.col_cols();
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ch * g.h + iy as usize) * g.w..(ch * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let p = g.col_cols();
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ch * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}
