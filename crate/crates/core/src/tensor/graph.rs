//! Append-only computation tape.
//!
//! Every op evaluates eagerly and records how to pull a gradient back to its
//! inputs. Nodes are created in topological order, so `backward` is a single
//! reverse sweep. A graph lives for one forward/backward pass and is confined
//! to the thread that built it.

use std::collections::HashMap;

use super::gemm::{gemm, Layout};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    /// Input spatial extents.
    pub h: usize,
    pub w: usize,
    /// Output spatial extents.
    pub oh: usize,
    pub ow: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    AddRowBias { x: Var, bias: Var, cols: usize },
    MulGroups { x: Var, s: Var, size: usize },
    AddGroups { x: Var, s: Var, size: usize },
    Relu(Var),
    Sigmoid(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows { x: Var, rows: usize, cols: usize },
    GroupMean { x: Var, size: usize },
    SoftmaxRows { x: Var, cols: usize },
    LayerNormRows { x: Var, gain: Var, bias: Var, cols: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, batch: usize, channels: usize, spatial: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    FrozenNorm { x: Var, gamma: Var, beta: Var, batch: usize, channels: usize, spatial: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Reshape(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Bce { p: Var, target: Vec<f64>, eps: f64 },
    L1 { a: Var, b: Var },
    NegLog { x: Var, lo: f64, hi: f64 },
    SoftmaxNll { x: Var, label: usize, prob: Vec<f64> },
    WeightedMean { w: Var, data: Vec<f64>, groups: usize, denom: f64, floored: bool },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one backward sweep, kept for leaf nodes only.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) const NORM_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("graph values are finite and well-shaped")
    }

    /// First entry of a node, for scalars.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, false)
    }

    pub fn constant_vec(&mut self, shape: &[usize], values: Vec<f64>) -> Var {
        assert_eq!(numel(shape), values.len(), "constant_vec: shape/length mismatch");
        self.push(shape.to_vec(), values, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked when `t.requires_grad()` is set.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Binds a named parameter; repeated binds of one name share a node.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Copy of `v` with no path back to its inputs.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    fn same_len(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.numel(a) != self.numel(b) {
            return Err(Error::shape(format!(
                "{what}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Result<Var> {
        self.same_len(a, b, what)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, value, Op::Scale(a, c), rg)
    }

    /// `a + c` elementwise.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, value, Op::Shift(a), rg)
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(format!("{what}: expected a matrix, got {s:?}"))),
        }
    }

    /// Matrix product of `[m,k]` and `[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul: inner extents {k} and {k2} differ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), Layout::Normal, self.value(b), Layout::Normal, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt lhs")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul_nt: inner extents {k} and {k2} differ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), Layout::Normal, self.value(b), Layout::Transposed, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMulNt { a, b, m, k, n }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a, "transpose")?;
        let src = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a, rows, cols }, rg))
    }

    /// Adds `bias[c]` to every row of a `[rows, c]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.matrix_dims(x, "add_row_bias")?;
        if self.numel(bias) != cols {
            return Err(Error::shape(format!(
                "add_row_bias: bias length {} for {cols} columns",
                self.numel(bias)
            )));
        }
        let b = self.value(bias);
        let value = self.value(x).iter().enumerate().map(|(i, v)| v + b[i % cols]).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(shape, value, Op::AddRowBias { x, bias, cols }, rg))
    }

    fn group_size(&self, x: Var, s: Var, what: &str) -> Result<usize> {
        let g = self.numel(s);
        let n = self.numel(x);
        if g == 0 || n % g != 0 {
            return Err(Error::shape(format!("{what}: {n} values do not split into {g} groups")));
        }
        Ok(n / g)
    }

    /// Multiplies each contiguous block `g` of `x` by `s[g]`.
    pub fn mul_groups(&mut self, x: Var, s: Var) -> Result<Var> {
        let size = self.group_size(x, s, "mul_groups")?;
        let sv = self.value(s);
        let value = self.value(x).iter().enumerate().map(|(i, v)| v * sv[i / size]).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(shape, value, Op::MulGroups { x, s, size }, rg))
    }

    /// Adds `s[g]` to each contiguous block `g` of `x`.
    pub fn add_groups(&mut self, x: Var, s: Var) -> Result<Var> {
        let size = self.group_size(x, s, "add_groups")?;
        let sv = self.value(s);
        let value = self.value(x).iter().enumerate().map(|(i, v)| v + sv[i / size]).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(shape, value, Op::AddGroups { x, s, size }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, value, Op::Sigmoid(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.numel(a) as f64;
        let s = self.value(a).iter().sum::<f64>() / n;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::MeanAll(a), rg)
    }

    /// Column means of a `[rows, cols]` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "mean_rows")?;
        let mut out = vec![0.0; cols];
        for row in self.value(x).chunks_exact(cols) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let rg = self.rg(x);
        Ok(self.push(vec![cols], out, Op::MeanRows { x, rows, cols }, rg))
    }

    /// Mean of each of `groups` contiguous blocks.
    pub fn group_mean(&mut self, x: Var, groups: usize) -> Result<Var> {
        let n = self.numel(x);
        if groups == 0 || n % groups != 0 {
            return Err(Error::shape(format!("group_mean: {n} values into {groups} groups")));
        }
        let size = n / groups;
        let out = self
            .value(x)
            .chunks_exact(size)
            .map(|c| c.iter().sum::<f64>() / size as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(vec![groups], out, Op::GroupMean { x, size }, rg))
    }

    /// Softmax along the last axis (a rank-1 input is one row).
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let cols = *self.shape(x).last().expect("rank >= 1");
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(cols) {
            softmax_in_place(row);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::SoftmaxRows { x, cols }, rg)
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let cols = *self.shape(x).last().expect("rank >= 1");
        if self.numel(gain) != cols || self.numel(bias) != cols {
            return Err(Error::shape(format!("layer_norm: gain/bias must have {cols} entries")));
        }
        let rows = self.numel(x) / cols;
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for (r, row) in self.value(x).chunks_exact(cols).enumerate() {
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let xh = (row[c] - mu) * is;
                xhat[r * cols + c] = xh;
                out[r * cols + c] = xh * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(shape, out, Op::LayerNormRows { x, gain, bias, cols, xhat, inv_std }, rg))
    }

    /// `[B?, C, H, W]` view of an image tensor.
    fn image_dims(&self, x: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape(x) {
            [c, h, w] => Ok((1, c, h, w)),
            [b, c, h, w] => Ok((b, c, h, w)),
            ref s => Err(Error::shape(format!("{what}: expected [C,H,W] or [B,C,H,W], got {s:?}"))),
        }
    }

    fn image_shape(&self, like: Var, c: usize, h: usize, w: usize) -> Vec<usize> {
        if self.shape(like).len() == 4 {
            vec![self.shape(like)[0], c, h, w]
        } else {
            vec![c, h, w]
        }
    }

    /// Stride-1 convolution, weight `[C_out, C_in, k, k]`, bias `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (batch, cin, h, wd) = self.image_dims(x, "conv2d")?;
        let (cout, wcin, k) = match *self.shape(w) {
            [co, ci, k1, k2] if k1 == k2 => (co, ci, k1),
            ref s => return Err(Error::shape(format!("conv2d: weight must be [Co,Ci,k,k], got {s:?}"))),
        };
        if wcin != cin {
            return Err(Error::shape(format!("conv2d: input has {cin} channels, weight expects {wcin}")));
        }
        if self.numel(b) != cout {
            return Err(Error::shape(format!("conv2d: bias needs {cout} entries")));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape("conv2d: kernel larger than padded input"));
        }
        let geom = ConvGeom {
            batch,
            cin,
            cout,
            h,
            w: wd,
            oh: h + 2 * pad - k + 1,
            ow: wd + 2 * pad - k + 1,
            k,
            stride: 1,
            pad,
        };
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), &geom);
        let shape = self.image_shape(x, cout, geom.oh, geom.ow);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(shape, out, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Transposed convolution, weight `[C_in, C_out, k, k]`, output extent `(H-1)·s - 2p + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (batch, cin, h, wd) = self.image_dims(x, "conv_transpose2d")?;
        let (wcin, cout, k) = match *self.shape(w) {
            [ci, co, k1, k2] if k1 == k2 => (ci, co, k1),
            ref s => {
                return Err(Error::shape(format!(
                    "conv_transpose2d: weight must be [Ci,Co,k,k], got {s:?}"
                )))
            }
        };
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv_transpose2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if self.numel(b) != cout {
            return Err(Error::shape(format!("conv_transpose2d: bias needs {cout} entries")));
        }
        if (h - 1) * stride + k < 2 * pad + 1 {
            return Err(Error::shape("conv_transpose2d: padding exceeds output"));
        }
        let geom = ConvGeom {
            batch,
            cin,
            cout,
            h,
            w: wd,
            oh: (h - 1) * stride + k - 2 * pad,
            ow: (wd - 1) * stride + k - 2 * pad,
            k,
            stride,
            pad,
        };
        let out = conv_transpose2d_forward(self.value(x), self.value(w), self.value(b), &geom);
        let shape = self.image_shape(x, cout, geom.oh, geom.ow);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(shape, out, Op::ConvTranspose2d { x, w, b, geom }, rg))
    }

    /// 2×2 max pooling with stride 2; extents must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (batch, c, h, w) = self.image_dims(x, "max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("max_pool2: extents {h}x{w} must be even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x);
        let planes = batch * c;
        let mut out = vec![0.0; planes * oh * ow];
        let mut argmax = vec![0usize; planes * oh * ow];
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    let o = p * oh * ow + oy * ow + ox;
                    out[o] = src[best];
                    argmax[o] = best;
                }
            }
        }
        let shape = self.image_shape(x, c, oh, ow);
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Batch normalisation with statistics taken from `x` itself (per channel
    /// over batch and spatial positions). Returns the node plus the batch
    /// mean and biased variance so callers can maintain running averages.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (batch, channels, h, w) = self.image_dims(x, "batch_norm")?;
        if self.numel(gamma) != channels || self.numel(beta) != channels {
            return Err(Error::shape(format!("batch_norm: gamma/beta must have {channels} entries")));
        }
        let spatial = h * w;
        let m = (batch * spatial) as f64;
        let src = self.value(x);
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for bi in 0..batch {
            for c in 0..channels {
                let off = (bi * channels + c) * spatial;
                mean[c] += src[off..off + spatial].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for bi in 0..batch {
            for c in 0..channels {
                let off = (bi * channels + c) * spatial;
                var[c] += src[off..off + spatial].iter().map(|v| (v - mean[c]) * (v - mean[c])).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let (out, xhat) = normalise(src, &mean, &inv_std, self.value(gamma), self.value(beta), batch, channels, spatial);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            shape,
            out,
            Op::BatchNorm { x, gamma, beta, batch, channels, spatial, xhat, inv_std },
            rg,
        );
        Ok((v, mean, var))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn frozen_norm(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        let (batch, channels, h, w) = self.image_dims(x, "frozen_norm")?;
        if self.numel(gamma) != channels || self.numel(beta) != channels || mean.len() != channels || var.len() != channels {
            return Err(Error::shape(format!("frozen_norm: statistics must have {channels} entries")));
        }
        let spatial = h * w;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let (out, xhat) = normalise(self.value(x), mean, &inv_std, self.value(gamma), self.value(beta), batch, channels, spatial);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            shape,
            out,
            Op::FrozenNorm { x, gamma, beta, batch, channels, spatial, xhat, inv_std },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.numel(x) || shape.is_empty() {
            return Err(Error::shape(format!("reshape {:?} -> {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    /// Flat concatenation (row-major concatenation along the leading axis).
    pub fn concat(&mut self, parts: &[Var], shape: &[usize]) -> Result<Var> {
        let total: usize = parts.iter().map(|&p| self.numel(p)).sum();
        if total != numel(shape) {
            return Err(Error::shape(format!("concat: {total} values for shape {shape:?}")));
        }
        let mut value = Vec::with_capacity(total);
        for &p in parts {
            value.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape.to_vec(), value, Op::Concat(parts.to_vec()), rg))
    }

    /// Contiguous flat range `[start, start + numel(shape))` of `x`.
    pub fn slice(&mut self, x: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let len = numel(shape);
        if start + len > self.numel(x) {
            return Err(Error::shape(format!(
                "slice [{start}, {}) out of {} values",
                start + len,
                self.numel(x)
            )));
        }
        let value = self.value(x)[start..start + len].to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, Op::Slice { x, start }, rg))
    }

    /// Mean binary cross-entropy of probabilities clamped to `[eps, 1-eps]`.
    pub fn bce(&mut self, p: Var, target: &[f64], eps: f64) -> Result<Var> {
        if self.numel(p) != target.len() {
            return Err(Error::shape(format!(
                "bce: {} probabilities for {} targets",
                self.numel(p),
                target.len()
            )));
        }
        let n = target.len() as f64;
        let loss = self
            .value(p)
            .iter()
            .zip(target)
            .map(|(&q, &t)| {
                let q = q.clamp(eps, 1.0 - eps);
                -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(p);
        Ok(self.push(vec![1], vec![loss], Op::Bce { p, target: target.to_vec(), eps }, rg))
    }

    /// Mean absolute difference; the subgradient at ties is 0.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "l1")?;
        let n = self.numel(a) as f64;
        let loss = self.value(a).iter().zip(self.value(b)).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![1], vec![loss], Op::L1 { a, b }, rg))
    }

    /// `-ln(clamp(x, lo, hi))` elementwise; zero gradient where clamped.
    pub fn neg_log(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).iter().map(|v| -v.clamp(lo, hi).ln()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, value, Op::NegLog { x, lo, hi }, rg)
    }

    /// `-ln softmax(x)[label]`, capped at `-ln eps`. The gradient is always
    /// `softmax(x) - onehot(label)`, including where the cap applies.
    pub fn softmax_nll(&mut self, x: Var, label: usize, eps: f64) -> Result<Var> {
        let n = self.numel(x);
        if label >= n {
            return Err(Error::contract(format!("label {label} outside {n} logits")));
        }
        let xv = self.value(x);
        let max = xv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + xv.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = (lse - xv[label]).min(-eps.ln());
        let mut prob = xv.to_vec();
        softmax_in_place(&mut prob);
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![loss], Op::SoftmaxNll { x, label, prob }, rg))
    }

    /// Per-group weighted mean `Σ_i w_i d[g,i] / max(Σ_i w_i, eps)` with `d`
    /// constant data of shape `[groups, len(w)]`.
    pub fn weighted_mean(&mut self, w: Var, data: &[f64], eps: f64) -> Result<Var> {
        let n = self.numel(w);
        if data.is_empty() || data.len() % n != 0 {
            return Err(Error::shape(format!("weighted_mean: {} data values for {n} weights", data.len())));
        }
        let groups = data.len() / n;
        let wv = self.value(w);
        let total = wv.iter().sum::<f64>();
        let floored = total < eps;
        let denom = if floored { eps } else { total };
        let out = data
            .chunks_exact(n)
            .map(|d| d.iter().zip(wv).map(|(a, b)| a * b).sum::<f64>() / denom)
            .collect();
        let rg = self.rg(w);
        Ok(self.push(vec![groups], out, Op::WeightedMean { w, data: data.to_vec(), groups, denom, floored }, rg))
    }

    /// Reverse sweep from a scalar node. Each call starts from zero: the
    /// returned gradients hold exactly one pass worth of contributions.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.numel(loss) != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.pull(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn pull(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, &mut |d| add_into(d, g));
                acc(grads, *b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |d| add_into(d, g));
                acc(grads, *b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, &mut |d| {
                    d.iter_mut().zip(g).zip(bv).for_each(|((x, gy), y)| *x += gy * y)
                });
                acc(grads, *b, &mut |d| {
                    d.iter_mut().zip(g).zip(av).for_each(|((x, gy), y)| *x += gy * y)
                });
            }
            Op::Scale(a, c) => acc(grads, *a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::Shift(a) | Op::Reshape(a) => acc(grads, *a, &mut |d| add_into(d, g)),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA = G · Bᵀ, dB = Aᵀ · G
                acc(grads, *a, &mut |d| gemm(m, n, k, g, Layout::Normal, bv, Layout::Transposed, d, true));
                acc(grads, *b, &mut |d| gemm(k, m, n, av, Layout::Transposed, g, Layout::Normal, d, true));
            }
            Op::MatMulNt { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA = G · B, dB = Gᵀ · A
                acc(grads, *a, &mut |d| gemm(m, n, k, g, Layout::Normal, bv, Layout::Normal, d, true));
                acc(grads, *b, &mut |d| gemm(n, m, k, g, Layout::Transposed, av, Layout::Normal, d, true));
            }
            Op::Transpose { a, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                acc(grads, *a, &mut |d| {
                    for r in 0..rows {
                        for c in 0..cols {
                            d[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            Op::AddRowBias { x, bias, cols } => {
                acc(grads, *x, &mut |d| add_into(d, g));
                acc(grads, *bias, &mut |d| {
                    for row in g.chunks_exact(*cols) {
                        add_into(d, row);
                    }
                });
            }
            Op::MulGroups { x, s, size } => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                acc(grads, *x, &mut |d| {
                    d.iter_mut().enumerate().for_each(|(i, v)| *v += g[i] * sv[i / size])
                });
                acc(grads, *s, &mut |d| {
                    for (j, dj) in d.iter_mut().enumerate() {
                        let r = j * size..(j + 1) * size;
                        *dj += g[r.clone()].iter().zip(&xv[r]).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::AddGroups { x, s, size } => {
                acc(grads, *x, &mut |d| add_into(d, g));
                acc(grads, *s, &mut |d| {
                    for (j, dj) in d.iter_mut().enumerate() {
                        *dj += g[j * size..(j + 1) * size].iter().sum::<f64>();
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(grads, *a, &mut |d| {
                    for i in 0..d.len() {
                        if av[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(grads, *a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::SumAll(a) => acc(grads, *a, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::MeanAll(a) => {
                let n = self.numel(*a) as f64;
                acc(grads, *a, &mut |d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::MeanRows { x, rows, cols } => {
                let r = *rows as f64;
                acc(grads, *x, &mut |d| {
                    for row in d.chunks_exact_mut(*cols) {
                        row.iter_mut().zip(g).for_each(|(v, gy)| *v += gy / r);
                    }
                });
            }
            Op::GroupMean { x, size } => {
                let s = *size as f64;
                acc(grads, *x, &mut |d| {
                    d.iter_mut().enumerate().for_each(|(i, v)| *v += g[i / size] / s)
                });
            }
            Op::SoftmaxRows { x, cols } => {
                let y = &node.value;
                acc(grads, *x, &mut |d| {
                    for ((dr, yr), gr) in d.chunks_exact_mut(*cols).zip(y.chunks_exact(*cols)).zip(g.chunks_exact(*cols)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..*cols {
                            dr[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNormRows { x, gain, bias, cols, xhat, inv_std } => {
                let cols = *cols;
                let gv = self.value(*gain);
                acc(grads, *gain, &mut |d| {
                    for (gr, xr) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for c in 0..cols {
                            d[c] += gr[c] * xr[c];
                        }
                    }
                });
                acc(grads, *bias, &mut |d| {
                    for gr in g.chunks_exact(cols) {
                        add_into(d, gr);
                    }
                });
                acc(grads, *x, &mut |d| {
                    let n = cols as f64;
                    for (r, ((dr, gr), xr)) in d
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(xhat.chunks_exact(cols))
                        .enumerate()
                    {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..cols {
                            let dxh = gr[c] * gv[c];
                            s1 += dxh;
                            s2 += dxh * xr[c];
                        }
                        for c in 0..cols {
                            let dxh = gr[c] * gv[c];
                            dr[c] += inv_std[r] / n * (n * dxh - s1 - xr[c] * s2);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                let (dx, dw) = conv2d_backward(xv, wv, g, geom, need_x, need_w);
                if let Some(dx) = dx {
                    acc(grads, *x, &mut |d| add_into(d, &dx));
                }
                if let Some(dw) = dw {
                    acc(grads, *w, &mut |d| add_into(d, &dw));
                }
                acc(grads, *b, &mut |d| bias_grad(d, g, geom.batch, geom.cout, geom.oh * geom.ow));
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                let (dx, dw) = conv_transpose2d_backward(xv, wv, g, geom, need_x, need_w);
                if let Some(dx) = dx {
                    acc(grads, *x, &mut |d| add_into(d, &dx));
                }
                if let Some(dw) = dw {
                    acc(grads, *w, &mut |d| add_into(d, &dw));
                }
                acc(grads, *b, &mut |d| bias_grad(d, g, geom.batch, geom.cout, geom.oh * geom.ow));
            }
            Op::MaxPool2 { x, argmax } => {
                acc(grads, *x, &mut |d| {
                    for (o, &src) in argmax.iter().enumerate() {
                        d[src] += g[o];
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, batch, channels, spatial, xhat, inv_std } => {
                let (batch, channels, spatial) = (*batch, *channels, *spatial);
                let gv = self.value(*gamma);
                let (dgamma, dbeta) = affine_param_grads(g, xhat, batch, channels, spatial);
                acc(grads, *gamma, &mut |d| add_into(d, &dgamma));
                acc(grads, *beta, &mut |d| add_into(d, &dbeta));
                acc(grads, *x, &mut |d| {
                    let m = (batch * spatial) as f64;
                    for c in 0..channels {
                        // Σ dxhat and Σ dxhat·xhat are dbeta·γ and dgamma·γ.
                        let s1 = dbeta[c] * gv[c];
                        let s2 = dgamma[c] * gv[c];
                        for bi in 0..batch {
                            let off = (bi * channels + c) * spatial;
                            for i in off..off + spatial {
                                let dxh = g[i] * gv[c];
                                d[i] += inv_std[c] / m * (m * dxh - s1 - xhat[i] * s2);
                            }
                        }
                    }
                });
            }
            Op::FrozenNorm { x, gamma, beta, batch, channels, spatial, xhat, inv_std } => {
                let (batch, channels, spatial) = (*batch, *channels, *spatial);
                let gv = self.value(*gamma);
                let (dgamma, dbeta) = affine_param_grads(g, xhat, batch, channels, spatial);
                acc(grads, *gamma, &mut |d| add_into(d, &dgamma));
                acc(grads, *beta, &mut |d| add_into(d, &dbeta));
                acc(grads, *x, &mut |d| {
                    for bi in 0..batch {
                        for c in 0..channels {
                            let off = (bi * channels + c) * spatial;
                            for i in off..off + spatial {
                                d[i] += g[i] * gv[c] * inv_std[c];
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.numel(p);
                    let seg = &g[off..off + len];
                    acc(grads, p, &mut |d| add_into(d, seg));
                    off += len;
                }
            }
            Op::Slice { x, start } => {
                let start = *start;
                acc(grads, *x, &mut |d| add_into(&mut d[start..start + g.len()], g));
            }
            Op::Bce { p, target, eps } => {
                let pv = self.value(*p);
                let n = target.len() as f64;
                acc(grads, *p, &mut |d| {
                    for i in 0..d.len() {
                        let q = pv[i];
                        if q > *eps && q < 1.0 - eps {
                            let t = target[i];
                            d[i] += g[0] * (-t / q + (1.0 - t) / (1.0 - q)) / n;
                        }
                    }
                });
            }
            Op::L1 { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.len() as f64;
                let sign = |i: usize| {
                    let diff = av[i] - bv[i];
                    if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                acc(grads, *a, &mut |d| (0..d.len()).for_each(|i| d[i] += g[0] * sign(i) / n));
                acc(grads, *b, &mut |d| (0..d.len()).for_each(|i| d[i] -= g[0] * sign(i) / n));
            }
            Op::NegLog { x, lo, hi } => {
                let xv = self.value(*x);
                acc(grads, *x, &mut |d| {
                    for i in 0..d.len() {
                        if xv[i] > *lo && xv[i] < *hi {
                            d[i] -= g[i] / xv[i];
                        }
                    }
                });
            }
            Op::SoftmaxNll { x, label, prob } => {
                acc(grads, *x, &mut |d| {
                    for (i, p) in prob.iter().enumerate() {
                        d[i] += g[0] * (p - if i == *label { 1.0 } else { 0.0 });
                    }
                });
            }
            Op::WeightedMean { w, data, groups, denom, floored } => {
                let n = self.numel(*w);
                let out = &node.value;
                let zeros = vec![0.0; *groups];
                // Below the floor the denominator is constant.
                let out = if *floored { &zeros } else { out };
                acc(grads, *w, &mut |d| {
                    for gi in 0..*groups {
                        let row = &data[gi * n..(gi + 1) * n];
                        for i in 0..n {
                            d[i] += g[gi] * (row[i] - out[gi]) / denom;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[allow(clippy::too_many_arguments)]
fn normalise(
    src: &[f64],
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
    batch: usize,
    channels: usize,
    spatial: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; src.len()];
    let mut xhat = vec![0.0; src.len()];
    for bi in 0..batch {
        for c in 0..channels {
            let off = (bi * channels + c) * spatial;
            for i in off..off + spatial {
                let xh = (src[i] - mean[c]) * inv_std[c];
                xhat[i] = xh;
                out[i] = xh * gamma[c] + beta[c];
            }
        }
    }
    (out, xhat)
}

fn affine_param_grads(g: &[f64], xhat: &[f64], batch: usize, channels: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for bi in 0..batch {
        for c in 0..channels {
            let off = (bi * channels + c) * spatial;
            for i in off..off + spatial {
                dgamma[c] += g[i] * xhat[i];
                dbeta[c] += g[i];
            }
        }
    }
    (dgamma, dbeta)
}

fn bias_grad(d: &mut [f64], g: &[f64], batch: usize, channels: usize, spatial: usize) {
    for bi in 0..batch {
        for c in 0..channels {
            let off = (bi * channels + c) * spatial;
            d[c] += g[off..off + spatial].iter().sum::<f64>();
        }
    }
}

/// Gathers `img[c, gy·stride + ky - pad, gx·stride + kx - pad]` into
/// `cols[(c·k + ky)·k + kx, gy·gw + gx]`, zero outside the image.
#[allow(clippy::too_many_arguments)]
fn im2col(img: &[f64], c: usize, ih: usize, iw: usize, k: usize, stride: usize, pad: usize, gh: usize, gw: usize) -> Vec<f64> {
    let mut cols = vec![0.0; c * k * k * gh * gw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * gh * gw;
                for gy in 0..gh {
                    let y = (gy * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= ih as isize {
                        continue;
                    }
                    let src_row = ci * ih * iw + y as usize * iw;
                    for gx in 0..gw {
                        let x = (gx * stride + kx) as isize - pad as isize;
                        if x >= 0 && x < iw as isize {
                            cols[row + gy * gw + gx] = img[src_row + x as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back into the image.
#[allow(clippy::too_many_arguments)]
fn col2im_add(cols: &[f64], img: &mut [f64], c: usize, ih: usize, iw: usize, k: usize, stride: usize, pad: usize, gh: usize, gw: usize) {
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * gh * gw;
                for gy in 0..gh {
                    let y = (gy * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= ih as isize {
                        continue;
                    }
                    let dst_row = ci * ih * iw + y as usize * iw;
                    for gx in 0..gw {
                        let x = (gx * stride + kx) as isize - pad as isize;
                        if x >= 0 && x < iw as isize {
                            img[dst_row + x as usize] += cols[row + gy * gw + gx];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ckk, plane) = (g.cin * g.k * g.k, g.oh * g.ow);
    let mut out = vec![0.0; g.batch * g.cout * plane];
    for bi in 0..g.batch {
        let img = &x[bi * g.cin * g.h * g.w..(bi + 1) * g.cin * g.h * g.w];
        let cols = im2col(img, g.cin, g.h, g.w, g.k, 1, g.pad, g.oh, g.ow);
        let o = &mut out[bi * g.cout * plane..(bi + 1) * g.cout * plane];
        for (co, chunk) in o.chunks_exact_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b[co]);
        }
        gemm(g.cout, ckk, plane, w, Layout::Normal, &cols, Layout::Normal, o, true);
    }
    out
}

type MaybeGrads = (Option<Vec<f64>>, Option<Vec<f64>>);

fn conv2d_backward(x: &[f64], w: &[f64], gout: &[f64], g: &ConvGeom, need_x: bool, need_w: bool) -> MaybeGrads {
    let (ckk, plane, in_plane) = (g.cin * g.k * g.k, g.oh * g.ow, g.cin * g.h * g.w);
    let mut dx = need_x.then(|| vec![0.0; x.len()]);
    let mut dw = need_w.then(|| vec![0.0; w.len()]);
    for bi in 0..g.batch {
        let go = &gout[bi * g.cout * plane..(bi + 1) * g.cout * plane];
        if let Some(dw) = dw.as_mut() {
            let cols = im2col(&x[bi * in_plane..(bi + 1) * in_plane], g.cin, g.h, g.w, g.k, 1, g.pad, g.oh, g.ow);
            gemm(g.cout, plane, ckk, go, Layout::Normal, &cols, Layout::Transposed, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let mut dcols = vec![0.0; ckk * plane];
            gemm(ckk, g.cout, plane, w, Layout::Transposed, go, Layout::Normal, &mut dcols, false);
            col2im_add(&dcols, &mut dx[bi * in_plane..(bi + 1) * in_plane], g.cin, g.h, g.w, g.k, 1, g.pad, g.oh, g.ow);
        }
    }
    (dx, dw)
}

fn conv_transpose2d_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ckk, in_plane, plane) = (g.cout * g.k * g.k, g.h * g.w, g.oh * g.ow);
    let mut out = vec![0.0; g.batch * g.cout * plane];
    for bi in 0..g.batch {
        let xi = &x[bi * g.cin * in_plane..(bi + 1) * g.cin * in_plane];
        let mut cols = vec![0.0; ckk * in_plane];
        gemm(ckk, g.cin, in_plane, w, Layout::Transposed, xi, Layout::Normal, &mut cols, false);
        let o = &mut out[bi * g.cout * plane..(bi + 1) * g.cout * plane];
        for (co, chunk) in o.chunks_exact_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b[co]);
        }
        col2im_add(&cols, o, g.cout, g.oh, g.ow, g.k, g.stride, g.pad, g.h, g.w);
    }
    out
}

fn conv_transpose2d_backward(x: &[f64], w: &[f64], gout: &[f64], g: &ConvGeom, need_x: bool, need_w: bool) -> MaybeGrads {
    let (ckk, in_plane, plane) = (g.cout * g.k * g.k, g.h * g.w, g.oh * g.ow);
    let mut dx = need_x.then(|| vec![0.0; x.len()]);
    let mut dw = need_w.then(|| vec![0.0; w.len()]);
    for bi in 0..g.batch {
        let go = &gout[bi * g.cout * plane..(bi + 1) * g.cout * plane];
        let dcols = im2col(go, g.cout, g.oh, g.ow, g.k, g.stride, g.pad, g.h, g.w);
        if let Some(dx) = dx.as_mut() {
            let d = &mut dx[bi * g.cin * in_plane..(bi + 1) * g.cin * in_plane];
            gemm(g.cin, ckk, in_plane, w, Layout::Normal, &dcols, Layout::Normal, d, true);
        }
        if let Some(dw) = dw.as_mut() {
            let xi = &x[bi * g.cin * in_plane..(bi + 1) * g.cin * in_plane];
            gemm(g.cin, in_plane, ckk, xi, Layout::Normal, &dcols, Layout::Transposed, dw, true);
        }
    }
    (dx, dw)
}
