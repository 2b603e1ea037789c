//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive operation in execution order. Each
//! recorded node owns its forward value plus whatever the adjoint rule needs
//! (softmax outputs, normalized activations, im2col buffers, dropout masks).
//! [`Tape::backward`] walks the record in reverse, applying each adjoint rule
//! once, so gradients equal the chain rule for the recorded program.
//!
//! Gradients accumulate: a second `backward` adds to the buffers left by the
//! first until [`Tape::zero_grad`] clears them.

use rand::Rng;

use super::array::{strides, Tensor, TensorError};
use super::kernels;

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Sum(Var),
    Norm(Var),
    DivScalar(Var, Var),
    MatMul(Box<MatMulPlan>),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm(Box<LayerNormCache>),
    Gelu(Var),
    Conv2d(Box<ConvCache>),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    GatherRows { table: Var, rows: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
}

#[derive(Debug)]
struct MatMulPlan {
    a: Var,
    b: Var,
    m: usize,
    k: usize,
    n: usize,
    /// (a matrix index, b matrix index) for every output matrix.
    pairs: Vec<(usize, usize)>,
}

#[derive(Debug)]
struct LayerNormCache {
    x: Var,
    gain: Var,
    bias: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

#[derive(Debug)]
struct ConvCache {
    x: Var,
    weight: Var,
    bias: Option<Var>,
    geom: kernels::ConvGeometry,
    cols: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records a leaf whose gradient will be tracked.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
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

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("zip shape")
    }

    // ---------------------------------------------------------------- ops

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a vector of length `n` to every length-`n` row of `x` (last axis).
    /// This is the only implicit broadcast the tape performs besides the batch
    /// axes of [`Tape::matmul`].
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(bias);
        if xs.is_empty() || bs.len() != 1 || bs[0] != xs[xs.len() - 1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: xs.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let b = self.value(bias).data();
        let n = b.len();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Exp(x), rg)
    }

    /// Sum of all elements as a scalar (shape `[]`).
    pub fn sum(&mut self, x: Var) -> Var {
        let s = kernels::pairwise_sum(self.value(x).data());
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Euclidean norm of all elements as a scalar. The subgradient at the
    /// origin is zero.
    pub fn norm(&mut self, x: Var) -> Var {
        let ss: f64 = self.value(x).data().iter().map(|v| v * v).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(ss.sqrt()), Op::Norm(x), rg)
    }

    /// Divides every element of `x` by the one-element tensor `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let Some(d) = self.value(s).item() else {
            return Err(TensorError::InvalidShape {
                op: "div_scalar",
                shape: self.shape(s).to_vec(),
                reason: "divisor must hold exactly one value".into(),
            });
        };
        let out = self.value(x).map(|v| v / d);
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(out, Op::DivScalar(x, s), rg))
    }

    /// Matrix product over the last two axes, `[.., m, k] x [.., k, n]`.
    /// Leading batch axes broadcast with numpy rules.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shape(batch_a, batch_b).ok_or_else(mismatch)?;
        let pairs = broadcast_pairs(&batch, batch_a, batch_b);

        let mut out = vec![0.0; pairs.len() * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for (bi, &(ia, ib)) in pairs.iter().enumerate() {
            kernels::gemm(
                m,
                k,
                n,
                &da[ia * m * k..],
                (k, 1),
                &db[ib * k * n..],
                (n, 1),
                &mut out[bi * m * n..],
                false,
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let rg = self.any_grad(&[a, b]);
        let plan = MatMulPlan {
            a,
            b,
            m,
            k,
            n,
            pairs,
        };
        Ok(self.push(
            Tensor::new(shape, out).expect("matmul shape"),
            Op::MatMul(Box::new(plan)),
            rg,
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape,
                reason: format!("bad axis order {axes:?}"),
            });
        }
        let out = kernels::permute(self.value(x), axes);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Permute(x, axes.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: self.shape(x).to_vec(),
                reason: "needs rank >= 2".into(),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis("softmax", &shape, axis)?;
        let mut out = self.value(x).clone();
        kernels::softmax_inplace(out.data_mut(), outer, len, inner);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes each last-axis row to zero mean and unit (biased) variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().ok_or(TensorError::InvalidShape {
            op: "layer_norm",
            shape: xs.clone(),
            reason: "scalar input".into(),
        })?;
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: xs,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let data = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = data.len() / n.max(1);
        let mut xhat = vec![0.0; data.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; data.len()];
        for r in 0..rows {
            let row = &data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        let cache = LayerNormCache {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(
            Tensor::new(xs, out).expect("ln shape"),
            Op::LayerNorm(Box::new(cache)),
            rg,
        ))
    }

    /// Exact gelu, `x * Phi(x)` with the erf-based normal CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// 2-D cross-correlation of a `[C_in, H, W]` input with `[C_out, C_in, kh, kw]`
    /// kernels and an optional `[C_out]` bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: xs.clone(),
            rhs: ws.clone(),
        };
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || stride == 0 {
            return Err(mismatch());
        }
        if xs[1] + 2 * padding < ws[2] || xs[2] + 2 * padding < ws[3] {
            return Err(mismatch());
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: ws.clone(),
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geom = kernels::ConvGeometry::new(&xs, &ws, stride, padding);
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut out = vec![0.0; geom.c_out * geom.out_len()];
        // [C_out, K] x [K, P]
        kernels::gemm(
            geom.c_out,
            geom.patch_len(),
            geom.out_len(),
            self.value(weight).data(),
            (geom.patch_len(), 1),
            &cols,
            (geom.out_len(), 1),
            &mut out,
            false,
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (row, &bias) in out.chunks_mut(geom.out_len()).zip(bv) {
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let rg = self.any_grad(&inputs);
        let shape = vec![geom.c_out, geom.out_h, geom.out_w];
        let cache = ConvCache {
            x,
            weight,
            bias,
            geom,
            cols,
        };
        Ok(self.push(
            Tensor::new(shape, out).expect("conv shape"),
            Op::Conv2d(Box::new(cache)),
            rg,
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::new(shape, out).expect("concat shape"),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, full, inner) = split_axis("narrow", &shape, axis)?;
        if start + len > full {
            return Err(TensorError::InvalidShape {
                op: "narrow",
                shape,
                reason: format!("range {start}..{} exceeds axis {axis}", start + len),
            });
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(s, out).expect("narrow shape"),
            Op::Narrow { x, axis, start },
            rg,
        ))
    }

    /// Picks rows of a `[R, C]` table, producing `[rows.len(), C]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || rows.iter().any(|&r| r >= s[0]) {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: s,
                reason: "rank-2 table with in-range row indices required".into(),
            });
        }
        let c = s[1];
        let d = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(&d[r * c..(r + 1) * c]);
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::new(vec![rows.len(), c], out).expect("gather shape"),
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1 / (1 - p)`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("dropout shape");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    // ----------------------------------------------------------- backward

    /// Propagates d(loss)/d(node) to every node that requires a gradient,
    /// adding into existing gradient buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        for (node, a) in self.nodes.iter_mut().zip(adj) {
            if !node.requires_grad {
                continue;
            }
            if let Some(a) = a {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&a).for_each(|(x, y)| *x += y),
                    None => node.grad = Some(a),
                }
            }
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut with = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let n = nodes[v.0].value.numel();
            f(adj[v.0].get_or_insert_with(|| vec![0.0; n]));
        };
        let val = |v: Var| nodes[v.0].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with(*a, &mut |d| axpy(d, g, 1.0));
                with(*b, &mut |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                with(*a, &mut |d| axpy(d, g, 1.0));
                with(*b, &mut |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                with(*a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                });
                with(*b, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::AddBias(x, b) => {
                with(*x, &mut |d| axpy(d, g, 1.0));
                with(*b, &mut |d| {
                    let n = d.len();
                    for row in g.chunks(n) {
                        axpy(d, row, 1.0);
                    }
                });
            }
            Op::Scale(x, c) => with(*x, &mut |d| axpy(d, g, *c)),
            Op::Exp(x) => {
                let y = nodes[i].value.data();
                with(*x, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y;
                    }
                });
            }
            Op::Sum(x) => with(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Norm(x) => {
                let y = nodes[i].value.data()[0];
                let xv = val(*x);
                // zero subgradient at the origin
                let c = if y > 0.0 { g[0] / y } else { 0.0 };
                with(*x, &mut |d| axpy(d, xv, c));
            }
            Op::DivScalar(x, s) => {
                let sv = val(*s)[0];
                with(*x, &mut |d| axpy(d, g, 1.0 / sv));
                let xv = val(*x);
                with(*s, &mut |d| {
                    let dot: f64 = g.iter().zip(xv).map(|(g, x)| g * x).sum();
                    d[0] -= dot / (sv * sv);
                });
            }
            Op::MatMul(plan) => {
                let MatMulPlan {
                    a,
                    b,
                    m,
                    k,
                    n,
                    pairs,
                } = plan.as_ref();
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (val(*a), val(*b));
                with(*a, &mut |da| {
                    // dA = dC . B^T
                    for (bi, &(ia, ib)) in pairs.iter().enumerate() {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..],
                            (n, 1),
                            &vb[ib * k * n..],
                            (1, n),
                            &mut da[ia * m * k..],
                            true,
                        );
                    }
                });
                with(*b, &mut |db| {
                    // dB = A^T . dC
                    for (bi, &(ia, ib)) in pairs.iter().enumerate() {
                        kernels::gemm(
                            k,
                            m,
                            n,
                            &va[ia * m * k..],
                            (1, k),
                            &g[bi * m * n..],
                            (n, 1),
                            &mut db[ib * k * n..],
                            true,
                        );
                    }
                });
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (o, &a) in axes.iter().enumerate() {
                    inverse[a] = o;
                }
                let gt = Tensor::new(nodes[i].value.shape().to_vec(), g.to_vec()).expect("grad");
                let back = kernels::permute(&gt, &inverse);
                with(*x, &mut |d| axpy(d, back.data(), 1.0));
            }
            Op::Reshape(x) => with(*x, &mut |d| axpy(d, g, 1.0)),
            Op::Softmax { x, axis } => {
                let y = &nodes[i].value;
                let (outer, len, inner) = split_axis("softmax", y.shape(), *axis).expect("axis");
                let yd = y.data();
                with(*x, &mut |d| {
                    for o in 0..outer {
                        for inn in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + inn;
                            let dot: f64 = (0..len).map(|l| g[idx(l)] * yd[idx(l)]).sum();
                            for l in 0..len {
                                d[idx(l)] += yd[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm(c) => {
                let gain = val(c.gain);
                let n = gain.len();
                let rows = c.inv_std.len();
                with(c.x, &mut |d| {
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let xh = &c.xhat[r * n..(r + 1) * n];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..n {
                            let dxh = gr[j] * gain[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh[j];
                        }
                        let scale = c.inv_std[r] / n as f64;
                        for j in 0..n {
                            let dxh = gr[j] * gain[j];
                            d[r * n + j] += scale * (n as f64 * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                        }
                    }
                });
                with(c.gain, &mut |d| {
                    for r in 0..rows {
                        for j in 0..n {
                            d[j] += g[r * n + j] * c.xhat[r * n + j];
                        }
                    }
                });
                with(c.bias, &mut |d| {
                    for row in g.chunks(n) {
                        axpy(d, row, 1.0);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                with(*x, &mut |d| {
                    for ((d, g), &x) in d.iter_mut().zip(g).zip(xv) {
                        *d += g * kernels::gelu_grad(x);
                    }
                });
            }
            Op::Conv2d(c) => {
                let geom = &c.geom;
                let (kdim, p) = (geom.patch_len(), geom.out_len());
                with(c.weight, &mut |dw| {
                    // dW = dOut [C_out, P] . cols^T [P, K]
                    kernels::gemm(geom.c_out, p, kdim, g, (p, 1), &c.cols, (1, p), dw, true);
                });
                if let Some(b) = c.bias {
                    with(b, &mut |db| {
                        for (o, row) in g.chunks(p).enumerate() {
                            db[o] += row.iter().sum::<f64>();
                        }
                    });
                }
                let w = val(c.weight);
                with(c.x, &mut |dx| {
                    // dcols = W^T [K, C_out] . dOut [C_out, P]
                    let mut dcols = vec![0.0; kdim * p];
                    kernels::gemm(
                        kdim,
                        geom.c_out,
                        p,
                        w,
                        (1, kdim),
                        g,
                        (p, 1),
                        &mut dcols,
                        false,
                    );
                    kernels::col2im_add(&dcols, geom, dx);
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = nodes[i].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let len = nodes[v.0].value.shape()[*axis];
                    with(v, &mut |d| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            axpy(
                                &mut d[o * len * inner..(o + 1) * len * inner],
                                &g[src..src + len * inner],
                                1.0,
                            );
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let full_shape = nodes[x.0].value.shape();
                let (outer, full, inner) = split_axis("narrow", full_shape, *axis).expect("axis");
                let len = nodes[i].value.shape()[*axis];
                with(*x, &mut |d| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        axpy(
                            &mut d[dst..dst + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                            1.0,
                        );
                    }
                });
            }
            Op::GatherRows { table, rows } => {
                let c = nodes[table.0].value.shape()[1];
                with(*table, &mut |d| {
                    for (k, &r) in rows.iter().enumerate() {
                        axpy(&mut d[r * c..(r + 1) * c], &g[k * c..(k + 1) * c], 1.0);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                with(*x, &mut |d| {
                    for ((d, g), m) in d.iter_mut().zip(g).zip(mask) {
                        *d += g * m;
                    }
                });
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// `(outer, len, inner)` extents around `axis`.
pub(crate) fn split_axis(
    op: &'static str,
    shape: &[usize],
    axis: usize,
) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r {
            a[i + a.len() - r]
        } else {
            1
        };
        let db = if i + b.len() >= r {
            b[i + b.len() - r]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn broadcast_pairs(batch: &[usize], a: &[usize], b: &[usize]) -> Vec<(usize, usize)> {
    let total: usize = batch.iter().product();
    let r = batch.len();
    let pad = |s: &[usize]| {
        let mut p = vec![1; r - s.len()];
        p.extend_from_slice(s);
        p
    };
    let (pa, pb) = (pad(a), pad(b));
    let (sa, sb, so) = (strides(&pa), strides(&pb), strides(batch));
    (0..total)
        .map(|flat| {
            let mut ia = 0;
            let mut ib = 0;
            for d in 0..r {
                let idx = (flat / so[d]) % batch[d];
                if pa[d] != 1 {
                    ia += idx * sa[d];
                }
                if pb[d] != 1 {
                    ib += idx * sb[d];
                }
            }
            (ia, ib)
        })
        .collect()
}
