//! Dynamic tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! information to run its vector-Jacobian product. Nodes are created in
//! topological order, so `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeometry, Layout};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddSuffix(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        b_batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Permute {
        input: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    SumAxis {
        input: Var,
        axis: usize,
    },
    SumAll(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
        batch: usize,
        out_channels: usize,
    },
    GlobalAvgPool(Var),
    Custom {
        input: Var,
        grad: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation graph while it is evaluated.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn suffix_of(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // stride in the input for each output axis
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn grad_slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record an input value. Gradients are only reported for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (leading-axis batch broadcast).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !suffix_of(vb.shape(), va.shape()) {
            return Err(Error::shape("add_broadcast", va.shape(), vb.shape()));
        }
        let bd = vb.data();
        let data = va
            .data()
            .chunks_exact(bd.len())
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::AddSuffix(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Matrix product over the last two axes.
    ///
    /// `a: [..batch, m, k]`, `b: [..b_batch, k, n]` where `b_batch` is a suffix of
    /// `batch` (possibly empty, i.e. a plain matrix shared by every batch entry).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (batch_dims, b_batch_dims) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        if k != k2 || !suffix_of(b_batch_dims, batch_dims) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = batch_dims.iter().product();
        let b_batch: usize = b_batch_dims.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            if b_batch_dims.is_empty() {
                kernels::gemm(batch * m, k, n, ad, Layout::Normal, bd, Layout::Normal, &mut out, false);
            } else {
                for i in 0..batch {
                    let j = i % b_batch;
                    kernels::gemm(
                        m,
                        k,
                        n,
                        &ad[i * m * k..(i + 1) * m * k],
                        Layout::Normal,
                        &bd[j * k * n..(j + 1) * k * n],
                        Layout::Normal,
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
            }
        }
        let mut shape = batch_dims.to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                b_batch: if b_batch_dims.is_empty() { 0 } else { b_batch },
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", &shape, perm));
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, perm);
        let value = Tensor::new(&out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::Permute {
                input: x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Take `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Slice { input: x, axis, start }, rg))
    }

    fn last_axis(&self, x: Var, op: &'static str) -> Result<usize> {
        self.shape(x)
            .last()
            .copied()
            .ok_or_else(|| Error::shape(op, self.shape(x), &[]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = self.last_axis(x, "softmax")?;
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        kernels::softmax_rows_into(src.data(), cols, &mut out);
        let value = Tensor::new(src.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let cols = self.last_axis(x, "log_softmax")?;
        let src = self.value(x);
        let lse = kernels::logsumexp_rows(src.data(), cols);
        let data = src
            .data()
            .chunks_exact(cols)
            .zip(&lse)
            .flat_map(|(row, &l)| row.iter().map(move |v| v - l))
            .collect();
        let value = Tensor::new(src.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSoftmax(x), rg))
    }

    /// `log(sum(exp(x)))` over the last axis, computed as `a* + log(sum(exp(x - a*)))`
    /// with `a*` the row maximum.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let cols = self.last_axis(x, "logsumexp")?;
        let src = self.value(x);
        let data = kernels::logsumexp_rows(src.data(), cols);
        let shape = &src.shape()[..src.rank() - 1];
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSumExp(x), rg))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", &shape, &[axis]));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(&out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SumAxis { input: x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", self.shape(x), &[axis]))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.last_axis(x, "layer_norm")?;
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (out, xhat, inv_std) = kernels::layer_norm_forward(
            self.value(x).data(),
            d,
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        );
        let value = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Embedding lookup: rows of `table: [V, D]` selected by `indices`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || indices.is_empty() || indices.iter().any(|&i| i >= shape[0]) {
            return Err(Error::invalid(format!(
                "gather_rows: indices {indices:?} invalid for table {shape:?}"
            )));
        }
        let d = shape[1];
        let src = self.value(table).data();
        let data = indices
            .iter()
            .flat_map(|&i| src[i * d..(i + 1) * d].iter().copied())
            .collect();
        let value = Tensor::new(&[indices.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// 3x3 convolution with stride 2 and zero padding 1.
    ///
    /// `input: [B, C, H, W]`, `weight: [O, C, 3, 3]`, `bias: [O]` -> `[B, O, Ho, Wo]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 4 || sw.len() != 4 || sw[1] != si[1] || sw[2] != 3 || sw[3] != 3 {
            return Err(Error::shape("conv2d", &si, &sw));
        }
        let out_channels = sw[0];
        if self.shape(bias) != [out_channels] {
            return Err(Error::shape("conv2d", &sw, self.shape(bias)));
        }
        let (batch, geom) = (si[0], ConvGeometry::new(si[1], si[2], si[3]));
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let img_len = si[1] * si[2] * si[3];
        let mut out = vec![0.0; batch * out_channels * cols_n];
        let mut cols = vec![0.0; rows * cols_n];
        let (x, w, b) = (
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        for bi in 0..batch {
            kernels::im2col(&x[bi * img_len..(bi + 1) * img_len], &geom, &mut cols);
            let dst = &mut out[bi * out_channels * cols_n..(bi + 1) * out_channels * cols_n];
            for (o, plane) in dst.chunks_exact_mut(cols_n).enumerate() {
                plane.fill(b[o]);
            }
            kernels::gemm(
                out_channels,
                rows,
                cols_n,
                w,
                Layout::Normal,
                &cols,
                Layout::Normal,
                dst,
                true,
            );
        }
        let value = Tensor::new(&[batch, out_channels, geom.out_height, geom.out_width], out)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
                out_channels,
            },
            rg,
        ))
    }

    /// `[B, C, H, W] -> [B, C]` mean over the spatial axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", &s, &[]));
        }
        let hw = s[2] * s[3];
        let data = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(&[s[0], s[1]], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// Scalar node with a caller-supplied value and gradient with respect to `input`.
    ///
    /// Used for losses whose exact derivative is zero almost everywhere and that are
    /// trained through a surrogate gradient instead.
    pub fn custom_scalar(&mut self, input: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.shape(input) {
            return Err(Error::shape("custom_scalar", self.shape(input), grad.shape()));
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(value), Op::Custom { input, grad }, rg))
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.len()]);

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.vjp(node, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (&node.op, g) {
                    (Op::Leaf, Some(g)) if node.requires_grad => {
                        Some(Tensor::new(node.value.shape(), g).expect("gradient shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Gradients { grads }
    }

    fn vjp(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(grads, nodes, $v)
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        let out = node.value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = slot!(v) {
                        s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = slot!(*a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = slot!(*b) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(s) = slot!(*a) {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(vb) {
                        *s += g * y;
                    }
                }
                if let Some(s) = slot!(*b) {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(va) {
                        *s += g * x;
                    }
                }
            }
            Op::AddSuffix(a, b) => {
                if let Some(s) = slot!(*a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = slot!(*b) {
                    let len = s.len();
                    for chunk in g.chunks_exact(len) {
                        s.iter_mut().zip(chunk).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(s) = slot!(*x) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c);
                }
            }
            Op::Offset(x) => {
                if let Some(s) = slot!(*x) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
            &Op::MatMul {
                a,
                b,
                batch,
                b_batch,
                m,
                k,
                n,
            } => {
                let (va, vb) = (val(a), val(b));
                if b_batch == 0 {
                    let rows = batch * m;
                    if let Some(s) = slot!(a) {
                        kernels::gemm(rows, n, k, g, Layout::Normal, vb, Layout::Transposed, s, true);
                    }
                    if let Some(s) = slot!(b) {
                        kernels::gemm(k, rows, n, va, Layout::Transposed, g, Layout::Normal, s, true);
                    }
                } else {
                    if let Some(s) = slot!(a) {
                        for i in 0..batch {
                            let j = i % b_batch;
                            kernels::gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..(i + 1) * m * n],
                                Layout::Normal,
                                &vb[j * k * n..(j + 1) * k * n],
                                Layout::Transposed,
                                &mut s[i * m * k..(i + 1) * m * k],
                                true,
                            );
                        }
                    }
                    if let Some(s) = slot!(b) {
                        for i in 0..batch {
                            let j = i % b_batch;
                            kernels::gemm(
                                k,
                                m,
                                n,
                                &va[i * m * k..(i + 1) * m * k],
                                Layout::Transposed,
                                &g[i * m * n..(i + 1) * m * n],
                                Layout::Normal,
                                &mut s[j * k * n..(j + 1) * k * n],
                                true,
                            );
                        }
                    }
                }
            }
            Op::Permute { input, perm } => {
                if let Some(s) = slot!(*input) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let (back, _) = permute_data(g, node.value.shape(), &inverse);
                    s.iter_mut().zip(&back).for_each(|(s, g)| *s += g);
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = slot!(*x) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = nodes[v.0].value.shape()[*axis];
                    if let Some(s) = slot!(v) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            s[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(s, g)| *s += g);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = nodes[input.0].value.shape().to_vec();
                let (outer, dim, inner) = split_axis(&in_shape, *axis);
                let len = node.value.shape()[*axis];
                if let Some(s) = slot!(*input) {
                    for o in 0..outer {
                        let base = (o * dim + start) * inner;
                        s[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(s) = slot!(*x) {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(out) {
                        *s += g * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(s) = slot!(*x) {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(out) {
                        *s += g * (1.0 - y * y);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(s) = slot!(*x) {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(out) {
                        *s += g * y;
                    }
                }
            }
            Op::Log(x) => {
                let vx = val(*x);
                if let Some(s) = slot!(*x) {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(vx) {
                        *s += g / x;
                    }
                }
            }
            Op::Square(x) => {
                let vx = val(*x);
                if let Some(s) = slot!(*x) {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(vx) {
                        *s += 2.0 * g * x;
                    }
                }
            }
            Op::Softmax(x) => {
                let cols = *node.value.shape().last().unwrap();
                if let Some(s) = slot!(*x) {
                    for ((s, g), y) in s
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(out.chunks_exact(cols))
                    {
                        let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            s[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let cols = *node.value.shape().last().unwrap();
                if let Some(s) = slot!(*x) {
                    for ((s, g), y) in s
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(out.chunks_exact(cols))
                    {
                        let total: f64 = g.iter().sum();
                        for j in 0..cols {
                            s[j] += g[j] - y[j].exp() * total;
                        }
                    }
                }
            }
            Op::LogSumExp(x) => {
                let vx = val(*x);
                let cols = *nodes[x.0].value.shape().last().unwrap();
                if let Some(s) = slot!(*x) {
                    for (r, (s, xr)) in s.chunks_exact_mut(cols).zip(vx.chunks_exact(cols)).enumerate() {
                        let lse = out[r];
                        for j in 0..cols {
                            s[j] += g[r] * (xr[j] - lse).exp();
                        }
                    }
                }
            }
            Op::SumAxis { input, axis } => {
                let in_shape = nodes[input.0].value.shape().to_vec();
                let (outer, dim, inner) = split_axis(&in_shape, *axis);
                if let Some(s) = slot!(*input) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for d in 0..dim {
                            s[(o * dim + d) * inner..(o * dim + d + 1) * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(s, g)| *s += g);
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(s) = slot!(*x) {
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = *node.value.shape().last().unwrap();
                let vg = val(*gain);
                if let Some(s) = slot!(*gain) {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            s[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(s) = slot!(*bias) {
                    for gr in g.chunks_exact(d) {
                        s.iter_mut().zip(gr).for_each(|(s, g)| *s += g);
                    }
                }
                if let Some(s) = slot!(*x) {
                    let mut dh = vec![0.0; d];
                    for (r, ((s, gr), hr)) in s
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .enumerate()
                    {
                        for j in 0..d {
                            dh[j] = gr[j] * vg[j];
                        }
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            s[j] += scale * (d as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::GatherRows { table, indices } => {
                let d = nodes[table.0].value.shape()[1];
                if let Some(s) = slot!(*table) {
                    for (r, &i) in indices.iter().enumerate() {
                        s[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(s, g)| *s += g);
                    }
                }
            }
            &Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
                out_channels,
            } => {
                let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
                let img_len = geom.channels * geom.height * geom.width;
                let (x, w) = (val(input), val(weight));
                if let Some(s) = slot!(bias) {
                    for bi in 0..batch {
                        let go = &g[bi * out_channels * cols_n..(bi + 1) * out_channels * cols_n];
                        for (o, plane) in go.chunks_exact(cols_n).enumerate() {
                            s[o] += plane.iter().sum::<f64>();
                        }
                    }
                }
                let mut cols = vec![0.0; rows * cols_n];
                if nodes[weight.0].requires_grad {
                    for bi in 0..batch {
                        kernels::im2col(&x[bi * img_len..(bi + 1) * img_len], &geom, &mut cols);
                        let go = &g[bi * out_channels * cols_n..(bi + 1) * out_channels * cols_n];
                        let s = slot!(weight).expect("weight requires grad");
                        kernels::gemm(
                            out_channels,
                            cols_n,
                            rows,
                            go,
                            Layout::Normal,
                            &cols,
                            Layout::Transposed,
                            s,
                            true,
                        );
                    }
                }
                if nodes[input.0].requires_grad {
                    for bi in 0..batch {
                        let go = &g[bi * out_channels * cols_n..(bi + 1) * out_channels * cols_n];
                        kernels::gemm(
                            rows,
                            out_channels,
                            cols_n,
                            w,
                            Layout::Transposed,
                            go,
                            Layout::Normal,
                            &mut cols,
                            false,
                        );
                        let s = slot!(input).expect("input requires grad");
                        kernels::col2im(&cols, &geom, &mut s[bi * img_len..(bi + 1) * img_len]);
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let s_in = nodes[x.0].value.shape();
                let hw = s_in[2] * s_in[3];
                if let Some(s) = slot!(*x) {
                    for (plane, &gv) in s.chunks_exact_mut(hw).zip(g) {
                        let v = gv / hw as f64;
                        plane.iter_mut().for_each(|s| *s += v);
                    }
                }
            }
            Op::Custom { input, grad } => {
                if let Some(s) = slot!(*input) {
                    for (s, d) in s.iter_mut().zip(grad.data()) {
                        *s += g[0] * d;
                    }
                }
            }
        }
    }
}
