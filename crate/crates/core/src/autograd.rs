//! A small tape-based reverse-mode differentiation engine.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and accumulates vector-Jacobian products into
//! the leaves created with [`Graph::param`]. Image tensors are `NCHW`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Scale(usize, f64),
    AddPerSampleChannel { x: usize, v: usize },
    Silu(usize),
    Tanh(usize),
    Conv2d { x: usize, w: usize, b: usize, stride: usize, pad: usize, col: Vec<T> },
    Upsample2x(usize),
    AvgPool2x(usize),
    ConcatChannels(usize, usize),
    Linear { x: usize, w: usize, b: Option<usize> },
    BatchMatmul { a: usize, b: usize, trans_b: bool },
    SoftmaxLast(usize),
    ToTokens(usize),
    FromTokens(usize),
    Reshape(usize),
    MeanRows(usize),
    Mse { pred: usize, target: Tensor<T> },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by the graph's variables.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Output columns `[lo, hi)` whose input column `o·stride + kx − pad` lies
/// inside `0..w`.
fn valid_range(w: usize, wo: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let hi = if w + pad > kx { ((w + pad - kx - 1) / stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Geometry of one convolution.
#[derive(Clone, Copy)]
struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        ConvDims {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho: conv_out(h, k, stride, pad),
            wo: conv_out(w, k, stride, pad),
        }
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Unfolds one sample into columns `off..off + P` of a `rows × ld` matrix.
fn im2col<T: Scalar>(x: &[T], d: ConvDims, col: &mut [T], ld: usize, off: usize) {
    let ConvDims { cin, h, w, k, stride, pad, ho, wo } = d;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let row = &mut col[r * ld + off..r * ld + off + ho * wo];
                let (lo, hi) = valid_range(w, wo, kx, stride, pad);
                for oy in 0..ho {
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    dst[..lo].iter_mut().for_each(|v| *v = T::zero());
                    dst[hi..].iter_mut().for_each(|v| *v = T::zero());
                    let start = lo * stride + kx - pad;
                    if stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (j, v) in dst[lo..hi].iter_mut().enumerate() {
                            *v = src[start + j * stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into one sample.
fn col2im<T: Scalar>(col: &[T], d: ConvDims, ld: usize, off: usize, dx: &mut [T]) {
    let ConvDims { cin, h, w, k, stride, pad, ho, wo } = d;
    for ci in 0..cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let row = &col[r * ld + off..r * ld + off + ho * wo];
                let (lo, hi) = valid_range(w, wo, kx, stride, pad);
                if lo >= hi {
                    continue;
                }
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * wo + lo..oy * wo + hi];
                    let start = lo * stride + kx - pad;
                    for (j, &v) in src.iter().enumerate() {
                        dst[start + j * stride] += v;
                    }
                }
            }
        }
    }
}

/// Blocked transpose of a row-major `rows × cols` matrix into `out`.
fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize, out: &mut [T]) {
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    out[c * rows + r] = a[r * cols + c];
                }
            }
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, grad: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&grad),
        None => *slot = Some(grad),
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::Add(a.0, b.0), ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale(T::from_f64(factor));
        let ng = self.needs(&[x.0]);
        self.push(out, Op::Scale(x.0, factor), ng)
    }

    /// `x[n, c, ..] + v[n, c]`.
    pub fn add_per_sample_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xs, vs) = (self.shape(x).to_vec(), self.shape(v).to_vec());
        if xs.len() < 2 || vs.len() != 2 || xs[0] != vs[0] || xs[1] != vs[1] {
            return Err(shape_err("add_per_sample_channel", format!("{xs:?} + {vs:?}")));
        }
        let spatial: usize = xs[2..].iter().product();
        let mut out = self.value(x).clone();
        let vd = self.value(v).data().to_vec();
        for (nc, chunk) in out.data_mut().chunks_mut(spatial.max(1)).enumerate() {
            chunk.iter_mut().for_each(|e| *e += vd[nc]);
        }
        let ng = self.needs(&[x.0, v.0]);
        Ok(self.push(out, Op::AddPerSampleChannel { x: x.0, v: v.0 }, ng))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&e| e * sigmoid(e)).collect();
        let out = Tensor::new(vx.shape(), data).expect("same shape");
        let ng = self.needs(&[x.0]);
        self.push(out, Op::Silu(x.0), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|e| e.tanh()).collect();
        let out = Tensor::new(vx.shape(), data).expect("same shape");
        let ng = self.needs(&[x.0]);
        self.push(out, Op::Tanh(x.0), ng)
    }

    /// Square-kernel 2-D convolution. `w` is `[cout, cin, k, k]`, `b` is `[cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(shape_err("conv2d", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(shape_err("conv2d", format!("kernel {k} larger than padded input {h}x{wd}")));
        }
        let dims = ConvDims::new(cin, h, wd, k, stride, pad);
        let (p, kk) = (dims.positions(), dims.rows());
        // One `kk × P` column block per sample; small blocks stay in cache.
        let mut col = vec![T::zero(); n * kk * p];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = Tensor::zeros(&[n, cout, dims.ho, dims.wo]);
        let od = out.data_mut();
        for s in 0..n {
            let cs = &mut col[s * kk * p..(s + 1) * kk * p];
            im2col(&xv[s * cin * h * wd..(s + 1) * cin * h * wd], dims, cs, p, 0);
            let os = &mut od[s * cout * p..(s + 1) * cout * p];
            T::gemm(cout, kk, p, wv, false, cs, false, os, false);
            for (row, &bias) in os.chunks_mut(p).zip(bv) {
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        let ng = self.needs(&[x.0, w.0, b.0]);
        // The unfolded input is only needed again for the weight gradient.
        let col = if self.nodes[w.0].needs_grad { col } else { Vec::new() };
        Ok(self.push(
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
                col,
            },
            ng,
        ))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("upsample2x", format!("{xs:?}")));
        }
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let mut out = Tensor::zeros(&[xs[0], xs[1], 2 * h, 2 * w]);
        let src = self.value(x).data();
        let dst = out.data_mut();
        for plane in 0..nc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[plane * 4 * h * w + y * 2 * w + xx] = src[plane * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.needs(&[x.0]);
        Ok(self.push(out, Op::Upsample2x(x.0), ng))
    }

    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(shape_err("avg_pool2x", format!("{xs:?}")));
        }
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[xs[0], xs[1], ho, wo]);
        let src = self.value(x).data();
        let dst = out.data_mut();
        let quarter = T::from_f64(0.25);
        for plane in 0..nc {
            let s = &src[plane * h * w..];
            for y in 0..ho {
                for xx in 0..wo {
                    let sum = s[2 * y * w + 2 * xx]
                        + s[2 * y * w + 2 * xx + 1]
                        + s[(2 * y + 1) * w + 2 * xx]
                        + s[(2 * y + 1) * w + 2 * xx + 1];
                    dst[plane * ho * wo + y * wo + xx] = sum * quarter;
                }
            }
        }
        let ng = self.needs(&[x.0]);
        Ok(self.push(out, Op::AvgPool2x(x.0), ng))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() < 2 || as_.len() != bs.len() || as_[0] != bs[0] || as_[2..] != bs[2..] {
            return Err(shape_err("concat_channels", format!("{as_:?} ++ {bs:?}")));
        }
        let spatial: usize = as_[2..].iter().product();
        let (ca, cb) = (as_[1] * spatial, bs[1] * spatial);
        let mut shape = as_.clone();
        shape[1] += bs[1];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for s in 0..as_[0] {
            data.extend_from_slice(&va[s * ca..(s + 1) * ca]);
            data.extend_from_slice(&vb[s * cb..(s + 1) * cb]);
        }
        let out = Tensor::new(&shape, data)?;
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::ConcatChannels(a.0, b.0), ng))
    }

    /// `x · wᵀ + b` over the last axis. `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let fan_in = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[1] != fan_in {
            return Err(shape_err("linear", format!("x {xs:?}, w {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("linear", format!("bias {:?}", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / fan_in.max(1);
        let fan_out = ws[0];
        let mut shape = xs.clone();
        *shape.last_mut().expect("non-empty") = fan_out;
        let mut out = Tensor::zeros(&shape);
        if let Some(b) = b {
            let bv = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(fan_out) {
                row.copy_from_slice(&bv);
            }
        }
        T::gemm(rows, fan_in, fan_out, self.value(x).data(), false, self.value(w).data(), true, out.data_mut(), true);
        let mut ids = vec![x.0, w.0];
        ids.extend(b.map(|v| v.0));
        let ng = self.needs(&ids);
        Ok(self.push(
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
            },
            ng,
        ))
    }

    /// Batched `a · b` (or `a · bᵀ` when `trans_b`): `a` is `[B, M, K]`,
    /// `b` is `[B, K, N]` (or `[B, N, K]`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = as_.len() == 3
            && bs.len() == 3
            && as_[0] == bs[0]
            && if trans_b { bs[2] == as_[2] } else { bs[1] == as_[2] };
        if !ok {
            return Err(shape_err("batch_matmul", format!("{as_:?} x {bs:?} (trans_b={trans_b})")));
        }
        let (batch, m, k) = (as_[0], as_[1], as_[2]);
        let n = if trans_b { bs[1] } else { bs[2] };
        let mut out = Tensor::zeros(&[batch, m, n]);
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            let od = out.data_mut();
            for s in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &va[s * m * k..(s + 1) * m * k],
                    false,
                    &vb[s * k * n..(s + 1) * k * n],
                    trans_b,
                    &mut od[s * m * n..(s + 1) * m * n],
                    false,
                );
            }
        }
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(
            out,
            Op::BatchMatmul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            ng,
        ))
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = *vx.shape().last().unwrap_or(&1);
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / sum);
        }
        let ng = self.needs(&[x.0]);
        self.push(out, Op::SoftmaxLast(x.0), ng)
    }

    /// `[N, C, H, W] -> [N, H·W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("to_tokens", format!("{xs:?}")));
        }
        let (n, c, p) = (xs[0], xs[1], xs[2] * xs[3]);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); n * c * p];
        for s in 0..n {
            for ch in 0..c {
                for pos in 0..p {
                    data[(s * p + pos) * c + ch] = src[(s * c + ch) * p + pos];
                }
            }
        }
        let out = Tensor::new(&[n, p, c], data)?;
        let ng = self.needs(&[x.0]);
        Ok(self.push(out, Op::ToTokens(x.0), ng))
    }

    /// `[N, H·W, C] -> [N, C, H, W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != h * w {
            return Err(shape_err("from_tokens", format!("{xs:?} into {h}x{w}")));
        }
        let (n, p, c) = (xs[0], xs[1], xs[2]);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); n * c * p];
        for s in 0..n {
            for pos in 0..p {
                for ch in 0..c {
                    data[(s * c + ch) * p + pos] = src[(s * p + pos) * c + ch];
                }
            }
        }
        let out = Tensor::new(&[n, c, h, w], data)?;
        let ng = self.needs(&[x.0]);
        Ok(self.push(out, Op::FromTokens(x.0), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let ng = self.needs(&[x.0]);
        Ok(self.push(out, Op::Reshape(x.0), ng))
    }

    /// Mean over the middle axis: `[N, M, D] -> [N, D]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] == 0 {
            return Err(shape_err("mean_rows", format!("{xs:?}")));
        }
        let (n, m, d) = (xs[0], xs[1], xs[2]);
        let src = self.value(x).data();
        let inv = T::one() / T::from_f64(m as f64);
        let mut data = vec![T::zero(); n * d];
        for s in 0..n {
            for r in 0..m {
                for c in 0..d {
                    data[s * d + c] += src[(s * m + r) * d + c];
                }
            }
        }
        data.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::new(&[n, d], data)?;
        let ng = self.needs(&[x.0]);
        Ok(self.push(out, Op::MeanRows(x.0), ng))
    }

    /// Mean squared error against a constant target, averaged over elements.
    pub fn mse(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        let vp = self.value(pred);
        if vp.shape() != target.shape() {
            return Err(shape_err("mse", format!("{:?} vs {:?}", vp.shape(), target.shape())));
        }
        let sum: T = vp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let loss = sum / T::from_f64(vp.numel() as f64);
        let ng = self.needs(&[pred.0]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred: pred.0, target }, ng))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let xs = self.shape(logits).to_vec();
        if xs.len() != 2 || xs[0] != labels.len() || labels.iter().any(|&l| l >= xs[1]) {
            return Err(shape_err("cross_entropy", format!("logits {xs:?}, {} labels", labels.len())));
        }
        let k = xs[1];
        let mut probs = self.value(logits).clone();
        let mut total = T::zero();
        for (row, &label) in probs.data_mut().chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / sum);
            total -= row[label].max(T::min_positive_value()).ln();
        }
        let loss = total / T::from_f64(labels.len() as f64);
        let ng = self.needs(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |i: usize| &self.nodes[i].value;
        let wants = |i: usize| self.nodes[i].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g.clone());
                }
                if wants(*b) {
                    accumulate(&mut grads[*b], g.clone());
                }
            }
            Op::Scale(x, factor) => {
                let mut d = g.clone();
                d.scale(T::from_f64(*factor));
                accumulate(&mut grads[*x], d);
            }
            Op::AddPerSampleChannel { x, v } => {
                if wants(*x) {
                    accumulate(&mut grads[*x], g.clone());
                }
                if wants(*v) {
                    let vs = val(*v).shape();
                    let spatial = g.numel() / (vs[0] * vs[1]).max(1);
                    let data = g.data().chunks(spatial.max(1)).map(|c| c.iter().copied().sum()).collect();
                    accumulate(&mut grads[*v], Tensor::new(vs, data).expect("shape"));
                }
            }
            Op::Silu(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gy, &xv)| {
                        let s = sigmoid(xv);
                        gy * s * (T::one() + xv * (T::one() - s))
                    })
                    .collect();
                accumulate(&mut grads[*x], Tensor::new(g.shape(), data).expect("shape"));
            }
            Op::Tanh(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gy, &y)| gy * (T::one() - y * y))
                    .collect();
                accumulate(&mut grads[*x], Tensor::new(g.shape(), data).expect("shape"));
            }
            Op::Conv2d { x, w, b, stride, pad, col } => {
                let xs = val(*x).shape();
                let ws = val(*w).shape();
                let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, k) = (ws[0], ws[2]);
                let dims = ConvDims::new(cin, h, wd, k, *stride, *pad);
                let (p, kk) = (dims.positions(), dims.rows());
                let gd = g.data();
                if wants(*b) {
                    let mut db = vec![T::zero(); cout];
                    for (r, row) in gd.chunks(p).enumerate() {
                        db[r % cout] += row.iter().copied().sum::<T>();
                    }
                    accumulate(&mut grads[*b], Tensor::new(&[cout], db).expect("shape"));
                }
                if wants(*w) {
                    // gemm is much faster on untransposed operands, so each
                    // column block is transposed explicitly first.
                    let mut dw = Tensor::zeros(ws);
                    let mut col_t = vec![T::zero(); p * kk];
                    for s in 0..n {
                        transpose(&col[s * kk * p..(s + 1) * kk * p], kk, p, &mut col_t);
                        let gs = &gd[s * cout * p..(s + 1) * cout * p];
                        T::gemm(cout, p, kk, gs, false, &col_t, false, dw.data_mut(), true);
                    }
                    accumulate(&mut grads[*w], dw);
                }
                if wants(*x) {
                    let mut dcol = vec![T::zero(); kk * p];
                    let mut dx = Tensor::zeros(xs);
                    for s in 0..n {
                        let gs = &gd[s * cout * p..(s + 1) * cout * p];
                        T::gemm(kk, cout, p, val(*w).data(), true, gs, false, &mut dcol, false);
                        let dst = &mut dx.data_mut()[s * cin * h * wd..(s + 1) * cin * h * wd];
                        col2im(&dcol, dims, p, 0, dst);
                    }
                    accumulate(&mut grads[*x], dx);
                }
            }
            Op::Upsample2x(x) => {
                let xs = val(*x).shape();
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let mut dx = Tensor::zeros(xs);
                let dd = dx.data_mut();
                for plane in 0..nc {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dd[plane * h * w + (y / 2) * w + xx / 2] += g.data()[plane * 4 * h * w + y * 2 * w + xx];
                        }
                    }
                }
                accumulate(&mut grads[*x], dx);
            }
            Op::AvgPool2x(x) => {
                let xs = val(*x).shape();
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::from_f64(0.25);
                let mut dx = Tensor::zeros(xs);
                let dd = dx.data_mut();
                for plane in 0..nc {
                    for y in 0..h {
                        for xx in 0..w {
                            dd[plane * h * w + y * w + xx] = g.data()[plane * ho * wo + (y / 2) * wo + xx / 2] * quarter;
                        }
                    }
                }
                accumulate(&mut grads[*x], dx);
            }
            Op::ConcatChannels(a, b) => {
                let (as_, bs) = (val(*a).shape(), val(*b).shape());
                let spatial: usize = as_[2..].iter().product();
                let (ca, cb) = (as_[1] * spatial, bs[1] * spatial);
                let mut da = Vec::with_capacity(as_[0] * ca);
                let mut dbv = Vec::with_capacity(bs[0] * cb);
                for chunk in g.data().chunks(ca + cb) {
                    da.extend_from_slice(&chunk[..ca]);
                    dbv.extend_from_slice(&chunk[ca..]);
                }
                if wants(*a) {
                    accumulate(&mut grads[*a], Tensor::new(as_, da).expect("shape"));
                }
                if wants(*b) {
                    accumulate(&mut grads[*b], Tensor::new(bs, dbv).expect("shape"));
                }
            }
            Op::Linear { x, w, b } => {
                let ws = val(*w).shape();
                let (fan_out, fan_in) = (ws[0], ws[1]);
                let rows = g.numel() / fan_out.max(1);
                if wants(*x) {
                    let mut dx = Tensor::zeros(val(*x).shape());
                    T::gemm(rows, fan_out, fan_in, g.data(), false, val(*w).data(), false, dx.data_mut(), false);
                    accumulate(&mut grads[*x], dx);
                }
                if wants(*w) {
                    let mut dw = Tensor::zeros(ws);
                    T::gemm(fan_out, rows, fan_in, g.data(), true, val(*x).data(), false, dw.data_mut(), false);
                    accumulate(&mut grads[*w], dw);
                }
                if let Some(b) = b.filter(|&b| wants(b)) {
                    let mut db = Tensor::zeros(&[fan_out]);
                    for row in g.data().chunks(fan_out) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[b], db);
                }
            }
            Op::BatchMatmul { a, b, trans_b } => {
                let (as_, bs) = (val(*a).shape(), val(*b).shape());
                let (batch, m, k) = (as_[0], as_[1], as_[2]);
                let n = if *trans_b { bs[1] } else { bs[2] };
                let (va, vb) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let mut da = Tensor::zeros(as_);
                    for s in 0..batch {
                        let go = &g.data()[s * m * n..(s + 1) * m * n];
                        let bb = &vb[s * k * n..(s + 1) * k * n];
                        // da = go · bᵀ where b is logically k × n.
                        T::gemm(m, n, k, go, false, bb, !*trans_b, &mut da.data_mut()[s * m * k..(s + 1) * m * k], false);
                    }
                    accumulate(&mut grads[*a], da);
                }
                if wants(*b) {
                    let mut db = Tensor::zeros(bs);
                    for s in 0..batch {
                        let go = &g.data()[s * m * n..(s + 1) * m * n];
                        let aa = &va[s * m * k..(s + 1) * m * k];
                        let dst = &mut db.data_mut()[s * k * n..(s + 1) * k * n];
                        if *trans_b {
                            T::gemm(n, m, k, go, true, aa, false, dst, false);
                        } else {
                            T::gemm(k, m, n, aa, true, go, false, dst, false);
                        }
                    }
                    accumulate(&mut grads[*b], db);
                }
            }
            Op::SoftmaxLast(x) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                let mut dx = g.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(node.value.data().chunks(n)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (d, &y) in drow.iter_mut().zip(yrow) {
                        *d = y * (*d - dot);
                    }
                }
                accumulate(&mut grads[*x], dx);
            }
            Op::ToTokens(x) => {
                let xs = val(*x).shape();
                let (n, c, p) = (xs[0], xs[1], xs[2] * xs[3]);
                let mut dx = Tensor::zeros(xs);
                for s in 0..n {
                    for ch in 0..c {
                        for pos in 0..p {
                            dx.data_mut()[(s * c + ch) * p + pos] = g.data()[(s * p + pos) * c + ch];
                        }
                    }
                }
                accumulate(&mut grads[*x], dx);
            }
            Op::FromTokens(x) => {
                let xs = val(*x).shape();
                let (n, p, c) = (xs[0], xs[1], xs[2]);
                let mut dx = Tensor::zeros(xs);
                for s in 0..n {
                    for pos in 0..p {
                        for ch in 0..c {
                            dx.data_mut()[(s * p + pos) * c + ch] = g.data()[(s * c + ch) * p + pos];
                        }
                    }
                }
                accumulate(&mut grads[*x], dx);
            }
            Op::Reshape(x) => {
                let dx = g.clone().reshaped(val(*x).shape()).expect("same numel");
                accumulate(&mut grads[*x], dx);
            }
            Op::MeanRows(x) => {
                let xs = val(*x).shape();
                let (n, m, d) = (xs[0], xs[1], xs[2]);
                let inv = T::one() / T::from_f64(m as f64);
                let mut dx = Tensor::zeros(xs);
                for s in 0..n {
                    for r in 0..m {
                        for c in 0..d {
                            dx.data_mut()[(s * m + r) * d + c] = g.data()[s * d + c] * inv;
                        }
                    }
                }
                accumulate(&mut grads[*x], dx);
            }
            Op::Mse { pred, target } => {
                let vp = val(*pred);
                let coef = g.item() * T::from_f64(2.0 / vp.numel() as f64);
                let data = vp.data().iter().zip(target.data()).map(|(&p, &t)| coef * (p - t)).collect();
                accumulate(&mut grads[*pred], Tensor::new(vp.shape(), data).expect("shape"));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = probs.shape()[1];
                let coef = g.item() / T::from_f64(labels.len() as f64);
                let mut dx = probs.clone();
                for (row, &label) in dx.data_mut().chunks_mut(k).zip(labels) {
                    row[label] -= T::one();
                    row.iter_mut().for_each(|v| *v *= coef);
                }
                accumulate(&mut grads[*logits], dx);
            }
        }
    }
}
