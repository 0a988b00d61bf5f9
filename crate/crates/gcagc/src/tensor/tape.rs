//! Wengert tape: forward ops are recorded in topological order and replayed
//! in reverse for gradients. One tape = one forward/backward episode; the
//! trainer builds a fresh tape per step, which is also what resets gradients.
//!
//! Backward accumulates additively: calling `backward` twice without a reset
//! doubles the gradients of every parameter.

use super::{axis_split, gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Inputs to `log` are clamped to [LOG_CLAMP_LO, LOG_CLAMP_HI]; the op only
/// ever sees probabilities, and the clamp keeps cross-entropy finite.
pub const LOG_CLAMP_LO: f64 = 1e-7;
pub const LOG_CLAMP_HI: f64 = 1.0 - 1e-7;

#[derive(Debug)]
enum OpKind {
    Leaf,
    Matmul { a: Var, b: Var },
    /// c = a · bᵀ with b stored n×k; evaluated in row blocks of `a`.
    MatmulNT { a: Var, b: Var },
    /// c = aᵀ · b with a stored k×m.
    MatmulTN { a: Var, b: Var },
    Conv2d { x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, stride: usize, pad: usize },
    Relu { x: Var },
    Sigmoid { x: Var },
    LogClamped { x: Var },
    Sqrt { x: Var },
    Rsqrt { x: Var },
    SoftmaxAxis { x: Var, axis: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ScalarMul { x: Var, c: f64 },
    ScalarAdd { x: Var },
    AddIdentity { x: Var },
    ConcatAxis { inputs: Vec<Var>, axis: usize },
    SliceAxis { x: Var, axis: usize, start: usize, len: usize },
    ReduceSum { x: Var },
    ReduceMean { x: Var },
    ReduceSumAxis { x: Var, axis: usize },
    ReduceMeanAxis { x: Var, axis: usize },
    Reshape { x: Var },
    MaxPool2x2 { x: Var, argmax: Vec<u32> },
    ResizeNearest { x: Var },
    /// N×C×H×W -> (N·H·W)×C with node index n·H·W + i·W + j.
    ToNodeMatrix { x: Var },
    /// Inverse of ToNodeMatrix.
    FromNodeMatrix { x: Var },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: OpKind,
}

pub struct Tape {
    nodes: Vec<Node>,
    /// Row-block size for the blockwise a·bᵀ product.
    block_rows: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), block_rows: 256 }
    }

    pub fn with_block_rows(block_rows: usize) -> Self {
        assert!(block_rows >= 1);
        Tape { nodes: Vec::new(), block_rows }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: OpKind) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        self.nodes.push(Node { shape, data, requires_grad, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf with gradient tracking (model parameter).
    pub fn param(&mut self, t: Tensor) -> Var {
        let Tensor { shape, data } = t;
        self.push(shape, data, true, OpKind::Leaf)
    }

    /// Leaf without gradient tracking (input data, detached values).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let Tensor { shape, data } = t;
        self.push(shape, data, false, OpKind::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
    }

    /// Accumulated gradient, if any backward pass reached this node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.numel(v), 1);
        self.nodes[v.0].data[0]
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// Standard matrix product a[m×k] · b[k×n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.data(a), self.data(b), 0.0, &mut out);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], out, req, OpKind::Matmul { a, b }))
    }

    /// a[m×k] · b[n×k]ᵀ, evaluated in row blocks of `a` so the only full-size
    /// allocation is the m×n result itself.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul_nt")?;
        let (n, k2) = self.mat_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(self.dim_err("matmul_nt", a, b));
        }
        let mut out = vec![0.0; m * n];
        let block = self.block_rows;
        {
            let ad = self.data(a);
            let bd = self.data(b);
            let mut row = 0;
            while row < m {
                let rows = block.min(m - row);
                gemm_nt(rows, k, n, &ad[row * k..(row + rows) * k], bd, 0.0, &mut out[row * n..(row + rows) * n]);
                row += rows;
            }
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], out, req, OpKind::MatmulNT { a, b }))
    }

    /// a[k×m]ᵀ · b[k×n].
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (k, m) = self.mat_dims(a, "matmul_tn")?;
        let (k2, n) = self.mat_dims(b, "matmul_tn")?;
        if k != k2 {
            return Err(self.dim_err("matmul_tn", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm_tn(m, k, n, self.data(a), self.data(b), 0.0, &mut out);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], out, req, OpKind::MatmulTN { a, b }))
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::DimMismatch { op, lhs: s.to_vec(), rhs: vec![] });
        }
        Ok((s[0], s[1]))
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::DimMismatch { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() }
    }

    // ── Convolutions ────────────────────────────────────────────────

    /// Cross-correlation with zero padding. x: N×C×H×W, w: F×C×kh×kw,
    /// optional bias: [F].
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(self.dim_err("conv2d", x, w));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(self.dim_err("conv2d bias", b, w));
            }
        }
        let (nb, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, wo) = conv_out_dims(h, wd, kh, kw, stride, pad)?;

        let ckk = c * kh * kw;
        let p = ho * wo;
        let mut cols = vec![0.0; ckk * p];
        let mut out = vec![0.0; nb * f * p];
        {
            let xd = self.data(x);
            let wd_ = self.data(w);
            for n in 0..nb {
                im2col(&xd[n * c * h * wd..(n + 1) * c * h * wd], c, h, wd, kh, kw, stride, pad, ho, wo, &mut cols);
                gemm_nn(f, ckk, p, wd_, &cols, 0.0, &mut out[n * f * p..(n + 1) * f * p]);
            }
            if let Some(b) = bias {
                let bd = self.data(b).to_vec();
                for n in 0..nb {
                    for fi in 0..f {
                        let base = (n * f + fi) * p;
                        let bv = bd[fi];
                        for o in &mut out[base..base + p] {
                            *o += bv;
                        }
                    }
                }
            }
        }
        let req = self.requires(x) || self.requires(w) || bias.is_some_and(|b| self.requires(b));
        Ok(self.push(vec![nb, f, ho, wo], out, req, OpKind::Conv2d { x, w, bias, stride, pad }))
    }

    /// Transposed convolution: the adjoint of `conv2d` in its input argument.
    /// x: N×F×H×W, w: F×C×kh×kw; output N×C×Ho×Wo with
    /// Ho = (H−1)·stride − 2·pad + kh.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] {
            return Err(self.dim_err("conv_transpose2d", x, w));
        }
        if stride < 1 {
            return Err(Error::config("conv_transpose2d stride must be >= 1"));
        }
        let (nb, f, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c, kh, kw) = (ws[1], ws[2], ws[3]);
        let ho = (h - 1) * stride + kh;
        let wo = (wd - 1) * stride + kw;
        if ho <= 2 * pad || wo <= 2 * pad {
            return Err(Error::config(format!(
                "conv_transpose2d output {ho}x{wo} smaller than padding {pad}"
            )));
        }
        let (ho, wo) = (ho - 2 * pad, wo - 2 * pad);

        let ckk = c * kh * kw;
        let p = h * wd;
        let mut gcols = vec![0.0; ckk * p];
        let mut out = vec![0.0; nb * c * ho * wo];
        {
            let xd = self.data(x);
            let wdat = self.data(w);
            for n in 0..nb {
                gemm_tn(ckk, f, p, wdat, &xd[n * f * p..(n + 1) * f * p], 0.0, &mut gcols);
                col2im_add(&gcols, c, ho, wo, kh, kw, stride, pad, h, wd, &mut out[n * c * ho * wo..(n + 1) * c * ho * wo]);
            }
        }
        let req = self.requires(x) || self.requires(w);
        Ok(self.push(vec![nb, c, ho, wo], out, req, OpKind::ConvTranspose2d { x, w, stride, pad }))
    }

    /// 2×2 max pooling with stride 2; ties resolve to the first maximum in
    /// scan order, so results are deterministic.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::DimMismatch { op: "maxpool2x2", lhs: xs, rhs: vec![] });
        }
        let (nb, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(format!("maxpool2x2 needs even extents, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; nb * c * ho * wo];
        let mut argmax = vec![0u32; nb * c * ho * wo];
        {
            let xd = self.data(x);
            for nc in 0..nb * c {
                let in_base = nc * h * w;
                let out_base = nc * ho * wo;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let i0 = in_base + (2 * oy) * w + 2 * ox;
                        let cands = [i0, i0 + 1, i0 + w, i0 + w + 1];
                        let mut best = cands[0];
                        for &cc in &cands[1..] {
                            if xd[cc] > xd[best] {
                                best = cc;
                            }
                        }
                        out[out_base + oy * wo + ox] = xd[best];
                        argmax[out_base + oy * wo + ox] = best as u32;
                    }
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(vec![nb, c, ho, wo], out, req, OpKind::MaxPool2x2 { x, argmax }))
    }

    /// Nearest-neighbour resize of the spatial axes of an N×C×H×W tensor.
    /// Source pixel of output (oy, ox) is (⌊oy·H/Ho⌋, ⌊ox·W/Wo⌋).
    pub fn resize_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::DimMismatch { op: "resize_nearest", lhs: xs, rhs: vec![] });
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::config("resize_nearest target must be positive"));
        }
        let (nb, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mut out = vec![0.0; nb * c * out_h * out_w];
        {
            let xd = self.data(x);
            for nc in 0..nb * c {
                let ib = nc * h * w;
                let ob = nc * out_h * out_w;
                for oy in 0..out_h {
                    let iy = oy * h / out_h;
                    for ox in 0..out_w {
                        let ix = ox * w / out_w;
                        out[ob + oy * out_w + ox] = xd[ib + iy * w + ix];
                    }
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(vec![nb, c, out_h, out_w], out, req, OpKind::ResizeNearest { x }))
    }

    /// Doubling upsample, the FPN top-down path primitive.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::DimMismatch { op: "upsample_nearest2", lhs: s, rhs: vec![] });
        }
        self.resize_nearest(x, 2 * s[2], 2 * s[3])
    }

    // ── Pointwise ───────────────────────────────────────────────────

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push(shape, data, req, OpKind::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push(shape, data, req, OpKind::Sigmoid { x })
    }

    /// ln(clamp(x, 1e-7, 1−1e-7)); gradient is zero in the clamped regions.
    pub fn log_clamped(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| v.clamp(LOG_CLAMP_LO, LOG_CLAMP_HI).ln())
            .collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push(shape, data, req, OpKind::LogClamped { x })
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v.sqrt()).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push(shape, data, req, OpKind::Sqrt { x })
    }

    pub fn rsqrt(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|&v| 1.0 / v.sqrt()).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push(shape, data, req, OpKind::Rsqrt { x })
    }

    /// Max-subtracted softmax along `axis`; output sums to 1 along the axis.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::config(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut data = self.data(x).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for a in 0..len {
                    mx = mx.max(data[base + a * inner]);
                }
                let mut sum = 0.0;
                for a in 0..len {
                    let e = (data[base + a * inner] - mx).exp();
                    data[base + a * inner] = e;
                    sum += e;
                }
                for a in 0..len {
                    data[base + a * inner] /= sum;
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(shape, data, req, OpKind::SoftmaxAxis { x, axis }))
    }

    // ── Elementwise / scalar ────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(shape, data, req, OpKind::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(shape, data, req, OpKind::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(shape, data, req, OpKind::Mul { a, b }))
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|&v| c * v).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push(shape, data, req, OpKind::ScalarMul { x, c })
    }

    pub fn scalar_add(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|&v| c + v).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push(shape, data, req, OpKind::ScalarAdd { x })
    }

    /// x + I for a square matrix.
    pub fn add_identity(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::DimMismatch { op: "add_identity", lhs: s, rhs: vec![] });
        }
        let n = s[0];
        let mut data = self.data(x).to_vec();
        for i in 0..n {
            data[i * n + i] += 1.0;
        }
        let req = self.requires(x);
        Ok(self.push(s, data, req, OpKind::AddIdentity { x }))
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err(op, a, b));
        }
        Ok(())
    }

    // ── Shape manipulation ──────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.numel(x) {
            return Err(Error::DimMismatch { op: "reshape", lhs: self.shape(x).to_vec(), rhs: shape });
        }
        let data = self.data(x).to_vec();
        let req = self.requires(x);
        Ok(self.push(shape, data, req, OpKind::Reshape { x }))
    }

    pub fn concat_axis(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::config("concat_axis needs at least one input"));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::config(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().zip(first.iter()).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(self.dim_err("concat_axis", inputs[0], v));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = vec![0.0; outer * total * inner];
        for o in 0..outer {
            let mut at = 0;
            for &v in inputs {
                let len = self.shape(v)[axis];
                let src = self.data(v);
                let src_base = o * len * inner;
                let dst_base = (o * total + at) * inner;
                data[dst_base..dst_base + len * inner]
                    .copy_from_slice(&src[src_base..src_base + len * inner]);
                at += len;
            }
        }
        let req = inputs.iter().any(|&v| self.requires(v));
        Ok(self.push(out_shape, data, req, OpKind::ConcatAxis { inputs: inputs.to_vec(), axis }))
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::config(format!(
                "slice [{start}, {start}+{len}) on axis {axis} invalid for {shape:?}"
            )));
        }
        let (outer, total, inner) = axis_split(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        let src = self.data(x);
        for o in 0..outer {
            let src_base = (o * total + start) * inner;
            let dst_base = o * len * inner;
            data[dst_base..dst_base + len * inner].copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let req = self.requires(x);
        Ok(self.push(out_shape, data, req, OpKind::SliceAxis { x, axis, start, len }))
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn reduce_sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let req = self.requires(x);
        self.push(vec![1], vec![s], req, OpKind::ReduceSum { x })
    }

    pub fn reduce_mean(&mut self, x: Var) -> Var {
        let n = self.numel(x) as f64;
        let s: f64 = self.data(x).iter().sum();
        let req = self.requires(x);
        self.push(vec![1], vec![s / n], req, OpKind::ReduceMean { x })
    }

    pub fn reduce_sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn reduce_mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::config(format!("reduce axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; outer * inner];
        let src = self.data(x);
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            for v in &mut out {
                *v /= len as f64;
            }
        }
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let req = self.requires(x);
        let op = if mean { OpKind::ReduceMeanAxis { x, axis } } else { OpKind::ReduceSumAxis { x, axis } };
        Ok(self.push(out_shape, out, req, op))
    }

    // ── Node-matrix layout ──────────────────────────────────────────

    /// N×C×H×W feature maps to the (N·H·W)×C node-feature matrix with node
    /// index idx(n, i, j) = n·H·W + i·W + j.
    pub fn to_node_matrix(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::DimMismatch { op: "to_node_matrix", lhs: s, rhs: vec![] });
        }
        let (nb, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![0.0; nb * h * w * c];
        {
            let xd = self.data(x);
            for n in 0..nb {
                for ci in 0..c {
                    let src = (n * c + ci) * h * w;
                    for pix in 0..h * w {
                        out[(n * h * w + pix) * c + ci] = xd[src + pix];
                    }
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(vec![nb * h * w, c], out, req, OpKind::ToNodeMatrix { x }))
    }

    /// Inverse of `to_node_matrix`.
    pub fn from_node_matrix(&mut self, x: Var, nb: usize, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != nb * h * w {
            return Err(Error::DimMismatch { op: "from_node_matrix", lhs: s, rhs: vec![nb * h * w] });
        }
        let c = s[1];
        let mut out = vec![0.0; nb * c * h * w];
        {
            let xd = self.data(x);
            for n in 0..nb {
                for ci in 0..c {
                    let dst = (n * c + ci) * h * w;
                    for pix in 0..h * w {
                        out[dst + pix] = xd[(n * h * w + pix) * c + ci];
                    }
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(vec![nb, c, h, w], out, req, OpKind::FromNodeMatrix { x }))
    }

    /// Sum of the elementwise product; the usual inner product.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.mul(a, b)?;
        Ok(self.reduce_sum(m))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients fold additively into each
    /// node's persistent accumulator.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut up: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        up[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                up[id] = None;
                continue;
            }
            let Some(g) = up[id].take() else { continue };
            backprop_op(&self.nodes, id, &g, &mut up, self.block_rows);
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => {
                    for (a, gi) in acc.iter_mut().zip(g.iter()) {
                        *a += gi;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }
}

fn conv_out_dims(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::config("conv stride must be >= 1"));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::config(format!(
            "kernel {kh}x{kw} exceeds padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    if (h + 2 * pad - kh) % stride != 0 || (w + 2 * pad - kw) % stride != 0 {
        return Err(Error::config(format!(
            "conv output extent not integral: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )));
    }
    Ok(((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1))
}

/// Gather conv patches of one C×H×W image into (C·kh·kw)×(Ho·Wo) columns.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    debug_assert_eq!(cols.len(), c * kh * kw * ho * wo);
    let p = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * p;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = row + oy * wo;
                    if iy < 0 || iy >= h as isize {
                        cols[dst..dst + wo].fill(0.0);
                        continue;
                    }
                    let src = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        cols[dst + ox] = if ix < 0 || ix >= w as isize { 0.0 } else { x[src + ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add adjoint of `im2col`.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [f64],
) {
    debug_assert_eq!(cols.len(), c * kh * kw * ho * wo);
    debug_assert_eq!(x.len(), c * h * w);
    let p = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * p;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (ci * h + iy as usize) * w;
                    let src = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[dst + ix as usize] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
}

fn get_or_zero(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

fn add_into(slot: &mut Option<Vec<f64>>, contrib: &[f64]) {
    let acc = get_or_zero(slot, contrib.len());
    for (a, c) in acc.iter_mut().zip(contrib.iter()) {
        *a += c;
    }
}

/// Vector-Jacobian product of one recorded op: distributes the upstream
/// gradient `g` of node `id` into its inputs' slots.
fn backprop_op(nodes: &[Node], id: usize, g: &[f64], up: &mut [Option<Vec<f64>>], block_rows: usize) {
    let _ = block_rows;
    let val = |v: Var| -> &[f64] { &nodes[v.0].data };
    let shp = |v: Var| -> &[usize] { &nodes[v.0].shape };
    let req = |v: Var| -> bool { nodes[v.0].requires_grad };
    let out_data = &nodes[id].data;
    let out_shape = &nodes[id].shape;

    match &nodes[id].op {
        OpKind::Leaf => {}

        OpKind::Matmul { a, b } => {
            let (m, k) = (shp(*a)[0], shp(*a)[1]);
            let n = shp(*b)[1];
            if req(*a) {
                // dA = G · Bᵀ
                let acc = get_or_zero(&mut up[a.0], m * k);
                gemm_nt(m, n, k, g, val(*b), 1.0, acc);
            }
            if req(*b) {
                // dB = Aᵀ · G
                let acc = get_or_zero(&mut up[b.0], k * n);
                gemm_tn(k, m, n, val(*a), g, 1.0, acc);
            }
        }

        OpKind::MatmulNT { a, b } => {
            // C = A · Bᵀ, A: m×k, B: n×k
            let (m, k) = (shp(*a)[0], shp(*a)[1]);
            let n = shp(*b)[0];
            if req(*a) {
                // dA = G · B
                let acc = get_or_zero(&mut up[a.0], m * k);
                gemm_nn(m, n, k, g, val(*b), 1.0, acc);
            }
            if req(*b) {
                // dB = Gᵀ · A
                let acc = get_or_zero(&mut up[b.0], n * k);
                gemm_tn(n, m, k, g, val(*a), 1.0, acc);
            }
        }

        OpKind::MatmulTN { a, b } => {
            // C = Aᵀ · B, A: k×m, B: k×n
            let (k, m) = (shp(*a)[0], shp(*a)[1]);
            let n = shp(*b)[1];
            if req(*a) {
                // dA = B · Gᵀ (k×m)
                let acc = get_or_zero(&mut up[a.0], k * m);
                gemm_nt(k, n, m, val(*b), g, 1.0, acc);
            }
            if req(*b) {
                // dB = A · G (k×n)
                let acc = get_or_zero(&mut up[b.0], k * n);
                gemm_nn(k, m, n, val(*a), g, 1.0, acc);
            }
        }

        OpKind::Conv2d { x, w, bias, stride, pad } => {
            let xs = shp(*x);
            let ws = shp(*w);
            let (nb, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let (f, kh, kw) = (ws[0], ws[2], ws[3]);
            let (ho, wo) = (out_shape[2], out_shape[3]);
            let ckk = c * kh * kw;
            let p = ho * wo;

            if let Some(b) = bias {
                if req(*b) {
                    let acc = get_or_zero(&mut up[b.0], f);
                    for n in 0..nb {
                        for fi in 0..f {
                            let base = (n * f + fi) * p;
                            acc[fi] += g[base..base + p].iter().sum::<f64>();
                        }
                    }
                }
            }
            let need_w = req(*w);
            let need_x = req(*x);
            if need_w || need_x {
                let mut cols = vec![0.0; ckk * p];
                let mut dw = if need_w { vec![0.0; f * ckk] } else { Vec::new() };
                let mut gcols = if need_x { vec![0.0; ckk * p] } else { Vec::new() };
                let mut dx = if need_x { vec![0.0; nb * c * h * wd] } else { Vec::new() };
                for n in 0..nb {
                    let gy = &g[n * f * p..(n + 1) * f * p];
                    if need_w {
                        im2col(&val(*x)[n * c * h * wd..(n + 1) * c * h * wd], c, h, wd, kh, kw, *stride, *pad, ho, wo, &mut cols);
                        gemm_nt(f, p, ckk, gy, &cols, 1.0, &mut dw);
                    }
                    if need_x {
                        gemm_tn(ckk, f, p, val(*w), gy, 0.0, &mut gcols);
                        col2im_add(&gcols, c, h, wd, kh, kw, *stride, *pad, ho, wo, &mut dx[n * c * h * wd..(n + 1) * c * h * wd]);
                    }
                }
                if need_w {
                    add_into(&mut up[w.0], &dw);
                }
                if need_x {
                    add_into(&mut up[x.0], &dx);
                }
            }
        }

        OpKind::ConvTranspose2d { x, w, stride, pad } => {
            let xs = shp(*x);
            let ws = shp(*w);
            let (nb, f, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let (c, kh, kw) = (ws[1], ws[2], ws[3]);
            let (ho, wo) = (out_shape[2], out_shape[3]);
            let ckk = c * kh * kw;
            let p = h * wd;
            let need_w = req(*w);
            let need_x = req(*x);
            if need_w || need_x {
                // Patches of the upstream gradient under the matching conv geometry.
                let mut cols = vec![0.0; ckk * p];
                let mut dw = if need_w { vec![0.0; f * ckk] } else { Vec::new() };
                let mut dx = if need_x { vec![0.0; nb * f * p] } else { Vec::new() };
                for n in 0..nb {
                    im2col(&g[n * c * ho * wo..(n + 1) * c * ho * wo], c, ho, wo, kh, kw, *stride, *pad, h, wd, &mut cols);
                    if need_x {
                        // dX = W · im2col(G): forward pass of the matching conv.
                        gemm_nn(f, ckk, p, val(*w), &cols, 0.0, &mut dx[n * f * p..(n + 1) * f * p]);
                    }
                    if need_w {
                        // dW = X · im2col(G)ᵀ, the weight rule of the matching conv
                        // with the roles of input and gradient exchanged.
                        gemm_nt(f, p, ckk, &val(*x)[n * f * p..(n + 1) * f * p], &cols, 1.0, &mut dw);
                    }
                }
                if need_w {
                    add_into(&mut up[w.0], &dw);
                }
                if need_x {
                    add_into(&mut up[x.0], &dx);
                }
            }
        }

        OpKind::Relu { x } => {
            let xd = val(*x);
            let acc = get_or_zero(&mut up[x.0], xd.len());
            for i in 0..xd.len() {
                if xd[i] > 0.0 {
                    acc[i] += g[i];
                }
            }
        }

        OpKind::Sigmoid { x } => {
            let acc = get_or_zero(&mut up[x.0], out_data.len());
            for i in 0..out_data.len() {
                let y = out_data[i];
                acc[i] += g[i] * y * (1.0 - y);
            }
        }

        OpKind::LogClamped { x } => {
            let xd = val(*x);
            let acc = get_or_zero(&mut up[x.0], xd.len());
            for i in 0..xd.len() {
                if xd[i] > LOG_CLAMP_LO && xd[i] < LOG_CLAMP_HI {
                    acc[i] += g[i] / xd[i];
                }
            }
        }

        OpKind::Sqrt { x } => {
            let acc = get_or_zero(&mut up[x.0], out_data.len());
            for i in 0..out_data.len() {
                acc[i] += g[i] * 0.5 / out_data[i];
            }
        }

        OpKind::Rsqrt { x } => {
            let acc = get_or_zero(&mut up[x.0], out_data.len());
            for i in 0..out_data.len() {
                let y = out_data[i];
                acc[i] += g[i] * (-0.5) * y * y * y;
            }
        }

        OpKind::SoftmaxAxis { x, axis } => {
            let (outer, len, inner) = axis_split(out_shape, *axis);
            let acc = get_or_zero(&mut up[x.0], out_data.len());
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = 0.0;
                    for a in 0..len {
                        let idx = base + a * inner;
                        dot += g[idx] * out_data[idx];
                    }
                    for a in 0..len {
                        let idx = base + a * inner;
                        acc[idx] += out_data[idx] * (g[idx] - dot);
                    }
                }
            }
        }

        OpKind::Add { a, b } => {
            if req(*a) {
                add_into(&mut up[a.0], g);
            }
            if req(*b) {
                add_into(&mut up[b.0], g);
            }
        }

        OpKind::Sub { a, b } => {
            if req(*a) {
                add_into(&mut up[a.0], g);
            }
            if req(*b) {
                let acc = get_or_zero(&mut up[b.0], g.len());
                for (x, gi) in acc.iter_mut().zip(g.iter()) {
                    *x -= gi;
                }
            }
        }

        OpKind::Mul { a, b } => {
            if req(*a) {
                let bd = val(*b);
                let acc = get_or_zero(&mut up[a.0], g.len());
                for i in 0..g.len() {
                    acc[i] += g[i] * bd[i];
                }
            }
            if req(*b) {
                let ad = val(*a);
                let acc = get_or_zero(&mut up[b.0], g.len());
                for i in 0..g.len() {
                    acc[i] += g[i] * ad[i];
                }
            }
        }

        OpKind::ScalarMul { x, c } => {
            let acc = get_or_zero(&mut up[x.0], g.len());
            for i in 0..g.len() {
                acc[i] += c * g[i];
            }
        }

        OpKind::ScalarAdd { x } | OpKind::AddIdentity { x } | OpKind::Reshape { x } => {
            add_into(&mut up[x.0], g);
        }

        OpKind::ConcatAxis { inputs, axis } => {
            let (outer, total, inner) = axis_split(out_shape, *axis);
            let mut at = 0;
            for &v in inputs {
                let len = shp(v)[*axis];
                if req(v) {
                    let acc = get_or_zero(&mut up[v.0], outer * len * inner);
                    for o in 0..outer {
                        let src = (o * total + at) * inner;
                        let dst = o * len * inner;
                        for i in 0..len * inner {
                            acc[dst + i] += g[src + i];
                        }
                    }
                }
                at += len;
            }
        }

        OpKind::SliceAxis { x, axis, start, len } => {
            let shape = shp(*x);
            let (outer, total, inner) = axis_split(shape, *axis);
            let acc = get_or_zero(&mut up[x.0], outer * total * inner);
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                let src = o * len * inner;
                for i in 0..len * inner {
                    acc[dst + i] += g[src + i];
                }
            }
        }

        OpKind::ReduceSum { x } => {
            let n = nodes[x.0].data.len();
            let acc = get_or_zero(&mut up[x.0], n);
            for v in acc.iter_mut() {
                *v += g[0];
            }
        }

        OpKind::ReduceMean { x } => {
            let n = nodes[x.0].data.len();
            let gi = g[0] / n as f64;
            let acc = get_or_zero(&mut up[x.0], n);
            for v in acc.iter_mut() {
                *v += gi;
            }
        }

        OpKind::ReduceSumAxis { x, axis } | OpKind::ReduceMeanAxis { x, axis } => {
            let shape = shp(*x);
            let (outer, len, inner) = axis_split(shape, *axis);
            let scale = match &nodes[id].op {
                OpKind::ReduceMeanAxis { .. } => 1.0 / len as f64,
                _ => 1.0,
            };
            let acc = get_or_zero(&mut up[x.0], outer * len * inner);
            for o in 0..outer {
                for a in 0..len {
                    let base = (o * len + a) * inner;
                    for i in 0..inner {
                        acc[base + i] += scale * g[o * inner + i];
                    }
                }
            }
        }

        OpKind::MaxPool2x2 { x, argmax } => {
            let n = nodes[x.0].data.len();
            let acc = get_or_zero(&mut up[x.0], n);
            for (i, &src) in argmax.iter().enumerate() {
                acc[src as usize] += g[i];
            }
        }

        OpKind::ResizeNearest { x } => {
            let xs = shp(*x);
            let (nb, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let (oh, ow) = (out_shape[2], out_shape[3]);
            let acc = get_or_zero(&mut up[x.0], nb * c * h * w);
            for nc in 0..nb * c {
                let ib = nc * h * w;
                let ob = nc * oh * ow;
                for oy in 0..oh {
                    let iy = oy * h / oh;
                    for ox in 0..ow {
                        let ix = ox * w / ow;
                        acc[ib + iy * w + ix] += g[ob + oy * ow + ox];
                    }
                }
            }
        }

        OpKind::ToNodeMatrix { x } => {
            let xs = shp(*x);
            let (nb, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let acc = get_or_zero(&mut up[x.0], nb * c * h * w);
            for n in 0..nb {
                for ci in 0..c {
                    let dst = (n * c + ci) * h * w;
                    for pix in 0..h * w {
                        acc[dst + pix] += g[(n * h * w + pix) * c + ci];
                    }
                }
            }
        }

        OpKind::FromNodeMatrix { x } => {
            let (nb, c, h, w) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
            let acc = get_or_zero(&mut up[x.0], nb * h * w * c);
            for n in 0..nb {
                for ci in 0..c {
                    let src = (n * c + ci) * h * w;
                    for pix in 0..h * w {
                        acc[(n * h * w + pix) * c + ci] += g[src + pix];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let eye = t.constant(Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let x = t.constant(Tensor::new(vec![3, 2], (1..=6).map(|v| v as f64).collect()));
        let y = t.matmul(eye, x).unwrap();
        assert_eq!(t.data(y), t.data(x));
    }

    #[test]
    fn matmul_hand_case() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]));
        let b = t.constant(Tensor::new(vec![2, 2], vec![0., 1., 1., 0.]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[2., 1., 4., 3.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![4, 5]));
        match t.matmul(a, b) {
            Err(Error::DimMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 5]);
            }
            other => panic!("expected DimMismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_nt_blockwise_equals_dense() {
        // 40 nodes, block size forced below the row count.
        let mut rng = SplitMix64::new(3);
        let a = Tensor::random_uniform(vec![40, 7], -1.0, 1.0, &mut rng);
        let b = Tensor::random_uniform(vec![40, 7], -1.0, 1.0, &mut rng);

        let mut t1 = Tape::with_block_rows(16);
        let (a1, b1) = (t1.constant(a.clone()), t1.constant(b.clone()));
        let c1 = t1.matmul_nt(a1, b1).unwrap();

        // Dense oracle: naive triple loop.
        let mut dense = vec![0.0; 40 * 40];
        for i in 0..40 {
            for j in 0..40 {
                let mut s = 0.0;
                for p in 0..7 {
                    s += a.data()[i * 7 + p] * b.data()[j * 7 + p];
                }
                dense[i * 40 + j] = s;
            }
        }
        for (x, y) in t1.data(c1).iter().zip(dense.iter()) {
            let rel = (x - y).abs() / y.abs().max(1e-12);
            assert!(rel <= 1e-12, "blockwise {x} vs dense {y}");
        }
    }

    #[test]
    fn backward_sum_gives_ones_and_accumulates() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![2, 3], vec![1., -2., 3., 0.5, 0., 4.]));
        let s = t.reduce_sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
        // Second backward without reset accumulates additively.
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0; 6]);
    }

    #[test]
    fn backward_quadratic_gives_2x() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![4], vec![1., -2., 3., 0.25]));
        let q = t.dot(x, x).unwrap();
        t.backward(q).unwrap();
        let g = t.grad(x).unwrap();
        for (gi, xi) in g.iter().zip([1., -2., 3., 0.25]) {
            assert!(close(*gi, 2.0 * xi, 1e-12));
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(vec![2, 2]));
        let y = t.relu(x);
        match t.backward(y) {
            Err(Error::Usage(_)) => {}
            other => panic!("expected usage error, got {other:?}"),
        }
    }

    #[test]
    fn conv2d_one_by_one_identity() {
        // 1×1 kernel with identity channel mix leaves the input unchanged.
        let mut t = Tape::new();
        let mut rng = SplitMix64::new(5);
        let x = t.constant(Tensor::random_uniform(vec![1, 2, 3, 3], -1.0, 1.0, &mut rng));
        let w = t.constant(Tensor::new(vec![2, 2, 1, 1], vec![1., 0., 0., 1.]));
        let y = t.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(t.data(y), t.data(x));
    }

    #[test]
    fn conv2d_box_kernel_counts_coverage() {
        // All-ones 3×3 kernel over a constant-1 3×3 input with pad 1:
        // centre sees 9 cells, corners see 4.
        let mut t = Tape::new();
        let x = t.constant(Tensor::filled(vec![1, 1, 3, 3], 1.0));
        let w = t.constant(Tensor::filled(vec![1, 1, 3, 3], 1.0));
        let y = t.conv2d(x, w, None, 1, 1).unwrap();
        let v = t.value(y);
        assert_eq!(v.at(&[0, 0, 1, 1]), 9.0);
        assert_eq!(v.at(&[0, 0, 0, 0]), 4.0);
        assert_eq!(v.at(&[0, 0, 0, 2]), 4.0);
        assert_eq!(v.at(&[0, 0, 2, 0]), 4.0);
        assert_eq!(v.at(&[0, 0, 2, 2]), 4.0);
        assert_eq!(v.at(&[0, 0, 0, 1]), 6.0);
    }

    #[test]
    fn conv2d_non_integral_output_is_config_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(vec![1, 1, 5, 5]));
        let w = t.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        match t.conv2d(x, w, None, 2, 0) {
            Err(Error::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn conv_transpose_identity_and_shape() {
        let mut t = Tape::new();
        let mut rng = SplitMix64::new(6);
        let x = t.constant(Tensor::random_uniform(vec![1, 1, 4, 4], -1.0, 1.0, &mut rng));
        let w = t.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]));
        let y = t.conv_transpose2d(x, w, 1, 0).unwrap();
        assert_eq!(t.data(y), t.data(x));

        // Kernel 4, stride 2, pad 1 exactly doubles the resolution.
        let w2 = t.constant(Tensor::zeros(vec![1, 3, 4, 4]));
        let y2 = t.conv_transpose2d(x, w2, 2, 1).unwrap();
        assert_eq!(t.shape(y2), &[1, 3, 8, 8]);
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // ⟨conv2d(x, w), y⟩ == ⟨x, conv_transpose2d(y, w)⟩ to 1e-10.
        let mut rng = SplitMix64::new(9);
        for &(stride, pad, kh) in &[(1usize, 1usize, 3usize), (2, 1, 4), (1, 0, 2)] {
            let mut t = Tape::new();
            let x = Tensor::random_uniform(vec![2, 3, 8, 8], -1.0, 1.0, &mut rng);
            let w = Tensor::random_uniform(vec![4, 3, kh, kh], -1.0, 1.0, &mut rng);
            let xv = t.constant(x);
            let wv = t.constant(w);
            let cx = t.conv2d(xv, wv, None, stride, pad).unwrap();
            let ys = t.shape(cx).to_vec();
            let y = Tensor::random_uniform(ys, -1.0, 1.0, &mut rng);
            let yv = t.constant(y);
            let lhs_v = t.dot(cx, yv).unwrap();
            let ty = t.conv_transpose2d(yv, wv, stride, pad).unwrap();
            assert_eq!(t.shape(ty), t.shape(xv));
            let rhs_v = t.dot(xv, ty).unwrap();
            let (lhs, rhs) = (t.scalar(lhs_v), t.scalar(rhs_v));
            assert!(
                (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0),
                "adjoint identity failed at stride {stride}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn softmax_singleton_and_symmetry() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3, 1], vec![5.0, -2.0, 0.3]));
        let y = t.softmax_axis(x, 1).unwrap();
        assert_eq!(t.data(y), &[1.0, 1.0, 1.0]);

        let z = t.constant(Tensor::new(vec![2], vec![0.0, 0.0]));
        let s = t.softmax_axis(z, 0).unwrap();
        assert_eq!(t.data(s), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = SplitMix64::new(17);
        let mut t = Tape::new();
        let x = t.constant(Tensor::random_uniform(vec![6, 9], -4.0, 4.0, &mut rng));
        let y = t.softmax_axis(x, 1).unwrap();
        let d = t.data(y);
        for r in 0..6 {
            let s: f64 = d[r * 9..(r + 1) * 9].iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
            assert!(d[r * 9..(r + 1) * 9].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let run = || {
            let mut rng = SplitMix64::new(123);
            let mut t = Tape::new();
            let x = t.constant(Tensor::random_uniform(vec![4, 6], -2.0, 2.0, &mut rng));
            let w = t.constant(Tensor::random_uniform(vec![6, 5], -2.0, 2.0, &mut rng));
            let h = t.matmul(x, w).unwrap();
            let s = t.sigmoid(h);
            let y = t.softmax_axis(s, 1).unwrap();
            t.data(y).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "forward must be bit-identical");
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]));
        let b = t.constant(Tensor::new(vec![2, 3], vec![5., 6., 7., 8., 9., 10.]));
        let c = t.concat_axis(&[a, b], 1).unwrap();
        assert_eq!(t.shape(c), &[2, 5]);
        assert_eq!(t.data(c), &[1., 2., 5., 6., 7., 3., 4., 8., 9., 10.]);
        let sa = t.slice_axis(c, 1, 0, 2).unwrap();
        assert_eq!(t.data(sa), t.data(a));
        let sb = t.slice_axis(c, 1, 2, 3).unwrap();
        assert_eq!(t.data(sb), t.data(b));
    }

    #[test]
    fn reduce_axis_and_mean() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]));
        let rows = t.reduce_sum_axis(x, 1).unwrap();
        assert_eq!(t.data(rows), &[6., 15.]);
        let cols = t.reduce_mean_axis(x, 0).unwrap();
        assert_eq!(t.data(cols), &[2.5, 3.5, 4.5]);
        let m = t.reduce_mean(x);
        assert_eq!(t.data(m), &[3.5]);
    }

    #[test]
    fn maxpool_and_resize() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(
            vec![1, 1, 4, 4],
            vec![
                1., 2., 5., 4., //
                3., 0., 1., 1., //
                9., 1., 0., 2., //
                1., 1., 3., 1., //
            ],
        ));
        let p = t.maxpool2x2(x).unwrap();
        assert_eq!(t.data(p), &[3., 5., 9., 3.]);

        let up = t.upsample_nearest2(p).unwrap();
        assert_eq!(t.shape(up), &[1, 1, 4, 4]);
        assert_eq!(t.value(up).at(&[0, 0, 0, 0]), 3.0);
        assert_eq!(t.value(up).at(&[0, 0, 1, 1]), 3.0);
        assert_eq!(t.value(up).at(&[0, 0, 0, 2]), 5.0);

        let down = t.resize_nearest(x, 2, 2).unwrap();
        assert_eq!(t.data(down), &[1., 5., 9., 0.]);
    }

    #[test]
    fn node_matrix_roundtrip_and_convention() {
        let mut rng = SplitMix64::new(8);
        let mut t = Tape::new();
        let x = t.constant(Tensor::random_uniform(vec![2, 3, 4, 5], -1.0, 1.0, &mut rng));
        let m = t.to_node_matrix(x).unwrap();
        assert_eq!(t.shape(m), &[2 * 4 * 5, 3]);
        // Node (n=1, i=2, j=3) row holds x[1, :, 2, 3].
        let xv = t.value(x);
        let mv = t.value(m);
        let node = 1 * 20 + 2 * 5 + 3;
        for c in 0..3 {
            assert_eq!(mv.at(&[node, c]), xv.at(&[1, c, 2, 3]));
        }
        let back = t.from_node_matrix(m, 2, 4, 5).unwrap();
        assert_eq!(t.data(back), t.data(x));
    }

    #[test]
    fn add_identity_and_scalar_ops() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 2], vec![0.5; 4]));
        let y = t.add_identity(x).unwrap();
        assert_eq!(t.data(y), &[1.5, 0.5, 0.5, 1.5]);
        let z = t.scalar_mul(y, 2.0);
        let w = t.scalar_add(z, -1.0);
        assert_eq!(t.data(w), &[2.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn log_is_clamped() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3], vec![-1.0, 0.5, 2.0]));
        let y = t.log_clamped(x);
        let d = t.data(y);
        assert!(close(d[0], LOG_CLAMP_LO.ln(), 1e-15));
        assert!(close(d[1], 0.5f64.ln(), 1e-15));
        assert!(close(d[2], LOG_CLAMP_HI.ln(), 1e-15));
    }
}
