//! Tape-based reverse-mode differentiation over flat `f64` buffers.
//!
//! A [`Tape`] is a single-use computation graph: leaves and op results are
//! appended in execution order, so node indices are already a topological
//! order and [`Tape::backward`] is one reverse sweep. Training code builds a
//! fresh tape every step; long-lived parameters live outside the tape and are
//! re-bound as leaves each time.

use crate::dtype::DType;
use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom, ConvTGeom};

/// Handle to a tensor on a [`Tape`]. Cheap to copy; only valid for the tape
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(u32);

impl TensorId {
    #[inline]
    fn idx(self) -> usize {
        self.0 as usize
    }
}

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Neg(TensorId),
    Abs(TensorId),
    Sqrt(TensorId),
    Recip(TensorId),
    Relu(TensorId),
    LeakyRelu(TensorId, f64),
    Tanh(TensorId),
    Sigmoid(TensorId),
    ClampMin(TensorId, f64),
    AddScalar(TensorId),
    Scale(TensorId, f64),
    MulScalarT(TensorId, TensorId),
    AddChannel(TensorId, TensorId),
    SubChannel(TensorId, TensorId),
    MulChannel(TensorId, TensorId),
    DivChannel(TensorId, TensorId),
    ChannelMean(TensorId),
    ChannelScaleMap {
        scale: TensorId,
        map: Vec<f64>,
        n: usize,
    },
    Conv2d {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        geom: ConvTGeom,
    },
    AvgPool(TensorId, usize),
    MaxPool {
        x: TensorId,
        argmax: Vec<usize>,
    },
    Matmul(TensorId, TensorId),
    Bmm(TensorId, TensorId),
    TransposeLast2(TensorId),
    SwapAxes01(TensorId),
    Reshape(TensorId),
    ConcatChannel(Vec<TensorId>),
    NearestResize(TensorId),
    Softmax {
        x: TensorId,
        axis: usize,
    },
    SumAll(TensorId),
    MeanAll(TensorId),
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Single-step computation graph with reverse-mode differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    dtype: DType,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new(dtype: DType) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        self.dtype.quantize(&mut data);
        debug_assert_eq!(data.len(), numel_of(&shape));
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            op,
        });
        TensorId((self.nodes.len() - 1) as u32)
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.idx()]
    }

    fn rg(&self, id: TensorId) -> bool {
        self.node(id).requires_grad
    }

    // ---- creation ------------------------------------------------------

    /// Append a leaf. `requires_grad` leaves receive gradients in `backward`.
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        if data.len() != numel_of(shape) {
            return Err(TensorError::BadElementCount {
                shape: shape.to_vec(),
                expected: numel_of(shape),
                got: data.len(),
            });
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, Op::Leaf))
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![v], vec![1], false, Op::Leaf)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> TensorId {
        self.push(vec![0.0; numel_of(shape)], shape.to_vec(), false, Op::Leaf)
    }

    /// Copy of `x` cut off from the graph: gradients do not flow past it.
    pub fn detach(&mut self, x: TensorId) -> TensorId {
        let data = self.node(x).data.clone();
        let shape = self.node(x).shape.clone();
        self.push(data, shape, false, Op::Leaf)
    }

    // ---- accessors ------------------------------------------------------

    pub fn data(&self, x: TensorId) -> &[f64] {
        &self.node(x).data
    }

    pub fn shape(&self, x: TensorId) -> &[usize] {
        &self.node(x).shape
    }

    pub fn numel(&self, x: TensorId) -> usize {
        self.node(x).data.len()
    }

    pub fn requires_grad(&self, x: TensorId) -> bool {
        self.rg(x)
    }

    /// Value of a one-element tensor.
    pub fn item(&self, x: TensorId) -> f64 {
        debug_assert_eq!(self.numel(x), 1);
        self.node(x).data[0]
    }

    /// Gradient buffer of `x`, if `backward` has reached it.
    pub fn grad(&self, x: TensorId) -> Option<&[f64]> {
        self.grads.get(x.idx()).and_then(|g| g.as_deref())
    }

    pub fn clear_grads(&mut self) {
        self.grads.clear();
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.node(a).shape != self.node(b).shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let data = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.node(a).shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, shape, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let data = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.node(a).shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, shape, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let data = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.node(a).shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, shape, rg, Op::Mul(a, b)))
    }

    fn unary(&mut self, x: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let data = self.node(x).data.iter().map(|&v| f(v)).collect();
        let shape = self.node(x).shape.clone();
        let rg = self.rg(x);
        self.push(data, shape, rg, op)
    }

    pub fn neg(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn abs(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn sqrt(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    /// Elementwise reciprocal.
    pub fn recip(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f64::recip, Op::Recip(x))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: TensorId, slope: f64) -> TensorId {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn clamp_min(&mut self, x: TensorId, min: f64) -> TensorId {
        self.unary(x, |v| v.max(min), Op::ClampMin(x, min))
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// Multiply by a compile-time constant (not differentiated w.r.t. `c`).
    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    /// Broadcast-multiply by a one-element tensor: `out = x * s[0]`.
    pub fn mul_scalar_t(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if self.numel(s) != 1 {
            return Err(TensorError::contract("mul_scalar_t", "scale must hold one element"));
        }
        let sv = self.node(s).data[0];
        let data = self.node(x).data.iter().map(|&v| v * sv).collect();
        let shape = self.node(x).shape.clone();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(data, shape, rg, Op::MulScalarT(x, s)))
    }

    // ---- per-channel broadcasts (NCHW vs length-C vector) ---------------

    fn nchw(&self, op: &'static str, x: TensorId) -> Result<(usize, usize, usize, usize)> {
        let s = &self.node(x).shape;
        if s.len() != 4 {
            return Err(TensorError::RankMismatch {
                op,
                expected: 4,
                got: s.clone(),
            });
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    fn channel_vec(&self, op: &'static str, v: TensorId, c: usize) -> Result<()> {
        let s = &self.node(v).shape;
        if s.len() != 1 || s[0] != c {
            return Err(TensorError::DimMismatch {
                op,
                axis: "channel",
                expected: c,
                got: if s.len() == 1 { s[0] } else { s.len() },
            });
        }
        Ok(())
    }

    fn channel_bcast(
        &mut self,
        op_name: &'static str,
        x: TensorId,
        v: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(TensorId, TensorId) -> Op,
    ) -> Result<TensorId> {
        let (n, c, h, w) = self.nchw(op_name, x)?;
        self.channel_vec(op_name, v, c)?;
        let plane = h * w;
        let mut data = vec![0.0; n * c * plane];
        for ni in 0..n {
            for ci in 0..c {
                let vv = self.node(v).data[ci];
                let src = &self.node(x).data[(ni * c + ci) * plane..][..plane];
                let dst = &mut data[(ni * c + ci) * plane..][..plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = f(*s, vv);
                }
            }
        }
        let shape = self.node(x).shape.clone();
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(data, shape, rg, op(x, v)))
    }

    /// `out[n,c,h,w] = x[n,c,h,w] + v[c]` (bias-add broadcast)
    pub fn add_channel(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        self.channel_bcast("add_channel", x, v, |a, b| a + b, Op::AddChannel)
    }

    /// `out[n,c,h,w] = x[n,c,h,w] - v[c]`
    pub fn sub_channel(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        self.channel_bcast("sub_channel", x, v, |a, b| a - b, Op::SubChannel)
    }

    /// `out[n,c,h,w] = x[n,c,h,w] * v[c]`
    pub fn mul_channel(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        self.channel_bcast("mul_channel", x, v, |a, b| a * b, Op::MulChannel)
    }

    /// `out[n,c,h,w] = x[n,c,h,w] / v[c]`
    pub fn div_channel(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        self.channel_bcast("div_channel", x, v, |a, b| a / b, Op::DivChannel)
    }

    /// Per-channel mean over batch and spatial axes, accumulated in 64-bit:
    /// `out[c] = mean over (n,h,w) of x[n,c,h,w]`.
    pub fn channel_mean(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.nchw("channel_mean", x)?;
        if n * h * w == 0 {
            return Err(TensorError::contract("channel_mean", "empty tensor"));
        }
        let plane = h * w;
        let denom = (n * plane) as f64;
        let mut data = vec![0.0; c];
        for ci in 0..c {
            let mut acc = 0.0;
            for ni in 0..n {
                let src = &self.node(x).data[(ni * c + ci) * plane..][..plane];
                acc += src.iter().sum::<f64>();
            }
            data[ci] = acc / denom;
        }
        let rg = self.rg(x);
        Ok(self.push(data, vec![c], rg, Op::ChannelMean(x)))
    }

    /// `out[n,c,h,w] = scale[c] * map[h,w]` where `map` is a fixed spatial
    /// field shared across batch and channels.
    pub fn channel_scale_map(
        &mut self,
        scale: TensorId,
        map: &[f64],
        n: usize,
        h: usize,
        w: usize,
    ) -> Result<TensorId> {
        let s = &self.node(scale).shape;
        if s.len() != 1 {
            return Err(TensorError::RankMismatch {
                op: "channel_scale_map",
                expected: 1,
                got: s.clone(),
            });
        }
        let c = s[0];
        if map.len() != h * w {
            return Err(TensorError::contract("channel_scale_map", "map length != h*w"));
        }
        let plane = h * w;
        let mut data = vec![0.0; n * c * plane];
        for ni in 0..n {
            for ci in 0..c {
                let sv = self.node(scale).data[ci];
                let dst = &mut data[(ni * c + ci) * plane..][..plane];
                for (d, m) in dst.iter_mut().zip(map) {
                    *d = sv * m;
                }
            }
        }
        let rg = self.rg(scale);
        Ok(self.push(
            data,
            vec![n, c, h, w],
            rg,
            Op::ChannelScaleMap {
                scale,
                map: map.to_vec(),
                n,
            },
        ))
    }

    // ---- convolution / pooling ------------------------------------------

    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let (n, c_in, h_in, w_in) = self.nchw("conv2d", x)?;
        let ws = self.node(w).shape.clone();
        if ws.len() != 4 {
            return Err(TensorError::RankMismatch {
                op: "conv2d",
                expected: 4,
                got: ws,
            });
        }
        let (c_out, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c_in {
            return Err(TensorError::DimMismatch {
                op: "conv2d",
                axis: "in-channel",
                expected: c_in,
                got: wc,
            });
        }
        if stride < 1 {
            return Err(TensorError::contract("conv2d", "stride must be >= 1"));
        }
        if kh > h_in + 2 * pad {
            return Err(TensorError::DimMismatch {
                op: "conv2d",
                axis: "kernel-height",
                expected: h_in + 2 * pad,
                got: kh,
            });
        }
        if kw > w_in + 2 * pad {
            return Err(TensorError::DimMismatch {
                op: "conv2d",
                axis: "kernel-width",
                expected: w_in + 2 * pad,
                got: kw,
            });
        }
        if let Some(b) = b {
            self.channel_vec("conv2d", b, c_out)?;
        }
        let h_out = (h_in + 2 * pad - kh) / stride + 1;
        let w_out = (w_in + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            n,
            c_in,
            h_in,
            w_in,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out,
            w_out,
        };
        let data = kernels::conv2d_forward(
            &self.node(x).data,
            &self.node(w).data,
            b.map(|b| self.node(b).data.as_slice()),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || b.map(|b| self.rg(b)).unwrap_or(false);
        Ok(self.push(data, vec![n, c_out, h_out, w_out], rg, Op::Conv2d { x, w, b, geom }))
    }

    /// Transposed convolution; weight layout is `(c_in, c_out, kh, kw)` and
    /// output extents are `(h-1)*stride - 2*pad + kh`.
    pub fn conv_transpose2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let (n, c_in, h_in, w_in) = self.nchw("transposed_conv2d", x)?;
        let ws = self.node(w).shape.clone();
        if ws.len() != 4 {
            return Err(TensorError::RankMismatch {
                op: "transposed_conv2d",
                expected: 4,
                got: ws,
            });
        }
        let (wc, c_out, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c_in {
            return Err(TensorError::DimMismatch {
                op: "transposed_conv2d",
                axis: "in-channel",
                expected: c_in,
                got: wc,
            });
        }
        if stride < 1 {
            return Err(TensorError::contract("transposed_conv2d", "stride must be >= 1"));
        }
        let h_out = (h_in - 1) * stride + kh;
        let w_out = (w_in - 1) * stride + kw;
        if h_out < 2 * pad + 1 || w_out < 2 * pad + 1 {
            return Err(TensorError::contract(
                "transposed_conv2d",
                "padding consumes the whole output",
            ));
        }
        let (h_out, w_out) = (h_out - 2 * pad, w_out - 2 * pad);
        if let Some(b) = b {
            self.channel_vec("transposed_conv2d", b, c_out)?;
        }
        let geom = ConvTGeom {
            n,
            c_in,
            h_in,
            w_in,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out,
            w_out,
        };
        let data = kernels::conv_transpose2d_forward(
            &self.node(x).data,
            &self.node(w).data,
            b.map(|b| self.node(b).data.as_slice()),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || b.map(|b| self.rg(b)).unwrap_or(false);
        Ok(self.push(
            data,
            vec![n, c_out, h_out, w_out],
            rg,
            Op::ConvTranspose2d { x, w, b, geom },
        ))
    }

    fn pool_common(&self, op: &'static str, x: TensorId, k: usize) -> Result<(usize, usize, usize, usize)> {
        let (n, c, h, w) = self.nchw(op, x)?;
        if k == 0 {
            return Err(TensorError::contract(op, "window must be >= 1"));
        }
        if h % k != 0 {
            return Err(TensorError::Indivisible {
                op,
                axis: "height",
                extent: h,
                k,
            });
        }
        if w % k != 0 {
            return Err(TensorError::Indivisible {
                op,
                axis: "width",
                extent: w,
                k,
            });
        }
        Ok((n, c, h, w))
    }

    pub fn avg_pool2d(&mut self, x: TensorId, k: usize) -> Result<TensorId> {
        let (n, c, h, w) = self.pool_common("avg_pool2d", x, k)?;
        let (ho, wo) = (h / k, w / k);
        let mut data = vec![0.0; n * c * ho * wo];
        let inv = 1.0 / (k * k) as f64;
        for p in 0..n * c {
            let src = &self.node(x).data[p * h * w..][..h * w];
            let dst = &mut data[p * ho * wo..][..ho * wo];
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for i in 0..k {
                        for j in 0..k {
                            acc += src[(oh * k + i) * w + ow * k + j];
                        }
                    }
                    dst[oh * wo + ow] = acc * inv;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(data, vec![n, c, ho, wo], rg, Op::AvgPool(x, k)))
    }

    /// Max pooling; backward routes gradient to the first maximal element of
    /// each window in row-major order.
    pub fn max_pool2d(&mut self, x: TensorId, k: usize) -> Result<TensorId> {
        let (n, c, h, w) = self.pool_common("max_pool2d", x, k)?;
        let (ho, wo) = (h / k, w / k);
        let mut data = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; n * c * ho * wo];
        for p in 0..n * c {
            let src = &self.node(x).data[p * h * w..][..h * w];
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for i in 0..k {
                        for j in 0..k {
                            let idx = (oh * k + i) * w + ow * k + j;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = p * ho * wo + oh * wo + ow;
                    data[o] = best;
                    argmax[o] = p * h * w + best_idx;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(data, vec![n, c, ho, wo], rg, Op::MaxPool { x, argmax }))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if sa.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "matmul",
                expected: 2,
                got: sa,
            });
        }
        if sb.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "matmul",
                expected: 2,
                got: sb,
            });
        }
        if sa[1] != sb[0] {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                axis: "inner",
                expected: sa[1],
                got: sb[0],
            });
        }
        let data = kernels::matmul(&self.node(a).data, &self.node(b).data, sa[0], sa[1], sb[1]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, vec![sa[0], sb[1]], rg, Op::Matmul(a, b)))
    }

    /// Batched matmul over leading axis: `(B,m,k) @ (B,k,n) -> (B,m,n)`.
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if sa.len() != 3 || sb.len() != 3 {
            return Err(TensorError::RankMismatch {
                op: "bmm",
                expected: 3,
                got: if sa.len() != 3 { sa } else { sb },
            });
        }
        if sa[0] != sb[0] {
            return Err(TensorError::DimMismatch {
                op: "bmm",
                axis: "batch",
                expected: sa[0],
                got: sb[0],
            });
        }
        if sa[2] != sb[1] {
            return Err(TensorError::DimMismatch {
                op: "bmm",
                axis: "inner",
                expected: sa[2],
                got: sb[1],
            });
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0; bt * m * n];
        for bi in 0..bt {
            let out = kernels::matmul(
                &self.node(a).data[bi * m * k..][..m * k],
                &self.node(b).data[bi * k * n..][..k * n],
                m,
                k,
                n,
            );
            data[bi * m * n..][..m * n].copy_from_slice(&out);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, vec![bt, m, n], rg, Op::Bmm(a, b)))
    }

    /// Swap the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose_last2(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.node(x).shape.clone();
        let (bt, m, n) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => {
                return Err(TensorError::RankMismatch {
                    op: "transpose_last2",
                    expected: 2,
                    got: s,
                })
            }
        };
        let mut data = vec![0.0; bt * m * n];
        for bi in 0..bt {
            let src = &self.node(x).data[bi * m * n..][..m * n];
            let dst = &mut data[bi * m * n..][..m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let shape = match s.len() {
            2 => vec![n, m],
            _ => vec![bt, n, m],
        };
        let rg = self.rg(x);
        Ok(self.push(data, shape, rg, Op::TransposeLast2(x)))
    }

    /// Swap the first two axes of a rank >= 2 tensor.
    pub fn swap_axes01(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.node(x).shape.clone();
        if s.len() < 2 {
            return Err(TensorError::RankMismatch {
                op: "swap_axes01",
                expected: 2,
                got: s,
            });
        }
        let (a, b) = (s[0], s[1]);
        let rest: usize = s[2..].iter().product();
        let data = swap01(&self.node(x).data, a, b, rest);
        let mut shape = s;
        shape.swap(0, 1);
        let rg = self.rg(x);
        Ok(self.push(data, shape, rg, Op::SwapAxes01(x)))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        if numel_of(shape) != self.numel(x) {
            return Err(TensorError::BadElementCount {
                shape: shape.to_vec(),
                expected: numel_of(shape),
                got: self.numel(x),
            });
        }
        let data = self.node(x).data.clone();
        let rg = self.rg(x);
        Ok(self.push(data, shape.to_vec(), rg, Op::Reshape(x)))
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channel(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(TensorError::contract("concat_channel", "no inputs"));
        }
        let (n, _, h, w) = self.nchw("concat_channel", xs[0])?;
        let mut c_total = 0;
        for &x in xs {
            let (ni, ci, hi, wi) = self.nchw("concat_channel", x)?;
            if ni != n {
                return Err(TensorError::DimMismatch {
                    op: "concat_channel",
                    axis: "batch",
                    expected: n,
                    got: ni,
                });
            }
            if hi != h || wi != w {
                return Err(TensorError::DimMismatch {
                    op: "concat_channel",
                    axis: "spatial",
                    expected: h * w,
                    got: hi * wi,
                });
            }
            c_total += ci;
        }
        let plane = h * w;
        let mut data = vec![0.0; n * c_total * plane];
        for ni in 0..n {
            let mut c_off = 0;
            for &x in xs {
                let ci = self.node(x).shape[1];
                let src = &self.node(x).data[ni * ci * plane..][..ci * plane];
                data[(ni * c_total + c_off) * plane..][..ci * plane].copy_from_slice(src);
                c_off += ci;
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            data,
            vec![n, c_total, h, w],
            rg,
            Op::ConcatChannel(xs.to_vec()),
        ))
    }

    /// Nearest-neighbour spatial resize; source index is `floor(dst*in/out)`.
    pub fn nearest_resize(&mut self, x: TensorId, h_out: usize, w_out: usize) -> Result<TensorId> {
        let (n, c, h, w) = self.nchw("nearest_resize", x)?;
        if h_out == 0 || w_out == 0 {
            return Err(TensorError::contract("nearest_resize", "zero output extent"));
        }
        let mut data = vec![0.0; n * c * h_out * w_out];
        for p in 0..n * c {
            let src = &self.node(x).data[p * h * w..][..h * w];
            let dst = &mut data[p * h_out * w_out..][..h_out * w_out];
            for oh in 0..h_out {
                let ih = oh * h / h_out;
                for ow in 0..w_out {
                    let iw = ow * w / w_out;
                    dst[oh * w_out + ow] = src[ih * w + iw];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(data, vec![n, c, h_out, w_out], rg, Op::NearestResize(x)))
    }

    /// Softmax along `axis`, numerically stabilised by the row max.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let s = self.node(x).shape.clone();
        if axis >= s.len() {
            return Err(TensorError::contract("softmax", format!("axis {axis} out of range")));
        }
        let axis_len = s[axis];
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut data = vec![0.0; self.numel(x)];
        let src = &self.node(x).data;
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * axis_len + a) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for a in 0..axis_len {
                    mx = mx.max(src[at(a)]);
                }
                let mut sum = 0.0;
                for a in 0..axis_len {
                    let e = (src[at(a)] - mx).exp();
                    data[at(a)] = e;
                    sum += e;
                }
                for a in 0..axis_len {
                    data[at(a)] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(data, s, rg, Op::Softmax { x, axis }))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let v = self.node(x).data.iter().sum::<f64>();
        let rg = self.rg(x);
        self.push(vec![v], vec![1], rg, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.numel(x);
        if n == 0 {
            return Err(TensorError::contract("mean_all", "empty tensor"));
        }
        let v = self.node(x).data.iter().sum::<f64>() / n as f64;
        let rg = self.rg(x);
        Ok(self.push(vec![v], vec![1], rg, Op::MeanAll(x)))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Every reachable `requires_grad`
    /// node receives `dLoss/dNode`; repeated calls accumulate until
    /// [`Tape::clear_grads`].
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(TensorError::NotScalar {
                numel: self.numel(loss),
            });
        }
        self.grads.resize(self.nodes.len(), None);
        // Per-sweep upstream gradients; self.grads only collects results so
        // that repeated backward calls accumulate rather than feed back.
        let mut up: Vec<Option<Vec<f64>>> = vec![None; loss.idx() + 1];
        up[loss.idx()] = Some(vec![1.0]);

        for i in (0..=loss.idx()).rev() {
            let Some(g) = up[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut up);
            match &mut self.grads[i] {
                Some(dst) => add_into(dst, &g),
                slot @ None => *slot = Some(g),
            }
        }

        // Untouched differentiable leaves report an exact zero gradient.
        for i in 0..self.nodes.len() {
            if self.nodes[i].requires_grad
                && matches!(self.nodes[i].op, Op::Leaf)
                && self.grads[i].is_none()
            {
                self.grads[i] = Some(vec![0.0; self.nodes[i].data.len()]);
            }
        }
        if self.dtype == DType::F32 {
            for g in self.grads.iter_mut().flatten() {
                self.dtype.quantize(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], up: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let acc = |up: &mut [Option<Vec<f64>>], id: TensorId, contrib: Vec<f64>| {
            debug_assert_eq!(contrib.len(), self.nodes[id.idx()].data.len());
            match &mut up[id.idx()] {
                Some(dst) => add_into(dst, &contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let wants = |id: TensorId| self.nodes[id.idx()].requires_grad;
        let data = |id: TensorId| self.nodes[id.idx()].data.as_slice();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(up, *a, g.to_vec());
                }
                if wants(*b) {
                    acc(up, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(up, *a, g.to_vec());
                }
                if wants(*b) {
                    acc(up, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(up, *a, g.iter().zip(data(*b)).map(|(g, b)| g * b).collect());
                }
                if wants(*b) {
                    acc(up, *b, g.iter().zip(data(*a)).map(|(g, a)| g * a).collect());
                }
            }
            Op::Neg(a) => {
                if wants(*a) {
                    acc(up, *a, g.iter().map(|v| -v).collect());
                }
            }
            Op::Abs(a) => {
                if wants(*a) {
                    let d = g
                        .iter()
                        .zip(data(*a))
                        .map(|(g, a)| g * if *a > 0.0 {
                            1.0
                        } else if *a < 0.0 {
                            -1.0
                        } else {
                            0.0
                        })
                        .collect();
                    acc(up, *a, d);
                }
            }
            Op::Sqrt(a) => {
                if wants(*a) {
                    // Derivative taken as 0 at the origin (subgradient).
                    let d = g
                        .iter()
                        .zip(&node.data)
                        .map(|(g, o)| if *o > 0.0 { g * 0.5 / o } else { 0.0 })
                        .collect();
                    acc(up, *a, d);
                }
            }
            Op::Recip(a) => {
                if wants(*a) {
                    let d = g
                        .iter()
                        .zip(&node.data)
                        .map(|(g, o)| -g * o * o)
                        .collect();
                    acc(up, *a, d);
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let d = g
                        .iter()
                        .zip(data(*a))
                        .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
                        .collect();
                    acc(up, *a, d);
                }
            }
            Op::LeakyRelu(a, slope) => {
                if wants(*a) {
                    let d = g
                        .iter()
                        .zip(data(*a))
                        .map(|(g, a)| if *a > 0.0 { *g } else { g * slope })
                        .collect();
                    acc(up, *a, d);
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    let d = g
                        .iter()
                        .zip(&node.data)
                        .map(|(g, o)| g * (1.0 - o * o))
                        .collect();
                    acc(up, *a, d);
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    let d = g
                        .iter()
                        .zip(&node.data)
                        .map(|(g, o)| g * o * (1.0 - o))
                        .collect();
                    acc(up, *a, d);
                }
            }
            Op::ClampMin(a, min) => {
                if wants(*a) {
                    let d = g
                        .iter()
                        .zip(data(*a))
                        .map(|(g, a)| if *a > *min { *g } else { 0.0 })
                        .collect();
                    acc(up, *a, d);
                }
            }
            Op::AddScalar(a) => {
                if wants(*a) {
                    acc(up, *a, g.to_vec());
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    acc(up, *a, g.iter().map(|v| c * v).collect());
                }
            }
            Op::MulScalarT(x, s) => {
                let sv = data(*s)[0];
                if wants(*x) {
                    acc(up, *x, g.iter().map(|v| v * sv).collect());
                }
                if wants(*s) {
                    let dot = g.iter().zip(data(*x)).map(|(g, x)| g * x).sum::<f64>();
                    acc(up, *s, vec![dot]);
                }
            }
            Op::AddChannel(x, v) => {
                let (n, c, h, w) = self.shape4(*x);
                if wants(*x) {
                    acc(up, *x, g.to_vec());
                }
                if wants(*v) {
                    acc(up, *v, channel_sums(g, n, c, h * w, 1.0));
                }
            }
            Op::SubChannel(x, v) => {
                let (n, c, h, w) = self.shape4(*x);
                if wants(*x) {
                    acc(up, *x, g.to_vec());
                }
                if wants(*v) {
                    acc(up, *v, channel_sums(g, n, c, h * w, -1.0));
                }
            }
            Op::MulChannel(x, v) => {
                let (n, c, h, w) = self.shape4(*x);
                let plane = h * w;
                let vd = data(*v);
                if wants(*x) {
                    let mut d = vec![0.0; g.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * plane;
                            for k in 0..plane {
                                d[off + k] = g[off + k] * vd[ci];
                            }
                        }
                    }
                    acc(up, *x, d);
                }
                if wants(*v) {
                    let xd = data(*x);
                    let mut d = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * plane;
                            let mut s = 0.0;
                            for k in 0..plane {
                                s += g[off + k] * xd[off + k];
                            }
                            d[ci] += s;
                        }
                    }
                    acc(up, *v, d);
                }
            }
            Op::DivChannel(x, v) => {
                let (n, c, h, w) = self.shape4(*x);
                let vd = data(*v);
                let plane = h * w;
                if wants(*x) {
                    let mut d = vec![0.0; g.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let inv = 1.0 / vd[ci];
                            let off = (ni * c + ci) * plane;
                            for k in 0..plane {
                                d[off + k] = g[off + k] * inv;
                            }
                        }
                    }
                    acc(up, *x, d);
                }
                if wants(*v) {
                    // d/dv of x/v is -x/v^2 = -out/v
                    let mut d = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * plane;
                            let mut s = 0.0;
                            for k in 0..plane {
                                s += g[off + k] * node.data[off + k];
                            }
                            d[ci] -= s / vd[ci];
                        }
                    }
                    acc(up, *v, d);
                }
            }
            Op::ChannelMean(x) => {
                if wants(*x) {
                    let (n, c, h, w) = self.shape4(*x);
                    let plane = h * w;
                    let inv = 1.0 / (n * plane) as f64;
                    let mut d = vec![0.0; n * c * plane];
                    for ni in 0..n {
                        for ci in 0..c {
                            let gv = g[ci] * inv;
                            d[(ni * c + ci) * plane..][..plane].fill(gv);
                        }
                    }
                    acc(up, *x, d);
                }
            }
            Op::ChannelScaleMap { scale, map, n } => {
                if wants(*scale) {
                    let c = self.nodes[scale.idx()].data.len();
                    let plane = map.len();
                    let mut d = vec![0.0; c];
                    for ni in 0..*n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * plane;
                            let mut s = 0.0;
                            for k in 0..plane {
                                s += g[off + k] * map[k];
                            }
                            d[ci] += s;
                        }
                    }
                    acc(up, *scale, d);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                if wants(*x) {
                    acc(up, *x, kernels::conv2d_backward_input(g, data(*w), geom));
                }
                if wants(*w) {
                    acc(up, *w, kernels::conv2d_backward_weight(g, data(*x), geom));
                }
                if let Some(b) = b {
                    if wants(*b) {
                        acc(
                            up,
                            *b,
                            kernels::conv2d_backward_bias(g, geom.n, geom.c_out, geom.h_out * geom.w_out),
                        );
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                if wants(*x) {
                    acc(up, *x, kernels::conv_transpose2d_backward_input(g, data(*w), geom));
                }
                if wants(*w) {
                    acc(up, *w, kernels::conv_transpose2d_backward_weight(g, data(*x), geom));
                }
                if let Some(b) = b {
                    if wants(*b) {
                        acc(
                            up,
                            *b,
                            kernels::conv2d_backward_bias(g, geom.n, geom.c_out, geom.h_out * geom.w_out),
                        );
                    }
                }
            }
            Op::AvgPool(x, k) => {
                if wants(*x) {
                    let (n, c, h, w) = self.shape4(*x);
                    let (ho, wo) = (h / k, w / k);
                    let inv = 1.0 / (k * k) as f64;
                    let mut d = vec![0.0; n * c * h * w];
                    for p in 0..n * c {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let gv = g[p * ho * wo + oh * wo + ow] * inv;
                                for i in 0..*k {
                                    for j in 0..*k {
                                        d[p * h * w + (oh * k + i) * w + ow * k + j] += gv;
                                    }
                                }
                            }
                        }
                    }
                    acc(up, *x, d);
                }
            }
            Op::MaxPool { x, argmax } => {
                if wants(*x) {
                    let mut d = vec![0.0; self.nodes[x.idx()].data.len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        d[src] += g[o];
                    }
                    acc(up, *x, d);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = {
                    let s = &self.nodes[a.idx()].shape;
                    (s[0], s[1])
                };
                let n = self.nodes[b.idx()].shape[1];
                if wants(*a) {
                    let bt = transpose2(data(*b), k, n);
                    acc(up, *a, kernels::matmul(g, &bt, m, n, k));
                }
                if wants(*b) {
                    let at = transpose2(data(*a), m, k);
                    acc(up, *b, kernels::matmul(&at, g, k, m, n));
                }
            }
            Op::Bmm(a, b) => {
                let (bt_, m, k) = {
                    let s = &self.nodes[a.idx()].shape;
                    (s[0], s[1], s[2])
                };
                let n = self.nodes[b.idx()].shape[2];
                if wants(*a) {
                    let mut d = vec![0.0; bt_ * m * k];
                    for bi in 0..bt_ {
                        let bt = transpose2(&data(*b)[bi * k * n..][..k * n], k, n);
                        let part = kernels::matmul(&g[bi * m * n..][..m * n], &bt, m, n, k);
                        d[bi * m * k..][..m * k].copy_from_slice(&part);
                    }
                    acc(up, *a, d);
                }
                if wants(*b) {
                    let mut d = vec![0.0; bt_ * k * n];
                    for bi in 0..bt_ {
                        let at = transpose2(&data(*a)[bi * m * k..][..m * k], m, k);
                        let part = kernels::matmul(&at, &g[bi * m * n..][..m * n], k, m, n);
                        d[bi * k * n..][..k * n].copy_from_slice(&part);
                    }
                    acc(up, *b, d);
                }
            }
            Op::TransposeLast2(x) => {
                if wants(*x) {
                    let s = &node.shape;
                    let (bt, m, n) = match s.len() {
                        2 => (1, s[0], s[1]),
                        _ => (s[0], s[1], s[2]),
                    };
                    let mut d = vec![0.0; g.len()];
                    for bi in 0..bt {
                        let part = transpose2(&g[bi * m * n..][..m * n], m, n);
                        d[bi * m * n..][..m * n].copy_from_slice(&part);
                    }
                    acc(up, *x, d);
                }
            }
            Op::SwapAxes01(x) => {
                if wants(*x) {
                    let s = &node.shape;
                    let rest: usize = s[2..].iter().product();
                    // node.shape is already swapped; swapping back restores x.
                    acc(up, *x, swap01(g, s[0], s[1], rest));
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    acc(up, *x, g.to_vec());
                }
            }
            Op::ConcatChannel(xs) => {
                let (n, c_total, h, w) = self.shape4_owned(&node.shape);
                let plane = h * w;
                let mut c_off = 0;
                for &x in xs {
                    let ci = self.nodes[x.idx()].shape[1];
                    if wants(x) {
                        let mut d = vec![0.0; n * ci * plane];
                        for ni in 0..n {
                            let src = &g[(ni * c_total + c_off) * plane..][..ci * plane];
                            d[ni * ci * plane..][..ci * plane].copy_from_slice(src);
                        }
                        acc(up, x, d);
                    }
                    c_off += ci;
                }
            }
            Op::NearestResize(x) => {
                if wants(*x) {
                    let (n, c, h, w) = self.shape4(*x);
                    let (ho, wo) = (node.shape[2], node.shape[3]);
                    let mut d = vec![0.0; n * c * h * w];
                    for p in 0..n * c {
                        let gp = &g[p * ho * wo..][..ho * wo];
                        let dp = &mut d[p * h * w..][..h * w];
                        for oh in 0..ho {
                            let ih = oh * h / ho;
                            for ow in 0..wo {
                                let iw = ow * w / wo;
                                dp[ih * w + iw] += gp[oh * wo + ow];
                            }
                        }
                    }
                    acc(up, *x, d);
                }
            }
            Op::Softmax { x, axis } => {
                if wants(*x) {
                    let s = &node.shape;
                    let axis_len = s[*axis];
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[*axis + 1..].iter().product();
                    let y = &node.data;
                    let mut d = vec![0.0; g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * axis_len + a) * inner + i;
                            let mut dot = 0.0;
                            for a in 0..axis_len {
                                dot += g[at(a)] * y[at(a)];
                            }
                            for a in 0..axis_len {
                                d[at(a)] = y[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                    acc(up, *x, d);
                }
            }
            Op::SumAll(x) => {
                if wants(*x) {
                    acc(up, *x, vec![g[0]; self.nodes[x.idx()].data.len()]);
                }
            }
            Op::MeanAll(x) => {
                if wants(*x) {
                    let n = self.nodes[x.idx()].data.len();
                    acc(up, *x, vec![g[0] / n as f64; n]);
                }
            }
        }
    }

    fn shape4(&self, x: TensorId) -> (usize, usize, usize, usize) {
        self.shape4_owned(&self.nodes[x.idx()].shape)
    }

    fn shape4_owned(&self, s: &[usize]) -> (usize, usize, usize, usize) {
        (s[0], s[1], s[2], s[3])
    }
}

/// (a, b, rest) -> (b, a, rest) copy.
fn swap01(src: &[f64], a: usize, b: usize, rest: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..a {
        for j in 0..b {
            let s = &src[(i * b + j) * rest..][..rest];
            out[(j * a + i) * rest..][..rest].copy_from_slice(s);
        }
    }
    out
}

fn transpose2(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Per-channel sums of an NCHW buffer scaled by `factor`.
fn channel_sums(g: &[f64], n: usize, c: usize, plane: usize, factor: f64) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let s: f64 = g[(ni * c + ci) * plane..][..plane].iter().sum();
            out[ci] += factor * s;
        }
    }
    out
}
