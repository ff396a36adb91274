//! Recording graph and reverse-mode differentiation.
//!
//! Every operator evaluates eagerly and appends a node to the tape. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! returns gradients for every node, including parameter leaves.

use super::kernels::{col2im, gemm, im2col, log_sigmoid, sigmoid, ConvGeom};
use super::{ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Unary {
    Sigmoid,
    Relu,
    Abs,
    Exp,
    Log,
    LogSigmoid,
    Neg,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Var, Unary),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    ScaleBy(Var, Var),
    AddBias { x: Var, b: Var, axis: usize },
    MulChannels { x: Var, m: Var },
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f64> },
    MaxPool { x: Var, argmax: Vec<usize> },
    Gather { x: Var, index: Vec<usize> },
    Softmax { x: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// Tape of recorded operations for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, msg: msg.into() }
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Constant or input leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a stored parameter; its gradient flows back on
    /// [`Gradients::accumulate`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Sigmoid => sigmoid,
            Unary::Relu => |v| v.max(0.0),
            Unary::Abs => f64::abs,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::LogSigmoid => log_sigmoid,
            Unary::Neg => |v| -v,
        };
        let src = self.value(x);
        let out = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(out, Op::Unary(x, kind))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    /// Natural log; non-positive inputs yield non-finite values.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::LogSigmoid)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err(op, ta, tb));
        }
        Ok(Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("div", a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b)))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("minimum", a, b, |x, y| if x <= y { x } else { y })?;
        Ok(self.push(t, Op::Minimum(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let src = self.value(x);
        let t = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|v| v * s).collect(),
        };
        self.push(t, Op::Scale(x, s))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let src = self.value(x);
        let t = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|v| v + c).collect(),
        };
        self.push(t, Op::AddConst(x))
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if ts.numel() != 1 {
            return Err(shape_err("scale_by", tx, ts));
        }
        let k = ts.data[0];
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|v| v * k).collect(),
        };
        Ok(self.push(t, Op::ScaleBy(x, s)))
    }

    /// Adds the vector `b` along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if axis >= tx.shape.len() || tb.shape.len() != 1 || tb.shape[0] != tx.shape[axis] {
            return Err(shape_err("add_bias", tx, tb));
        }
        let (outer, len, inner) = split_axis(&tx.shape, axis);
        let mut data = tx.data.clone();
        for o in 0..outer {
            for a in 0..len {
                let bias = tb.data[a];
                let base = (o * len + a) * inner;
                for v in &mut data[base..base + inner] {
                    *v += bias;
                }
            }
        }
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        Ok(self.push(t, Op::AddBias { x, b, axis }))
    }

    /// `x[n, c, h, w] * m[n, 0, h, w]`: broadcasts a single-channel map over
    /// all channels of a `[N, C, H, W]` tensor.
    pub fn mul_channels(&mut self, x: Var, m: Var) -> Result<Var> {
        let (tx, tm) = (self.value(x), self.value(m));
        if tx.shape.len() != 4
            || tm.shape.len() != 4
            || tm.shape[0] != tx.shape[0]
            || tm.shape[1] != 1
            || tm.shape[2..] != tx.shape[2..]
        {
            return Err(shape_err("mul_channels", tx, tm));
        }
        let (n, c, hw) = (tx.shape[0], tx.shape[1], tx.shape[2] * tx.shape[3]);
        let mut data = tx.data.clone();
        for i in 0..n {
            let mrow = &tm.data[i * hw..(i + 1) * hw];
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for (v, &f) in data[base..base + hw].iter_mut().zip(mrow) {
                    *v *= f;
                }
            }
        }
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        Ok(self.push(t, Op::MulChannels { x, m }))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, k, 1, &tb.data, n, 1, 0.0, &mut data);
        let t = Tensor {
            shape: vec![m, n],
            data,
        };
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 3 || tb.shape.len() != 3 || ta.shape[0] != tb.shape[0] || ta.shape[2] != tb.shape[1] {
            return Err(shape_err("batch_matmul", ta, tb));
        }
        let (bs, m, k, n) = (ta.shape[0], ta.shape[1], ta.shape[2], tb.shape[2]);
        let mut data = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &ta.data[i * m * k..],
                k,
                1,
                &tb.data[i * k * n..],
                n,
                1,
                0.0,
                &mut data[i * m * n..(i + 1) * m * n],
            );
        }
        let t = Tensor {
            shape: vec![bs, m, n],
            data,
        };
        Ok(self.push(t, Op::BatchMatMul(a, b)))
    }

    /// Cross-correlation of `x: [N, Ci, H, W]` with `w: [Co, Ci, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.shape.len() != 4 || tw.shape.len() != 4 || tx.shape[1] != tw.shape[1] {
            return Err(shape_err("conv2d", tx, tw));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        let (n, ci, h, wd) = (tx.shape[0], tx.shape[1], tx.shape[2], tx.shape[3]);
        let (co, kh, kw) = (tw.shape[0], tw.shape[2], tw.shape[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err("conv2d", tx, tw));
        }
        let geom = ConvGeom {
            ci,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let (rows, ncol) = (geom.rows(), geom.cols());
        let mut cols = vec![0.0; n * rows * ncol];
        let mut data = vec![0.0; n * co * ncol];
        for i in 0..n {
            let col = &mut cols[i * rows * ncol..(i + 1) * rows * ncol];
            im2col(&tx.data[i * ci * h * wd..(i + 1) * ci * h * wd], &geom, col);
            gemm(
                co,
                rows,
                ncol,
                &tw.data,
                rows,
                1,
                col,
                ncol,
                1,
                0.0,
                &mut data[i * co * ncol..(i + 1) * co * ncol],
            );
        }
        let t = Tensor {
            shape: vec![n, co, geom.ho, geom.wo],
            data,
        };
        Ok(self.push(t, Op::Conv2d { x, w, geom, cols }))
    }

    /// Non-overlapping `k x k` max pooling; spatial dims must divide by `k`.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape.len() != 4 || k == 0 || !tx.shape[2].is_multiple_of(k) || !tx.shape[3].is_multiple_of(k) {
            return Err(invalid("max_pool2d", format!("shape {:?} not divisible by {k}", tx.shape)));
        }
        let (n, c, h, w) = (tx.shape[0], tx.shape[1], tx.shape[2], tx.shape[3]);
        let (ho, wo) = (h / k, w / k);
        let mut data = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * k + dy) * w + ox * k + dx;
                            if tx.data[idx] > tx.data[best] {
                                best = idx;
                            }
                        }
                    }
                    argmax.push(best);
                    data.push(tx.data[best]);
                }
            }
        }
        let t = Tensor {
            shape: vec![n, c, ho, wo],
            data,
        };
        Ok(self.push(t, Op::MaxPool { x, argmax }))
    }

    /// Output element `i` is input element `index[i]`.
    fn gather(&mut self, x: Var, shape: Vec<usize>, index: Vec<usize>) -> Var {
        let src = &self.value(x).data;
        let data = index.iter().map(|&i| src[i]).collect();
        self.push(Tensor { shape, data }, Op::Gather { x, index })
    }

    /// Nearest-neighbour upsampling of `[N, C, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || factor == 0 {
            return Err(invalid("upsample_nearest", format!("shape {shape:?}, factor {factor}")));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (ho, wo) = (h * factor, w * factor);
        let mut index = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            for y in 0..ho {
                for xx in 0..wo {
                    index.push(plane * h * w + (y / factor) * w + xx / factor);
                }
            }
        }
        Ok(self.gather(x, vec![n, c, ho, wo], index))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(invalid("transpose", format!("rank {r} < 2")));
        }
        let (m, n) = (shape[r - 2], shape[r - 1]);
        let batch: usize = shape[..r - 2].iter().product();
        let mut index = Vec::with_capacity(batch * m * n);
        for b in 0..batch {
            for j in 0..n {
                for i in 0..m {
                    index.push(b * m * n + i * n + j);
                }
            }
        }
        let mut out = shape.clone();
        out.swap(r - 2, r - 1);
        Ok(self.gather(x, out, index))
    }

    /// `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(invalid("slice", format!("[{start}, {end}) on axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut index = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            for a in start..end {
                let base = (o * len + a) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut out = shape;
        out[axis] = end - start;
        Ok(self.gather(x, out, index))
    }

    /// Splits `[N, C, H, W]` into `[N * nWin, ws * ws, C]` token windows,
    /// windows and the positions inside them both in row-major order.
    pub fn window_partition(&mut self, x: Var, ws: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || ws == 0 || !shape[2].is_multiple_of(ws) || !shape[3].is_multiple_of(ws) {
            return Err(invalid(
                "window_partition",
                format!("spatial dims of {shape:?} not divisible by window {ws}"),
            ));
        }
        let index = window_index(&shape, ws);
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let windows = n * (h / ws) * (w / ws);
        Ok(self.gather(x, vec![windows, ws * ws, c], index))
    }

    /// Inverse of [`Graph::window_partition`] back to `[N, C, H, W]`.
    pub fn window_merge(&mut self, x: Var, ws: usize, n: usize, h: usize, w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if ws == 0 || !h.is_multiple_of(ws) || !w.is_multiple_of(ws) || shape.len() != 3 || shape[0] != n * (h / ws) * (w / ws) || shape[1] != ws * ws {
            return Err(invalid(
                "window_merge",
                format!("{shape:?} does not tile {n}x?x{h}x{w} with window {ws}"),
            ));
        }
        let c = shape[2];
        let forward = window_index(&[n, c, h, w], ws);
        let mut index = vec![0; forward.len()];
        for (token_pos, &img_pos) in forward.iter().enumerate() {
            index[img_pos] = token_pos;
        }
        Ok(self.gather(x, vec![n, c, h, w], index))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.shape.len() {
            return Err(invalid("softmax", format!("axis {axis} for shape {:?}", tx.shape)));
        }
        let (outer, len, inner) = split_axis(&tx.shape, axis);
        let mut data = vec![0.0; tx.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| tx.data[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..len {
                    let e = (tx.data[at(a)] - max).exp();
                    data[at(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    data[at(a)] /= total;
                }
            }
        }
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        Ok(self.push(t, Op::Softmax { x, axis }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(shape_err("concat", self.value(*first), self.value(p)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Tensor { shape, data }, Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data.iter().sum::<f64>() / t.data.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let src = self.value(x);
        let t = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|v| v.clamp(lo, hi)).collect(),
        };
        self.push(t, Op::Clamp { x, lo, hi })
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NotScalar(lt.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|data| Tensor { shape: n.value.shape.clone(), data }))
                .collect(),
            params: self.nodes.iter().enumerate().filter_map(|(i, n)| n.param.map(|p| (i, p))).collect(),
        })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value.data;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Unary(x, kind) => {
                let xin = &val(*x).data;
                let d: Vec<f64> = match kind {
                    Unary::Sigmoid => g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    Unary::Relu => g.iter().zip(xin).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
                    Unary::Abs => g.iter().zip(xin).map(|(g, x)| g * x.signum() * f64::from(*x != 0.0)).collect(),
                    Unary::Exp => g.iter().zip(out).map(|(g, y)| g * y).collect(),
                    Unary::Log => g.iter().zip(xin).map(|(g, x)| g / x).collect(),
                    Unary::LogSigmoid => g.iter().zip(xin).map(|(g, x)| g * sigmoid(-x)).collect(),
                    Unary::Neg => g.iter().map(|g| -g).collect(),
                };
                add_into(grads, *x, &d);
            }
            Op::Add(a, b) => {
                add_into(grads, *a, g);
                add_into(grads, *b, g);
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                add_into(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&val(*a).data, &val(*b).data);
                let da: Vec<f64> = g.iter().zip(tb).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(ta).map(|(g, x)| g * x).collect();
                add_into(grads, *a, &da);
                add_into(grads, *b, &db);
            }
            Op::Div(a, b) => {
                let tb = &val(*b).data;
                let da: Vec<f64> = g.iter().zip(tb).map(|(g, y)| g / y).collect();
                let db: Vec<f64> = g.iter().zip(out).zip(tb).map(|((g, q), y)| -g * q / y).collect();
                add_into(grads, *a, &da);
                add_into(grads, *b, &db);
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (&val(*a).data, &val(*b).data);
                let pick_a: Vec<bool> = ta.iter().zip(tb).map(|(x, y)| x <= y).collect();
                let da: Vec<f64> = g.iter().zip(&pick_a).map(|(g, &p)| if p { *g } else { 0.0 }).collect();
                let db: Vec<f64> = g.iter().zip(&pick_a).map(|(g, &p)| if p { 0.0 } else { *g }).collect();
                add_into(grads, *a, &da);
                add_into(grads, *b, &db);
            }
            Op::Scale(x, s) => {
                let d: Vec<f64> = g.iter().map(|v| v * s).collect();
                add_into(grads, *x, &d);
            }
            Op::AddConst(x) => add_into(grads, *x, g),
            Op::ScaleBy(x, s) => {
                let k = val(*s).data[0];
                let tx = &val(*x).data;
                let dx: Vec<f64> = g.iter().map(|v| v * k).collect();
                let ds: f64 = g.iter().zip(tx).map(|(g, x)| g * x).sum();
                add_into(grads, *x, &dx);
                add_into(grads, *s, &[ds]);
            }
            Op::AddBias { x, b, axis } => {
                add_into(grads, *x, g);
                let (outer, len, inner) = split_axis(&node.value.shape, *axis);
                let mut db = vec![0.0; len];
                for o in 0..outer {
                    for (a, acc) in db.iter_mut().enumerate() {
                        let base = (o * len + a) * inner;
                        *acc += g[base..base + inner].iter().sum::<f64>();
                    }
                }
                add_into(grads, *b, &db);
            }
            Op::MulChannels { x, m } => {
                let (tx, tm) = (val(*x), val(*m));
                let (n, c, hw) = (tx.shape[0], tx.shape[1], tx.shape[2] * tx.shape[3]);
                let mut dx = vec![0.0; tx.data.len()];
                let mut dm = vec![0.0; tm.data.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for p in 0..hw {
                            dx[base + p] = g[base + p] * tm.data[i * hw + p];
                            dm[i * hw + p] += g[base + p] * tx.data[base + p];
                        }
                    }
                }
                add_into(grads, *x, &dx);
                add_into(grads, *m, &dm);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                // dA = G B^T, dB = A^T G
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g, n, 1, &tb.data, 1, n, 0.0, &mut da);
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, &ta.data, 1, k, g, n, 1, 0.0, &mut db);
                add_into(grads, *a, &da);
                add_into(grads, *b, &db);
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (bs, m, k, n) = (ta.shape[0], ta.shape[1], ta.shape[2], tb.shape[2]);
                let mut da = vec![0.0; bs * m * k];
                let mut db = vec![0.0; bs * k * n];
                for i in 0..bs {
                    let gi = &g[i * m * n..];
                    gemm(m, n, k, gi, n, 1, &tb.data[i * k * n..], 1, n, 0.0, &mut da[i * m * k..(i + 1) * m * k]);
                    gemm(k, m, n, &ta.data[i * m * k..], 1, k, gi, n, 1, 0.0, &mut db[i * k * n..(i + 1) * k * n]);
                }
                add_into(grads, *a, &da);
                add_into(grads, *b, &db);
            }
            Op::Conv2d { x, w, geom, cols } => {
                let tw = val(*w);
                let n = node.value.shape[0];
                let co = tw.shape[0];
                let (rows, ncol) = (geom.rows(), geom.cols());
                let img = geom.ci * geom.h * geom.w;
                let mut dw = vec![0.0; tw.data.len()];
                let mut dx = vec![0.0; n * img];
                let mut dcol = vec![0.0; rows * ncol];
                for i in 0..n {
                    let gi = &g[i * co * ncol..(i + 1) * co * ncol];
                    let col = &cols[i * rows * ncol..(i + 1) * rows * ncol];
                    // dW += G_i col_i^T
                    gemm(co, ncol, rows, gi, ncol, 1, col, 1, ncol, 1.0, &mut dw);
                    // dcol = W^T G_i
                    gemm(rows, co, ncol, &tw.data, 1, rows, gi, ncol, 1, 0.0, &mut dcol);
                    col2im(&dcol, geom, &mut dx[i * img..(i + 1) * img]);
                }
                add_into(grads, *x, &dx);
                add_into(grads, *w, &dw);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; val(*x).data.len()];
                for (gv, &src) in g.iter().zip(argmax) {
                    dx[src] += gv;
                }
                add_into(grads, *x, &dx);
            }
            Op::Gather { x, index } => {
                let mut dx = vec![0.0; val(*x).data.len()];
                for (gv, &src) in g.iter().zip(index) {
                    dx[src] += gv;
                }
                add_into(grads, *x, &dx);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(&node.value.shape, *axis);
                let mut dx = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| g[at(a)] * out[at(a)]).sum();
                        for a in 0..len {
                            dx[at(a)] = out[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                add_into(grads, *x, &dx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.value.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).shape[*axis];
                    let mut dp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        dp.extend_from_slice(&g[base..base + len * inner]);
                    }
                    add_into(grads, p, &dp);
                    offset += len;
                }
            }
            Op::Sum(x) => {
                let d = vec![g[0]; val(*x).data.len()];
                add_into(grads, *x, &d);
            }
            Op::Mean(x) => {
                let n = val(*x).data.len();
                let d = vec![g[0] / n as f64; n];
                add_into(grads, *x, &d);
            }
            Op::Reshape(x) => add_into(grads, *x, g),
            Op::Clamp { x, lo, hi } => {
                let xin = &val(*x).data;
                let d: Vec<f64> = g
                    .iter()
                    .zip(xin)
                    .map(|(g, v)| if v < lo || v > hi { 0.0 } else { *g })
                    .collect();
                add_into(grads, *x, &d);
            }
        }
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(d) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(d.to_vec()),
    }
}

/// Image position (flat `[N, C, H, W]` index) for every token slot of the
/// `[N * nWin, ws * ws, C]` window layout.
fn window_index(shape: &[usize], ws: usize) -> Vec<usize> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (nh, nw) = (h / ws, w / ws);
    let mut index = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for wy in 0..nh {
            for wx in 0..nw {
                for py in 0..ws {
                    for px in 0..ws {
                        let (y, x) = (wy * ws + py, wx * ws + px);
                        for ch in 0..c {
                            index.push(((b * c + ch) * h + y) * w + x);
                        }
                    }
                }
            }
        }
    }
    index
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adds parameter-leaf gradients into the store's gradient buffers.
    pub fn accumulate(&self, store: &mut ParamStore) {
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.add_grad(id, g.data());
            }
        }
    }
}
