use super::kernels::{self, ConvGeom, Mat};
use super::{strides_of, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-defined operation: given input values, the output
/// value and the output gradient, return one gradient buffer per input.
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>>>;

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Scale(f64),
    Offset(f64),
    Exp,
    Ln,
    Sqrt,
    Square,
    Abs,
    Atan,
    Relu,
    Silu,
    Sigmoid,
    HardSigmoid,
    Powf(f64),
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Scale(c) => c * x,
            Unary::Offset(c) => x + c,
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Abs => x.abs(),
            Unary::Atan => x.atan(),
            Unary::Relu => x.max(0.0),
            Unary::Silu => x * sigmoid(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::HardSigmoid => hard_sigmoid(x),
            Unary::Powf(p) => x.powf(p),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Scale(c) => c,
            Unary::Offset(_) => 1.0,
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Atan => 1.0 / (1.0 + x * x),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::HardSigmoid => {
                if x > -3.0 && x < 3.0 {
                    1.0 / 6.0
                } else {
                    0.0
                }
            }
            Unary::Powf(p) => p * x.powf(p - 1.0),
        }
    }

    /// Distance from `x` to the nearest point where the derivative jumps.
    fn kink_distance(self, x: f64) -> f64 {
        match self {
            Unary::Abs | Unary::Relu => x.abs(),
            Unary::HardSigmoid => (x - 3.0).abs().min((x + 3.0).abs()),
            _ => f64::INFINITY,
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn hard_sigmoid(x: f64) -> f64 {
    (x / 6.0 + 0.5).clamp(0.0, 1.0)
}

enum Op {
    Leaf,
    Binary { kind: Binary, a: Var, b: Var },
    Unary { kind: Unary, x: Var },
    Sum { x: Var, map: Vec<usize> },
    Reshape { x: Var },
    Permute { x: Var, src: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Gather { x: Var, indices: Vec<usize> },
    Resize { x: Var, src: Vec<usize> },
    MatMul { a: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<f64> },
    Bilinear { x: Var, pts: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    BceLogits { x: Var, target: Vec<f64> },
    Custom { inputs: Vec<Var>, backward: BackwardFn },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation, differentiated in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
    kink_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: None, kink_margin: f64::INFINITY }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest distance, over every differentiable kinked operation recorded
    /// so far, between an operand and the operation's breakpoint. Finite
    /// difference checks are only meaningful when this exceeds the step.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn note_kink(&mut self, d: f64) {
        if d < self.kink_margin {
            self.kink_margin = d;
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Same value, no gradient flows back through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = kernels::broadcast_shape(&sa, &sb).ok_or_else(|| {
            Error::shape(format!("{kind:?}: operands {sa:?} and {sb:?} do not broadcast"))
        })?;
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
            Binary::Max => {
                if x >= y {
                    x
                } else {
                    y
                }
            }
            Binary::Min => {
                if x <= y {
                    x
                } else {
                    y
                }
            }
        };
        let da = self.value(a).data();
        let db = self.value(b).data();
        let data: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if db.len() == 1 && sa == out_shape {
            da.iter().map(|&x| f(x, db[0])).collect()
        } else if da.len() == 1 && sb == out_shape {
            db.iter().map(|&y| f(da[0], y)).collect()
        } else {
            let oa = kernels::broadcast_offsets(&out_shape, &sa);
            let ob = kernels::broadcast_offsets(&out_shape, &sb);
            oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        if rg && matches!(kind, Binary::Max | Binary::Min) {
            let gap = self
                .broadcast_pairs(a, b, &out_shape)
                .iter()
                .map(|(x, y)| (x - y).abs())
                .fold(f64::INFINITY, f64::min);
            self.note_kink(gap);
        }
        let value = Tensor { shape: out_shape, data };
        Ok(self.push(value, Op::Binary { kind, a, b }, rg))
    }

    fn broadcast_pairs(&self, a: Var, b: Var, out_shape: &[usize]) -> Vec<(f64, f64)> {
        let da = self.value(a).data();
        let db = self.value(b).data();
        let oa = kernels::broadcast_offsets(out_shape, self.shape(a));
        let ob = kernels::broadcast_offsets(out_shape, self.shape(b));
        oa.iter().zip(&ob).map(|(&i, &j)| (da[i], db[j])).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// Elementwise maximum; on ties the gradient goes to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, a, b)
    }

    /// Elementwise minimum; on ties the gradient goes to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        let rg = self.requires_grad(x);
        if rg {
            let d = self.value(x).data().iter().map(|&v| kind.kink_distance(v)).fold(f64::INFINITY, f64::min);
            self.note_kink(d);
        }
        self.push(value, Op::Unary { kind, x }, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::Offset(c), x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(Unary::Ln, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    pub fn atan(&mut self, x: Var) -> Var {
        self.unary(Unary::Atan, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(Unary::Silu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    /// `clamp(x / 6 + 1/2, 0, 1)`.
    pub fn hard_sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::HardSigmoid, x)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(Unary::Powf(p), x)
    }

    /// Numerically stable binary cross-entropy on logits, elementwise.
    pub fn bce_with_logits(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(Error::shape(format!(
                "bce_with_logits: logits {:?} vs target {:?}",
                self.shape(x),
                target.shape()
            )));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .collect();
        let value = Tensor { shape: target.shape().to_vec(), data };
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::BceLogits { x, target: target.data().to_vec() }, rg))
    }

    // ---------------------------------------------------------------- reductions

    /// Sum over `axes`, removing them from the shape. Accumulation follows
    /// row-major input order.
    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axes.is_empty() {
            return Err(Error::invalid("reduction over an empty axis set"));
        }
        let mut reduce = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::invalid(format!("axis {a} out of range for shape {shape:?}")));
            }
            if reduce[a] {
                return Err(Error::invalid(format!("axis {a} listed twice")));
            }
            reduce[a] = true;
        }
        let out_shape: Vec<usize> =
            shape.iter().zip(&reduce).filter(|(_, &r)| !r).map(|(&d, _)| d).collect();
        let out_strides = strides_of(&out_shape);
        let mut strides = vec![0; shape.len()];
        let mut k = 0;
        for (i, &r) in reduce.iter().enumerate() {
            if !r {
                strides[i] = out_strides[k];
                k += 1;
            }
        }
        let map = kernels::strided_offsets(&shape, &strides);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (&o, &v) in map.iter().zip(self.value(x).data()) {
            out[o] += v;
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor { shape: out_shape, data: out }, Op::Sum { x, map }, rg))
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let n: usize = axes.iter().filter(|&&a| a < shape.len()).map(|&a| shape[a]).product();
        let s = self.sum(x, axes)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let rank = self.shape(x).len();
        if rank == 0 {
            return x;
        }
        let axes: Vec<usize> = (0..rank).collect();
        self.sum(x, &axes).expect("full reduction is always valid")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    // ---------------------------------------------------------------- shape ops

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let in_strides = strides_of(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let src = kernels::strided_offsets(&out_shape, &strides);
        let d = self.value(x).data();
        let data = src.iter().map(|&i| d[i]).collect();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Permute { x, src }, rg))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "narrow(axis {axis}, {start}..{}) out of range for {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Narrow { x, axis, start }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!("concat: {s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let rg = xs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    /// Picks elements of the flattened input; output shape `[indices.len()]`.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let d = self.value(x).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= d.len()) {
            return Err(Error::invalid(format!("gather index {bad} out of range {}", d.len())));
        }
        if indices.is_empty() {
            return Err(Error::invalid("gather with no indices"));
        }
        let data = indices.iter().map(|&i| d[i]).collect();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor { shape: vec![indices.len()], data }, Op::Gather { x, indices: indices.to_vec() }, rg))
    }

    /// Nearest-neighbour resize of the last two axes; source index is
    /// `floor(dst * in / out)`.
    pub fn resize_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(Error::shape(format!("resize_nearest to {out_h}x{out_w} on {shape:?}")));
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        if (h, w) == (out_h, out_w) {
            return Ok(x);
        }
        let planes: usize = shape[..r - 2].iter().product();
        let mut src = Vec::with_capacity(planes * out_h * out_w);
        for p in 0..planes {
            for oy in 0..out_h {
                let iy = oy * h / out_h;
                for ox in 0..out_w {
                    src.push(p * h * w + iy * w + ox * w / out_w);
                }
            }
        }
        let d = self.value(x).data();
        let data = src.iter().map(|&i| d[i]).collect();
        let mut out_shape = shape;
        out_shape[r - 2] = out_h;
        out_shape[r - 1] = out_w;
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Resize { x, src }, rg))
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: {sa:?} x {sb:?} (inner dimensions must agree)")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            Mat::rows(self.value(a).data(), k),
            Mat::rows(self.value(b).data(), n),
            0.0,
            &mut out,
        );
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul { a, b }, rg))
    }

    /// `x (N x D) * w (D x E) + b (E)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
            return Err(Error::shape(format!("linear: input {sx:?}, weight {sw:?}, bias {sb:?}")));
        }
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// 2-D convolution with zero padding. `x: N x C x H x W`,
    /// `w: O x C x K x K`, `b: O`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 {
            return Err(Error::shape(format!("conv2d input must be NCHW, got {sx:?}")));
        }
        if sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::shape(format!("conv2d weight must be O x C x K x K, got {sw:?}")));
        }
        if sw[1] != sx[1] {
            return Err(Error::shape(format!(
                "conv2d channel dimension: input has {} channels, weight expects {}",
                sx[1], sw[1]
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape(format!(
                    "conv2d bias dimension: expected [{}], got {:?}",
                    sw[0],
                    self.shape(b)
                )));
            }
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let k = sw[2];
        for (name, d) in [("height", sx[2]), ("width", sx[3])] {
            if d + 2 * pad < k {
                return Err(Error::shape(format!(
                    "conv2d {name} dimension {d} with padding {pad} is smaller than kernel {k}"
                )));
            }
        }
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            k,
            stride,
            pad,
            oh: (sx[2] + 2 * pad - k) / stride + 1,
            ow: (sx[3] + 2 * pad - k) / stride + 1,
        };
        let o = sw[0];
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut mat = vec![0.0; o * ncols];
        kernels::gemm(o, rows, ncols, Mat::rows(self.value(w).data(), rows), Mat::rows(&cols, ncols), 0.0, &mut mat);
        let ohw = geom.oh * geom.ow;
        let mut out = vec![0.0; geom.n * o * ohw];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for n in 0..geom.n {
            for oc in 0..o {
                let dst = &mut out[(n * o + oc) * ohw..(n * o + oc + 1) * ohw];
                let src = &mat[oc * ncols + n * ohw..oc * ncols + (n + 1) * ohw];
                let bv = bias.as_ref().map_or(0.0, |b| b[oc]);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(w) || b.is_some_and(|b| self.requires_grad(b));
        // columns are only needed for the weight gradient
        let cols = if self.requires_grad(w) { cols } else { Vec::new() };
        let value = Tensor { shape: vec![geom.n, o, geom.oh, geom.ow], data: out };
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// Max pooling with implicit `-inf` padding.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || stride == 0 || s[2] + 2 * pad < k || s[3] + 2 * pad < k {
            return Err(Error::shape(format!("max_pool2d k={k} s={stride} p={pad} on {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        let mut margin = f64::INFINITY;
        for plane in 0..s[0] * s[1] {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let (mut best, mut second, mut at) = (f64::NEG_INFINITY, f64::NEG_INFINITY, usize::MAX);
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if d[i] > best {
                                second = best;
                                best = d[i];
                                at = i;
                            } else if d[i] > second {
                                second = d[i];
                            }
                        }
                    }
                    margin = margin.min(best - second);
                    out.push(best);
                    argmax.push(at);
                }
            }
        }
        let rg = self.requires_grad(x);
        if rg {
            self.note_kink(margin);
        }
        let value = Tensor { shape: vec![s[0], s[1], oh, ow], data: out };
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// Bilinear interpolation at fractional `(y, x)` points.
    ///
    /// `x: N x C x H x W` with `pts: N x P x 2` gives `N x C x P`; the unbatched
    /// form `C x H x W` with `P x 2` gives `C x P`. Neighbours outside the grid
    /// contribute zero.
    pub fn bilinear_sample(&mut self, x: Var, pts: Var) -> Result<Var> {
        let (sx, sp) = (self.shape(x).to_vec(), self.shape(pts).to_vec());
        let batched = match (sx.len(), sp.len()) {
            (4, 3) if sp[0] == sx[0] && sp[2] == 2 => true,
            (3, 2) if sp[1] == 2 => false,
            _ => {
                return Err(Error::shape(format!(
                    "bilinear_sample: input {sx:?} with points {sp:?}"
                )))
            }
        };
        let (n, c, h, w, p) = if batched {
            (sx[0], sx[1], sx[2], sx[3], sp[1])
        } else {
            (1, sx[0], sx[1], sx[2], sp[0])
        };
        let d = self.value(x).data();
        let pd = self.value(pts).data();
        let mut out = vec![0.0; n * c * p];
        let mut margin = f64::INFINITY;
        for b in 0..n {
            for q in 0..p {
                let (py, px) = (pd[(b * p + q) * 2], pd[(b * p + q) * 2 + 1]);
                let taps = bilinear_taps(py, px, h, w);
                let (fy, fx) = (py - py.floor(), px - px.floor());
                margin = margin.min(fy.min(1.0 - fy)).min(fx.min(1.0 - fx));
                for ch in 0..c {
                    let plane = &d[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    let mut v = 0.0;
                    for (idx, wt) in taps.iter().flatten() {
                        v += wt * plane[*idx];
                    }
                    out[(b * c + ch) * p + q] = v;
                }
            }
        }
        if self.requires_grad(pts) {
            self.note_kink(margin);
        }
        let shape = if batched { vec![n, c, p] } else { vec![c, p] };
        let rg = self.requires_grad(x) || self.requires_grad(pts);
        Ok(self.push(Tensor { shape, data: out }, Op::Bilinear { x, pts }, rg))
    }

    /// Normalises `N x C x H x W` over each of `groups` channel groups per
    /// sample: `(x - mean) / sqrt(var + eps)`, biased variance. No affine.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || groups == 0 || shape[1] % groups != 0 {
            return Err(Error::shape(format!("group_norm: {groups} groups over input {shape:?}")));
        }
        let m = shape[1] / groups * shape[2] * shape[3];
        let (y, _) = kernels::group_norm(self.value(x).data(), m, eps);
        let value = Tensor { shape, data: y };
        let backward: BackwardFn = Box::new(move |inputs, out, g| {
            let (_, inv_std) = kernels::group_norm(inputs[0].data(), m, eps);
            let y = out.data();
            let mut dx = vec![0.0; y.len()];
            for (k, &s) in inv_std.iter().enumerate() {
                let r = k * m..(k + 1) * m;
                let (gy, yy) = (&g[r.clone()], &y[r.clone()]);
                let mg = gy.iter().sum::<f64>() / m as f64;
                let mgy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                for ((d, &a), &b) in dx[r].iter_mut().zip(gy).zip(yy) {
                    *d = s * (a - mg - b * mgy);
                }
            }
            vec![dx]
        });
        Ok(self.custom(&[x], value, backward))
    }

    /// Records an operation with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        self.push(value, Op::Custom { inputs: inputs.to_vec(), backward }, rg)
    }

    // ---------------------------------------------------------------- backward

    /// Populates gradients of `loss` with respect to every node that requires
    /// them. A second call without [`Tape::clear_grads`] is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Backward("gradients already populated; call clear_grads first".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.grads = None;
    }

    /// Gradient buffer of `v` after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.as_ref()?.get(v.0)?.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.grad(v)?;
        Some(Tensor { shape: self.shape(v).to_vec(), data: g.to_vec() })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        macro_rules! with_grad {
            ($v:expr, |$gb:ident| $body:block) => {
                if let Some($gb) = grad_buf(nodes, grads, $v) $body
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let out_shape = node.value.shape();
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                let same = va.shape() == out_shape && vb.shape() == out_shape;
                let oa: Vec<usize> =
                    if same { Vec::new() } else { kernels::broadcast_offsets(out_shape, va.shape()) };
                let ob: Vec<usize> =
                    if same { Vec::new() } else { kernels::broadcast_offsets(out_shape, vb.shape()) };
                let ia = |k: usize| if same { k } else { oa[k] };
                let ib = |k: usize| if same { k } else { ob[k] };
                let (da, db) = (va.data(), vb.data());
                with_grad!(*a, |ga| {
                    for (k, &gk) in g.iter().enumerate() {
                        let (x, y) = (da[ia(k)], db[ib(k)]);
                        let d = match kind {
                            Binary::Add | Binary::Sub => 1.0,
                            Binary::Mul => y,
                            Binary::Div => 1.0 / y,
                            Binary::Max => f64::from(u8::from(x >= y)),
                            Binary::Min => f64::from(u8::from(x <= y)),
                        };
                        ga[ia(k)] += gk * d;
                    }
                });
                with_grad!(*b, |gb| {
                    for (k, &gk) in g.iter().enumerate() {
                        let (x, y) = (da[ia(k)], db[ib(k)]);
                        let d = match kind {
                            Binary::Add => 1.0,
                            Binary::Sub => -1.0,
                            Binary::Mul => x,
                            Binary::Div => -x / (y * y),
                            Binary::Max => f64::from(u8::from(x < y)),
                            Binary::Min => f64::from(u8::from(x > y)),
                        };
                        gb[ib(k)] += gk * d;
                    }
                });
            }
            Op::Unary { kind, x } => {
                let xv = nodes[x.0].value.data();
                let yv = node.value.data();
                with_grad!(*x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * kind.derivative(xv[k], yv[k]);
                    }
                });
            }
            Op::BceLogits { x, target } => {
                let xv = nodes[x.0].value.data();
                with_grad!(*x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * (sigmoid(xv[k]) - target[k]);
                    }
                });
            }
            Op::Sum { x, map } => {
                with_grad!(*x, |gx| {
                    for (k, &o) in map.iter().enumerate() {
                        gx[k] += g[o];
                    }
                });
            }
            Op::Reshape { x } => {
                with_grad!(*x, |gx| {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                });
            }
            Op::Permute { x, src } | Op::Resize { x, src } => {
                with_grad!(*x, |gx| {
                    for (k, &s) in src.iter().enumerate() {
                        gx[s] += g[k];
                    }
                });
            }
            Op::Gather { x, indices } => {
                with_grad!(*x, |gx| {
                    for (k, &s) in indices.iter().enumerate() {
                        gx[s] += g[k];
                    }
                });
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = nodes[x.0].value.shape();
                let len = node.value.shape()[*axis];
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                with_grad!(*x, |gx| {
                    for o in 0..outer {
                        let base = (o * in_shape[*axis] + start) * inner;
                        for j in 0..len * inner {
                            gx[base + j] += g[o * len * inner + j];
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &v in xs {
                    let len = nodes[v.0].value.shape()[*axis] * inner;
                    with_grad!(v, |gv| {
                        for o in 0..outer {
                            for j in 0..len {
                                gv[o * len + j] += g[o * total + offset + j];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                with_grad!(*a, |ga| {
                    // dA = G * B^T
                    kernels::gemm(m, n, k, Mat::rows(g, n), Mat::transposed(nodes[b.0].value.data(), n), 1.0, ga);
                });
                with_grad!(*b, |gb| {
                    // dB = A^T * G
                    kernels::gemm(k, m, n, Mat::transposed(nodes[a.0].value.data(), k), Mat::rows(g, n), 1.0, gb);
                });
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let o = nodes[w.0].value.shape()[0];
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let ohw = geom.oh * geom.ow;
                let mut gmat = vec![0.0; o * ncols];
                for n in 0..geom.n {
                    for oc in 0..o {
                        gmat[oc * ncols + n * ohw..oc * ncols + (n + 1) * ohw]
                            .copy_from_slice(&g[(n * o + oc) * ohw..(n * o + oc + 1) * ohw]);
                    }
                }
                if let Some(bv) = b {
                    with_grad!(*bv, |gb| {
                        for oc in 0..o {
                            gb[oc] += gmat[oc * ncols..(oc + 1) * ncols].iter().sum::<f64>();
                        }
                    });
                }
                with_grad!(*w, |gw| {
                    kernels::gemm(o, ncols, rows, Mat::rows(&gmat, ncols), Mat::transposed(cols, ncols), 1.0, gw);
                });
                with_grad!(*x, |gx| {
                    let mut dcols = vec![0.0; rows * ncols];
                    kernels::gemm(
                        rows,
                        o,
                        ncols,
                        Mat::transposed(nodes[w.0].value.data(), rows),
                        Mat::rows(&gmat, ncols),
                        0.0,
                        &mut dcols,
                    );
                    kernels::col2im(&dcols, geom, gx);
                });
            }
            Op::MaxPool { x, argmax } => {
                with_grad!(*x, |gx| {
                    for (k, &s) in argmax.iter().enumerate() {
                        gx[s] += g[k];
                    }
                });
            }
            Op::Bilinear { x, pts } => {
                let sx = nodes[x.0].value.shape();
                let (n, c, h, w) = if sx.len() == 4 { (sx[0], sx[1], sx[2], sx[3]) } else { (1, sx[0], sx[1], sx[2]) };
                let p = node.value.numel() / (n * c);
                let d = nodes[x.0].value.data();
                let pd = nodes[pts.0].value.data();
                with_grad!(*x, |gx| {
                    for bb in 0..n {
                        for q in 0..p {
                            let taps = bilinear_taps(pd[(bb * p + q) * 2], pd[(bb * p + q) * 2 + 1], h, w);
                            for ch in 0..c {
                                let gk = g[(bb * c + ch) * p + q];
                                let base = (bb * c + ch) * h * w;
                                for (idx, wt) in taps.iter().flatten() {
                                    gx[base + idx] += gk * wt;
                                }
                            }
                        }
                    }
                });
                with_grad!(*pts, |gp| {
                    for bb in 0..n {
                        for q in 0..p {
                            let (py, px) = (pd[(bb * p + q) * 2], pd[(bb * p + q) * 2 + 1]);
                            let (y0, x0) = (py.floor(), px.floor());
                            let (fy, fx) = (py - y0, px - x0);
                            let (y0, x0) = (y0 as isize, x0 as isize);
                            let (mut dy, mut dx) = (0.0, 0.0);
                            for ch in 0..c {
                                let plane = &d[(bb * c + ch) * h * w..(bb * c + ch + 1) * h * w];
                                let at = |yy: isize, xx: isize| -> f64 {
                                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                        plane[yy as usize * w + xx as usize]
                                    } else {
                                        0.0
                                    }
                                };
                                let (v00, v01, v10, v11) =
                                    (at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1));
                                let gk = g[(bb * c + ch) * p + q];
                                dy += gk * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                                dx += gk * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                            }
                            gp[(bb * p + q) * 2] += dy;
                            gp[(bb * p + q) * 2 + 1] += dx;
                        }
                    }
                });
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                let contributions = backward(&values, &node.value, g);
                for (&v, contrib) in inputs.iter().zip(contributions) {
                    with_grad!(v, |gv| {
                        for (a, b) in gv.iter_mut().zip(&contrib) {
                            *a += b;
                        }
                    });
                }
            }
        }
    }
}

fn grad_buf<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]))
}

/// In-grid neighbour offsets and weights of a bilinear sample.
fn bilinear_taps(py: f64, px: f64, h: usize, w: usize) -> [Option<(usize, f64)>; 4] {
    let (y0, x0) = (py.floor(), px.floor());
    let (fy, fx) = (py - y0, px - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let tap = |yy: isize, xx: isize, wt: f64| {
        (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && wt != 0.0)
            .then(|| (yy as usize * w + xx as usize, wt))
    };
    [
        tap(y0, x0, (1.0 - fy) * (1.0 - fx)),
        tap(y0, x0 + 1, (1.0 - fy) * fx),
        tap(y0 + 1, x0, fy * (1.0 - fx)),
        tap(y0 + 1, x0 + 1, fy * fx),
    ]
}
