use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{axis_split, gemm, Tensor};
use crate::DiffError;

/// Inputs to `arccos` are clamped to `[-1 + ACOS_EPS, 1 - ACOS_EPS]`.
pub const ACOS_EPS: f64 = 1e-7;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Which operand of a binary op is a broadcast scalar, if any.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Bcast {
    None,
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum UnKind {
    Abs,
    Sqrt,
    Exp,
    Log,
    Tanh,
    Sin,
    Cos,
    Acos,
    Square,
    Silu,
    Sigmoid,
    Pow(f64),
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
        bcast: Bcast,
    },
    Unary {
        kind: UnKind,
        a: usize,
    },
    Affine {
        a: usize,
        scale: f64,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Transpose {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Gather {
        a: usize,
        axis: usize,
        index: Vec<usize>,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    SumAxis {
        a: usize,
        axis: usize,
    },
    Extremum {
        a: usize,
        at: usize,
    },
    LayerNorm {
        a: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    Bmm3 {
        a: usize,
        b: usize,
    },
    Bmv3 {
        a: usize,
        v: usize,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Define-by-run record of primitive ops.
///
/// Every op checks its operand shapes and the finiteness of its result, so a
/// NaN surfaces as [`DiffError::NonFinite`] at the op that produced it.
pub struct Tape {
    id: u64,
    pub(crate) nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> DiffError {
    DiffError::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.check(v).expect("var from another tape")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    pub(crate) fn check(&self, v: Var) -> Result<usize, DiffError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(DiffError::NotOnTape);
        }
        Ok(v.idx)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let bcast = if ta.shape() == tb.shape() {
            Bcast::None
        } else if ta.numel() == 1 {
            Bcast::Left
        } else if tb.numel() == 1 {
            Bcast::Right
        } else {
            return Err(shape_err("binary", ta.shape(), tb.shape()));
        };
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let (shape, data): (Vec<usize>, Vec<f64>) = match bcast {
            Bcast::None => (
                ta.shape().to_vec(),
                ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Bcast::Left => {
                let x = ta.data()[0];
                (tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect())
            }
            Bcast::Right => {
                let y = tb.data()[0];
                (ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect())
            }
        };
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let value = Tensor::new(shape, data)?;
        self.push(
            name,
            value,
            Op::Binary {
                kind,
                a: ia,
                b: ib,
                bcast,
            },
            &[ia, ib],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(BinKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnKind, a: Var) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let f: Box<dyn Fn(f64) -> f64> = match kind {
            UnKind::Abs => Box::new(f64::abs),
            UnKind::Sqrt => Box::new(f64::sqrt),
            UnKind::Exp => Box::new(f64::exp),
            UnKind::Log => Box::new(f64::ln),
            UnKind::Tanh => Box::new(f64::tanh),
            UnKind::Sin => Box::new(f64::sin),
            UnKind::Cos => Box::new(f64::cos),
            UnKind::Acos => Box::new(|x: f64| x.clamp(-1.0 + ACOS_EPS, 1.0 - ACOS_EPS).acos()),
            UnKind::Square => Box::new(|x: f64| x * x),
            UnKind::Silu => Box::new(|x: f64| x * sigmoid(x)),
            UnKind::Sigmoid => Box::new(sigmoid),
            UnKind::Pow(p) => Box::new(move |x: f64| x.powf(p)),
        };
        let value = self.nodes[ia].value.map(f);
        let name = match kind {
            UnKind::Abs => "abs",
            UnKind::Sqrt => "sqrt",
            UnKind::Exp => "exp",
            UnKind::Log => "log",
            UnKind::Tanh => "tanh",
            UnKind::Sin => "sin",
            UnKind::Cos => "cos",
            UnKind::Acos => "acos",
            UnKind::Square => "square",
            UnKind::Silu => "silu",
            UnKind::Sigmoid => "sigmoid",
            UnKind::Pow(_) => "pow",
        };
        self.push(name, value, Op::Unary { kind, a: ia }, &[ia])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(UnKind::Abs, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(UnKind::Sqrt, a)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(UnKind::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(UnKind::Log, a)
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(UnKind::Tanh, a)
    }
    pub fn sin(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(UnKind::Sin, a)
    }
    pub fn cos(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(UnKind::Cos, a)
    }
    /// `arccos` with the input clamped to `±(1 - ACOS_EPS)`; zero gradient where clamped.
    pub fn acos(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(UnKind::Acos, a)
    }
    pub fn square(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(UnKind::Square, a)
    }
    pub fn silu(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(UnKind::Silu, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(UnKind::Sigmoid, a)
    }
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var, DiffError> {
        self.unary(UnKind::Pow(p), a)
    }

    /// `scale * a + shift` for constant scalars.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(|x| scale * x + shift);
        self.push("affine", value, Op::Affine { a: ia, scale }, &[ia])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, DiffError> {
        self.affine(a, s, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, DiffError> {
        self.affine(a, -1.0, 0.0)
    }

    // ---- linear algebra and layout ---------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a: ia, b: ib }, &[ia, ib])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        if t.rank() != 2 {
            return Err(DiffError::Shape(format!("transpose needs rank 2, got {:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let src = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push("transpose", value, Op::Transpose { a: ia }, &[ia])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape { a: ia }, &[ia])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, DiffError> {
        if inputs.is_empty() {
            return Err(DiffError::Shape("concat of zero tensors".into()));
        }
        let idx: Vec<usize> = inputs.iter().map(|&v| self.check(v)).collect::<Result<_, _>>()?;
        let first = self.nodes[idx[0]].value.shape().to_vec();
        if axis >= first.len() {
            return Err(DiffError::Shape(format!(
                "concat axis {axis} out of range for {first:?}"
            )));
        }
        let mut total = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idx {
                let t = &self.nodes[i].value;
                let d = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: idx.clone(),
                axis,
            },
            &idx,
        )
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        if axis >= t.rank() || start + len > t.shape()[axis] {
            return Err(DiffError::Shape(format!(
                "slice {start}..{} on axis {axis} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let (outer, dim, inner) = axis_split(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            out.extend_from_slice(&t.data()[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        self.push("slice", value, Op::Slice { a: ia, axis, start }, &[ia])
    }

    /// Select entries along `axis` by index; indices may repeat.
    pub fn gather(&mut self, a: Var, axis: usize, index: &[usize]) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        if axis >= t.rank() {
            return Err(DiffError::Shape(format!("gather axis {axis} on {:?}", t.shape())));
        }
        let (outer, dim, inner) = axis_split(t.shape(), axis);
        if let Some(&bad) = index.iter().find(|&&i| i >= dim) {
            return Err(DiffError::Shape(format!("gather index {bad} out of range {dim}")));
        }
        let mut out = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index {
                let base = (o * dim + i) * inner;
                out.extend_from_slice(&t.data()[base..base + inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = index.len();
        let value = Tensor::new(shape, out)?;
        self.push(
            "gather",
            value,
            Op::Gather {
                a: ia,
                axis,
                index: index.to_vec(),
            },
            &[ia],
        )
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let value = Tensor::scalar(self.nodes[ia].value.sum());
        self.push("sum", value, Op::Sum { a: ia }, &[ia])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        if t.numel() == 0 {
            return Err(DiffError::Shape("mean of empty tensor".into()));
        }
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push("mean", value, Op::Mean { a: ia }, &[ia])
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        if axis >= t.rank() {
            return Err(DiffError::Shape(format!("sum_axis {axis} on {:?}", t.shape())));
        }
        let (outer, dim, inner) = axis_split(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &t.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, out)?;
        self.push("sum_axis", value, Op::SumAxis { a: ia, axis }, &[ia])
    }

    fn extremum(&mut self, a: Var, want_max: bool) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        if t.numel() == 0 {
            return Err(DiffError::Shape("max/min of empty tensor".into()));
        }
        let mut at = 0;
        for (i, &v) in t.data().iter().enumerate() {
            let best = t.data()[at];
            if (want_max && v > best) || (!want_max && v < best) {
                at = i;
            }
        }
        let value = Tensor::scalar(t.data()[at]);
        self.push(
            if want_max { "max" } else { "min" },
            value,
            Op::Extremum { a: ia, at },
            &[ia],
        )
    }

    /// Largest element; the gradient flows to the first maximizer.
    pub fn max(&mut self, a: Var) -> Result<Var, DiffError> {
        self.extremum(a, true)
    }

    pub fn min(&mut self, a: Var) -> Result<Var, DiffError> {
        self.extremum(a, false)
    }

    // ---- normalization ----------------------------------------------------

    /// Normalize each row over the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let d = *t
            .shape()
            .last()
            .ok_or_else(|| DiffError::Shape("layer_norm of scalar".into()))?;
        let rows = t.numel() / d.max(1);
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let x = &t.data()[r * d..(r + 1) * d];
            let mu = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(x) {
                *o = (v - mu) * is;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), xhat.clone())?;
        self.push("layer_norm", value, Op::LayerNorm { a: ia, xhat, inv_std }, &[ia])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        if axis >= t.rank() {
            return Err(DiffError::Shape(format!("softmax axis {axis} on {:?}", t.shape())));
        }
        let (outer, dim, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| (o * dim + d) * inner + i;
                let m = (0..dim).map(|d| src[at(d)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for d in 0..dim {
                    let e = (src[at(d)] - m).exp();
                    out[at(d)] = e;
                    z += e;
                }
                for d in 0..dim {
                    out[at(d)] /= z;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax { a: ia, axis }, &[ia])
    }

    // ---- batched 3x3 kernels ------------------------------------------------

    /// Row-wise product of row-major 3x3 matrices: `[n,9] x [n,9] -> [n,9]`.
    pub fn bmm3(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() || ta.rank() != 2 || ta.shape()[1] != 9 {
            return Err(shape_err("bmm3", ta.shape(), tb.shape()));
        }
        let n = ta.shape()[0];
        let mut out = vec![0.0; n * 9];
        for r in 0..n {
            let (x, y) = (&ta.data()[r * 9..r * 9 + 9], &tb.data()[r * 9..r * 9 + 9]);
            let o = &mut out[r * 9..r * 9 + 9];
            for i in 0..3 {
                for j in 0..3 {
                    o[i * 3 + j] = x[i * 3] * y[j] + x[i * 3 + 1] * y[3 + j] + x[i * 3 + 2] * y[6 + j];
                }
            }
        }
        let value = Tensor::new(vec![n, 9], out)?;
        self.push("bmm3", value, Op::Bmm3 { a: ia, b: ib }, &[ia, ib])
    }

    /// Row-wise matrix-vector product: `[n,9] x [n,3] -> [n,3]`.
    pub fn bmv3(&mut self, a: Var, v: Var) -> Result<Var, DiffError> {
        let (ia, iv) = (self.check(a)?, self.check(v)?);
        let (ta, tv) = (&self.nodes[ia].value, &self.nodes[iv].value);
        if ta.rank() != 2
            || tv.rank() != 2
            || ta.shape()[1] != 9
            || tv.shape()[1] != 3
            || ta.shape()[0] != tv.shape()[0]
        {
            return Err(shape_err("bmv3", ta.shape(), tv.shape()));
        }
        let n = ta.shape()[0];
        let mut out = vec![0.0; n * 3];
        for r in 0..n {
            let (m, x) = (&ta.data()[r * 9..r * 9 + 9], &tv.data()[r * 3..r * 3 + 3]);
            for i in 0..3 {
                out[r * 3 + i] = m[i * 3] * x[0] + m[i * 3 + 1] * x[1] + m[i * 3 + 2] * x[2];
            }
        }
        let value = Tensor::new(vec![n, 3], out)?;
        self.push("bmv3", value, Op::Bmv3 { a: ia, v: iv }, &[ia, iv])
    }

    // ---- conveniences built from primitives -------------------------------

    /// Repeat a `[1,d]` row `n` times, as `ones[n,1] x row`.
    pub fn repeat_rows(&mut self, row: Var, n: usize) -> Result<Var, DiffError> {
        let ones = self.constant(Tensor::full(&[n, 1], 1.0));
        self.matmul(ones, row)
    }

    /// Repeat a `[n,1]` column `d` times, as `col x ones[1,d]`.
    pub fn repeat_cols(&mut self, col: Var, d: usize) -> Result<Var, DiffError> {
        let ones = self.constant(Tensor::full(&[1, d], 1.0));
        self.matmul(col, ones)
    }

    /// `x W + b` for `x:[n,i]`, `w:[i,o]`, `b:[1,o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let n = self.shape(x)[0];
        let xw = self.matmul(x, w)?;
        let bb = self.repeat_rows(b, n)?;
        self.add(xw, bb)
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
