use crate::tape::{Bcast, BinKind, Op, Tape, UnKind, Var, ACOS_EPS};
use crate::tensor::{axis_split, gemm, Tensor};
use crate::DiffError;

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(t.shape().to_vec(), data).expect("gradient shape")
}

impl Tape {
    /// Reverse sweep from a scalar `loss`; one gradient per `wrt` entry.
    ///
    /// Targets that do not influence `loss` (or were recorded as constants)
    /// get zero tensors of their own shape.
    pub fn backward(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>, DiffError> {
        let li = self.check(loss)?;
        for &w in wrt {
            self.check(w)?;
        }
        if self.nodes[li].value.numel() != 1 {
            return Err(DiffError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(like(&self.nodes[li].value, vec![1.0]));

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let needs = |j: usize| self.nodes[j].requires_grad;
            let val = |j: usize| &self.nodes[j].value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Binary { kind, a, b, bcast } => {
                    let (ta, tb) = (val(*a), val(*b));
                    let n = g.numel();
                    let av = |k: usize| {
                        if *bcast == Bcast::Left {
                            ta.data()[0]
                        } else {
                            ta.data()[k]
                        }
                    };
                    let bv = |k: usize| {
                        if *bcast == Bcast::Right {
                            tb.data()[0]
                        } else {
                            tb.data()[k]
                        }
                    };
                    let gd = g.data();
                    let (mut da, mut db) = (Vec::with_capacity(n), Vec::with_capacity(n));
                    for k in 0..n {
                        let (x, y, gk) = (av(k), bv(k), gd[k]);
                        let (p, q) = match kind {
                            BinKind::Add => (gk, gk),
                            BinKind::Sub => (gk, -gk),
                            BinKind::Mul => (gk * y, gk * x),
                            BinKind::Div => (gk / y, -gk * x / (y * y)),
                        };
                        da.push(p);
                        db.push(q);
                    }
                    if needs(*a) {
                        let ga = if *bcast == Bcast::Left {
                            like(ta, vec![da.iter().sum()])
                        } else {
                            like(ta, da)
                        };
                        accumulate(&mut grads, *a, ga);
                    }
                    if needs(*b) {
                        let gb = if *bcast == Bcast::Right {
                            like(tb, vec![db.iter().sum()])
                        } else {
                            like(tb, db)
                        };
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Unary { kind, a } => {
                    if needs(*a) {
                        let x = val(*a).data();
                        let y = node.value.data();
                        let d: Vec<f64> = g
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(k, &gk)| gk * unary_derivative(*kind, x[k], y[k]))
                            .collect();
                        accumulate(&mut grads, *a, like(val(*a), d));
                    }
                }
                Op::Affine { a, scale } => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, g.map(|v| v * scale));
                    }
                }
                Op::MatMul { a, b } => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if needs(*a) {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, false);
                        accumulate(&mut grads, *a, like(ta, ga));
                    }
                    if needs(*b) {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, false);
                        accumulate(&mut grads, *b, like(tb, gb));
                    }
                }
                Op::Transpose { a } => {
                    if needs(*a) {
                        let (r, c) = (g.shape()[0], g.shape()[1]);
                        let mut out = vec![0.0; r * c];
                        for p in 0..r {
                            for q in 0..c {
                                out[q * r + p] = g.data()[p * c + q];
                            }
                        }
                        accumulate(&mut grads, *a, like(val(*a), out));
                    }
                }
                Op::Reshape { a } => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, like(val(*a), g.into_data()));
                    }
                }
                Op::Concat { inputs, axis } => {
                    let (outer, total, inner) = axis_split(g.shape(), *axis);
                    let mut offset = 0;
                    for &j in inputs {
                        let t = val(j);
                        let d = t.shape()[*axis];
                        if needs(j) {
                            let mut out = Vec::with_capacity(t.numel());
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                out.extend_from_slice(&g.data()[base..base + d * inner]);
                            }
                            accumulate(&mut grads, j, like(t, out));
                        }
                        offset += d;
                    }
                }
                Op::Slice { a, axis, start } => {
                    if needs(*a) {
                        let t = val(*a);
                        let (outer, dim, inner) = axis_split(t.shape(), *axis);
                        let len = g.shape()[*axis];
                        let mut out = vec![0.0; t.numel()];
                        for o in 0..outer {
                            let dst = (o * dim + start) * inner;
                            let src = o * len * inner;
                            out[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                        }
                        accumulate(&mut grads, *a, like(t, out));
                    }
                }
                Op::Gather { a, axis, index } => {
                    if needs(*a) {
                        let t = val(*a);
                        let (outer, dim, inner) = axis_split(t.shape(), *axis);
                        let mut out = vec![0.0; t.numel()];
                        for o in 0..outer {
                            for (p, &src_i) in index.iter().enumerate() {
                                let dst = (o * dim + src_i) * inner;
                                let src = (o * index.len() + p) * inner;
                                for q in 0..inner {
                                    out[dst + q] += g.data()[src + q];
                                }
                            }
                        }
                        accumulate(&mut grads, *a, like(t, out));
                    }
                }
                Op::Sum { a } => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, Tensor::full(val(*a).shape(), g.item()));
                    }
                }
                Op::Mean { a } => {
                    if needs(*a) {
                        let t = val(*a);
                        accumulate(&mut grads, *a, Tensor::full(t.shape(), g.item() / t.numel() as f64));
                    }
                }
                Op::SumAxis { a, axis } => {
                    if needs(*a) {
                        let t = val(*a);
                        let (outer, dim, inner) = axis_split(t.shape(), *axis);
                        let mut out = vec![0.0; t.numel()];
                        for o in 0..outer {
                            for d in 0..dim {
                                let dst = (o * dim + d) * inner;
                                out[dst..dst + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                            }
                        }
                        accumulate(&mut grads, *a, like(t, out));
                    }
                }
                Op::Extremum { a, at } => {
                    if needs(*a) {
                        let mut out = Tensor::zeros(val(*a).shape());
                        out.data_mut()[*at] = g.item();
                        accumulate(&mut grads, *a, out);
                    }
                }
                Op::LayerNorm { a, xhat, inv_std } => {
                    if needs(*a) {
                        let d = *g.shape().last().unwrap();
                        let mut out = vec![0.0; g.numel()];
                        for (r, is) in inv_std.iter().enumerate() {
                            let gr = &g.data()[r * d..(r + 1) * d];
                            let xr = &xhat[r * d..(r + 1) * d];
                            let mg = gr.iter().sum::<f64>() / d as f64;
                            let mgx = gr.iter().zip(xr).map(|(p, q)| p * q).sum::<f64>() / d as f64;
                            for c in 0..d {
                                out[r * d + c] = is * (gr[c] - mg - xr[c] * mgx);
                            }
                        }
                        accumulate(&mut grads, *a, like(val(*a), out));
                    }
                }
                Op::Softmax { a, axis } => {
                    if needs(*a) {
                        let y = node.value.data();
                        let (outer, dim, inner) = axis_split(node.value.shape(), *axis);
                        let mut out = vec![0.0; y.len()];
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |d: usize| (o * dim + d) * inner + i;
                                let dot: f64 = (0..dim).map(|d| g.data()[at(d)] * y[at(d)]).sum();
                                for d in 0..dim {
                                    out[at(d)] = y[at(d)] * (g.data()[at(d)] - dot);
                                }
                            }
                        }
                        accumulate(&mut grads, *a, like(val(*a), out));
                    }
                }
                Op::Bmm3 { a, b } => {
                    let (ta, tb) = (val(*a), val(*b));
                    let n = ta.shape()[0];
                    let (mut ga, mut gb) = (vec![0.0; n * 9], vec![0.0; n * 9]);
                    for r in 0..n {
                        let s = r * 9;
                        let (x, y, gg) = (&ta.data()[s..s + 9], &tb.data()[s..s + 9], &g.data()[s..s + 9]);
                        for i in 0..3 {
                            for j in 0..3 {
                                // dA = G B^T, dB = A^T G
                                ga[s + i * 3 + j] = (0..3).map(|k| gg[i * 3 + k] * y[j * 3 + k]).sum();
                                gb[s + i * 3 + j] = (0..3).map(|k| x[k * 3 + i] * gg[k * 3 + j]).sum();
                            }
                        }
                    }
                    if needs(*a) {
                        accumulate(&mut grads, *a, like(ta, ga));
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, like(tb, gb));
                    }
                }
                Op::Bmv3 { a, v } => {
                    let (ta, tv) = (val(*a), val(*v));
                    let n = ta.shape()[0];
                    let (mut ga, mut gv) = (vec![0.0; n * 9], vec![0.0; n * 3]);
                    for r in 0..n {
                        let (m, x, gg) = (
                            &ta.data()[r * 9..r * 9 + 9],
                            &tv.data()[r * 3..r * 3 + 3],
                            &g.data()[r * 3..r * 3 + 3],
                        );
                        for i in 0..3 {
                            for j in 0..3 {
                                ga[r * 9 + i * 3 + j] = gg[i] * x[j];
                                gv[r * 3 + j] += m[i * 3 + j] * gg[i];
                            }
                        }
                    }
                    if needs(*a) {
                        accumulate(&mut grads, *a, like(ta, ga));
                    }
                    if needs(*v) {
                        accumulate(&mut grads, *v, like(tv, gv));
                    }
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|w| {
                grads
                    .get(w.index())
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.value(*w).shape()))
            })
            .collect())
    }
}

fn unary_derivative(kind: UnKind, x: f64, y: f64) -> f64 {
    match kind {
        UnKind::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnKind::Sqrt => 0.5 / y,
        UnKind::Exp => y,
        UnKind::Log => 1.0 / x,
        UnKind::Tanh => 1.0 - y * y,
        UnKind::Sin => x.cos(),
        UnKind::Cos => -x.sin(),
        UnKind::Acos => {
            if x.abs() > 1.0 - ACOS_EPS {
                0.0
            } else {
                -1.0 / (1.0 - x * x).sqrt()
            }
        }
        UnKind::Square => 2.0 * x,
        UnKind::Silu => {
            let s = crate::tape::sigmoid(x);
            s + x * s * (1.0 - s)
        }
        UnKind::Sigmoid => y * (1.0 - y),
        UnKind::Pow(p) => p * x.powf(p - 1.0),
    }
}
