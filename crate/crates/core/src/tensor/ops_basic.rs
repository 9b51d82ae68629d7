//! Element-wise, structural and matrix-product operators.

use rand::Rng;

use super::graph::{accumulate, needs, Node, Op};
use super::kernels::{matmul_into, permute};
use super::{Element, Graph, Result, Tensor, TensorError, Var};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad_f64(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl<T: Element> Graph<T> {
    /// `a + b`, where the shape of `b` must be a suffix of the shape of `a`
    /// (it is broadcast over the leading axes of `a`).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::shape("add", format!("suffix of {:?}", sa), sb));
        }
        let inner = tb.numel();
        let data: Vec<T> = ta
            .data()
            .chunks_exact(inner)
            .flat_map(|chunk| chunk.iter().zip(tb.data()).map(|(&x, &y)| x + y))
            .collect();
        let out = Tensor::from_parts(sa.to_vec(), data);
        Ok(self.push(out, Op::Add { a: ia, b: ib }, &[ia, ib]))
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::shape(
                "mul",
                format!("{:?}", ta.shape()),
                tb.shape(),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul { a: ia, b: ib }, &[ia, ib]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let f = T::of(factor);
        let out = self.nodes[ix].value.map(|v| v * f);
        Ok(self.push(out, Op::Scale { x: ix, factor: f }, &[ix]))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.nodes[ix].value.sum_f64();
        Ok(self.push(Tensor::scalar(T::of(s)), Op::Sum { x: ix }, &[ix]))
    }

    /// Mean squared difference of two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::shape(
                "mse",
                format!("{:?}", ta.shape()),
                tb.shape(),
            ));
        }
        let n = ta.numel() as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(T::of(s / n)),
            Op::Mse { a: ia, b: ib },
            &[ia, ib],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let mut out = self.nodes[ix].value.reshape(shape)?;
        out.requires_grad = false;
        Ok(self.push(out, Op::Reshape { x: ix }, &[ix]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::Config {
                op: "permute",
                msg: format!("{:?} is not a permutation of rank {}", perm, rank),
            });
        }
        let shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
        let data = permute(t.data(), t.shape(), perm);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Permute {
                x: ix,
                perm: perm.to_vec(),
            },
            &[ix],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(TensorError::shape("transpose", "rank >= 2", self.shape(x)));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        let shape = t.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::shape(
                "narrow",
                format!("axis {} range {}..{}", axis, start, start + len),
                shape,
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let span = shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&t.data()[o * span + start * inner..][..len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Narrow { x: ix, axis, start },
            &[ix],
        ))
    }

    /// Joins two tensors along `axis`; all other dims must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(TensorError::shape(
                "concat",
                format!("{:?} except axis {}", sa, axis),
                sb,
            ));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (span_a, span_b) = (sa[axis] * inner, sb[axis] * inner);
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for o in 0..outer {
            data.extend_from_slice(&ta.data()[o * span_a..][..span_a]);
            data.extend_from_slice(&tb.data()[o * span_b..][..span_b]);
        }
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat { a: ia, b: ib, axis },
            &[ia, ib],
        ))
    }

    /// Matrix product. Accepts `[M,P] x [P,Q]` or batched `[G,M,P] x [G,P,Q]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a x b^T` with `b` stored as `[Q,P]` (or `[G,Q,P]`).
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        let dims = matmul_dims(sa, sb, trans_b).ok_or_else(|| {
            TensorError::shape("matmul", format!("operand compatible with {:?}", sa), sb)
        })?;
        let (g, m, p, q) = dims;
        let mut data = vec![T::zero(); g * m * q];
        for gi in 0..g {
            matmul_into(
                m,
                p,
                q,
                &ta.data()[gi * m * p..],
                false,
                &tb.data()[gi * p * q..],
                trans_b,
                &mut data[gi * m * q..],
                false,
            );
        }
        let shape = if sa.len() == 3 {
            vec![g, m, q]
        } else {
            vec![m, q]
        };
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::MatMul {
                a: ia,
                b: ib,
                trans_b,
            },
            &[ia, ib],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.nodes[ix]
            .value
            .map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.push(out, Op::Relu { x: ix }, &[ix]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.nodes[ix].value.map(|v| T::of(gelu_f64(v.as_f64())));
        Ok(self.push(out, Op::Gelu { x: ix }, &[ix]))
    }

    /// Inverted dropout. Identity (same variable) when not training.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let ix = self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Config {
                op: "dropout",
                msg: format!("rate {} outside [0, 1)", rate),
            });
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.nodes[ix].value.numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let t = &self.nodes[ix].value;
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(out, Op::Dropout { x: ix, mask }, &[ix]))
    }

    /// Softmax over the last axis, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        let last = *t.shape().last().unwrap();
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks_exact(last) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let start = data.len();
            let mut total = 0.0f64;
            for &v in row {
                let e = (v - max).exp();
                total += e.as_f64();
                data.push(e);
            }
            let inv = T::of(1.0 / total);
            for v in &mut data[start..] {
                *v = *v * inv;
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(out, Op::Softmax { x: ix }, &[ix]))
    }

    /// Overwrites entries where `mask` is true with `fill`. `mask` covers the
    /// trailing axes of `x` and is repeated over the leading ones.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], fill: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        if mask.is_empty() || !t.numel().is_multiple_of(mask.len()) {
            return Err(TensorError::shape(
                "masked_fill",
                format!("mask length dividing {}", t.numel()),
                &[mask.len()],
            ));
        }
        let fill = T::of(fill);
        let data = t
            .data()
            .chunks_exact(mask.len())
            .flat_map(|c| c.iter().zip(mask).map(|(&v, &m)| if m { fill } else { v }))
            .collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(
            out,
            Op::MaskedFill {
                x: ix,
                mask: mask.to_vec(),
            },
            &[ix],
        ))
    }
}

/// `(batch, m, p, q)` for a compatible matmul pair.
fn matmul_dims(sa: &[usize], sb: &[usize], trans_b: bool) -> Option<(usize, usize, usize, usize)> {
    let (g, a2, b2) = match (sa.len(), sb.len()) {
        (2, 2) => (1, sa, sb),
        (3, 3) if sa[0] == sb[0] => (sa[0], &sa[1..], &sb[1..]),
        _ => return None,
    };
    let (bp, bq) = if trans_b {
        (b2[1], b2[0])
    } else {
        (b2[0], b2[1])
    };
    (a2[1] == bp).then_some((g, a2[0], a2[1], bq))
}

/// Backward dispatch for node `i` given its output gradient.
pub(super) fn backward<T: Element>(
    i: usize,
    gout: &[T],
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::Add { a, b } => {
            if needs(nodes, b) {
                let inner = nodes[b].value.numel();
                let mut gb = vec![T::zero(); inner];
                for chunk in gout.chunks_exact(inner) {
                    for (acc, &g) in gb.iter_mut().zip(chunk) {
                        *acc = *acc + g;
                    }
                }
                accumulate(nodes, grads, b, gb);
            }
            accumulate(nodes, grads, a, gout.to_vec());
        }
        &Op::Mul { a, b } => {
            let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
            if needs(nodes, a) {
                accumulate(
                    nodes,
                    grads,
                    a,
                    gout.iter().zip(vb).map(|(&g, &y)| g * y).collect(),
                );
            }
            if needs(nodes, b) {
                accumulate(
                    nodes,
                    grads,
                    b,
                    gout.iter().zip(va).map(|(&g, &x)| g * x).collect(),
                );
            }
        }
        &Op::Scale { x, factor } => {
            accumulate(nodes, grads, x, gout.iter().map(|&g| g * factor).collect());
        }
        &Op::Sum { x } => {
            accumulate(nodes, grads, x, vec![gout[0]; nodes[x].value.numel()]);
        }
        &Op::Mse { a, b } => {
            let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
            let scale = 2.0 * gout[0].as_f64() / va.len() as f64;
            let ga: Vec<T> = va
                .iter()
                .zip(vb)
                .map(|(&x, &y)| T::of(scale * (x.as_f64() - y.as_f64())))
                .collect();
            if needs(nodes, b) {
                accumulate(nodes, grads, b, ga.iter().map(|&g| -g).collect());
            }
            accumulate(nodes, grads, a, ga);
        }
        &Op::Reshape { x } => accumulate(nodes, grads, x, gout.to_vec()),
        Op::Permute { x, perm } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            accumulate(nodes, grads, *x, permute(gout, out.shape(), &inverse));
        }
        &Op::Narrow { x, axis, start } => {
            let shape = nodes[x].value.shape();
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let span = shape[axis] * inner;
            let len = out.shape()[axis] * inner;
            let mut gx = vec![T::zero(); nodes[x].value.numel()];
            for o in 0..outer {
                gx[o * span + start * inner..][..len].copy_from_slice(&gout[o * len..][..len]);
            }
            accumulate(nodes, grads, x, gx);
        }
        &Op::Concat { a, b, axis } => {
            let (sa, sb) = (nodes[a].value.shape(), nodes[b].value.shape());
            let outer: usize = sa[..axis].iter().product();
            let inner: usize = sa[axis + 1..].iter().product();
            let (span_a, span_b) = (sa[axis] * inner, sb[axis] * inner);
            let mut ga = Vec::with_capacity(outer * span_a);
            let mut gb = Vec::with_capacity(outer * span_b);
            for chunk in gout.chunks_exact(span_a + span_b) {
                ga.extend_from_slice(&chunk[..span_a]);
                gb.extend_from_slice(&chunk[span_a..]);
            }
            accumulate(nodes, grads, a, ga);
            accumulate(nodes, grads, b, gb);
        }
        &Op::MatMul { a, b, trans_b } => {
            let (ta, tb) = (&nodes[a].value, &nodes[b].value);
            let (g, m, p, q) =
                matmul_dims(ta.shape(), tb.shape(), trans_b).expect("checked in forward");
            if needs(nodes, a) {
                // dA = dC * op(B)^T
                let mut ga = vec![T::zero(); g * m * p];
                for gi in 0..g {
                    matmul_into(
                        m,
                        q,
                        p,
                        &gout[gi * m * q..],
                        false,
                        &tb.data()[gi * p * q..],
                        !trans_b,
                        &mut ga[gi * m * p..],
                        false,
                    );
                }
                accumulate(nodes, grads, a, ga);
            }
            if needs(nodes, b) {
                let mut gb = vec![T::zero(); g * p * q];
                for gi in 0..g {
                    if trans_b {
                        // dB[q,p] = dC^T * A
                        matmul_into(
                            q,
                            m,
                            p,
                            &gout[gi * m * q..],
                            true,
                            &ta.data()[gi * m * p..],
                            false,
                            &mut gb[gi * p * q..],
                            false,
                        );
                    } else {
                        // dB[p,q] = A^T * dC
                        matmul_into(
                            p,
                            m,
                            q,
                            &ta.data()[gi * m * p..],
                            true,
                            &gout[gi * m * q..],
                            false,
                            &mut gb[gi * p * q..],
                            false,
                        );
                    }
                }
                accumulate(nodes, grads, b, gb);
            }
        }
        &Op::Relu { x } => {
            let vx = nodes[x].value.data();
            let gx = gout
                .iter()
                .zip(vx)
                .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                .collect();
            accumulate(nodes, grads, x, gx);
        }
        &Op::Gelu { x } => {
            let vx = nodes[x].value.data();
            let gx = gout
                .iter()
                .zip(vx)
                .map(|(&g, &v)| g * T::of(gelu_grad_f64(v.as_f64())))
                .collect();
            accumulate(nodes, grads, x, gx);
        }
        Op::Dropout { x, mask } => {
            accumulate(
                nodes,
                grads,
                *x,
                gout.iter().zip(mask).map(|(&g, &m)| g * m).collect(),
            );
        }
        &Op::Softmax { x } => {
            let last = *out.shape().last().unwrap();
            let mut gx = Vec::with_capacity(gout.len());
            for (g, y) in gout.chunks_exact(last).zip(out.data().chunks_exact(last)) {
                let dot: f64 = g
                    .iter()
                    .zip(y)
                    .map(|(&a, &b)| a.as_f64() * b.as_f64())
                    .sum();
                let dot = T::of(dot);
                gx.extend(g.iter().zip(y).map(|(&a, &b)| b * (a - dot)));
            }
            accumulate(nodes, grads, x, gx);
        }
        Op::MaskedFill { x, mask } => {
            let gx = gout
                .chunks_exact(mask.len())
                .flat_map(|c| {
                    c.iter()
                        .zip(mask)
                        .map(|(&g, &m)| if m { T::zero() } else { g })
                })
                .collect();
            accumulate(nodes, grads, *x, gx);
        }
        _ => super::ops_nn::backward(i, gout, nodes, grads),
    }
}
