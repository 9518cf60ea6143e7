//! Backward rules, one per recorded operation.

use std::collections::HashMap;

use super::kernels;
use super::ops::ReduceKind;
use super::{accumulate, Op, Tensor};
use crate::scalar::Scalar;

type Grads<T> = HashMap<u64, Vec<T>>;

/// Gradients for `(a op b)` when one side may be a broadcast scalar.
/// `da`/`db` give the local derivative w.r.t. each side at element `i`.
fn binary<T: Scalar>(
    grads: &mut Grads<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &[T],
    da: impl Fn(usize) -> T,
    db: impl Fn(usize) -> T,
) {
    let reduce = |t: &Tensor<T>, f: &dyn Fn(usize) -> T| -> Vec<T> {
        if t.numel() == g.len() {
            g.iter().enumerate().map(|(i, &gi)| gi * f(i)).collect()
        } else {
            vec![g.iter().enumerate().map(|(i, &gi)| gi * f(i)).sum()]
        }
    };
    if a.is_tracked() {
        let ga = reduce(a, &da);
        accumulate(grads, a, ga);
    }
    if b.is_tracked() {
        let gb = reduce(b, &db);
        accumulate(grads, b, gb);
    }
}

/// Value of `t` at output position `i`, honouring scalar broadcasting.
fn at<T: Scalar>(t: &Tensor<T>, i: usize) -> T {
    let d = t.data();
    if d.len() == 1 {
        d[0]
    } else {
        d[i]
    }
}

pub(super) fn propagate<T: Scalar>(node: &Tensor<T>, g: &[T], grads: &mut Grads<T>) {
    let out = node.data();
    match &node.node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.is_tracked() {
                let ga = kernels::gemm_nt(m, n, k, g, b.data());
                accumulate(grads, a, ga);
            }
            if b.is_tracked() {
                let gb = kernels::gemm_tn(k, m, n, a.data(), g);
                accumulate(grads, b, gb);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (a.shape()[0], a.shape()[1]);
            accumulate(grads, a, kernels::transpose(c, r, g));
        }
        Op::Add(a, b) => binary(grads, a, b, g, |_| T::one(), |_| T::one()),
        Op::Sub(a, b) => binary(grads, a, b, g, |_| T::one(), |_| -T::one()),
        Op::Mul(a, b) => binary(grads, a, b, g, |i| at(b, i), |i| at(a, i)),
        Op::AddRow(x, bias) => {
            accumulate(grads, x, g.to_vec());
            if bias.is_tracked() {
                let cols = bias.numel();
                let mut gb = vec![T::zero(); cols];
                for row in g.chunks(cols) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                accumulate(grads, bias, gb);
            }
        }
        Op::Relu(a) => {
            let ga = g
                .iter()
                .zip(a.data())
                .map(|(&gi, &x)| if x > T::zero() { gi } else { T::zero() })
                .collect();
            accumulate(grads, a, ga);
        }
        Op::LeakyRelu(a, slope) => {
            let ga = g
                .iter()
                .zip(a.data())
                .map(|(&gi, &x)| if x > T::zero() { gi } else { gi * *slope })
                .collect();
            accumulate(grads, a, ga);
        }
        Op::Exp(a) => {
            let ga = g.iter().zip(out).map(|(&gi, &y)| gi * y).collect();
            accumulate(grads, a, ga);
        }
        Op::Log(a) => {
            let ga = g.iter().zip(a.data()).map(|(&gi, &x)| gi / x).collect();
            accumulate(grads, a, ga);
        }
        Op::Neg(a) => accumulate(grads, a, g.iter().map(|&v| -v).collect()),
        Op::Scale(a, factor) => accumulate(grads, a, g.iter().map(|&v| v * *factor).collect()),
        Op::Reduce {
            input,
            kind,
            outer,
            len,
            inner,
            argmax,
        } => {
            let (outer, len, inner) = (*outer, *len, *inner);
            let mut gi = vec![T::zero(); input.numel()];
            let denom = T::of(len as f64);
            for o in 0..outer {
                for i in 0..inner {
                    let slot = o * inner + i;
                    match kind {
                        ReduceKind::Sum | ReduceKind::Mean => {
                            let v = if *kind == ReduceKind::Mean {
                                g[slot] / denom
                            } else {
                                g[slot]
                            };
                            for l in 0..len {
                                gi[(o * len + l) * inner + i] = v;
                            }
                        }
                        ReduceKind::Max => {
                            gi[(o * len + argmax[slot]) * inner + i] = g[slot];
                        }
                    }
                }
            }
            accumulate(grads, input, gi);
        }
        Op::SumAll(a) => accumulate(grads, a, vec![g[0]; a.numel()]),
        Op::MeanAll(a) => {
            let v = g[0] / T::of(a.numel().max(1) as f64);
            accumulate(grads, a, vec![v; a.numel()]);
        }
        Op::Softmax(a) => {
            let cols = a.shape()[1];
            let mut ga = vec![T::zero(); g.len()];
            for ((gr, yr), dst) in g
                .chunks(cols)
                .zip(out.chunks(cols))
                .zip(ga.chunks_mut(cols))
            {
                let dot: T = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                for ((d, &gv), &y) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = y * (gv - dot);
                }
            }
            accumulate(grads, a, ga);
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let cols = logits.shape()[1];
            let scale = g[0] / T::of(labels.len() as f64);
            let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (r, &label) in labels.iter().enumerate() {
                gl[r * cols + label] = gl[r * cols + label] - scale;
            }
            accumulate(grads, logits, gl);
        }
        Op::NormalizeRows { input, norms, eps } => {
            let cols = input.shape()[1];
            let mut ga = vec![T::zero(); g.len()];
            for (r, &norm) in norms.iter().enumerate() {
                let x = &input.data()[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let denom = norm + *eps;
                let coupling = if norm > T::zero() {
                    let gx: T = gr.iter().zip(x).map(|(&a, &b)| a * b).sum();
                    gx / (norm * denom * denom)
                } else {
                    T::zero()
                };
                for ((d, &gv), &xv) in ga[r * cols..(r + 1) * cols].iter_mut().zip(gr).zip(x) {
                    *d = gv / denom - xv * coupling;
                }
            }
            accumulate(grads, input, ga);
        }
        Op::SqDistances(q, w) => {
            let (m, d) = (q.shape()[0], q.shape()[1]);
            let n = w.shape()[0];
            let (qd, wd) = (q.data(), w.data());
            let two = T::of(2.0);
            let mut gq = vec![T::zero(); m * d];
            let mut gw = vec![T::zero(); n * d];
            for i in 0..m {
                for j in 0..n {
                    let coef = two * g[i * n + j];
                    if coef == T::zero() {
                        continue;
                    }
                    for c in 0..d {
                        let diff = qd[i * d + c] - wd[j * d + c];
                        gq[i * d + c] = gq[i * d + c] + coef * diff;
                        gw[j * d + c] = gw[j * d + c] - coef * diff;
                    }
                }
            }
            accumulate(grads, q, gq);
            accumulate(grads, w, gw);
        }
        Op::SliceRows(a, start) => {
            let cols = a.shape()[1];
            let mut ga = vec![T::zero(); a.numel()];
            ga[start * cols..start * cols + g.len()].copy_from_slice(g);
            accumulate(grads, a, ga);
        }
    }
}
