use super::kernels;
use super::{Op, Result, Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Elementwise broadcasting: equal shapes, or one side holds a single value.
enum Broadcast {
    Same,
    RightScalar,
    LeftScalar,
}

fn broadcast<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.numel() == 1 {
        Ok(Broadcast::RightScalar)
    } else if a.numel() == 1 {
        Ok(Broadcast::LeftScalar)
    } else {
        Err(TensorError::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

fn zip_with<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<usize>, Vec<T>)> {
    Ok(match broadcast(op, a, b)? {
        Broadcast::Same => (
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Broadcast::RightScalar => {
            let y = b.item();
            (a.shape().to_vec(), a.data().iter().map(|&x| f(x, y)).collect())
        }
        Broadcast::LeftScalar => {
            let x = a.item();
            (b.shape().to_vec(), b.data().iter().map(|&y| f(x, y)).collect())
        }
    })
}

impl<T: Scalar> Tensor<T> {
    fn map(&self, f: impl Fn(T) -> T) -> Vec<T> {
        self.data().iter().map(|&v| f(v)).collect()
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let mismatch = || TensorError::Shape {
            op: "matmul",
            left: self.shape().to_vec(),
            right: other.shape().to_vec(),
        };
        let (m, k) = self.dims2("matmul").map_err(|_| mismatch())?;
        let (k2, n) = other.dims2("matmul").map_err(|_| mismatch())?;
        if k != k2 {
            return Err(mismatch());
        }
        let data = kernels::gemm_nn(m, k, n, self.data(), other.data());
        Ok(Tensor::build(
            vec![m, n],
            data,
            Op::MatMul(self.clone(), other.clone()),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (r, c) = self.dims2("transpose")?;
        let data = kernels::transpose(r, c, self.data());
        Ok(Tensor::build(vec![c, r], data, Op::Transpose(self.clone())))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, data) = zip_with("add", self, other, |x, y| x + y)?;
        Ok(Tensor::build(shape, data, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, data) = zip_with("sub", self, other, |x, y| x - y)?;
        Ok(Tensor::build(shape, data, Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, data) = zip_with("mul", self, other, |x, y| x * y)?;
        Ok(Tensor::build(shape, data, Op::Mul(self.clone(), other.clone())))
    }

    /// Adds a bias vector of length `cols` to every row of a rank-2 tensor.
    pub fn add_row(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (rows, cols) = self.dims2("add_row")?;
        if bias.numel() != cols || bias.rank() != 1 {
            return Err(TensorError::Shape {
                op: "add_row",
                left: self.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let b = bias.data();
        let mut data = self.data().to_vec();
        for r in 0..rows {
            for (v, &bv) in data[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *v = *v + bv;
            }
        }
        Ok(Tensor::build(
            vec![rows, cols],
            data,
            Op::AddRow(self.clone(), bias.clone()),
        ))
    }

    pub fn relu(&self) -> Tensor<T> {
        let data = self.map(|v| if v > T::zero() { v } else { T::zero() });
        Tensor::build(self.shape().to_vec(), data, Op::Relu(self.clone()))
    }

    pub fn leaky_relu(&self, slope: T) -> Tensor<T> {
        let data = self.map(|v| if v > T::zero() { v } else { v * slope });
        Tensor::build(
            self.shape().to_vec(),
            data,
            Op::LeakyRelu(self.clone(), slope),
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        let data = self.map(T::exp);
        Tensor::build(self.shape().to_vec(), data, Op::Exp(self.clone()))
    }

    /// Natural logarithm; every element must be strictly positive.
    pub fn log(&self) -> Result<Tensor<T>> {
        if let Some((i, v)) = self
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| v.is_nan() || **v <= T::zero())
        {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive value {v} at index {i}"),
            });
        }
        let data = self.map(T::ln);
        Ok(Tensor::build(
            self.shape().to_vec(),
            data,
            Op::Log(self.clone()),
        ))
    }

    pub fn neg(&self) -> Tensor<T> {
        let data = self.map(|v| -v);
        Tensor::build(self.shape().to_vec(), data, Op::Neg(self.clone()))
    }

    /// Multiplies by a constant.
    pub fn scale(&self, factor: T) -> Tensor<T> {
        let data = self.map(|v| v * factor);
        Tensor::build(
            self.shape().to_vec(),
            data,
            Op::Scale(self.clone(), factor),
        )
    }

    pub fn reduce(&self, kind: ReduceKind, axis: usize) -> Result<Tensor<T>> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::Axis {
                op: "reduce",
                axis,
                rank,
            });
        }
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        if len == 0 && kind != ReduceKind::Sum {
            return Err(TensorError::Domain {
                op: "reduce",
                detail: format!("{kind:?} over an empty axis"),
            });
        }
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| x[(o * len + l) * inner + i];
                let slot = o * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let mut acc = T::zero();
                        for l in 0..len {
                            acc = acc + at(l);
                        }
                        if kind == ReduceKind::Mean {
                            acc = acc / T::of(len as f64);
                        }
                        out[slot] = acc;
                    }
                    ReduceKind::Max => {
                        let mut best = 0;
                        for l in 1..len {
                            if at(l) > at(best) {
                                best = l;
                            }
                        }
                        out[slot] = at(best);
                        argmax[slot] = best;
                    }
                }
            }
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(d, _)| d != axis)
            .map(|(_, &s)| s)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(Tensor::build(
            out_shape,
            out,
            Op::Reduce {
                input: self.clone(),
                kind,
                outer,
                len,
                inner,
                argmax,
            },
        ))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        self.reduce(ReduceKind::Sum, axis)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        self.reduce(ReduceKind::Mean, axis)
    }

    pub fn max_axis(&self, axis: usize) -> Result<Tensor<T>> {
        self.reduce(ReduceKind::Max, axis)
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().copied().sum();
        Tensor::build(vec![1], vec![total], Op::SumAll(self.clone()))
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::of(self.numel().max(1) as f64);
        let total: T = self.data().iter().copied().sum();
        Tensor::build(vec![1], vec![total / n], Op::MeanAll(self.clone()))
    }

    /// Softmax along the last axis of a rank-2 tensor.
    pub fn softmax(&self) -> Result<Tensor<T>> {
        let (rows, cols) = self.dims2("softmax")?;
        let data = kernels::softmax_rows(rows, cols, self.data());
        Ok(Tensor::build(
            vec![rows, cols],
            data,
            Op::Softmax(self.clone()),
        ))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor<T>> {
        let (rows, cols) = self.dims2("cross_entropy")?;
        if labels.len() != rows {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                left: self.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if rows == 0 {
            return Err(TensorError::Contract(
                "cross_entropy over an empty batch".into(),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= cols) {
            return Err(TensorError::Index {
                label,
                classes: cols,
            });
        }
        let x = self.data();
        let mut probs = vec![T::zero(); rows * cols];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let src = &x[r * cols..(r + 1) * cols];
            let max = src.iter().copied().fold(T::neg_infinity(), T::max);
            let sum_exp: T = src.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + sum_exp.ln();
            total = total + (log_z - src[label]);
            for (p, &v) in probs[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                *p = (v - log_z).exp();
            }
        }
        let loss = total / T::of(rows as f64);
        Ok(Tensor::build(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: self.clone(),
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Divides each row by `‖row‖ + eps`.
    pub fn normalize_rows(&self, eps: T) -> Result<Tensor<T>> {
        let (rows, cols) = self.dims2("normalize_rows")?;
        let x = self.data();
        let mut norms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let denom = norm + eps;
            data.extend(row.iter().map(|&v| v / denom));
            norms.push(norm);
        }
        Ok(Tensor::build(
            vec![rows, cols],
            data,
            Op::NormalizeRows {
                input: self.clone(),
                norms,
                eps,
            },
        ))
    }

    /// Pairwise squared Euclidean distances `‖self_m − other_n‖²` as `[M×N]`.
    pub fn sq_distances(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, d) = self.dims2("sq_distances")?;
        let (n, d2) = other.dims2("sq_distances")?;
        if d != d2 {
            return Err(TensorError::Shape {
                op: "sq_distances",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let (q, w) = (self.data(), other.data());
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            let qi = &q[i * d..(i + 1) * d];
            for j in 0..n {
                let wj = &w[j * d..(j + 1) * d];
                data[i * n + j] = qi.iter().zip(wj).fold(T::zero(), |acc, (&a, &b)| {
                    let diff = a - b;
                    acc + diff * diff
                });
            }
        }
        Ok(Tensor::build(
            vec![m, n],
            data,
            Op::SqDistances(self.clone(), other.clone()),
        ))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor<T>> {
        let (rows, cols) = self.dims2("slice_rows")?;
        if start > end || end > rows {
            return Err(TensorError::Contract(format!(
                "slice_rows: range {start}..{end} outside {rows} rows"
            )));
        }
        let data = self.data()[start * cols..end * cols].to_vec();
        Ok(Tensor::build(
            vec![end - start, cols],
            data,
            Op::SliceRows(self.clone(), start),
        ))
    }

    /// Row-wise softmax values without graph recording.
    pub fn softmax_values(&self) -> Result<Vec<T>> {
        let (rows, cols) = self.dims2("softmax")?;
        Ok(kernels::softmax_rows(rows, cols, self.data()))
    }

    /// Index of the largest entry in each row; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let (rows, cols) = self.dims2("argmax_rows")?;
        let x = self.data();
        Ok((0..rows)
            .map(|r| {
                let row = &x[r * cols..(r + 1) * cols];
                let mut best = 0;
                for c in 1..cols {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }
}
