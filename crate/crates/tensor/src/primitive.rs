//! Forward and reverse rules for every recorded primitive.
//!
//! Shape rules:
//!
//! | kind | inputs | output |
//! |------|--------|--------|
//! | `Add`, `Sub`, `Mul` | two equal shapes, or one rank-0 scalar and any shape | the non-scalar shape |
//! | `Scale(c)` | any | same |
//! | `MatMul` | `(m, k)`, `(k, n)` | `(m, n)` |
//! | `Tanh`, `Relu`, `Sigmoid` | any | same |
//! | `Softmax { axis }` | any with `axis < rank` | same |
//! | `Concat { axis }` | ≥1 inputs equal except along `axis` | summed along `axis` |
//! | `Mean { axis }` | any with `axis < rank` | `axis` removed |
//! | `Sum` | any | scalar |
//! | `Mse` | two equal shapes | scalar |
//! | `SoftmaxCrossEntropy { labels }` | `(batch, classes)`, `labels.len() == batch` | scalar |
//! | `Reshape { shape }` | any with equal element count | `shape` |
//! | `Index(i)` | any with `i < numel` | scalar |

use crate::error::TensorError;
use crate::tensor::{axis_split, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Scale(f64),
    Mul,
    MatMul,
    Tanh,
    Relu,
    Sigmoid,
    Softmax { axis: usize },
    Concat { axis: usize },
    Mean { axis: usize },
    Sum,
    Mse,
    /// Mean over the batch of `-log softmax(logits)[label]`.
    SoftmaxCrossEntropy { labels: Vec<usize> },
    Reshape { shape: Vec<usize> },
    Index(usize),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "subtract",
            Primitive::Scale(_) => "scale",
            Primitive::Mul => "multiply",
            Primitive::MatMul => "matmul",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softmax { .. } => "softmax",
            Primitive::Concat { .. } => "concat",
            Primitive::Mean { .. } => "mean",
            Primitive::Sum => "sum",
            Primitive::Mse => "mse",
            Primitive::SoftmaxCrossEntropy { .. } => "softmax-cross-entropy",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Index(_) => "index",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::MatMul | Primitive::Mse => {
                Some(2)
            }
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

/// Result of a forward evaluation: the output plus anything the reverse
/// rule needs that is not already an input or the output.
pub(crate) struct Forward {
    pub output: Tensor,
    pub saved: Option<Tensor>,
}

fn check_arity(prim: &Primitive, got: usize) -> Result<(), TensorError> {
    match prim.arity() {
        Some(expected) if expected != got => Err(TensorError::Arity {
            primitive: prim.name(),
            expected,
            got,
        }),
        None if got == 0 => Err(TensorError::Arity {
            primitive: prim.name(),
            expected: 1,
            got,
        }),
        _ => Ok(()),
    }
}

fn check_axis(prim: &Primitive, axis: usize, shape: &[usize]) -> Result<(), TensorError> {
    if axis >= shape.len() {
        Err(TensorError::InvalidAxis {
            primitive: prim.name(),
            axis,
            shape: shape.to_vec(),
        })
    } else {
        Ok(())
    }
}

/// Which operand, if any, is broadcast as a scalar.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    Left,
    Right,
}

fn elementwise_shape(
    prim: &Primitive,
    a: &Tensor,
    b: &Tensor,
) -> Result<(Vec<usize>, Broadcast), TensorError> {
    if a.shape() == b.shape() {
        Ok((a.shape().to_vec(), Broadcast::None))
    } else if a.is_scalar() {
        Ok((b.shape().to_vec(), Broadcast::Left))
    } else if b.is_scalar() {
        Ok((a.shape().to_vec(), Broadcast::Right))
    } else {
        Err(TensorError::ShapeMismatch {
            primitive: prim.name(),
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, mode: Broadcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match mode {
        Broadcast::None => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Left => {
            let x = a.data()[0];
            b.data().iter().map(|&y| f(x, y)).collect()
        }
        Broadcast::Right => {
            let y = b.data()[0];
            a.data().iter().map(|&x| f(x, y)).collect()
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_axis(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| src[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for l in 0..len {
                let e = (src[idx(l)] - max).exp();
                out[idx(l)] = e;
                total += e;
            }
            for l in 0..len {
                out[idx(l)] /= total;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn forward(prim: &Primitive, inputs: &[&Tensor]) -> Result<Forward, TensorError> {
    check_arity(prim, inputs.len())?;
    let plain = |output| Ok(Forward { output, saved: None });
    match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (shape, mode) = elementwise_shape(prim, a, b)?;
            let data = match prim {
                Primitive::Add => zip_broadcast(a, b, mode, |x, y| x + y),
                Primitive::Sub => zip_broadcast(a, b, mode, |x, y| x - y),
                _ => zip_broadcast(a, b, mode, |x, y| x * y),
            };
            plain(Tensor::from_parts(shape, data))
        }
        Primitive::Scale(c) => plain(inputs[0].map(|x| c * x)),
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(TensorError::ShapeMismatch {
                    primitive: prim.name(),
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            plain(Tensor::from_parts(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n)))
        }
        Primitive::Tanh => plain(inputs[0].map(f64::tanh)),
        Primitive::Relu => plain(inputs[0].map(|x| x.max(0.0))),
        Primitive::Sigmoid => plain(inputs[0].map(sigmoid)),
        Primitive::Softmax { axis } => {
            check_axis(prim, *axis, inputs[0].shape())?;
            plain(softmax_axis(inputs[0], *axis))
        }
        Primitive::Concat { axis } => {
            let first = inputs[0];
            check_axis(prim, *axis, first.shape())?;
            for t in &inputs[1..] {
                let compatible = t.rank() == first.rank()
                    && t
                        .shape()
                        .iter()
                        .zip(first.shape())
                        .enumerate()
                        .all(|(d, (x, y))| d == *axis || x == y);
                if !compatible {
                    return Err(TensorError::ShapeMismatch {
                        primitive: prim.name(),
                        left: first.shape().to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
            }
            let (outer, _, inner) = axis_split(first.shape(), *axis);
            let total: usize = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.shape()[*axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = total;
            plain(Tensor::from_parts(shape, data))
        }
        Primitive::Mean { axis } => {
            let x = inputs[0];
            check_axis(prim, *axis, x.shape())?;
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        data[o * inner + i] += x.data()[(o * len + l) * inner + i];
                    }
                }
            }
            data.iter_mut().for_each(|v| *v /= len as f64);
            let mut shape = x.shape().to_vec();
            shape.remove(*axis);
            plain(Tensor::from_parts(shape, data))
        }
        Primitive::Sum => plain(Tensor::scalar(inputs[0].data().iter().sum())),
        Primitive::Mse => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(TensorError::ShapeMismatch {
                    primitive: prim.name(),
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let total: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
            plain(Tensor::scalar(total / a.numel() as f64))
        }
        Primitive::SoftmaxCrossEntropy { labels } => {
            let logits = inputs[0];
            if logits.rank() != 2 {
                return Err(TensorError::BadShape {
                    primitive: prim.name(),
                    expected: "(batch, classes) logits",
                    shape: logits.shape().to_vec(),
                });
            }
            let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
            if labels.len() != batch {
                return Err(TensorError::ShapeMismatch {
                    primitive: prim.name(),
                    left: logits.shape().to_vec(),
                    right: vec![labels.len()],
                });
            }
            if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
                return Err(TensorError::LabelOutOfRange { label, classes });
            }
            let probs = softmax_axis(logits, 1);
            let mut total = 0.0;
            for (r, &label) in labels.iter().enumerate() {
                let row = &logits.data()[r * classes..(r + 1) * classes];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                total += lse - row[label];
            }
            Ok(Forward {
                output: Tensor::scalar(total / batch as f64),
                saved: Some(probs),
            })
        }
        Primitive::Reshape { shape } => {
            let x = inputs[0];
            let n: usize = shape.iter().product();
            if n != x.numel() || shape.contains(&0) {
                return Err(TensorError::ShapeMismatch {
                    primitive: prim.name(),
                    left: x.shape().to_vec(),
                    right: shape.clone(),
                });
            }
            plain(Tensor::from_parts(shape.clone(), x.data().to_vec()))
        }
        Primitive::Index(index) => {
            let x = inputs[0];
            match x.data().get(*index) {
                Some(&v) => plain(Tensor::scalar(v)),
                None => Err(TensorError::IndexOutOfRange {
                    index: *index,
                    numel: x.numel(),
                }),
            }
        }
    }
}

fn reduce_if_broadcast(grad: Vec<f64>, shape: &[usize], scalar: bool) -> Tensor {
    if scalar {
        Tensor::scalar(grad.iter().sum())
    } else {
        Tensor::from_parts(shape.to_vec(), grad)
    }
}

/// Gradients with respect to each input, given the upstream gradient of the
/// output. Entries for inputs that need no gradient may be skipped by the
/// caller; all are computed here for simplicity.
pub(crate) fn backward(
    prim: &Primitive,
    inputs: &[&Tensor],
    output: &Tensor,
    saved: Option<&Tensor>,
    upstream: &[f64],
) -> Vec<Tensor> {
    match prim {
        Primitive::Add | Primitive::Sub => {
            let (a, b) = (inputs[0], inputs[1]);
            let ga = reduce_if_broadcast(upstream.to_vec(), a.shape(), a.is_scalar() && !b.is_scalar());
            let sign = if matches!(prim, Primitive::Sub) { -1.0 } else { 1.0 };
            let gb = reduce_if_broadcast(
                upstream.iter().map(|g| sign * g).collect(),
                b.shape(),
                b.is_scalar() && !a.is_scalar(),
            );
            vec![ga, gb]
        }
        Primitive::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let left_scalar = a.is_scalar() && !b.is_scalar();
            let right_scalar = b.is_scalar() && !a.is_scalar();
            let other_at = |t: &Tensor, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
            let ga: Vec<f64> = upstream.iter().enumerate().map(|(i, g)| g * other_at(b, i)).collect();
            let gb: Vec<f64> = upstream.iter().enumerate().map(|(i, g)| g * other_at(a, i)).collect();
            vec![
                reduce_if_broadcast(ga, a.shape(), left_scalar),
                reduce_if_broadcast(gb, b.shape(), right_scalar),
            ]
        }
        Primitive::Scale(c) => vec![Tensor::from_parts(
            inputs[0].shape().to_vec(),
            upstream.iter().map(|g| c * g).collect(),
        )],
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let bt = transpose_raw(b.data(), k, n);
            let at = transpose_raw(a.data(), m, k);
            vec![
                Tensor::from_parts(vec![m, k], matmul_raw(upstream, &bt, m, n, k)),
                Tensor::from_parts(vec![k, n], matmul_raw(&at, upstream, k, m, n)),
            ]
        }
        Primitive::Tanh => vec![Tensor::from_parts(
            output.shape().to_vec(),
            upstream.iter().zip(output.data()).map(|(g, y)| g * (1.0 - y * y)).collect(),
        )],
        Primitive::Relu => vec![Tensor::from_parts(
            output.shape().to_vec(),
            upstream
                .iter()
                .zip(inputs[0].data())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect(),
        )],
        Primitive::Sigmoid => vec![Tensor::from_parts(
            output.shape().to_vec(),
            upstream.iter().zip(output.data()).map(|(g, y)| g * y * (1.0 - y)).collect(),
        )],
        Primitive::Softmax { axis } => {
            let (outer, len, inner) = axis_split(output.shape(), *axis);
            let y = output.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| upstream[idx(l)] * y[idx(l)]).sum();
                    for l in 0..len {
                        gx[idx(l)] = y[idx(l)] * (upstream[idx(l)] - dot);
                    }
                }
            }
            vec![Tensor::from_parts(output.shape().to_vec(), gx)]
        }
        Primitive::Concat { axis } => {
            let (outer, total, inner) = axis_split(output.shape(), *axis);
            let mut grads: Vec<Vec<f64>> = inputs.iter().map(|t| Vec::with_capacity(t.numel())).collect();
            for o in 0..outer {
                let mut offset = o * total * inner;
                for (t, g) in inputs.iter().zip(grads.iter_mut()) {
                    let chunk = t.shape()[*axis] * inner;
                    g.extend_from_slice(&upstream[offset..offset + chunk]);
                    offset += chunk;
                }
            }
            inputs
                .iter()
                .zip(grads)
                .map(|(t, g)| Tensor::from_parts(t.shape().to_vec(), g))
                .collect()
        }
        Primitive::Mean { axis } => {
            let x = inputs[0];
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let mut gx = vec![0.0; x.numel()];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        gx[(o * len + l) * inner + i] = upstream[o * inner + i] / len as f64;
                    }
                }
            }
            vec![Tensor::from_parts(x.shape().to_vec(), gx)]
        }
        Primitive::Sum => vec![Tensor::filled(inputs[0].shape(), upstream[0])],
        Primitive::Mse => {
            let (a, b) = (inputs[0], inputs[1]);
            let scale = 2.0 * upstream[0] / a.numel() as f64;
            let ga: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| scale * (x - y)).collect();
            let gb = ga.iter().map(|g| -g).collect();
            vec![
                Tensor::from_parts(a.shape().to_vec(), ga),
                Tensor::from_parts(b.shape().to_vec(), gb),
            ]
        }
        Primitive::SoftmaxCrossEntropy { labels } => {
            let probs = saved.expect("softmax-cross-entropy saves its probabilities");
            let classes = probs.shape()[1];
            let scale = upstream[0] / labels.len() as f64;
            let mut g: Vec<f64> = probs.data().iter().map(|p| p * scale).collect();
            for (r, &label) in labels.iter().enumerate() {
                g[r * classes + label] -= scale;
            }
            vec![Tensor::from_parts(probs.shape().to_vec(), g)]
        }
        Primitive::Reshape { .. } => vec![Tensor::from_parts(inputs[0].shape().to_vec(), upstream.to_vec())],
        Primitive::Index(index) => {
            let mut g = Tensor::zeros(inputs[0].shape());
            g.data_mut()[*index] = upstream[0];
            vec![g]
        }
    }
}
