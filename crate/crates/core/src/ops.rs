//! The candidate operation set.
//!
//! Registry order is fixed and is also the α coordinate order on every edge:
//!
//! | index | op |
//! |-------|----|
//! | 0 | `zero` |
//! | 1 | `identity` |
//! | 2 | `linear_tanh` |
//! | 3 | `linear_relu` |
//! | 4 | `linear_sigmoid` |
//!
//! Node representations are `(batch, hidden)` matrices, one row per example,
//! so a linear op computes `σ(x · W)` with `W` of shape `(hidden, hidden)`.

use std::fmt;
use std::str::FromStr;

use cellnas_tensor::{Tensor, Value};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NasError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Zero,
    Identity,
    LinearTanh,
    LinearRelu,
    LinearSigmoid,
}

pub const NUM_OPS: usize = 5;

impl OpKind {
    pub const ALL: [OpKind; NUM_OPS] = [
        OpKind::Zero,
        OpKind::Identity,
        OpKind::LinearTanh,
        OpKind::LinearRelu,
        OpKind::LinearSigmoid,
    ];

    /// Every op except `zero`, in registry order.
    pub const NON_ZERO: [OpKind; NUM_OPS - 1] = [
        OpKind::Identity,
        OpKind::LinearTanh,
        OpKind::LinearRelu,
        OpKind::LinearSigmoid,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<OpKind> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::Identity => "identity",
            OpKind::LinearTanh => "linear_tanh",
            OpKind::LinearRelu => "linear_relu",
            OpKind::LinearSigmoid => "linear_sigmoid",
        }
    }

    pub fn is_parameterized(self) -> bool {
        matches!(self, OpKind::LinearTanh | OpKind::LinearRelu | OpKind::LinearSigmoid)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = NasError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| NasError::Genotype(format!("unknown op `{s}`")))
    }
}

/// Applies one candidate op to a `(batch, hidden)` node representation.
///
/// `weight` must be present for parameterized kinds and is ignored otherwise.
pub fn apply_op(kind: OpKind, weight: Option<&Value>, x: &Value) -> Result<Value> {
    match kind {
        OpKind::Zero => Ok(Value::constant(Tensor::zeros(x.shape()))),
        OpKind::Identity => Ok(x.clone()),
        _ => {
            let w = weight.ok_or_else(|| {
                NasError::Genotype(format!("op {kind} needs a weight matrix but none was given"))
            })?;
            let pre = x.matmul(w)?;
            let out = match kind {
                OpKind::LinearTanh => pre.tanh()?,
                OpKind::LinearRelu => pre.relu()?,
                _ => pre.sigmoid()?,
            };
            Ok(out)
        }
    }
}

/// Half-width of the uniform init range for a matrix with `fan_in` rows.
pub fn init_scale(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Fills `out` with draws from `U[-1/√fan_in, 1/√fan_in]`.
pub fn fill_uniform(out: &mut [f64], fan_in: usize, rng: &mut impl Rng) {
    let s = init_scale(fan_in);
    for v in out {
        *v = rng.random_range(-s..=s);
    }
}

/// Fresh weights for one edge-op: a `(hidden, hidden)` matrix for
/// parameterized kinds, `None` for `zero` and `identity`.
pub fn init_op_params(kind: OpKind, hidden: usize, rng: &mut impl Rng) -> Option<Tensor> {
    if !kind.is_parameterized() {
        return None;
    }
    let mut data = vec![0.0; hidden * hidden];
    fill_uniform(&mut data, hidden, rng);
    Some(Tensor::matrix(hidden, hidden, data).expect("square matrix"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use cellnas_tensor::check::{central_gradient, relative_l2_error};
    use cellnas_tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn x(rows: usize, hidden: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * hidden).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, hidden, data).unwrap()
    }

    #[test]
    fn registry_order_is_stable() {
        let names: Vec<_> = OpKind::ALL.iter().map(|o| o.name()).collect();
        assert_eq!(names, ["zero", "identity", "linear_tanh", "linear_relu", "linear_sigmoid"]);
        for (i, op) in OpKind::ALL.iter().enumerate() {
            assert_eq!(op.index(), i);
            assert_eq!(OpKind::from_index(i), Some(*op));
            assert_eq!(op.name().parse::<OpKind>().unwrap(), *op);
        }
    }

    #[test]
    fn zero_and_identity() {
        let input = Value::constant(x(3, 4, 1));
        let z = apply_op(OpKind::Zero, None, &input).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(z.shape(), &[3, 4]);
        let id = apply_op(OpKind::Identity, None, &input).unwrap();
        assert_eq!(id.data(), input.data());
    }

    #[test]
    fn zero_weights_give_zero_tanh() {
        let input = Value::constant(x(2, 4, 2));
        let w = Value::constant(Tensor::zeros(&[4, 4]));
        let out = apply_op(OpKind::LinearTanh, Some(&w), &input).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_weight_is_rejected() {
        let input = Value::constant(x(1, 4, 3));
        assert!(matches!(
            apply_op(OpKind::LinearRelu, None, &input),
            Err(NasError::Genotype(_))
        ));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_op_params(OpKind::LinearTanh, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = init_op_params(OpKind::LinearTanh, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(init_scale(4), 0.5);
        assert!(a.data().iter().all(|v| v.abs() <= 0.5));
        assert!(init_op_params(OpKind::Identity, 4, &mut ChaCha8Rng::seed_from_u64(9)).is_none());
    }

    #[test]
    fn parameterized_ops_match_finite_differences() {
        let hidden = 3;
        let input = x(4, hidden, 5);
        for kind in [OpKind::LinearTanh, OpKind::LinearRelu, OpKind::LinearSigmoid] {
            let w0 = init_op_params(kind, hidden, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
            let probe = x(4, hidden, 6);
            let loss_of = |flat: &[f64], tape: Option<&Tape>| {
                let w = Tensor::matrix(hidden, hidden, flat.to_vec()).unwrap();
                let w = match tape {
                    Some(t) => t.param(w),
                    None => Value::constant(w),
                };
                let out = apply_op(kind, Some(&w), &Value::constant(input.clone())).unwrap();
                let loss = out.mul(&Value::constant(probe.clone())).unwrap().sum().unwrap();
                (loss, w)
            };
            let tape = Tape::new();
            let (loss, w) = loss_of(w0.data(), Some(&tape));
            loss.backward().unwrap();
            let analytic = w.grad().unwrap().into_data();
            let numeric = central_gradient(|f| loss_of(f, None).0.item().unwrap(), w0.data(), 1e-5);
            assert!(relative_l2_error(&analytic, &numeric, 1e-8) < 1e-4, "{kind}");
        }
    }
}
