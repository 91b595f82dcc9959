//! Scalar bilevel problem with a closed-form solution.
//!
//! `L_train(w, α) = w² − 2αw + α²` and `L_val(w, α) = αw − 2α + 1`.
//! The inner optimum is `w*(α) = α`, so the outer objective reduces to
//! `(α − 1)²`, minimised at `(α, w) = (1, 1)`.

use cellnas_tensor::{Tape, Tensor, Value};
use rand_chacha::ChaCha8Rng;

use crate::bilevel::{BilevelProblem, Evaluation, GradRequest, Split};
use crate::error::Result;

pub const TOY_START: (f64, f64) = (2.0, -2.0);

/// Closed-form `(L_train, L_val)`.
pub fn toy_losses(alpha: f64, w: f64) -> (f64, f64) {
    (w * w - 2.0 * alpha * w + alpha * alpha, alpha * w - 2.0 * alpha + 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticBilevelProblem {
    pub start_alpha: f64,
    pub start_w: f64,
}

impl Default for AnalyticBilevelProblem {
    fn default() -> Self {
        Self {
            start_alpha: TOY_START.0,
            start_w: TOY_START.1,
        }
    }
}

impl AnalyticBilevelProblem {
    fn record_losses(&self, split: Split, alpha: &Value, w: &Value) -> Result<Value> {
        let train = || -> Result<Value> {
            let ww = w.mul(w)?;
            let aw = alpha.mul(w)?.scale(2.0)?;
            let aa = alpha.mul(alpha)?;
            Ok(ww.sub(&aw)?.add(&aa)?)
        };
        let val = || -> Result<Value> {
            let one = Value::constant(Tensor::scalar(1.0));
            Ok(alpha.mul(w)?.sub(&alpha.scale(2.0)?)?.add(&one)?)
        };
        match split {
            Split::Train => train(),
            Split::Val => val(),
            Split::Union => Ok(train()?.add(&val()?)?),
        }
    }
}

impl BilevelProblem for AnalyticBilevelProblem {
    /// The toy has no data; a "batch" only says which loss to evaluate.
    type Batch = Split;

    fn num_weights(&self) -> usize {
        1
    }

    fn num_alpha(&self) -> usize {
        1
    }

    fn sample_batch(&self, split: Split, _batch_size: usize, _rng: &mut ChaCha8Rng) -> Split {
        split
    }

    fn evaluate(&self, w: &[f64], alpha: &[f64], batch: &Split, request: GradRequest) -> Result<Evaluation> {
        let tape = Tape::new();
        let leaf = |v: f64, grad: bool| {
            if grad {
                tape.param(Tensor::scalar(v))
            } else {
                tape.constant(Tensor::scalar(v))
            }
        };
        let a = leaf(alpha[0], request.alpha);
        let wv = leaf(w[0], request.weights);
        let loss = self.record_losses(*batch, &a, &wv)?;
        let value = loss.item()?;
        if request.weights || request.alpha {
            tape.backward(&loss)?;
        }
        let grad_of = |v: &Value, wanted: bool| -> Result<Option<Vec<f64>>> {
            if !wanted {
                return Ok(None);
            }
            Ok(Some(vec![v.grad().expect("parameter after backward").item()?]))
        };
        Ok(Evaluation {
            loss: value,
            grad_weights: grad_of(&wv, request.weights)?,
            grad_alpha: grad_of(&a, request.alpha)?,
        })
    }

    fn initial_weights(&self, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        vec![self.start_w]
    }

    fn initial_alpha(&self) -> Vec<f64> {
        vec![self.start_alpha]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn start_point_losses() {
        assert_eq!(toy_losses(2.0, -2.0), (16.0, -7.0));
    }

    #[test]
    fn solution_losses() {
        assert_eq!(toy_losses(1.0, 1.0), (0.0, 0.0));
    }

    fn grads(split: Split, alpha: f64, w: f64) -> (f64, f64, f64) {
        let e = AnalyticBilevelProblem::default()
            .evaluate(&[w], &[alpha], &split, GradRequest::BOTH)
            .unwrap();
        (e.loss, e.grad_weights.unwrap()[0], e.grad_alpha.unwrap()[0])
    }

    proptest! {
        #[test]
        fn train_loss_vanishes_on_diagonal(a in -50.0f64..50.0) {
            prop_assert_eq!(toy_losses(a, a).0, 0.0);
        }

        #[test]
        fn train_loss_is_non_negative(a in -50.0f64..50.0, w in -50.0f64..50.0) {
            prop_assert!(toy_losses(a, w).0 >= -1e-9 * (a * a + w * w));
        }

        #[test]
        fn taped_gradients_match_closed_forms(a in -10.0f64..10.0, w in -10.0f64..10.0) {
            let (lt, gw, ga) = grads(Split::Train, a, w);
            let (lt_ref, lv_ref) = toy_losses(a, w);
            prop_assert!((lt - lt_ref).abs() <= 1e-12 * (1.0 + lt_ref.abs()));
            prop_assert!((gw - (2.0 * w - 2.0 * a)).abs() <= 1e-12 * (1.0 + gw.abs()));
            prop_assert!((ga - (2.0 * a - 2.0 * w)).abs() <= 1e-12 * (1.0 + ga.abs()));
            let (lv, gw, ga) = grads(Split::Val, a, w);
            prop_assert!((lv - lv_ref).abs() <= 1e-12 * (1.0 + lv_ref.abs()));
            prop_assert!((gw - a).abs() <= 1e-12 * (1.0 + a.abs()));
            prop_assert!((ga - (w - 2.0)).abs() <= 1e-12 * (1.0 + ga.abs()));
        }
    }
}
