//! Checks the second-order architecture gradient against central finite
//! differences of the unrolled objective
//! `α ↦ L_val(w − ξ∇_w L_train(w, α), α)` on random tiny networks.

use std::sync::Arc;

use cellnas_tensor::check::{central_gradient, relative_l2_error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bilevel::{arch_gradient_second_order, unrolled_weights, BilevelProblem, GradRequest, Split};
use crate::cell::CellSpec;
use crate::error::Result;
use crate::network::SupernetProblem;
use crate::tasks::data::{holdout_split, make_synthetic_classification, SyntheticConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityOptions {
    pub trials: usize,
    pub seed: u64,
    pub intermediates: usize,
    pub hidden: usize,
    pub dims: usize,
    pub classes: usize,
    pub rows: usize,
    pub xi: f64,
    /// Step of the central difference over α.
    pub fd_step: f64,
    pub threshold: f64,
}

impl Default for FidelityOptions {
    fn default() -> Self {
        Self {
            trials: 20,
            seed: 0,
            intermediates: 2,
            hidden: 3,
            dims: 3,
            classes: 2,
            rows: 400,
            xi: 0.1,
            fd_step: 1e-5,
            threshold: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub errors: Vec<f64>,
    pub max_error: f64,
    pub threshold: f64,
    pub parameters: usize,
    pub passed: bool,
}

/// `L_val(w − ξ∇_w L_train(w, α), α)` by forward passes and one weights
/// gradient.
pub fn unrolled_objective<P: BilevelProblem>(
    problem: &P,
    w: &[f64],
    alpha: &[f64],
    xi: f64,
    train: &P::Batch,
    val: &P::Batch,
) -> Result<f64> {
    let w_prime = unrolled_weights(problem, w, alpha, xi, train)?;
    Ok(problem.evaluate(&w_prime, alpha, val, GradRequest::NONE)?.loss)
}

/// A random tiny supernet problem and a random point `(w, α)` on it.
pub fn random_instance(options: &FidelityOptions, trial: u64) -> Result<(SupernetProblem, Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed.wrapping_mul(1_000_003).wrapping_add(trial));
    let data = make_synthetic_classification(&SyntheticConfig {
        samples: options.rows,
        dims: options.dims,
        classes: options.classes,
        clusters_per_class: 1,
        separation: 1.0,
        noise: 0.5,
        test_fraction: 0.0,
        seed: rng.random(),
    })?;
    let data = Arc::new(holdout_split(&data, 0.5, rng.random())?);
    let spec = CellSpec::new(options.intermediates, options.hidden, 2)?;
    let problem = SupernetProblem::new(&spec, data)?;
    let w = problem.initial_weights(&mut rng);
    let alpha: Vec<f64> = (0..problem.num_alpha()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok((problem, w, alpha))
}

pub fn second_order_fidelity(options: &FidelityOptions) -> Result<FidelityReport> {
    let mut errors = Vec::with_capacity(options.trials);
    let mut parameters = 0;
    for trial in 0..options.trials as u64 {
        let (problem, w, alpha) = random_instance(options, trial)?;
        parameters = problem.num_weights() + problem.num_alpha();
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let train = problem.sample_batch(Split::Train, usize::MAX, &mut rng);
        let val = problem.sample_batch(Split::Val, usize::MAX, &mut rng);
        let analytic = arch_gradient_second_order(&problem, &w, &alpha, options.xi, &train, &val)?;
        let reference = central_gradient(
            |a| unrolled_objective(&problem, &w, a, options.xi, &train, &val).unwrap_or(f64::NAN),
            &alpha,
            options.fd_step,
        );
        errors.push(relative_l2_error(&analytic.grad, &reference, 1e-10));
    }
    let max_error = errors.iter().copied().fold(0.0, f64::max);
    Ok(FidelityReport {
        passed: errors.iter().all(|e| *e < options.threshold),
        errors,
        max_error,
        threshold: options.threshold,
        parameters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sizes_are_tiny() {
        let (p, _, _) = random_instance(&FidelityOptions::default(), 0).unwrap();
        assert!(p.num_weights() + p.num_alpha() <= 200 + p.num_alpha());
        assert!(p.num_weights() <= 200);
    }

    #[test]
    fn small_run_passes() {
        let report = second_order_fidelity(&FidelityOptions {
            trials: 3,
            ..Default::default()
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.errors.len(), 3);
    }
}
