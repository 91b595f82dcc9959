//! Architecture gradients for the bilevel problem
//! `min_α L_val(w*(α), α)` s.t. `w*(α) = argmin_w L_train(w, α)`.
//!
//! The inner solution is approximated by one gradient step
//! `w′ = w − ξ∇_w L_train(w, α)`. Differentiating through that step gives
//!
//! ```text
//! ∇_α L_val(w′, α) − ξ · ∇²_{α,w} L_train(w, α) · ∇_{w′} L_val(w′, α)
//! ```
//!
//! where the mixed second-derivative product is replaced by a central
//! difference of two α-gradients at `w ± ε∇_{w′}L_val`, with
//! `ε = 0.01 / ‖∇_{w′}L_val‖₂`. With `ξ = 0` only the first term remains.
//!
//! Problems expose parameters as flat `f64` slices; `w` is only ever read,
//! perturbed points are fresh copies.

use std::sync::atomic::{AtomicU64, Ordering};

use rand_chacha::ChaCha8Rng;

use crate::error::{NasError, Result};

/// Which data a batch is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    /// Train and validation rows pooled.
    Union,
}

/// Which gradients an evaluation should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradRequest {
    pub weights: bool,
    pub alpha: bool,
}

impl GradRequest {
    pub const NONE: GradRequest = GradRequest { weights: false, alpha: false };
    pub const WEIGHTS: GradRequest = GradRequest { weights: true, alpha: false };
    pub const ALPHA: GradRequest = GradRequest { weights: false, alpha: true };
    pub const BOTH: GradRequest = GradRequest { weights: true, alpha: true };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub grad_weights: Option<Vec<f64>>,
    pub grad_alpha: Option<Vec<f64>>,
}

/// A loss over inner weights `w` and architecture logits `α`, evaluated on
/// batches drawn from a split.
pub trait BilevelProblem: Sync {
    type Batch: Clone + Send;

    fn num_weights(&self) -> usize;
    fn num_alpha(&self) -> usize;
    fn sample_batch(&self, split: Split, batch_size: usize, rng: &mut ChaCha8Rng) -> Self::Batch;
    fn evaluate(&self, w: &[f64], alpha: &[f64], batch: &Self::Batch, request: GradRequest) -> Result<Evaluation>;
    fn initial_weights(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    fn initial_alpha(&self) -> Vec<f64> {
        vec![0.0; self.num_alpha()]
    }
}

/// Tallies of evaluations by kind. A "gradient evaluation" is one forward
/// plus one reverse sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalCounts {
    pub forward_only: u64,
    pub weights_only: u64,
    pub alpha_only: u64,
    pub both: u64,
}

impl EvalCounts {
    pub fn gradient_evaluations(&self) -> u64 {
        self.weights_only + self.alpha_only + self.both
    }

    /// Evaluations that produced a gradient with respect to α.
    pub fn alpha_gradient_evaluations(&self) -> u64 {
        self.alpha_only + self.both
    }

    pub fn total(&self) -> u64 {
        self.forward_only + self.gradient_evaluations()
    }
}

impl std::ops::Sub for EvalCounts {
    type Output = EvalCounts;

    fn sub(self, rhs: EvalCounts) -> EvalCounts {
        EvalCounts {
            forward_only: self.forward_only - rhs.forward_only,
            weights_only: self.weights_only - rhs.weights_only,
            alpha_only: self.alpha_only - rhs.alpha_only,
            both: self.both - rhs.both,
        }
    }
}

/// Wraps a problem and counts every evaluation it serves.
pub struct Counting<P> {
    inner: P,
    counters: [AtomicU64; 4],
}

impl<P> Counting<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            counters: Default::default(),
        }
    }

    pub fn counts(&self) -> EvalCounts {
        let c = |i: usize| self.counters[i].load(Ordering::Relaxed);
        EvalCounts {
            forward_only: c(0),
            weights_only: c(1),
            alpha_only: c(2),
            both: c(3),
        }
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: BilevelProblem> BilevelProblem for Counting<P> {
    type Batch = P::Batch;

    fn num_weights(&self) -> usize {
        self.inner.num_weights()
    }

    fn num_alpha(&self) -> usize {
        self.inner.num_alpha()
    }

    fn sample_batch(&self, split: Split, batch_size: usize, rng: &mut ChaCha8Rng) -> Self::Batch {
        self.inner.sample_batch(split, batch_size, rng)
    }

    fn evaluate(&self, w: &[f64], alpha: &[f64], batch: &Self::Batch, request: GradRequest) -> Result<Evaluation> {
        let slot = match (request.weights, request.alpha) {
            (false, false) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (true, true) => 3,
        };
        self.counters[slot].fetch_add(1, Ordering::Relaxed);
        self.inner.evaluate(w, alpha, batch, request)
    }

    fn initial_weights(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.inner.initial_weights(rng)
    }

    fn initial_alpha(&self) -> Vec<f64> {
        self.inner.initial_alpha()
    }
}

pub(crate) fn ensure_finite(what: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(NasError::Numerical(format!("{what} has non-finite entry at index {i}"))),
        None => Ok(()),
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn axpy(x: &[f64], a: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(xi, yi)| xi + a * yi).collect()
}

/// How the one-step lookahead `w′` is formed.
#[derive(Debug, Clone, Copy)]
pub enum Unroll<'a> {
    /// `w′ = w − ξ∇_w L_train(w, α)`.
    Plain,
    /// The step the momentum optimizer would take:
    /// `w′ = w − ξ(μv + ∇_w L_train + λw)`.
    Momentum {
        velocity: &'a [f64],
        momentum: f64,
        weight_decay: f64,
    },
}

/// One-step lookahead weights. `w` itself is not modified.
pub fn unrolled_weights<P: BilevelProblem>(
    problem: &P,
    w: &[f64],
    alpha: &[f64],
    xi: f64,
    train_batch: &P::Batch,
) -> Result<Vec<f64>> {
    unrolled_weights_with(problem, w, alpha, xi, train_batch, Unroll::Plain)
}

pub fn unrolled_weights_with<P: BilevelProblem>(
    problem: &P,
    w: &[f64],
    alpha: &[f64],
    xi: f64,
    train_batch: &P::Batch,
    unroll: Unroll<'_>,
) -> Result<Vec<f64>> {
    if !(xi >= 0.0) {
        return Err(NasError::Config(format!("unroll step xi must be >= 0, got {xi}")));
    }
    let eval = problem.evaluate(w, alpha, train_batch, GradRequest::WEIGHTS)?;
    let g = eval.grad_weights.expect("weights gradient requested");
    ensure_finite("training gradient for the unrolled step", &g)?;
    let step: Vec<f64> = match unroll {
        Unroll::Plain => g,
        Unroll::Momentum {
            velocity,
            momentum,
            weight_decay,
        } => g
            .iter()
            .zip(velocity)
            .zip(w)
            .map(|((gi, vi), wi)| momentum * vi + gi + weight_decay * wi)
            .collect(),
    };
    Ok(axpy(w, -xi, &step))
}

/// An architecture gradient and what it took to compute it.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchGradient {
    pub grad: Vec<f64>,
    /// Value of the outer objective the gradient belongs to.
    pub outer_loss: f64,
    /// Finite-difference radius, when the correction term was evaluated.
    pub epsilon: Option<f64>,
    /// Set when `‖∇_{w′}L_val‖₂` was too small to form ε and the correction
    /// term was taken as zero.
    pub correction_skipped: bool,
}

/// `∇_α L_val(w, α)` at the current weights.
pub fn arch_gradient_first_order<P: BilevelProblem>(
    problem: &P,
    w: &[f64],
    alpha: &[f64],
    val_batch: &P::Batch,
) -> Result<ArchGradient> {
    let eval = problem.evaluate(w, alpha, val_batch, GradRequest::ALPHA)?;
    let grad = eval.grad_alpha.expect("alpha gradient requested");
    ensure_finite("validation alpha gradient", &grad)?;
    Ok(ArchGradient {
        grad,
        outer_loss: eval.loss,
        epsilon: None,
        correction_skipped: false,
    })
}

/// `[∇_α L_train(w + εv, α) − ∇_α L_train(w − εv, α)] / 2ε`.
pub fn hvp_finite_difference<P: BilevelProblem>(
    problem: &P,
    w: &[f64],
    alpha: &[f64],
    v: &[f64],
    train_batch: &P::Batch,
    epsilon: f64,
) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(NasError::Config(format!("finite-difference epsilon must be > 0, got {epsilon}")));
    }
    if v.len() != w.len() {
        return Err(NasError::Spec(format!(
            "direction has {} entries, weights have {}",
            v.len(),
            w.len()
        )));
    }
    let w_plus = axpy(w, epsilon, v);
    let w_minus = axpy(w, -epsilon, v);
    let plus = problem
        .evaluate(&w_plus, alpha, train_batch, GradRequest::ALPHA)?
        .grad_alpha
        .expect("alpha gradient requested");
    let minus = problem
        .evaluate(&w_minus, alpha, train_batch, GradRequest::ALPHA)?
        .grad_alpha
        .expect("alpha gradient requested");
    let hvp: Vec<f64> = plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * epsilon)).collect();
    ensure_finite("finite-difference Hessian-vector product", &hvp)?;
    Ok(hvp)
}

/// Below this norm of `∇_{w′}L_val` the correction term is taken as zero.
pub const MIN_DIRECTION_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct SecondOrderOptions<'a> {
    pub unroll: Unroll<'a>,
    /// Numerator of the ε rule `ε = scale / ‖∇_{w′}L_val‖₂`.
    pub epsilon_scale: f64,
}

impl Default for SecondOrderOptions<'_> {
    fn default() -> Self {
        Self {
            unroll: Unroll::Plain,
            epsilon_scale: 0.01,
        }
    }
}

/// Unrolled architecture gradient with the finite-difference correction.
///
/// `ξ = 0` reduces exactly to [`arch_gradient_first_order`].
pub fn arch_gradient_second_order<P: BilevelProblem>(
    problem: &P,
    w: &[f64],
    alpha: &[f64],
    xi: f64,
    train_batch: &P::Batch,
    val_batch: &P::Batch,
) -> Result<ArchGradient> {
    arch_gradient_second_order_with(problem, w, alpha, xi, train_batch, val_batch, SecondOrderOptions::default())
}

pub fn arch_gradient_second_order_with<P: BilevelProblem>(
    problem: &P,
    w: &[f64],
    alpha: &[f64],
    xi: f64,
    train_batch: &P::Batch,
    val_batch: &P::Batch,
    options: SecondOrderOptions<'_>,
) -> Result<ArchGradient> {
    second_order_impl(problem, w, alpha, xi, train_batch, val_batch, options, |direction, eps| {
        hvp_finite_difference(problem, w, alpha, direction, train_batch, eps)
    })
}

/// Same as [`arch_gradient_second_order`] but with the mixed
/// Hessian-vector product supplied by `hvp(w, α, v)`, e.g. an exact oracle.
pub fn arch_gradient_second_order_with_hvp<P, F>(
    problem: &P,
    w: &[f64],
    alpha: &[f64],
    xi: f64,
    train_batch: &P::Batch,
    val_batch: &P::Batch,
    hvp: F,
) -> Result<ArchGradient>
where
    P: BilevelProblem,
    F: Fn(&[f64], &[f64], &[f64]) -> Result<Vec<f64>>,
{
    second_order_impl(problem, w, alpha, xi, train_batch, val_batch, SecondOrderOptions::default(), |v, _| {
        hvp(w, alpha, v)
    })
}

#[allow(clippy::too_many_arguments)]
fn second_order_impl<P, F>(
    problem: &P,
    w: &[f64],
    alpha: &[f64],
    xi: f64,
    train_batch: &P::Batch,
    val_batch: &P::Batch,
    options: SecondOrderOptions<'_>,
    hvp: F,
) -> Result<ArchGradient>
where
    P: BilevelProblem,
    F: FnOnce(&[f64], f64) -> Result<Vec<f64>>,
{
    if !(xi >= 0.0) {
        return Err(NasError::Config(format!("unroll step xi must be >= 0, got {xi}")));
    }
    if xi == 0.0 {
        return arch_gradient_first_order(problem, w, alpha, val_batch);
    }
    let w_unrolled = unrolled_weights_with(problem, w, alpha, xi, train_batch, options.unroll)?;
    let eval = problem.evaluate(&w_unrolled, alpha, val_batch, GradRequest::BOTH)?;
    let mut grad = eval.grad_alpha.expect("alpha gradient requested");
    let direction = eval.grad_weights.expect("weights gradient requested");
    ensure_finite("validation alpha gradient at unrolled weights", &grad)?;
    ensure_finite("validation weights gradient at unrolled weights", &direction)?;
    let norm = l2_norm(&direction);
    if norm < MIN_DIRECTION_NORM {
        return Ok(ArchGradient {
            grad,
            outer_loss: eval.loss,
            epsilon: None,
            correction_skipped: true,
        });
    }
    let epsilon = options.epsilon_scale / norm;
    let correction = hvp(&direction, epsilon)?;
    for (g, c) in grad.iter_mut().zip(&correction) {
        *g -= xi * c;
    }
    Ok(ArchGradient {
        grad,
        outer_loss: eval.loss,
        epsilon: Some(epsilon),
        correction_skipped: false,
    })
}
