//! The search loop and the baselines built on it.
//!
//! Each iteration of [`search`] takes one architecture step on a fresh
//! validation batch, then one weight step on a fresh training batch (the
//! same batch the unrolled lookahead used). Several runs can go in
//! parallel; a single run is strictly sequential.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bilevel::{
    arch_gradient_first_order, arch_gradient_second_order_with, ensure_finite, BilevelProblem, GradRequest,
    SecondOrderOptions, Split, Unroll,
};
use crate::cell::{derive_genotype, AlphaParams, CellSpec, Gene, Genotype};
use crate::config::{AlphaOptimizer, JointMode, Schedule, SearchConfig, SearchMode, TaskKind};
use crate::error::{NasError, Result};
use crate::network::{train_genotype, Metrics, SupernetProblem};
use crate::ops::OpKind;
use crate::optim::{clip_global_norm, Adam, CosineSchedule, Optimizer, SgdMomentum};
use crate::tasks::data::{holdout_split, load_delimited, make_synthetic_classification, Dataset, DelimitedSchema, SplitTag};
use crate::tasks::toy::AnalyticBilevelProblem;

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Training loss of the batch used for the weight step, before it.
    pub train_loss: f64,
    /// Outer loss seen by the architecture step.
    pub val_loss: f64,
    pub eta_w: f64,
    /// Finite-difference radius, when the correction term ran.
    pub epsilon_used: Option<f64>,
    /// Relative path of the α snapshot taken after this iteration.
    pub alpha_snapshot: Option<String>,
    /// Seconds since the run started. Not part of any artifact.
    pub wall_clock: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub records: Vec<IterationRecord>,
    /// `(iteration, α)` for every snapshot referenced by the records.
    pub snapshots: Vec<(usize, Vec<f64>)>,
    pub final_alpha: Vec<f64>,
    pub final_weights: Vec<f64>,
    pub spec: Option<CellSpec>,
    pub genotype: Option<Genotype>,
    /// Iterations where the correction term was skipped for a vanishing
    /// direction.
    pub skipped_corrections: usize,
}

impl Trajectory {
    pub fn final_alpha_params(&self) -> Option<AlphaParams> {
        let spec = self.spec.as_ref()?;
        AlphaParams::from_vec(spec, self.final_alpha.clone()).ok()
    }
}

pub fn snapshot_path(iteration: usize) -> String {
    format!("alpha/step_{iteration:06}.tsv")
}

/// What a search runs on.
#[derive(Debug, Clone)]
pub enum Task {
    Toy(AnalyticBilevelProblem),
    Classification(Arc<Dataset>),
}

impl Task {
    /// Builds the task named by `config.task`. Classification data without
    /// validation rows gets a seeded holdout of its training rows.
    pub fn from_config(config: &SearchConfig) -> Result<Task> {
        let with_holdout = |d: Dataset| -> Result<Arc<Dataset>> {
            if d.count(SplitTag::Val) > 0 {
                Ok(Arc::new(d))
            } else {
                Ok(Arc::new(holdout_split(&d, config.holdout_fraction, config.data_seed)?))
            }
        };
        match config.task {
            TaskKind::Toy => Ok(Task::Toy(AnalyticBilevelProblem {
                start_alpha: config.toy_start_alpha,
                start_w: config.toy_start_w,
            })),
            TaskKind::Synthetic => Ok(Task::Classification(with_holdout(make_synthetic_classification(
                &config.synthetic(),
            )?)?)),
            TaskKind::Delimited => {
                let path = config
                    .data_path
                    .as_deref()
                    .ok_or_else(|| NasError::Config("task `delimited` needs data_path".into()))?;
                let schema = DelimitedSchema {
                    dims: None,
                    classes: None,
                };
                Ok(Task::Classification(with_holdout(load_delimited(path.as_ref(), &schema)?)?))
            }
        }
    }

    pub fn dataset(&self) -> Option<&Arc<Dataset>> {
        match self {
            Task::Toy(_) => None,
            Task::Classification(d) => Some(d),
        }
    }

    fn require_dataset(&self) -> Result<&Arc<Dataset>> {
        self.dataset()
            .ok_or_else(|| NasError::Config("this operation needs a classification task".into()))
    }
}

/// Runs the configured mode (second-order, first-order or joint).
pub fn search(config: &SearchConfig, task: &Task) -> Result<Trajectory> {
    config.validate()?;
    if config.mode == SearchMode::Random {
        return Err(NasError::Config("mode `random` is served by random search, not the search loop".into()));
    }
    match task {
        Task::Toy(problem) => run(problem, config, None),
        Task::Classification(data) => {
            let spec = config.cell_spec()?;
            let problem = SupernetProblem::new(&spec, data.clone())?;
            run(&problem, config, Some(spec))
        }
    }
}

/// Joint optimization of α and w over train∪val; `config.mode` must be
/// `joint`.
pub fn joint_optimize(config: &SearchConfig, task: &Task) -> Result<Trajectory> {
    if config.mode != SearchMode::Joint {
        return Err(NasError::Config(format!("joint optimization needs mode = joint, got {:?}", config.mode)));
    }
    search(config, task)
}

struct StepResult {
    train_loss: f64,
    val_loss: f64,
    epsilon: Option<f64>,
    skipped: bool,
}

/// The search loop over any bilevel problem. With `spec` set, α snapshots
/// are recorded and a genotype derived at the end.
pub fn run<P: BilevelProblem>(problem: &P, config: &SearchConfig, spec: Option<CellSpec>) -> Result<Trajectory> {
    config.validate()?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut w = problem.initial_weights(&mut rng);
    let mut alpha = problem.initial_alpha();
    let mut w_opt = SgdMomentum::new(w.len(), config.lr_w, config.momentum, config.weight_decay_w);
    let mut a_opt = match config.alpha_optimizer {
        AlphaOptimizer::Adam => Optimizer::Adam(Adam::new(
            alpha.len(),
            config.lr_alpha,
            (config.beta1_alpha, config.beta2_alpha),
            config.weight_decay_alpha,
            1e-8,
        )),
        AlphaOptimizer::Sgd => Optimizer::Sgd(SgdMomentum::new(alpha.len(), config.lr_alpha, 0.0, config.weight_decay_alpha)),
    };
    let cosine = CosineSchedule::new(config.lr_w, config.steps);
    let mut traj = Trajectory {
        spec,
        ..Trajectory::default()
    };

    for t in 0..config.steps {
        let eta_w = match config.schedule {
            Schedule::Cosine => cosine.rate(t)?,
            Schedule::Constant => config.lr_w,
        };
        w_opt.lr = eta_w;

        let weight_step = |w: &mut Vec<f64>, w_opt: &mut SgdMomentum, mut g: Vec<f64>| -> Result<()> {
            ensure_finite("weights gradient", &g)?;
            if config.grad_clip > 0.0 {
                clip_global_norm(&mut g, config.grad_clip);
            }
            w_opt.step(w, &g)
        };

        let step = (|| -> Result<StepResult> {
            match config.mode {
                SearchMode::SecondOrder | SearchMode::FirstOrder => {
                    let val_batch = problem.sample_batch(Split::Val, config.batch_size, &mut rng);
                    let train_batch = problem.sample_batch(Split::Train, config.batch_size, &mut rng);
                    let xi = match config.mode {
                        SearchMode::FirstOrder => 0.0,
                        _ => config.xi.unwrap_or(eta_w),
                    };
                    let unroll = if config.momentum_unroll {
                        Unroll::Momentum {
                            velocity: w_opt.velocity(),
                            momentum: config.momentum,
                            weight_decay: config.weight_decay_w,
                        }
                    } else {
                        Unroll::Plain
                    };
                    let options = SecondOrderOptions {
                        unroll,
                        epsilon_scale: config.epsilon_scale,
                    };
                    let arch = arch_gradient_second_order_with(problem, &w, &alpha, xi, &train_batch, &val_batch, options)?;
                    a_opt.step(&mut alpha, &arch.grad)?;
                    let eval = problem.evaluate(&w, &alpha, &train_batch, GradRequest::WEIGHTS)?;
                    let g = eval.grad_weights.expect("weights requested");
                    weight_step(&mut w, &mut w_opt, g)?;
                    Ok(StepResult {
                        train_loss: eval.loss,
                        val_loss: arch.outer_loss,
                        epsilon: arch.epsilon,
                        skipped: arch.correction_skipped,
                    })
                }
                SearchMode::Joint => {
                    let batch = problem.sample_batch(Split::Union, config.batch_size, &mut rng);
                    let (arch_loss, train_loss) = match config.joint_mode {
                        JointMode::Coordinate => {
                            let arch = arch_gradient_first_order(problem, &w, &alpha, &batch)?;
                            a_opt.step(&mut alpha, &arch.grad)?;
                            let eval = problem.evaluate(&w, &alpha, &batch, GradRequest::WEIGHTS)?;
                            weight_step(&mut w, &mut w_opt, eval.grad_weights.expect("weights requested"))?;
                            (arch.outer_loss, eval.loss)
                        }
                        JointMode::Simultaneous => {
                            let eval = problem.evaluate(&w, &alpha, &batch, GradRequest::BOTH)?;
                            let ga = eval.grad_alpha.expect("alpha requested");
                            ensure_finite("alpha gradient", &ga)?;
                            weight_step(&mut w, &mut w_opt, eval.grad_weights.expect("weights requested"))?;
                            a_opt.step(&mut alpha, &ga)?;
                            (eval.loss, eval.loss)
                        }
                    };
                    Ok(StepResult {
                        train_loss,
                        val_loss: arch_loss,
                        epsilon: None,
                        skipped: false,
                    })
                }
                SearchMode::Random => unreachable!("rejected before the loop"),
            }
        })();

        let diverged = |traj: &Trajectory, message: String| NasError::Diverged {
            iteration: t,
            message,
            partial: Box::new(traj.clone()),
        };
        let step = match step {
            Ok(s) => s,
            Err(e) if e.is_numerical() => return Err(diverged(&traj, e.to_string())),
            Err(e) => return Err(e),
        };
        if !step.train_loss.is_finite() || !step.val_loss.is_finite() {
            return Err(diverged(
                &traj,
                format!("non-finite loss (train {}, val {})", step.train_loss, step.val_loss),
            ));
        }
        if let Err(e) = ensure_finite("weights", &w).and_then(|_| ensure_finite("alpha", &alpha)) {
            return Err(diverged(&traj, e.to_string()));
        }
        traj.skipped_corrections += usize::from(step.skipped);

        let last = t + 1 == config.steps;
        let periodic = config.snapshot_every > 0 && (t + 1) % config.snapshot_every == 0;
        let alpha_snapshot = (traj.spec.is_some() && (last || periodic)).then(|| {
            traj.snapshots.push((t, alpha.clone()));
            snapshot_path(t)
        });
        traj.records.push(IterationRecord {
            iteration: t,
            train_loss: step.train_loss,
            val_loss: step.val_loss,
            eta_w,
            epsilon_used: step.epsilon,
            alpha_snapshot,
            wall_clock: started.elapsed().as_secs_f64(),
        });
    }

    if let Some(spec) = &traj.spec {
        traj.genotype = Some(derive_genotype(spec, &AlphaParams::from_vec(spec, alpha.clone())?)?);
    }
    traj.final_alpha = alpha;
    traj.final_weights = w;
    Ok(traj)
}

/// A uniformly random genotype: per node, `k` distinct predecessors and a
/// uniform non-zero op on each.
pub fn sample_genotype(spec: &CellSpec, rng: &mut ChaCha8Rng) -> Genotype {
    let nodes = spec
        .intermediate_nodes()
        .map(|to| {
            let mut preds = sample(rng, to, spec.k).into_vec();
            preds.sort_unstable();
            preds
                .into_iter()
                .map(|pred| Gene {
                    pred,
                    op: OpKind::NON_ZERO[rng.random_range(0..OpKind::NON_ZERO.len())],
                })
                .collect()
        })
        .collect();
    Genotype { spec: *spec, nodes }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleScore {
    pub genotype: Genotype,
    pub val: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomSearchResult {
    pub best: Genotype,
    pub best_index: usize,
    pub samples: Vec<SampleScore>,
}

/// Higher validation accuracy wins, then lower validation loss; remaining
/// ties go to the earlier entry.
fn better(a: &Metrics, b: &Metrics) -> bool {
    a.accuracy > b.accuracy || (a.accuracy == b.accuracy && a.loss < b.loss)
}

/// Best of `n_samples` random genotypes, each trained from scratch with the
/// configured retraining budget and scored on the validation rows.
pub fn random_search(config: &SearchConfig, task: &Task, n_samples: usize) -> Result<RandomSearchResult> {
    if n_samples == 0 {
        return Err(NasError::Config("random search needs at least one sample".into()));
    }
    let data = task.require_dataset()?;
    let spec = config.cell_spec()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let genotypes: Vec<Genotype> = (0..n_samples).map(|_| sample_genotype(&spec, &mut rng)).collect();
    let budget = config.budget();
    let samples = genotypes
        .into_par_iter()
        .map(|g| {
            let trained = train_genotype(&g, data, &budget, config.seed)?;
            Ok(SampleScore {
                genotype: g,
                val: trained.val,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best_index = (1..samples.len()).fold(0, |best, i| if better(&samples[i].val, &samples[best].val) { i } else { best });
    Ok(RandomSearchResult {
        best: samples[best_index].genotype.clone(),
        best_index,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub seed: u64,
    pub genotype: Genotype,
    /// Last validation loss seen during search.
    pub search_val_loss: f64,
    /// Metrics after training the genotype from scratch.
    pub retrain: Metrics,
    pub final_entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub best: Genotype,
    pub best_seed: u64,
    pub candidates: Vec<Candidate>,
}

/// Index of the winning candidate: best from-scratch validation metric,
/// ties to the lowest seed. Search-time losses play no part.
pub fn rank_candidates(candidates: &[Candidate]) -> Option<usize> {
    (0..candidates.len()).reduce(|best, i| {
        let (a, b) = (&candidates[i], &candidates[best]);
        let tied = a.retrain == b.retrain;
        if better(&a.retrain, &b.retrain) || (tied && a.seed < b.seed) {
            i
        } else {
            best
        }
    })
}

/// Runs one search per config, retrains each derived genotype from scratch
/// and keeps the best by validation metric.
pub fn select_architecture(configs: &[SearchConfig], task: &Task) -> Result<Selection> {
    if configs.is_empty() {
        return Err(NasError::Config("selection needs at least one run".into()));
    }
    let mut seeds: Vec<u64> = configs.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    if seeds.windows(2).any(|p| p[0] == p[1]) {
        return Err(NasError::Config("selection runs need distinct seeds".into()));
    }
    let data = task.require_dataset()?;
    let candidates = configs
        .par_iter()
        .map(|cfg| {
            let traj = search(cfg, task)?;
            let genotype = traj.genotype.clone().expect("cell task derives a genotype");
            let trained = train_genotype(&genotype, data, &cfg.budget(), cfg.seed)?;
            Ok(Candidate {
                seed: cfg.seed,
                genotype,
                search_val_loss: traj.records.last().map_or(f64::NAN, |r| r.val_loss),
                retrain: trained.val,
                final_entropy: traj.final_alpha_params().map_or(f64::NAN, |a| a.mean_entropy()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = rank_candidates(&candidates).expect("non-empty");
    Ok(Selection {
        best: candidates[best].genotype.clone(),
        best_seed: candidates[best].seed,
        candidates,
    })
}
