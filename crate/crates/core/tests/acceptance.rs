//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Runs without the libtest harness so the
//! lines always reach the console.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use cellnas_core::artifacts::write_run;
use cellnas_core::bilevel::{
    arch_gradient_first_order, arch_gradient_second_order, arch_gradient_second_order_with_hvp, hvp_finite_difference,
    BilevelProblem, Counting, GradRequest, Split,
};
use cellnas_core::cell::derive_genotype;
use cellnas_core::config::{SearchConfig, SearchMode};
use cellnas_core::fidelity::{random_instance, second_order_fidelity, unrolled_objective, FidelityOptions};
use cellnas_core::network::{test_metrics, train_genotype};
use cellnas_core::search::{random_search, search, select_architecture, Task};
use cellnas_core::space::{count_discrete, count_relaxed, SpaceQuery};
use cellnas_core::tasks::toy::AnalyticBilevelProblem;
use cellnas_tensor::check::{central_gradient, relative_l2_error};
use cellnas_tensor::{Primitive, Tape, Tensor, Value};
use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Box<dyn FnOnce() -> Outcome>);

fn require(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let out = f();
    let took = start.elapsed();
    let note = |d: String| format!("{d}; {:.2}s (limit {:.0}s)", took.as_secs_f64(), limit.as_secs_f64());
    match out {
        Ok(d) if took < limit => Ok(note(d)),
        Ok(d) | Err(d) => Err(note(d)),
    }
}

fn toy(mode: SearchMode) -> (SearchConfig, Task) {
    let cfg = SearchConfig {
        mode,
        ..SearchConfig::toy()
    };
    let task = Task::from_config(&cfg).unwrap();
    (cfg, task)
}

fn toy_final(mode: SearchMode) -> Result<(f64, f64, usize), String> {
    let (cfg, task) = toy(mode);
    let t = search(&cfg, &task).map_err(|e| e.to_string())?;
    Ok((t.final_alpha[0], t.final_weights[0], t.records.len()))
}

fn toy_second_order() -> Outcome {
    let (cfg, _) = toy(SearchMode::SecondOrder);
    let (a, w, iters) = toy_final(SearchMode::SecondOrder)?;
    require(
        (a - 1.0).abs() < 1e-3 && (w - 1.0).abs() < 1e-3 && iters <= 500 && cfg.xi == Some(0.5) && cfg.lr_w == 0.5,
        format!("final (alpha, w) = ({a:.6}, {w:.6}) after {iters} iterations, tol 1e-3"),
    )
}

fn first_vs_second_order() -> Outcome {
    let (a1, w1, _) = toy_final(SearchMode::FirstOrder)?;
    let (a2, _, _) = toy_final(SearchMode::SecondOrder)?;
    let (o1, o2) = ((a1 - 1.0).powi(2), (a2 - 1.0).powi(2));
    require(
        (a1 - 2.0).abs() < 1e-3 && (w1 - 2.0).abs() < 1e-3 && (o1 - 1.0).abs() < 3e-3 && o2 < 1e-6,
        format!("first order ({a1:.6}, {w1:.6}); outer objective {o1:.6} vs {o2:.2e}, tol 1e-3 / 3e-3 / 1e-6"),
    )
}

/// Mixed derivative `∂/∂t ∇_α L_train(w + t·v̂, α)` at `t = 0`, times `‖v‖`,
/// from a central difference of radius 1e-7. The radius is far below the
/// distance to any ReLU kink on these instances, so the result agrees with
/// the true HVP to roughly 1e-8.
fn oracle_hvp<P: BilevelProblem>(p: &P, w: &[f64], alpha: &[f64], v: &[f64], batch: &P::Batch) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let h = 1e-7;
    let grad_at = |t: f64| {
        let wt: Vec<f64> = w.iter().zip(v).map(|(wi, vi)| wi + t * vi / norm).collect();
        p.evaluate(&wt, alpha, batch, GradRequest::ALPHA).unwrap().grad_alpha.unwrap()
    };
    let (plus, minus) = (grad_at(h), grad_at(-h));
    plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * h) * norm).collect()
}

fn fidelity() -> Outcome {
    let options = FidelityOptions::default();
    let report = second_order_fidelity(&options).map_err(|e| e.to_string())?;
    let mut oracle_max = 0.0f64;
    for trial in 0..options.trials as u64 {
        let (p, w, alpha) = random_instance(&options, trial).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let train = p.sample_batch(Split::Train, usize::MAX, &mut rng);
        let val = p.sample_batch(Split::Val, usize::MAX, &mut rng);
        let g = arch_gradient_second_order_with_hvp(&p, &w, &alpha, options.xi, &train, &val, |w, a, v| {
            Ok(oracle_hvp(&p, w, a, v, &train))
        })
        .map_err(|e| e.to_string())?;
        let reference = central_gradient(
            |a| unrolled_objective(&p, &w, a, options.xi, &train, &val).unwrap(),
            &alpha,
            options.fd_step,
        );
        oracle_max = oracle_max.max(relative_l2_error(&g.grad, &reference, 1e-10));
    }
    // Toy problem: the exact HVP is −2v.
    let toy = AnalyticBilevelProblem::default();
    let g = arch_gradient_second_order_with_hvp(&toy, &[-2.0], &[2.0], 0.5, &Split::Train, &Split::Val, |_, _, v| {
        Ok(vec![-2.0 * v[0]])
    })
    .map_err(|e| e.to_string())?;
    // Hypergradient of (w − ξ(2w − 2α))·α − 2α + 1 in α at ξ = 1/2.
    let toy_err = (g.grad[0] - (2.0 * 2.0 - 2.0)).abs();
    require(
        options.trials >= 20
            && report.parameters <= 200
            && report.passed
            && report.threshold == 1e-2
            && oracle_max < 1e-4
            && toy_err < 1e-12,
        format!(
            "{} nets, {} params: eps rule max {:.2e} (tol 1e-2), oracle HVP max {:.2e} (tol 1e-4), toy {:.1e}",
            options.trials, report.parameters, report.max_error, oracle_max, toy_err
        ),
    )
}

fn toy_hvp_exact() -> Outcome {
    let toy = AnalyticBilevelProblem::default();
    let mut worst = 0.0f64;
    for i in 0..=50 {
        let eps = 10f64.powf(-6.0 + 5.0 * i as f64 / 50.0);
        for v in [-3.0, -0.25, 1.0, 7.5, 1e3] {
            for (w, a) in [(-2.0, 2.0), (0.3, 1.7), (1.0, 1.0)] {
                let h = hvp_finite_difference(&toy, &[w], &[a], &[v], &Split::Train, eps).map_err(|e| e.to_string())?;
                worst = worst.max((h[0] + 2.0 * v).abs() / (2.0 * v.abs()));
            }
        }
    }
    require(
        worst < 1e-9,
        format!("worst relative deviation from -2v over eps in [1e-6, 1e-1]: {worst:.2e} (tol 1e-9)"),
    )
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Relative error of the reverse-mode gradient of `Σ prim(x) ∘ r` for a
/// random weighting `r`, against central differences.
fn gradcheck(prim: &Primitive, shapes: &[Vec<usize>], rng: &mut ChaCha8Rng) -> f64 {
    let flat: Vec<f64> = shapes.iter().flat_map(|s| random_tensor(rng, s).into_data()).collect();
    let build = |x: &[f64], tape: Option<&Tape>| {
        let mut off = 0;
        let inputs: Vec<Value> = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::new(s.clone(), x[off..off + n].to_vec()).unwrap();
                off += n;
                tape.map_or_else(|| Value::constant(t.clone()), |tape| tape.param(t.clone()))
            })
            .collect();
        let refs: Vec<&Value> = inputs.iter().collect();
        (Value::apply(prim.clone(), &refs).unwrap(), inputs)
    };
    let weights = random_tensor(rng, build(&flat, None).0.shape());
    let loss = |out: &Value| out.mul(&Value::constant(weights.clone())).unwrap().sum().unwrap();
    let tape = Tape::new();
    let (out, inputs) = build(&flat, Some(&tape));
    tape.backward(&loss(&out)).unwrap();
    let analytic: Vec<f64> = inputs.iter().flat_map(|v| v.grad().unwrap().into_data()).collect();
    let numeric = central_gradient(|x| loss(&build(x, None).0).item().unwrap(), &flat, 1e-5);
    relative_l2_error(&analytic, &numeric, 1e-8)
}

fn autodiff_gradcheck() -> Outcome {
    let cases: Vec<(Primitive, Vec<Vec<usize>>)> = vec![
        (Primitive::Add, vec![vec![3, 4], vec![3, 4]]),
        (Primitive::Sub, vec![vec![], vec![2, 5]]),
        (Primitive::Scale(-1.7), vec![vec![4, 3]]),
        (Primitive::Mul, vec![vec![3, 2, 2], vec![3, 2, 2]]),
        (Primitive::MatMul, vec![vec![3, 4], vec![4, 5]]),
        (Primitive::Tanh, vec![vec![4, 4]]),
        (Primitive::Relu, vec![vec![4, 4]]),
        (Primitive::Sigmoid, vec![vec![4, 4]]),
        (Primitive::Softmax { axis: 1 }, vec![vec![3, 5]]),
        (Primitive::Concat { axis: 1 }, vec![vec![3, 2], vec![3, 4]]),
        (Primitive::Mean { axis: 0 }, vec![vec![5, 3]]),
        (Primitive::Sum, vec![vec![2, 3, 2]]),
        (Primitive::Mse, vec![vec![4, 3], vec![4, 3]]),
        (Primitive::SoftmaxCrossEntropy { labels: vec![0, 2, 1, 2] }, vec![vec![4, 3]]),
        (Primitive::Reshape { shape: vec![2, 6] }, vec![vec![3, 4]]),
        (Primitive::Index(5), vec![vec![3, 3]]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = ("", 0.0f64);
    let mut failed = Vec::new();
    for (prim, shapes) in &cases {
        for _ in 0..8 {
            let err = gradcheck(prim, shapes, &mut rng);
            if err >= 1e-4 {
                failed.push(prim.name());
            }
            if err > worst.1 {
                worst = (prim.name(), err);
            }
        }
    }
    failed.dedup();
    require(
        failed.is_empty(),
        format!("{} primitives x 8 draws, worst {} at {:.2e} (tol 1e-4){}", cases.len(), worst.0, worst.1, if failed.is_empty() { String::new() } else { format!(", failing: {failed:?}") }),
    )
}

/// Counts genotypes by brute force over every edge labelling with the zero
/// op or one of `p` ops, keeping those where each node has exactly `k`
/// non-zero inputs. Also returns the number of labellings.
fn brute_force(n: usize, p: usize, k: usize) -> (u64, u64) {
    let preds: Vec<usize> = (0..n).map(|m| 2 + m).collect();
    let edges: usize = preds.iter().sum();
    let total = ((p + 1) as u64).pow(edges as u32);
    let mut valid = 0;
    for code in 0..total {
        let mut c = code;
        let ok = preds.iter().all(|&np| {
            let live = (0..np)
                .filter(|_| {
                    let op = c % (p as u64 + 1);
                    c /= p as u64 + 1;
                    op != 0
                })
                .count();
            live == k
        });
        valid += ok as u64;
    }
    (valid, total)
}

fn space_counts() -> Outcome {
    let q = SpaceQuery::new(4, 7);
    let d = count_discrete(&q).map_err(|e| e.to_string())?;
    let r = count_relaxed(&q).map_err(|e| e.to_string())?;
    let d2 = count_discrete(&q.with_multiplicity(2)).map_err(|e| e.to_string())?;
    let r2 = count_relaxed(&q.with_multiplicity(2)).map_err(|e| e.to_string())?;
    let digits = |v: &BigUint| v.to_string().len() - 1;
    let mut brute_ok = true;
    for n in 1..=2 {
        for p in 1..=3 {
            for k in 1..=2 {
                let query = SpaceQuery { k, ..SpaceQuery::new(n, p) };
                let (valid, total) = brute_force(n, p, k);
                brute_ok &= count_discrete(&query).unwrap() == BigUint::from(valid);
                brute_ok &= count_relaxed(&query).unwrap() == BigUint::from(total);
            }
        }
    }
    require(
        d == BigUint::from(1_037_664_180u64)
            && r == BigUint::from(4_398_046_511_104u64)
            && q.edge_count() == 14
            && digits(&d2) == 18
            && digits(&r2) == 25
            && brute_ok,
        format!(
            "discrete {d}, relaxed {r}, edges {}, x2: ~1e{} / ~1e{}, brute force n<=2 p<=3 {}",
            q.edge_count(),
            digits(&d2),
            digits(&r2),
            if brute_ok { "agrees" } else { "DISAGREES" }
        ),
    )
}

fn cost_accounting() -> Outcome {
    let (p, w, alpha) = random_instance(&FidelityOptions::default(), 0).map_err(|e| e.to_string())?;
    let counted = Counting::new(p);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let train = counted.sample_batch(Split::Train, 32, &mut rng);
    let val = counted.sample_batch(Split::Val, 32, &mut rng);
    let c0 = counted.counts();
    arch_gradient_first_order(&counted, &w, &alpha, &val).map_err(|e| e.to_string())?;
    let c1 = counted.counts();
    let g = arch_gradient_second_order(&counted, &w, &alpha, 0.1, &train, &val).map_err(|e| e.to_string())?;
    let c2 = counted.counts();
    let (first, second) = (c1 - c0, c2 - c1);
    let extra = second.alpha_gradient_evaluations() as i64 - first.alpha_gradient_evaluations() as i64;
    require(
        extra == 2 && !g.correction_skipped && second.forward_only == 0,
        format!(
            "alpha-gradient evaluations {} vs {} (+{extra}); plus {} weights-only unroll gradient",
            second.alpha_gradient_evaluations(),
            first.alpha_gradient_evaluations(),
            second.weights_only
        ),
    )
}

/// Retrains used to score one genotype. A single retrain has a spread of
/// about half a point of accuracy on the default task, more than the gaps
/// between good cells, so both sides are scored by the mean over the same
/// seeds with the same budget.
const RETRAIN_SEEDS: std::ops::Range<u64> = 1000..1008;

fn mean_val_accuracy(g: &cellnas_core::cell::Genotype, data: &cellnas_core::tasks::data::Dataset, cfg: &SearchConfig) -> Result<f64, String> {
    let mut sum = 0.0;
    for seed in RETRAIN_SEEDS {
        sum += train_genotype(g, data, &cfg.budget(), seed).map_err(|e| e.to_string())?.val.accuracy;
    }
    Ok(sum / RETRAIN_SEEDS.count() as f64)
}

fn desk_scale_search() -> Outcome {
    let base = SearchConfig::default();
    let task = Task::from_config(&base).map_err(|e| e.to_string())?;
    let data = task.dataset().unwrap().clone();
    let uniform = (5f64).ln();
    let (mut wins, mut single_wins) = (0, 0);
    let mut entropies = Vec::new();
    let mut lines = Vec::new();
    for seed in 0..4u64 {
        let configs: Vec<SearchConfig> = (0..4)
            .map(|i| SearchConfig {
                seed: 100 * seed + i,
                ..base.clone()
            })
            .collect();
        let sel = select_architecture(&configs, &task).map_err(|e| e.to_string())?;
        entropies.extend(sel.candidates.iter().map(|c| c.final_entropy));
        let rs = random_search(&SearchConfig { seed, ..base.clone() }, &task, 8).map_err(|e| e.to_string())?;
        let chosen = sel.candidates.iter().find(|c| c.seed == sel.best_seed).unwrap();
        single_wins += (chosen.retrain.accuracy >= rs.samples[rs.best_index].val.accuracy) as usize;
        let (a, b) = (mean_val_accuracy(&sel.best, &data, &base)?, mean_val_accuracy(&rs.best, &data, &base)?);
        wins += (a >= b) as usize;
        lines.push(format!("{a:.4}/{b:.4}"));
    }
    let mean_entropy = entropies.iter().sum::<f64>() / entropies.len() as f64;
    require(
        wins >= 3 && mean_entropy < uniform && data.test_reads() == 0,
        format!(
            "wins {wins}/4 (mean val acc over {} retrains, search/random: {}; single-retrain wins {single_wins}/4), mean alpha entropy {mean_entropy:.4} < {uniform:.4}",
            RETRAIN_SEEDS.count(),
            lines.join(" ")
        ),
    )
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(read_tree(&path));
        } else {
            out.push((path.strip_prefix(dir).unwrap().display().to_string(), fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}

fn hygiene() -> Outcome {
    let cfg = SearchConfig {
        steps: 40,
        samples: 600,
        snapshot_every: 10,
        ..SearchConfig::default()
    };
    let task = Task::from_config(&cfg).map_err(|e| e.to_string())?;
    let data = task.dataset().unwrap().clone();
    let traj = search(&cfg, &task).map_err(|e| e.to_string())?;
    let spec = traj.spec.unwrap();
    derive_genotype(&spec, &traj.final_alpha_params().unwrap()).map_err(|e| e.to_string())?;
    let configs: Vec<SearchConfig> = (0..2).map(|s| SearchConfig { seed: s, ..cfg.clone() }).collect();
    let sel = select_architecture(&configs, &task).map_err(|e| e.to_string())?;
    let reads_during = data.test_reads();

    let trained = train_genotype(&sel.best, &data, &cfg.budget(), 0).map_err(|e| e.to_string())?;
    test_metrics(&trained, &data).map_err(|e| e.to_string())?;
    let counter_live = data.test_reads() > 0;

    let mut identical = true;
    for c in [cfg.clone(), SearchConfig::toy()] {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            let task = Task::from_config(&c).map_err(|e| e.to_string())?;
            let t = search(&c, &task).map_err(|e| e.to_string())?;
            write_run(d.path(), &c, &t).map_err(|e| e.to_string())?;
        }
        let (a, b) = (read_tree(dirs[0].path()), read_tree(dirs[1].path()));
        identical &= !a.is_empty() && a == b;
    }
    require(
        reads_during == 0 && counter_live && identical,
        format!(
            "test reads during search/derive/select: {reads_during}; counter live afterwards: {counter_live}; repeated runs byte-identical: {identical}"
        ),
    )
}

fn main() {
    let total = Instant::now();
    let criteria: Vec<Criterion> = vec![
        ("toy second-order reaches (1, 1)", Box::new(|| timed(Duration::from_secs(1), toy_second_order))),
        ("first-order stalls at (2, 2)", Box::new(first_vs_second_order)),
        ("second-order gradient fidelity", Box::new(|| timed(Duration::from_secs(30), fidelity))),
        ("finite-difference HVP exact on toy", Box::new(toy_hvp_exact)),
        ("autodiff gradcheck per primitive", Box::new(autodiff_gradcheck)),
        ("search-space counts", Box::new(space_counts)),
        ("second-order cost accounting", Box::new(cost_accounting)),
        ("search beats random at desk scale", Box::new(|| timed(Duration::from_secs(600), desk_scale_search))),
        ("test-set hygiene and determinism", Box::new(hygiene)),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        match outcome {
            Ok(detail) => println!("[{}] PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("[{}] FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} of 9 passed in {:.1}s", 9 - failures, total.elapsed().as_secs_f64());
    if failures > 0 {
        std::process::exit(1);
    }
}
