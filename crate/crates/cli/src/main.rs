//! `cellnas`: command-line driver for architecture search runs.
//!
//! Exit status is 0 on success, 2 for bad input (flags, configs, files,
//! genotypes) and 3 for numerical failures (divergence, failed checks).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cellnas_core::artifacts::{seed_dir, write_run, GENOTYPE_FILE};
use cellnas_core::cell::{alpha_from_tsv, derive_genotype, Genotype};
use cellnas_core::config::{SearchConfig, SearchMode};
use cellnas_core::fidelity::{second_order_fidelity, FidelityOptions};
use cellnas_core::network::{test_metrics, train_genotype, Metrics};
use cellnas_core::search::{random_search, search, Task};
use cellnas_core::space::{count_discrete, count_relaxed, grouped, scientific, SpaceQuery, PROGRESSIVE_REFERENCE};
use cellnas_core::NasError;
use rayon::prelude::*;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "cellnas", version, about = "Differentiable architecture search over small DAG cells")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a search from a config file and write its artifacts.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run these seeds instead of the config's, one subdirectory each.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Run the scalar bilevel problem from (2, -2) and print the end point.
    ToyBilevel {
        #[arg(long, value_enum, default_value_t = ToyMode::SecondOrder)]
        mode: ToyMode,
        /// Unroll step; defaults to the weight learning rate.
        #[arg(long)]
        xi: Option<f64>,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        /// Directory for the trajectory; nothing is written when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn an α snapshot into a discrete genotype.
    Derive {
        #[arg(long)]
        alpha: PathBuf,
        /// Config whose cell fields give the spec.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a genotype from scratch and report train, validation and test
    /// metrics. The only command that reads test rows.
    Evaluate {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train random genotypes with the retraining budget and keep the best.
    RandomSearch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the config's `random_samples`.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Exact sizes of the discrete and relaxed cell spaces.
    Count {
        #[arg(long, default_value_t = 4)]
        intermediates: usize,
        #[arg(long, default_value_t = 7)]
        ops: usize,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 2)]
        input_arity: usize,
        #[arg(long, default_value_t = 1)]
        multiplicity: u32,
    },
    /// Check the second-order architecture gradient against finite
    /// differences of the unrolled objective on random tiny networks.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 2)]
        intermediates: usize,
        #[arg(long, default_value_t = 3)]
        hidden: usize,
        #[arg(long, default_value_t = 3)]
        dims: usize,
        #[arg(long, default_value_t = 400)]
        rows: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ToyMode {
    SecondOrder,
    FirstOrder,
    Joint,
}

impl From<ToyMode> for SearchMode {
    fn from(m: ToyMode) -> Self {
        match m {
            ToyMode::SecondOrder => SearchMode::SecondOrder,
            ToyMode::FirstOrder => SearchMode::FirstOrder,
            ToyMode::Joint => SearchMode::Joint,
        }
    }
}

type CliResult = Result<(), NasError>;

fn write_file(path: &Path, contents: &str) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn read_file(path: &Path) -> Result<String, NasError> {
    fs::read_to_string(path).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> NasError {
    NasError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Runs one search into `dir`. A diverged run still leaves its partial
/// trajectory behind.
fn search_into(dir: &Path, config: &SearchConfig, task: &Task) -> CliResult {
    match search(config, task) {
        Ok(traj) => {
            write_run(dir, config, &traj)?;
            println!("{}: {} iterations", dir.display(), traj.records.len());
            if let Some(g) = &traj.genotype {
                println!("genotype {}", g.summary());
            }
            Ok(())
        }
        Err(NasError::Diverged {
            iteration,
            message,
            partial,
        }) => {
            write_run(dir, config, &partial)?;
            Err(NasError::Diverged {
                iteration,
                message,
                partial,
            })
        }
        Err(e) => Err(e),
    }
}

fn cmd_search(config: &Path, out: &Path, seeds: &[u64]) -> CliResult {
    let config = SearchConfig::from_path(config)?;
    if config.mode == SearchMode::Random {
        return Err(NasError::Config("mode `random` runs through the random-search command".into()));
    }
    config.validate()?;
    let task = Task::from_config(&config)?;
    if seeds.is_empty() {
        return search_into(out, &config, &task);
    }
    let runs: Vec<SearchConfig> = seeds.iter().map(|&seed| SearchConfig { seed, ..config.clone() }).collect();
    runs.par_iter()
        .map(|c| search_into(&seed_dir(out, c.seed), c, &task))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

fn cmd_toy(mode: ToyMode, xi: Option<f64>, steps: usize, out: Option<&Path>) -> CliResult {
    let mut config = SearchConfig {
        mode: mode.into(),
        steps,
        ..SearchConfig::toy()
    };
    if xi.is_some() {
        config.xi = xi;
    }
    config.validate()?;
    let task = Task::from_config(&config)?;
    let traj = search(&config, &task)?;
    if let Some(dir) = out {
        write_run(dir, &config, &traj)?;
    }
    println!("alpha {:.6}", traj.final_alpha[0]);
    println!("w {:.6}", traj.final_weights[0]);
    Ok(())
}

fn cmd_derive(alpha: &Path, config: &Path, out: &Path) -> CliResult {
    let spec = SearchConfig::from_path(config)?.cell_spec()?;
    let params = alpha_from_tsv(&spec, &read_file(alpha)?).map_err(|e| match e {
        NasError::Parse { line, message, .. } => NasError::Parse {
            path: alpha.to_path_buf(),
            line,
            message,
        },
        other => other,
    })?;
    let genotype = derive_genotype(&spec, &params)?;
    write_file(out, &(genotype.to_json() + "\n"))?;
    println!("genotype {}", genotype.summary());
    Ok(())
}

#[derive(Serialize)]
struct EvaluateReport {
    seed: u64,
    train: Metrics,
    val: Metrics,
    test: Metrics,
}

fn load_genotype(path: &Path) -> Result<Genotype, NasError> {
    Genotype::from_json(&read_file(path)?).map_err(|e| NasError::Genotype(format!("{}: {e}", path.display())))
}

fn cmd_evaluate(genotype: &Path, config: &Path, out: Option<&Path>) -> CliResult {
    let config = SearchConfig::from_path(config)?;
    let genotype = load_genotype(genotype)?;
    let spec = config.cell_spec()?;
    if genotype.spec != spec {
        return Err(NasError::Genotype(format!(
            "genotype was built for {:?}, config describes {:?}",
            genotype.spec, spec
        )));
    }
    let task = Task::from_config(&config)?;
    let data = task
        .dataset()
        .ok_or_else(|| NasError::Config("evaluate needs a classification task".into()))?;
    let trained = train_genotype(&genotype, data, &config.budget(), config.seed)?;
    let report = EvaluateReport {
        seed: config.seed,
        train: trained.train,
        val: trained.val,
        test: test_metrics(&trained, data)?,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    if let Some(path) = out {
        write_file(path, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_random_search(config: &Path, out: &Path, samples: Option<usize>) -> CliResult {
    let config = SearchConfig::from_path(config)?;
    config.validate()?;
    let task = Task::from_config(&config)?;
    let n = samples.unwrap_or(config.random_samples);
    let result = random_search(&config, &task, n)?;
    let mut scores = String::from("sample,val_accuracy,val_loss,genotype\n");
    for (i, s) in result.samples.iter().enumerate() {
        scores.push_str(&format!("{i},{},{},\"{}\"\n", s.val.accuracy, s.val.loss, s.genotype.summary()));
    }
    write_file(&out.join("scores.csv"), &scores)?;
    write_file(&out.join(GENOTYPE_FILE), &(result.best.to_json() + "\n"))?;
    let best = &result.samples[result.best_index];
    println!(
        "best sample {} val accuracy {:.4} loss {:.4}",
        result.best_index, best.val.accuracy, best.val.loss
    );
    println!("genotype {}", result.best.summary());
    Ok(())
}

fn cmd_count(query: SpaceQuery) -> CliResult {
    let discrete = count_discrete(&query)?;
    let relaxed = count_relaxed(&query)?;
    println!("edges {}", query.edge_count() * query.multiplicity as usize);
    println!("discrete {} ({})", grouped(&discrete), scientific(&discrete, 2));
    println!("relaxed {} ({})", grouped(&relaxed), scientific(&relaxed, 2));
    println!("progressive-search reference {PROGRESSIVE_REFERENCE:.1e}");
    Ok(())
}

fn cmd_grad_check(options: FidelityOptions) -> CliResult {
    let report = second_order_fidelity(&options)?;
    let verdict = if report.passed { "PASS" } else { "FAIL" };
    println!(
        "{verdict}: {} networks, {} parameters, max relative error {:.3e} (threshold {:.0e})",
        report.errors.len(),
        report.parameters,
        report.max_error,
        report.threshold
    );
    if report.passed {
        Ok(())
    } else {
        Err(NasError::Numerical(format!(
            "max relative error {:.3e} exceeds {:.0e}",
            report.max_error, report.threshold
        )))
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Search { config, out, seeds } => cmd_search(&config, &out, &seeds),
        Command::ToyBilevel { mode, xi, steps, out } => cmd_toy(mode, xi, steps, out.as_deref()),
        Command::Derive { alpha, config, out } => cmd_derive(&alpha, &config, &out),
        Command::Evaluate { genotype, config, out } => cmd_evaluate(&genotype, &config, out.as_deref()),
        Command::RandomSearch { config, out, samples } => cmd_random_search(&config, &out, samples),
        Command::Count {
            intermediates,
            ops,
            k,
            input_arity,
            multiplicity,
        } => cmd_count(SpaceQuery {
            intermediates,
            ops,
            k,
            input_arity,
            multiplicity,
        }),
        Command::GradCheck {
            seed,
            trials,
            intermediates,
            hidden,
            dims,
            rows,
        } => cmd_grad_check(FidelityOptions {
            seed,
            trials,
            intermediates,
            hidden,
            dims,
            rows,
            ..Default::default()
        }),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
