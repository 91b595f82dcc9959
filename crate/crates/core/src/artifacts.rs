//! On-disk layout of a run:
//!
//! ```text
//! <dir>/config.toml        canonical config
//! <dir>/trajectory.csv     one row per iteration
//! <dir>/alpha/step_NNNNNN.tsv
//! <dir>/genotype.json      cell tasks only
//! <dir>/summary.txt
//! <dir>/manifest.json
//! ```
//!
//! Nothing written here depends on the clock, so identical configs give
//! identical files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cell::{alpha_to_tsv, AlphaParams};
use crate::config::SearchConfig;
use crate::error::{NasError, Result};
use crate::search::{IterationRecord, Trajectory};

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const GENOTYPE_FILE: &str = "genotype.json";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

const TRAJECTORY_HEADER: [&str; 6] = ["iteration", "train_loss", "val_loss", "eta_w", "epsilon_used", "alpha_snapshot_path"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Paths relative to the run directory, sorted.
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| NasError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| NasError::Data(format!("{}: {e}", path.display())))
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| NasError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| NasError::io(path, e))
}

pub fn trajectory_csv(records: &[IterationRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRAJECTORY_HEADER).expect("in-memory write");
    for r in records {
        w.write_record([
            r.iteration.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.eta_w.to_string(),
            r.epsilon_used.map(|e| e.to_string()).unwrap_or_default(),
            r.alpha_snapshot.clone().unwrap_or_default(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

/// Reads `trajectory.csv`; `wall_clock` is not stored and comes back as 0.
pub fn read_trajectory_csv(path: &Path) -> Result<Vec<IterationRecord>> {
    let parse_err = |line: usize, message: String| NasError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => NasError::io(path, io),
        other => NasError::Data(format!("{}: {other:?}", path.display())),
    })?;
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?;
    if header.iter().ne(TRAJECTORY_HEADER) {
        return Err(parse_err(1, format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| parse_err(line, format!("bad {} `{}`", TRAJECTORY_HEADER[i], &rec[i])))
        };
        out.push(IterationRecord {
            iteration: rec[0].parse().map_err(|_| parse_err(line, format!("bad iteration `{}`", &rec[0])))?,
            train_loss: num(1)?,
            val_loss: num(2)?,
            eta_w: num(3)?,
            epsilon_used: if rec[4].is_empty() { None } else { Some(num(4)?) },
            alpha_snapshot: (!rec[5].is_empty()).then(|| rec[5].to_string()),
            wall_clock: 0.0,
        });
    }
    Ok(out)
}

pub fn summary_text(config: &SearchConfig, traj: &Trajectory) -> String {
    let mut s = String::new();
    s.push_str(&format!("mode: {:?}\n", config.mode));
    s.push_str(&format!("task: {:?}\n", config.task));
    s.push_str(&format!("seed: {}\n", config.seed));
    s.push_str(&format!("iterations: {}\n", traj.records.len()));
    if let Some(last) = traj.records.last() {
        s.push_str(&format!("final_train_loss: {}\n", last.train_loss));
        s.push_str(&format!("final_val_loss: {}\n", last.val_loss));
    }
    s.push_str(&format!("skipped_corrections: {}\n", traj.skipped_corrections));
    match (&traj.genotype, traj.final_alpha_params()) {
        (Some(g), Some(alpha)) => {
            s.push_str(&format!("mean_alpha_entropy: {}\n", alpha.mean_entropy()));
            s.push_str(&format!("genotype: {}\n", g.summary()));
        }
        _ => {
            let fmt = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
            s.push_str(&format!("final_alpha: {}\n", fmt(&traj.final_alpha)));
            s.push_str(&format!("final_w: {}\n", fmt(&traj.final_weights)));
        }
    }
    s
}

/// Writes every artifact of a search run into `dir`.
pub fn write_run(dir: &Path, config: &SearchConfig, traj: &Trajectory) -> Result<RunManifest> {
    let mut files: Vec<String> = Vec::new();
    let mut put = |rel: &str, contents: String| -> Result<()> {
        write(&dir.join(rel), contents)?;
        files.push(rel.to_string());
        Ok(())
    };
    put(CONFIG_FILE, config.to_toml_string())?;
    put(TRAJECTORY_FILE, trajectory_csv(&traj.records))?;
    if let Some(spec) = &traj.spec {
        for (t, alpha) in &traj.snapshots {
            let params = AlphaParams::from_vec(spec, alpha.clone())?;
            put(&crate::search::snapshot_path(*t), alpha_to_tsv(spec, &params))?;
        }
    }
    if let Some(g) = &traj.genotype {
        put(GENOTYPE_FILE, g.to_json() + "\n")?;
    }
    put(SUMMARY_FILE, summary_text(config, traj))?;
    files.sort();
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config.hash(),
        seeds: vec![config.seed],
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write(&dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

/// Subdirectory for one seed of a multi-seed run.
pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}
