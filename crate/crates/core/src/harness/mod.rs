//! Desk-scale initialization ablation: DoTA vs random-initialized tensor
//! adapters vs LoRA vs full fine-tuning on synthetic regression tasks.
//!
//! Runs over the `(seed, method)` grid are independent and may execute on the
//! thread pool; each run is sequential and a pure function of its inputs.

mod config;
mod model;
mod rng;
mod run;
mod task;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

pub use config::{
    ExperimentConfig, ShapesConfig, DEFAULT_BATCH_SIZE, DEFAULT_EVAL_BATCH_SIZE, DEFAULT_EVAL_EVERY,
};
pub use model::{random_init_cores, LoraBaseline, Method, Model};
pub use rng::seeded_matrix;
pub use run::{mse, run_experiment, Hyper, LogRecord, TrainLog};
pub use task::{DeltaKind, SyntheticTask, TaskSpec};

use crate::error::{DotaError, Result};
use crate::exec::Exec;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub step: usize,
    pub method: Method,
    pub mean_eval_loss: f64,
    pub std_eval_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankSweepRow {
    pub rank: usize,
    pub method: Method,
    pub mean_final_eval_loss: f64,
    pub std_final_eval_loss: f64,
}

#[derive(Clone, Debug)]
pub struct Ablation {
    /// One log per `(seed, method)`, seeds outermost, in config order.
    pub logs: Vec<TrainLog>,
    pub summary: Vec<SummaryRow>,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-method, per-step mean and standard deviation of the eval loss across
/// seeds. Steps missing from a diverged run only average the runs that
/// reached them.
pub fn summarize(logs: &[TrainLog], methods: &[Method]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for &method in methods {
        let mut by_step: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for log in logs.iter().filter(|l| l.method == method) {
            for r in &log.records {
                by_step.entry(r.step).or_default().push(r.eval_loss);
            }
        }
        for (step, values) in by_step {
            let (mean_eval_loss, std_eval_loss) = mean_std(&values);
            rows.push(SummaryRow {
                step,
                method,
                mean_eval_loss,
                std_eval_loss,
            });
        }
    }
    rows
}

fn to_csv<R: Serialize>(rows: &[R], header: &[&str]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| DotaError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// CSV with header `step,method,mean_eval_loss,std_eval_loss`.
pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    to_csv(rows, &["step", "method", "mean_eval_loss", "std_eval_loss"])
}

/// CSV with header `rank,method,mean_final_eval_loss,std_final_eval_loss`.
pub fn rank_sweep_csv(rows: &[RankSweepRow]) -> Result<String> {
    to_csv(
        rows,
        &["rank", "method", "mean_final_eval_loss", "std_final_eval_loss"],
    )
}

pub fn ablate(config: &ExperimentConfig) -> Result<Ablation> {
    ablate_with(config, Exec::default())
}

/// Runs every configured method on every seed's task.
pub fn ablate_with(config: &ExperimentConfig, exec: Exec) -> Result<Ablation> {
    let logs = run_grid(config, &config.hyper(), exec)?;
    let summary = summarize(&logs, &config.methods);
    Ok(Ablation { logs, summary })
}

fn run_grid(config: &ExperimentConfig, hyper: &Hyper, exec: Exec) -> Result<Vec<TrainLog>> {
    let spec = config.task_spec()?;
    let tasks = exec
        .map(config.seeds.clone(), |seed| SyntheticTask::generate(spec.clone(), seed))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(&SyntheticTask, Method)> = tasks
        .iter()
        .flat_map(|t| config.methods.iter().map(move |&m| (t, m)))
        .collect();
    exec.map(jobs, |(task, method)| run_experiment(task, method, hyper))
        .into_iter()
        .collect()
}

/// Final eval loss per `(R, method)` over the configured seeds, for each
/// `R` in `ranks`.
pub fn rank_sweep(config: &ExperimentConfig, ranks: &[usize], exec: Exec) -> Result<Vec<RankSweepRow>> {
    let mut rows = Vec::new();
    for &rank in ranks {
        let hyper = Hyper {
            rank,
            lora_rank: rank,
            ..config.hyper()
        };
        let logs = run_grid(config, &hyper, exec)?;
        for &method in &config.methods {
            let finals: Vec<f64> = logs
                .iter()
                .filter(|l| l.method == method)
                .filter_map(TrainLog::final_eval_loss)
                .collect();
            if finals.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&finals);
            rows.push(RankSweepRow {
                rank,
                method,
                mean_final_eval_loss: mean,
                std_final_eval_loss: std,
            });
        }
    }
    Ok(rows)
}

/// File name of a run's CSV inside the output directory.
pub fn run_file_name(log: &TrainLog) -> String {
    format!("{}_seed{}.csv", log.method, log.seed)
}

/// Writes `runs/<method>_seed<seed>.csv`, `summary.csv` and, when given,
/// `rank_sweep.csv` under `dir`. Returns the written paths.
pub fn write_outputs(ablation: &Ablation, sweep: Option<&[RankSweepRow]>, dir: &Path) -> Result<Vec<PathBuf>> {
    let runs = dir.join("runs");
    fs::create_dir_all(&runs)?;
    let mut written = Vec::new();
    for log in &ablation.logs {
        let path = runs.join(run_file_name(log));
        fs::write(&path, log.to_csv()?)?;
        written.push(path);
    }
    let path = dir.join("summary.csv");
    fs::write(&path, summary_csv(&ablation.summary)?)?;
    written.push(path);
    if let Some(rows) = sweep {
        let path = dir.join("rank_sweep.csv");
        fs::write(&path, rank_sweep_csv(rows)?)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(seeds: &str, methods: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{"dims": [16, 16], "shapes": {{"in": [4, 4], "out": [4, 4]}}, "R": 4, "N": 2,
                "steps": 15, "lr": 0.3, "seeds": {seeds}, "methods": {methods},
                "r_delta": 4, "delta_scale": 0.05, "eval_every": 5}}"#
        ))
        .unwrap()
    }

    #[test]
    fn grid_counts_and_summary_means() {
        let c = config("[1, 2, 3]", r#"["dota", "dota-random", "lora", "full-ft"]"#);
        let ab = ablate(&c).unwrap();
        assert_eq!(ab.logs.len(), 12);
        assert_eq!(ab.summary.len(), 4 * 4);
        for row in &ab.summary {
            let vals: Vec<f64> = ab
                .logs
                .iter()
                .filter(|l| l.method == row.method)
                .map(|l| l.records.iter().find(|r| r.step == row.step).unwrap().eval_loss)
                .collect();
            let mean = vals.iter().sum::<f64>() / 3.0;
            assert!((row.mean_eval_loss - mean).abs() <= 1e-15 * mean.abs().max(1.0));
        }
        let csv = summary_csv(&ab.summary).unwrap();
        assert!(csv.starts_with("step,method,mean_eval_loss,std_eval_loss\n"));
        assert_eq!(csv.lines().count(), 17);
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let c = config("[4, 5]", r#"["dota", "lora"]"#);
        let a = ablate_with(&c, Exec::Sequential).unwrap();
        let b = ablate_with(&c, Exec::Parallel).unwrap();
        assert_eq!(a.logs, b.logs);
        assert_eq!(a.summary, b.summary);
    }

    #[test]
    fn mean_std_is_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn rank_sweep_and_outputs() {
        let c = config("[1]", r#"["dota", "dota-random"]"#);
        let rows = rank_sweep(&c, &[1, 2], Exec::default()).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.std_final_eval_loss == 0.0));
        let dir = tempfile::tempdir().unwrap();
        let ab = ablate(&c).unwrap();
        let written = write_outputs(&ab, Some(&rows), dir.path()).unwrap();
        assert_eq!(written.len(), 4);
        assert!(dir.path().join("runs/dota-random_seed1.csv").exists());
        let sweep = fs::read_to_string(dir.path().join("rank_sweep.csv")).unwrap();
        assert!(sweep.starts_with("rank,method,mean_final_eval_loss,std_final_eval_loss\n"));
    }
}
