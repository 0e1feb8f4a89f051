//! Independent evaluations fanned out to worker processes. Each worker runs
//! this binary's hidden `worker` verb with one JSON job and prints one JSON
//! result; results are collected in job order whatever the finishing order.

use std::fmt;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};

use anyhow::{bail, Context};
use proxytta_core::checkpoint::Checkpoint;
use proxytta_core::eval::{plot_run, sensitivity_study, SensitivityRow};
use proxytta_core::experiment::{self, RunDir};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Held-out source scenes.
    Source,
    Target,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::Target => "target",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Job {
    /// All input modes at one density on one split, using the run's
    /// `config.json` and `checkpoint.bin`.
    Sensitivity { run: PathBuf, split: Split, density: f64 },
    /// The loss plot of one run.
    Plot { run: PathBuf, out: PathBuf },
}

/// A worker that exited unsuccessfully; its status becomes ours.
#[derive(Debug)]
pub struct WorkerFailed {
    pub index: usize,
    pub code: Option<i32>,
}

impl fmt::Display for WorkerFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.code {
            Some(c) => write!(f, "worker for job {} exited with status {c}", self.index),
            None => write!(f, "worker for job {} was terminated", self.index),
        }
    }
}

impl std::error::Error for WorkerFailed {}

pub fn execute(job: &Job) -> anyhow::Result<serde_json::Value> {
    match job {
        Job::Sensitivity { run, split, density } => {
            let dir = RunDir { path: run.clone() };
            let cfg = dir.read_config()?;
            let ck = Checkpoint::load(&dir.checkpoint_path())?;
            let samples = match split {
                Split::Source => experiment::held_split(&cfg)?,
                Split::Target => experiment::target_split(&cfg)?,
            };
            let rows = sensitivity_study(
                &ck.model,
                &samples,
                &[*density],
                cfg.eval.range(),
                cfg.seed,
                cfg.eval.batch_size,
            )?;
            Ok(serde_json::to_value(rows)?)
        }
        Job::Plot { run, out } => Ok(serde_json::to_value(plot_run(run, out)?)?),
    }
}

pub fn run_worker(job: &str) -> anyhow::Result<()> {
    let job: Job = serde_json::from_str(job).context("malformed worker job")?;
    println!("{}", execute(&job)?);
    Ok(())
}

fn spawn(job: &Job) -> anyhow::Result<Child> {
    let exe = std::env::current_exe().context("locating the proxytta executable")?;
    Command::new(exe)
        .arg("worker")
        .arg("--job")
        .arg(serde_json::to_string(job)?)
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .context("spawning a worker")
}

/// Runs `jobs` on up to `workers` processes; `workers <= 1` runs them
/// in-process. Results are in job order.
pub fn fan_out(jobs: &[Job], workers: usize) -> anyhow::Result<Vec<serde_json::Value>> {
    if workers <= 1 {
        return jobs.iter().map(execute).collect();
    }
    let mut results = Vec::with_capacity(jobs.len());
    for (wave, chunk) in jobs.chunks(workers).enumerate() {
        let children = chunk.iter().map(spawn).collect::<anyhow::Result<Vec<_>>>()?;
        for (k, child) in children.into_iter().enumerate() {
            let index = wave * workers + k;
            let out = child.wait_with_output().context("waiting for a worker")?;
            if !out.status.success() {
                return Err(WorkerFailed {
                    index,
                    code: out.status.code(),
                }
                .into());
            }
            let text = String::from_utf8(out.stdout).context("worker output is not UTF-8")?;
            let Some(line) = text.lines().last() else {
                bail!("worker for job {index} printed nothing");
            };
            results.push(serde_json::from_str(line).with_context(|| format!("worker for job {index}"))?);
        }
    }
    Ok(results)
}

/// Sensitivity rows of a finished fan-out, one list per job.
pub fn sensitivity_rows(values: Vec<serde_json::Value>) -> anyhow::Result<Vec<Vec<SensitivityRow>>> {
    values
        .into_iter()
        .map(|v| serde_json::from_value(v).context("malformed sensitivity result"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jobs_round_trip_through_json() {
        let job = Job::Sensitivity {
            run: "runs/x".into(),
            split: Split::Target,
            density: 0.05,
        };
        let text = serde_json::to_string(&job).unwrap();
        assert!(text.contains("\"kind\":\"sensitivity\""));
        let back: Job = serde_json::from_str(&text).unwrap();
        assert!(matches!(back, Job::Sensitivity { split: Split::Target, .. }));
    }

    #[test]
    fn in_process_results_keep_job_order() {
        let dir = tempfile::tempdir().unwrap();
        let jobs: Vec<Job> = ["a", "b", "c"]
            .iter()
            .map(|n| Job::Plot {
                run: dir.path().join(n),
                out: dir.path().join("out"),
            })
            .collect();
        let out = fan_out(&jobs, 1).unwrap();
        assert_eq!(out, vec![serde_json::Value::Null; 3]);
    }
}
