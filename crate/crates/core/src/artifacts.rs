//! Run directory layout:
//!
//! ```text
//! <dir>/config.json          resolved config, reloadable as-is
//! <dir>/trajectory.csv       one row per task
//! <dir>/summary.json
//! <dir>/train_log.csv        one row per (task, epoch)
//! <dir>/similarity.csv       final prototype cosine matrix
//! <dir>/checkpoints/task_XX.ptpc
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::checkpoint::{write_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::error::Result;
use crate::evaluator::{write_similarity_csv, EvalReport};
use crate::scenarios::ScenarioRun;
use crate::trainer::TrainLog;

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn checkpoint_path(dir: &Path, task: usize) -> PathBuf {
    dir.join("checkpoints")
        .join(format!("task_{:02}.ptpc", task + 1))
}

pub fn train_log_csv(logs: &[TrainLog]) -> String {
    let mut s = String::from("task,epoch,c1,c2,pp,total,lr\n");
    for e in logs.iter().flat_map(|l| &l.epochs) {
        let _ = writeln!(
            s,
            "{},{},{:.9},{:.9},{:.9},{:.9},{:.9e}",
            e.task + 1,
            e.epoch + 1,
            e.c1,
            e.c2,
            e.pp,
            e.total,
            e.lr
        );
    }
    s
}

/// Writes the full run directory. `extra` is merged into `summary.json`.
pub fn write_run_dir(
    dir: &Path,
    cfg: &RunConfig,
    run: &ScenarioRun,
    extra: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::write(dir.join("config.json"), cfg.to_json() + "\n")?;
    fs::write(dir.join("trajectory.csv"), run.report.to_csv())?;
    fs::write(dir.join("train_log.csv"), train_log_csv(&run.train_logs))?;
    if !run.banks.is_empty() {
        write_similarity_csv(&run.banks, dir.join("similarity.csv"))?;
    }
    let hash = cfg.hash();
    for (t, banks) in run.checkpoints.iter().enumerate() {
        let ckpt = Checkpoint {
            banks: banks.clone(),
            encoder_seed: run.encoder_seed,
            config_hash: hash,
        };
        write_checkpoint(&ckpt, checkpoint_path(dir, t))?;
    }
    let mut summary = json!({
        "scenario": cfg.scenario,
        "num_tasks": run.report.trajectory.len(),
        "num_classes": run.banks.len(),
        "last_accuracy": run.report.last_accuracy,
        "forward_transfer": run.report.forward_transfer,
        "config_hash": hex(&hash),
        "notes": run.notes,
    });
    if let (Some(s), serde_json::Value::Object(e)) = (summary.as_object_mut(), extra) {
        s.extend(e);
    }
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(())
}

/// Summary of an evaluation-only run (no training artifacts).
pub fn write_eval_dir(dir: &Path, report: &EvalReport, extra: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("trajectory.csv"), report.to_csv())?;
    let mut summary = json!({
        "num_tasks": report.trajectory.len(),
        "last_accuracy": report.last_accuracy,
    });
    if let (Some(s), serde_json::Value::Object(e)) = (summary.as_object_mut(), extra) {
        s.extend(e);
    }
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(())
}
