//! Training runs on disk: output layout, resume and summaries.
//!
//! ```text
//! <out>/config.resolved.json
//! <out>/metrics.jsonl
//! <out>/pose_model.json          when the run uses pose classes
//! <out>/checkpoints/             resume state, best.rlq, final.rlq, teacher.rlq
//! <out>/report/summary.json
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rlq_core::model::ModelParams;
use rlq_core::pose::PoseClusterModel;
use rlq_core::synthdata::Dataset;
use rlq_core::trainer::{
    fit_pose_model, pretrain_teacher, EvalSummary, ExperimentConfig, MetricsRow, StudentInit,
    TeacherReport, TrainState, Trainer,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{self, load_params, save_params, STATE_META};
use crate::dataset_io::{self, read_json, read_jsonl, write_json, write_jsonl};
use crate::error::{Error, Result};

pub const RESOLVED: &str = "config.resolved.json";
pub const METRICS: &str = "metrics.jsonl";
pub const POSE_MODEL: &str = "pose_model.json";
pub const SUMMARY: &str = "summary.json";
pub const FINAL: &str = "final.rlq";
pub const TEACHER: &str = "teacher.rlq";

/// Whether a config needs a frozen teacher.
pub fn needs_teacher(cfg: &ExperimentConfig) -> bool {
    (cfg.uses_tad() && cfg.tad_variant.needs_teacher()) || cfg.student_init == StudentInit::Teacher
}

/// Outcome of a run, as stored in `report/summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub variant: String,
    pub seed: u64,
    pub external_fraction: f64,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best: Option<EvalSummary>,
    pub last: Option<EvalSummary>,
    pub teacher: Option<TeacherReport>,
}

impl RunSummary {
    pub fn from_rows(
        cfg: &ExperimentConfig,
        rows: &[MetricsRow],
        teacher: Option<TeacherReport>,
    ) -> Self {
        let mut best: Option<(usize, &EvalSummary)> = None;
        for r in rows {
            if let Some(e) = &r.eval {
                if best.is_none_or(|(_, b)| e.cc.top1 > b.cc.top1) {
                    best = Some((r.epoch, e));
                }
            }
        }
        Self {
            mode: serde_json::to_value(cfg.mode)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default(),
            variant: cfg.tad_variant.name().to_string(),
            seed: cfg.seed,
            external_fraction: cfg.external_fraction,
            epochs: cfg.epochs,
            best_epoch: best.map(|b| b.0),
            best: best.map(|b| b.1.clone()),
            last: rows.iter().rev().find_map(|r| r.eval.clone()),
            teacher,
        }
    }
}

/// Inputs already in memory.
#[derive(Clone, Copy)]
pub struct Inputs<'a> {
    pub target: &'a Dataset,
    pub external: Option<&'a Dataset>,
    pub teacher: Option<&'a ModelParams>,
    pub pose: Option<&'a PoseClusterModel>,
}

/// Runs every remaining epoch without touching the disk.
pub fn train_in_memory(
    cfg: &ExperimentConfig,
    inputs: Inputs<'_>,
) -> Result<(TrainState, Vec<MetricsRow>)> {
    let trainer = Trainer::new(
        cfg.clone(),
        inputs.target,
        inputs.external,
        inputs.pose,
        inputs.teacher,
    )?;
    let mut state = trainer.init_state()?;
    let mut rows = Vec::new();
    trainer.run::<Error>(&mut state, |_, r| {
        rows.push(r.clone());
        Ok(())
    })?;
    Ok((state, rows))
}

pub struct TrainPaths {
    pub data: PathBuf,
    pub external: Option<PathBuf>,
    /// Pretrained teacher checkpoint; trained from the external set if absent.
    pub teacher: Option<PathBuf>,
    pub out: PathBuf,
}

fn absolute(p: &Path) -> String {
    fs::canonicalize(p)
        .unwrap_or_else(|_| p.to_path_buf())
        .display()
        .to_string()
}

fn append_row(path: &Path, row: &MetricsRow) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_string(row)?;
    line.push('\n');
    f.write_all(line.as_bytes())?;
    Ok(())
}

/// Keeps only the rows before `epoch`.
fn truncate_metrics(path: &Path, epoch: usize) -> Result<Vec<MetricsRow>> {
    let rows: Vec<MetricsRow> = if path.exists() {
        read_jsonl(path)?
    } else {
        Vec::new()
    };
    let kept: Vec<MetricsRow> = rows.into_iter().filter(|r| r.epoch < epoch).collect();
    write_jsonl(path, &kept)?;
    Ok(kept)
}

/// A full training run under `paths.out`. With `resume`, continues from
/// the last saved state if there is one. State is saved every
/// `checkpoint_every` epochs and after the last one.
pub fn train_to_dir(
    cfg: &ExperimentConfig,
    paths: &TrainPaths,
    resume: bool,
    checkpoint_every: usize,
    mut log: impl FnMut(&MetricsRow),
) -> Result<RunSummary> {
    cfg.validate()?;
    if checkpoint_every == 0 {
        return Err(Error::validation("checkpoint-every", "must be at least 1"));
    }
    let ckpt = paths.out.join("checkpoints");
    let report = paths.out.join("report");
    fs::create_dir_all(&ckpt)?;
    fs::create_dir_all(&report)?;

    let target = dataset_io::load_dataset(&paths.data)?;
    let wants_external = cfg.uses_tad() && cfg.tad_variant.needs_external();
    let external = match &paths.external {
        Some(p) => Some(dataset_io::load_dataset(p)?),
        None if wants_external || (needs_teacher(cfg) && paths.teacher.is_none()) => {
            return Err(Error::validation(
                "external",
                format!("variant {} needs --external", cfg.tad_variant.name()),
            ))
        }
        None => None,
    };

    let pose = if cfg.uses_cap_attributes() {
        let path = paths.out.join(POSE_MODEL);
        if resume && path.exists() {
            Some(read_json::<PoseClusterModel>(&path)?)
        } else {
            let m = fit_pose_model(&target, cfg.pose_k, cfg.seed)?;
            write_json(&path, &m)?;
            Some(m)
        }
    } else {
        None
    };

    let mut teacher_report = None;
    let teacher = if needs_teacher(cfg) {
        let saved = ckpt.join(TEACHER);
        if let Some(p) = &paths.teacher {
            Some(load_params(p)?)
        } else if resume && saved.exists() {
            teacher_report = read_json(&report.join("teacher.json")).ok();
            Some(load_params(&saved)?)
        } else {
            let ext = external.as_ref().expect("checked above");
            let (t, rep, rows) = pretrain_teacher(ext, cfg)?;
            save_params(&saved, &t)?;
            write_json(&report.join("teacher.json"), &rep)?;
            write_jsonl(&report.join("teacher_metrics.jsonl"), &rows)?;
            teacher_report = Some(rep);
            Some(t)
        }
    } else {
        None
    };

    let resolved = json!({
        "experiment": cfg,
        "paths": {
            "data": absolute(&paths.data),
            "external": paths.external.as_deref().map(absolute),
            "teacher": paths.teacher.as_deref().map(absolute),
            "out": absolute(&paths.out),
        },
        "seeds": {
            "run": cfg.seed,
            "teacher": cfg.teacher_seed,
            "data": dataset_io::load_meta(&paths.data)?.seed,
            "external": match &paths.external {
                Some(p) => Value::from(dataset_io::load_meta(p)?.seed),
                None => Value::Null,
            },
        },
        "checkpoint_every": checkpoint_every,
    });
    write_json(&paths.out.join(RESOLVED), &resolved)?;

    let trainer = Trainer::new(
        cfg.clone(),
        &target,
        external.as_ref(),
        pose.as_ref(),
        teacher.as_ref(),
    )?;
    let metrics = paths.out.join(METRICS);
    let mut state = if resume && ckpt.join(STATE_META).exists() {
        checkpoint::load_state(&ckpt)?
    } else {
        trainer.init_state()?
    };
    let mut rows = truncate_metrics(&metrics, state.epoch)?;
    let mut saved_best = state.best.as_ref().map(|b| b.epoch);
    trainer.run::<Error>(&mut state, |st, row| {
        append_row(&metrics, row)?;
        log(row);
        rows.push(row.clone());
        let best_now = st.best.as_ref().map(|b| b.epoch);
        if st.epoch % checkpoint_every == 0 || st.epoch == cfg.epochs {
            checkpoint::save_state(&ckpt, st, best_now != saved_best)?;
            saved_best = best_now;
        }
        Ok(())
    })?;
    save_params(&ckpt.join(FINAL), &state.student)?;
    let summary = RunSummary::from_rows(cfg, &rows, teacher_report);
    write_json(&report.join(SUMMARY), &summary)?;
    Ok(summary)
}

/// Reads a finished run's config and metrics back.
pub fn load_run(dir: &Path) -> Result<(ExperimentConfig, Vec<MetricsRow>)> {
    let metrics = dir.join(METRICS);
    if !metrics.exists() {
        return Err(Error::runtime(format!(
            "{}: missing {METRICS}",
            dir.display()
        )));
    }
    let resolved: Value = read_json(&dir.join(RESOLVED))?;
    let cfg: ExperimentConfig = serde_json::from_value(resolved["experiment"].clone())
        .map_err(|e| Error::runtime(format!("{}: {e}", dir.join(RESOLVED).display())))?;
    Ok((cfg, read_jsonl(&metrics)?))
}
