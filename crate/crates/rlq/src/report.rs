//! Run aggregation: `rlq report` and the variant table of `rlq ablate`.
//!
//! Numbers are replayed from each run's `metrics.jsonl`; CSV cells carry
//! full precision so a single-run report matches the log exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rlq_core::trainer::EvalSummary;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::run::{load_run, RunSummary};

/// Mean, minimum and maximum of one metric over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        Self {
            mean: values.iter().sum::<f64>() / n,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    fn cell(&self, percent: bool) -> String {
        let k = if percent { 100.0 } else { 1.0 };
        if self.min == self.max {
            format!("{:.2}", self.mean * k)
        } else {
            format!(
                "{:.2} ± {:.2}",
                self.mean * k,
                (self.max - self.min) * k / 2.0
            )
        }
    }
}

/// Metric columns, in table order.
pub const METRICS: [&str; 10] = [
    "cc_top1",
    "cc_map",
    "sc_top1",
    "sc_map",
    "general_top1",
    "general_map",
    "ratio_lq",
    "ratio_hq",
    "gender_f1_female",
    "cos_probe",
];

pub fn metric_values(s: &EvalSummary) -> [f64; 10] {
    [
        s.cc.top1,
        s.cc.map,
        s.sc.top1,
        s.sc.map,
        s.general.top1,
        s.general.map,
        s.compactness.lq.ratio,
        s.compactness.hq.ratio,
        s.gender_f1_female,
        s.cos_probe,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub label: String,
    pub seeds: Vec<u64>,
    pub stats: Vec<Stat>,
}

/// Groups runs sharing a label and aggregates their best evaluations.
pub fn aggregate(runs: &[(String, RunSummary)]) -> Result<Vec<Row>> {
    let mut groups: BTreeMap<&str, Vec<&RunSummary>> = BTreeMap::new();
    let mut order = Vec::new();
    for (label, s) in runs {
        if !groups.contains_key(label.as_str()) {
            order.push(label.as_str());
        }
        groups.entry(label).or_default().push(s);
    }
    let mut out = Vec::new();
    for label in order {
        let members = &groups[label];
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); METRICS.len()];
        for s in members {
            let best = s.best.as_ref().ok_or_else(|| {
                Error::runtime(format!("run `{label}` (seed {}) never evaluated", s.seed))
            })?;
            for (c, v) in cols.iter_mut().zip(metric_values(best)) {
                c.push(v);
            }
        }
        out.push(Row {
            label: label.to_string(),
            seeds: members.iter().map(|s| s.seed).collect(),
            stats: cols.iter().map(|c| Stat::of(c)).collect(),
        });
    }
    Ok(out)
}

pub fn run_label(s: &RunSummary) -> String {
    if s.mode == "baseline" || s.mode == "cap_only" {
        s.mode.clone()
    } else if s.external_fraction < 1.0 {
        format!("{}/{}@{}", s.mode, s.variant, s.external_fraction)
    } else {
        format!("{}/{}", s.mode, s.variant)
    }
}

pub fn write_csv(path: &Path, rows: &[Row]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["row".to_string(), "seeds".to_string()];
    for m in METRICS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_min"));
        header.push(format!("{m}_max"));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.label.clone(),
            r.seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(" "),
        ];
        for s in &r.stats {
            rec.push(s.mean.to_string());
            rec.push(s.min.to_string());
            rec.push(s.max.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn markdown(rows: &[Row], elbow: Option<&[(usize, f64)]>) -> String {
    let mut md = String::from("# Run summary\n\nBest evaluation per run by CC Top-1; cells are mean ± half-range over seeds. Retrieval in %.\n\n");
    md.push_str("| run | seeds | CC R-1 | CC mAP | SC R-1 | SC mAP | Gen R-1 | Gen mAP |\n");
    md.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = write!(md, "| {} | {} |", r.label, r.seeds.len());
        for s in &r.stats[..6] {
            let _ = write!(md, " {} |", s.cell(true));
        }
        md.push('\n');
    }
    md.push_str("\n## Tier compactness and attributes\n\n");
    md.push_str("| run | ratio LQ | ratio HQ | female F1 | mean abs cos(bot, pose) |\n|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} |",
            r.label,
            r.stats[6].cell(false),
            r.stats[7].cell(false),
            r.stats[8].cell(false),
            r.stats[9].cell(false)
        );
    }
    if let Some(curve) = elbow {
        md.push_str("\n## Pose clustering elbow\n\n| k | objective |\n|---|---|\n");
        for (k, o) in curve {
            let _ = writeln!(md, "| {k} | {o:.4} |");
        }
    }
    md
}

/// Reads an elbow CSV written by `rlq pose-cluster --elbow`.
pub fn read_elbow(path: &Path) -> Result<Vec<(usize, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let k = rec.get(0).and_then(|s| s.parse().ok());
        let o = rec.get(1).and_then(|s| s.parse().ok());
        match (k, o) {
            (Some(k), Some(o)) => out.push((k, o)),
            _ => return Err(Error::runtime(format!("{}: malformed row", path.display()))),
        }
    }
    Ok(out)
}

/// `rlq report`: replays each run's log and writes `summary.md` and
/// `summary.csv` into `out`.
pub fn report(run_dirs: &[&Path], out: &Path, elbow: Option<&Path>) -> Result<Vec<Row>> {
    if run_dirs.is_empty() {
        return Err(Error::validation("runs", "need at least one run directory"));
    }
    let mut runs = Vec::new();
    for d in run_dirs {
        let (cfg, rows) = load_run(d)?;
        let s = RunSummary::from_rows(&cfg, &rows, None);
        runs.push((run_label(&s), s));
    }
    let rows = aggregate(&runs)?;
    let curve = elbow.map(read_elbow).transpose()?;
    fs::create_dir_all(out)?;
    write_csv(&out.join("summary.csv"), &rows)?;
    fs::write(out.join("summary.md"), markdown(&rows, curve.as_deref()))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_mean_and_range() {
        let s = Stat::of(&[0.2, 0.4, 0.3]);
        assert!((s.mean - 0.3).abs() < 1e-15);
        assert_eq!((s.min, s.max), (0.2, 0.4));
        assert_eq!(s.cell(true), "30.00 ± 10.00");
        assert_eq!(Stat::of(&[0.5]).cell(false), "0.50");
    }
}
