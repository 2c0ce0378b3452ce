//! `rlq ablate --table7`: the baseline and every TAD variant on the same
//! data, teacher and seeds.

use std::path::{Path, PathBuf};

use rlq_core::trainer::{pretrain_teacher, ExperimentConfig, Mode, TadVariant};

use crate::checkpoint::save_params;
use crate::dataset_io::{load_dataset, write_json};
use crate::error::{Error, Result};
use crate::report::{aggregate, write_csv, Row};
use crate::run::{train_to_dir, RunSummary, TrainPaths};

/// Table rows in display order: the baseline, then each variant with
/// whether it reads the external dataset.
pub fn table7_rows() -> Vec<(String, Option<TadVariant>)> {
    let mut rows = vec![("baseline".to_string(), None)];
    for v in [
        TadVariant::LqAugOnly,
        TadVariant::SsMseTad,
        TadVariant::SsMseNt,
        TadVariant::TargetSsNt,
        TadVariant::Tad,
    ] {
        rows.push((v.name().to_string(), Some(v)));
    }
    rows
}

/// Config of one table row. Variant rows keep the configured mode when it
/// already runs TAD and fall back to TAD-only otherwise.
pub fn row_config(
    base: &ExperimentConfig,
    variant: Option<TadVariant>,
    seed: u64,
) -> ExperimentConfig {
    match variant {
        None => ExperimentConfig {
            mode: Mode::Baseline,
            seed,
            ..base.clone()
        },
        Some(v) => ExperimentConfig {
            mode: if matches!(base.mode, Mode::TadOnly | Mode::Rlq) {
                base.mode
            } else {
                Mode::TadOnly
            },
            tad_variant: v,
            seed,
            ..base.clone()
        },
    }
}

pub struct AblateOutput {
    pub rows: Vec<Row>,
    pub csv: PathBuf,
}

pub fn ablate(
    base: &ExperimentConfig,
    seeds: &[u64],
    data: &Path,
    external: &Path,
    out: &Path,
    mut log: impl FnMut(&str),
) -> Result<AblateOutput> {
    if seeds.is_empty() {
        return Err(Error::validation("seeds", "need at least one seed"));
    }
    base.validate()?;
    std::fs::create_dir_all(out)?;
    // One teacher for every row; it depends only on the external set.
    let teacher_path = out.join("teacher.rlq");
    let ext = load_dataset(external)?;
    let (teacher, rep, _) = pretrain_teacher(&ext, base)?;
    drop(ext);
    save_params(&teacher_path, &teacher)?;
    write_json(&out.join("teacher.json"), &rep)?;
    log(&format!(
        "teacher holdout top-1 {:.3} (chance {:.3})",
        rep.holdout_top1, rep.chance
    ));

    let mut runs: Vec<(String, RunSummary)> = Vec::new();
    for (label, variant) in table7_rows() {
        for &seed in seeds {
            let cfg = row_config(base, variant, seed);
            let paths = TrainPaths {
                data: data.to_path_buf(),
                external: Some(external.to_path_buf()),
                teacher: Some(teacher_path.clone()),
                out: out.join("runs").join(format!("{label}_s{seed}")),
            };
            let s = train_to_dir(&cfg, &paths, false, cfg.epochs, |_| {})?;
            if let Some(b) = &s.best {
                log(&format!(
                    "{label} seed {seed}: best CC top-1 {:.3}",
                    b.cc.top1
                ));
            }
            runs.push((label.clone(), s));
        }
    }
    let rows = aggregate(&runs)?;
    let csv = out.join("table7.csv");
    write_table7(&csv, &rows)?;
    write_csv(&out.join("table7_full.csv"), &rows)?;
    Ok(AblateOutput { rows, csv })
}

/// Variant, external-dataset flag, then CC Top-1 and mAP in percent.
fn write_table7(path: &Path, rows: &[Row]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "variant",
        "external_dataset",
        "seeds",
        "cc_top1",
        "cc_map",
        "cc_top1_min",
        "cc_top1_max",
        "ratio_lq",
    ])?;
    for r in rows {
        let ed = table7_rows()
            .into_iter()
            .find(|(l, _)| *l == r.label)
            .and_then(|(_, v)| v)
            .is_some_and(|v| v.needs_external());
        w.write_record([
            r.label.clone(),
            if ed { "yes" } else { "no" }.to_string(),
            r.seeds.len().to_string(),
            (100.0 * r.stats[0].mean).to_string(),
            (100.0 * r.stats[1].mean).to_string(),
            (100.0 * r.stats[0].min).to_string(),
            (100.0 * r.stats[0].max).to_string(),
            r.stats[6].mean.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
