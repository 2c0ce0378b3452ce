//! `rlq eval`: scores a checkpoint and writes plot data next to the
//! metrics file.

use std::fs;
use std::path::{Path, PathBuf};

use rlq_core::eval::{self, EvalItem, Protocol};
use rlq_core::image::Image;
use rlq_core::model::ModelParams;
use rlq_core::synthdata::{Dataset, Split, Tier};
use rlq_core::tensor::Tensor;
use rlq_core::trainer::{analyze, evaluate, EvalSummary};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub top1: f64,
    pub map: f64,
    pub queries: usize,
    pub dropped: usize,
    pub cmc: Vec<f64>,
    pub pca_captured: f64,
    pub summary: EvalSummary,
}

fn rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let c = t.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Ok(Tensor::new(&[idx.len(), c], data)?)
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "metrics".into());
    out.with_file_name(format!("{stem}_{suffix}.csv"))
}

fn tier_name(t: Tier) -> &'static str {
    match t {
        Tier::Hq => "hq",
        Tier::Lq => "lq",
    }
}

/// Scores `params` on the test split of `data` and writes `out` (JSON)
/// plus `<stem>_cmc.csv`, `<stem>_compactness.csv` and `<stem>_pca.csv`.
pub fn run_eval(
    params: &ModelParams,
    data: &Dataset,
    protocol: Protocol,
    probe_size: usize,
    out: &Path,
) -> Result<EvalReport> {
    let summary = evaluate(params, data, probe_size)?;
    let test: Vec<usize> = (0..data.records.len())
        .filter(|&i| data.records[i].split != Split::Train)
        .collect();
    let images: Vec<&Image> = test.iter().map(|&i| &data.images[i]).collect();
    let a = analyze(params, &images)?;
    let item = |i: usize| EvalItem {
        identity: data.records[i].identity,
        clothes: data.records[i].clothes,
        camera: data.records[i].camera,
    };
    let pick = |split: Split, tier: Tier| -> Vec<usize> {
        (0..test.len())
            .filter(|&p| data.records[test[p]].split == split && data.records[test[p]].tier == tier)
            .collect()
    };
    let (pq, pg) = (pick(Split::Query, Tier::Lq), pick(Split::Gallery, Tier::Hq));
    let q_items: Vec<EvalItem> = pq.iter().map(|&p| item(test[p])).collect();
    let g_items: Vec<EvalItem> = pg.iter().map(|&p| item(test[p])).collect();
    let ranking = eval::cmc_map(
        &rows(&a.embeddings, &pq)?,
        &rows(&a.embeddings, &pg)?,
        &q_items,
        &g_items,
        protocol,
    )?;
    let pca = eval::pca_project(&a.embeddings, 2)?;

    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(sibling(out, "cmc"))?;
    w.write_record(["rank", "hit_rate"])?;
    for (k, v) in ranking.cmc.iter().enumerate() {
        w.write_record([(k + 1).to_string(), v.to_string()])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(sibling(out, "compactness"))?;
    w.write_record(["tier", "ratio", "inter", "intra", "collapsed"])?;
    for (name, c) in [
        ("hq", &summary.compactness.hq),
        ("lq", &summary.compactness.lq),
    ] {
        w.write_record([
            name.to_string(),
            c.ratio.to_string(),
            c.inter.to_string(),
            c.intra.to_string(),
            c.collapsed.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(sibling(out, "pca"))?;
    w.write_record([
        "index", "identity", "clothes", "camera", "tier", "pc1", "pc2",
    ])?;
    for (p, &i) in test.iter().enumerate() {
        let r = &data.records[i];
        let c = &pca.coords[p];
        w.write_record([
            i.to_string(),
            r.identity.to_string(),
            r.clothes.to_string(),
            r.camera.to_string(),
            tier_name(r.tier).to_string(),
            c.first().copied().unwrap_or(0.0).to_string(),
            c.get(1).copied().unwrap_or(0.0).to_string(),
        ])?;
    }
    w.flush()?;

    let report = EvalReport {
        protocol,
        top1: ranking.top1(),
        map: ranking.map,
        queries: ranking.queries.len(),
        dropped: ranking.dropped.len(),
        cmc: ranking.cmc,
        pca_captured: pca.captured,
        summary,
    };
    crate::dataset_io::write_json(out, &report)?;
    Ok(report)
}
