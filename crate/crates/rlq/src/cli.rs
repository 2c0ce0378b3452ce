//! Command-line front end. Exit codes: 0 success, 1 invalid input (the
//! message names the offending key or flag), 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rlq_core::degrade::{apply_policy, ArtifactPolicy};
use rlq_core::eval::Protocol;
use rlq_core::pose::{
    self, elbow_scan, kmeans_fit, pose_vector, DEFAULT_ELBOW_RANGE, DEFAULT_MAX_ITERS,
};
use rlq_core::rng::{substream, tag};
use rlq_core::synthdata::{generate_dataset, DatasetConfig};
use rlq_core::trainer::{ExperimentConfig, MetricsRow};
use serde_json::json;

use crate::ablate::ablate;
use crate::checkpoint::load_params;
use crate::config::resolve;
use crate::dataset_io::{
    self, list_pngs, load_dataset, load_skeletons, read_png, write_json, write_jsonl, write_png,
};
use crate::error::{Error, Result};
use crate::evaluate::run_eval;
use crate::report::report;
use crate::run::{train_to_dir, TrainPaths};

#[derive(Parser, Debug)]
#[command(
    name = "rlq",
    version,
    about = "Clothes-changing re-identification under low-quality imagery"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum Preset {
    /// 40 identities x 3 outfits x 10 images, half held out for testing.
    Target,
    /// 60 identities x 2 outfits x 5 images, all for training.
    External,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset with HQ originals and LQ twins.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Dataset config JSON layered over the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Preset::Target)]
        preset: Preset,
        /// Extra `key=value` overrides, applied last.
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Apply the artifact policy to every PNG of a directory.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Artifact policy JSON; defaults apply when absent.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Overrides the policy's `rng_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit K-means pose classes to skeletons.
    PoseCluster {
        #[arg(long)]
        skeletons: PathBuf,
        #[arg(long, default_value_t = pose::DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the objective for k = 2..=30 to this CSV.
        #[arg(long)]
        elbow: Option<PathBuf>,
    },
    /// Train one experiment.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        external: Option<PathBuf>,
        /// Pretrained teacher checkpoint; otherwise one is trained on --external.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set")]
        overrides: Vec<String>,
        /// Continue from the state saved under --out.
        #[arg(long)]
        resume: bool,
        #[arg(long, default_value_t = 5)]
        checkpoint_every: usize,
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "cc", value_parser = parse_protocol)]
        protocol: Protocol,
        /// Metrics JSON; CSVs are written beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        probe_size: usize,
    },
    /// Run the baseline and every TAD variant and tabulate them.
    Ablate {
        /// Select the TAD-variant table (the only table available).
        #[arg(long)]
        table7: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        external: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Summarise finished runs as markdown and CSV.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Elbow CSV from `pose-cluster --elbow` to include.
        #[arg(long)]
        elbow: Option<PathBuf>,
    },
}

fn parse_protocol(s: &str) -> core::result::Result<Protocol, String> {
    Protocol::ALL
        .into_iter()
        .find(|p| p.name() == s)
        .ok_or_else(|| format!("expected one of cc, sc, general; got `{s}`"))
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn preset(p: Preset) -> DatasetConfig {
    match p {
        Preset::Target => DatasetConfig::default(),
        Preset::External => DatasetConfig {
            ids: 60,
            clothes_per_id: 2,
            images_per_clothes: 5,
            train_fraction: 1.0,
            ..DatasetConfig::default()
        },
    }
}

fn log_row(r: &MetricsRow) {
    let losses: Vec<String> = r
        .losses
        .iter()
        .map(|(k, v)| format!("{k}={v:.4}"))
        .collect();
    let mut line = format!(
        "epoch {:>3} {:?} lr={:.2e} {}",
        r.epoch,
        r.phase,
        r.lr,
        losses.join(" ")
    );
    if let Some(e) = &r.eval {
        line += &format!(
            " | CC R-1 {:.3} mAP {:.3} | ratio lq {:.3} hq {:.3}",
            e.cc.top1, e.cc.map, e.compactness.lq.ratio, e.compactness.hq.ratio
        );
    }
    eprintln!("{line}");
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            out,
            config,
            seed,
            preset: p,
            overrides,
        } => {
            let (cfg, _) = resolve(&preset(p), config.as_deref(), &overrides)?;
            cfg.validate()
                .map_err(|e| Error::validation("config", e.to_string()))?;
            let data = generate_dataset(&cfg, seed)?;
            dataset_io::save_dataset(&out, &data, &cfg, seed)?;
            eprintln!("wrote {} images to {}", data.records.len(), out.display());
        }
        Command::Degrade {
            input,
            out,
            policy,
            seed,
        } => {
            let (mut pol, _) = resolve(&ArtifactPolicy::default(), policy.as_deref(), &[])?;
            if let Some(s) = seed {
                pol.rng_seed = s;
            }
            pol.validate()
                .map_err(|e| Error::validation("policy", e.to_string()))?;
            degrade_dir(&input, &out, &pol)?;
        }
        Command::PoseCluster {
            skeletons,
            k,
            seed,
            out,
            elbow,
        } => {
            let sk = load_skeletons(&skeletons)?;
            let vectors: Vec<_> = sk
                .iter()
                .filter_map(|(_, s)| pose_vector(s, pose::DEFAULT_MIN_CONFIDENCE))
                .collect();
            if k < 2 {
                return Err(Error::validation("k", "must be at least 2"));
            }
            let (model, fit) = kmeans_fit(&vectors, k, seed, DEFAULT_MAX_ITERS)?;
            write_json(&out, &model)?;
            eprintln!(
                "{} skeletons, {} pose vectors, objective {:.4} after {} iterations",
                sk.len(),
                vectors.len(),
                fit.objective(),
                fit.iterations
            );
            if let Some(path) = elbow {
                let scan = elbow_scan(&vectors, DEFAULT_ELBOW_RANGE, seed, DEFAULT_MAX_ITERS)?;
                let mut w = csv::Writer::from_path(path)?;
                w.write_record(["k", "objective"])?;
                w.write_record(["1".to_string(), scan.single_cluster_objective.to_string()])?;
                for r in &scan.rows {
                    w.write_record([r.k.to_string(), r.objective.to_string()])?;
                }
                w.flush()?;
            }
        }
        Command::Train {
            config,
            data,
            external,
            teacher,
            out,
            overrides,
            resume,
            checkpoint_every,
            quiet,
        } => {
            let (cfg, _) = resolve(&ExperimentConfig::default(), config.as_deref(), &overrides)?;
            let paths = TrainPaths {
                data,
                external,
                teacher,
                out,
            };
            let s = train_to_dir(&cfg, &paths, resume, checkpoint_every, |r| {
                if !quiet {
                    log_row(r)
                }
            })?;
            if let (Some(e), Some(b)) = (s.best_epoch, &s.best) {
                eprintln!(
                    "best epoch {e}: CC R-1 {:.3} mAP {:.3}",
                    b.cc.top1, b.cc.map
                );
            }
        }
        Command::Eval {
            checkpoint,
            data,
            protocol,
            out,
            probe_size,
        } => {
            let params = load_params(&checkpoint)?;
            let ds = load_dataset(&data)?;
            let r = run_eval(&params, &ds, protocol, probe_size, &out)?;
            eprintln!(
                "{}: R-1 {:.3} mAP {:.3} over {} queries ({} dropped)",
                protocol.name(),
                r.top1,
                r.map,
                r.queries,
                r.dropped
            );
        }
        Command::Ablate {
            table7,
            config,
            data,
            external,
            out,
            seeds,
            overrides,
        } => {
            if !table7 {
                return Err(Error::validation("table7", "choose a table with --table7"));
            }
            let (cfg, resolved) =
                resolve(&ExperimentConfig::default(), config.as_deref(), &overrides)?;
            fs::create_dir_all(&out)?;
            write_json(
                &out.join("config.resolved.json"),
                &json!({ "experiment": resolved, "seeds": seeds }),
            )?;
            let res = ablate(&cfg, &seeds, &data, &external, &out, |m| eprintln!("{m}"))?;
            eprintln!("wrote {}", res.csv.display());
        }
        Command::Report { runs, out, elbow } => {
            let dirs: Vec<&Path> = runs.iter().map(|p| p.as_path()).collect();
            let rows = report(&dirs, &out, elbow.as_deref())?;
            eprintln!(
                "{} rows written to {}",
                rows.len(),
                out.join("summary.md").display()
            );
        }
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct Degraded {
    source: String,
    output: String,
    artifact: rlq_core::degrade::Artifact,
}

/// Degrades every PNG of `input` (or of `input/images` for a dataset
/// directory) into `out`, with a JSONL record of the applied artifacts.
fn degrade_dir(input: &Path, out: &Path, policy: &ArtifactPolicy) -> Result<()> {
    let src = if input.join("images").is_dir() {
        input.join("images")
    } else {
        input.to_path_buf()
    };
    let files = list_pngs(&src)?;
    if files.is_empty() {
        return Err(Error::validation(
            "in",
            format!("no PNG files in {}", src.display()),
        ));
    }
    fs::create_dir_all(out)?;
    let mut log = Vec::with_capacity(files.len());
    for (i, f) in files.iter().enumerate() {
        let img = read_png(f)?;
        let mut rng = substream(policy.rng_seed, tag::DEGRADE, i as u64);
        let (lq, artifact) = apply_policy(&img, policy, &mut rng)?;
        let name = f
            .file_name()
            .expect("listed file")
            .to_string_lossy()
            .into_owned();
        write_png(&out.join(&name), &lq)?;
        log.push(Degraded {
            source: f.display().to_string(),
            output: name,
            artifact,
        });
    }
    write_jsonl(&out.join("degradations.jsonl"), &log)?;
    eprintln!("degraded {} images into {}", files.len(), out.display());
    Ok(())
}
