//! Training loop: CAP epochs on the target set, TAD epochs on an external
//! HQ set against a frozen teacher, PK batching, the ablation variants and
//! periodic evaluation.

use alloc::borrow::Cow;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{self, laplacian_variance, ArtifactPolicy, DegradeError};
use crate::eval::{self, Compactness, EvalError, EvalItem, Protocol};
use crate::image::Image;
use crate::losses::{self, BranchFeatures, LinearHead, LossError, LossValue};
use crate::math;
use crate::model::{Layer, ModelConfig, ModelParams, Normalization};
use crate::optim::{self, collect_grads, Adam};
use crate::pose::{self, PoseClusterModel, PoseError, Skeleton};
use crate::rng::{substream, tag};
use crate::synthdata::{self, ClothesLabeler, Dataset, RenderError, Split, Tier, FEMALE};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    CapOnly,
    TadOnly,
    Rlq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TadVariant {
    Tad,
    SsMseTad,
    SsMseNt,
    LqAugOnly,
    TargetSsNt,
}

impl TadVariant {
    pub const ALL: [TadVariant; 5] = [
        TadVariant::Tad,
        TadVariant::SsMseTad,
        TadVariant::SsMseNt,
        TadVariant::LqAugOnly,
        TadVariant::TargetSsNt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TadVariant::Tad => "tad",
            TadVariant::SsMseTad => "ss_mse_tad",
            TadVariant::SsMseNt => "ss_mse_nt",
            TadVariant::LqAugOnly => "lq_aug_only",
            TadVariant::TargetSsNt => "target_ss_nt",
        }
    }

    pub fn needs_teacher(self) -> bool {
        matches!(self, TadVariant::Tad | TadVariant::SsMseTad)
    }

    pub fn needs_external(self) -> bool {
        matches!(
            self,
            TadVariant::Tad | TadVariant::SsMseTad | TadVariant::SsMseNt
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    Random,
    /// Copy every non-classifier layer from the teacher.
    Teacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Cap,
    Tad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Ignored in `baseline` and `cap_only` modes.
    pub tad_variant: TadVariant,
    pub epochs: usize,
    pub batch_size: usize,
    pub positives_per_id: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    /// Share of the external set kept for TAD, fixed at run start.
    pub external_fraction: f64,
    pub seed: u64,
    pub teacher_seed: u64,
    pub teacher_epochs: usize,
    pub student_init: StudentInit,
    pub clothes_aug_prob: f64,
    /// Per-sample chance of swapping in a degraded twin under `lq_aug_only`.
    pub lq_aug_prob: f64,
    pub label_smoothing: f64,
    pub triplet_margin: f64,
    pub temperature: f64,
    /// Treat the HQ logits as a fixed target in the self-supervision term.
    pub detach_hq: bool,
    /// Also run a CAP pass inside every TAD epoch.
    pub interleave_target: bool,
    pub eval_every: usize,
    pub probe_size: usize,
    pub pose_k: usize,
    /// Degradations used to build LQ twins during training.
    pub lq_policy: ArtifactPolicy,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Rlq,
            tad_variant: TadVariant::Tad,
            epochs: 40,
            batch_size: 40,
            positives_per_id: 4,
            base_lr: optim::DEFAULT_LR,
            warmup_epochs: optim::DEFAULT_WARMUP_EPOCHS,
            external_fraction: 1.0,
            seed: 0,
            teacher_seed: 1000,
            teacher_epochs: 30,
            student_init: StudentInit::Random,
            clothes_aug_prob: 0.5,
            lq_aug_prob: 0.5,
            label_smoothing: losses::DEFAULT_LABEL_SMOOTHING,
            triplet_margin: losses::DEFAULT_TRIPLET_MARGIN,
            temperature: losses::DEFAULT_TEMPERATURE,
            detach_hq: true,
            interleave_target: false,
            eval_every: 5,
            probe_size: 200,
            pose_k: 15,
            lq_policy: ArtifactPolicy::default(),
        }
    }
}

fn bad(key: &'static str, message: &str) -> TrainError {
    TrainError::Config {
        key,
        message: message.to_string(),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.positives_per_id == 0 {
            return Err(bad("positives_per_id", "must be positive"));
        }
        if self.batch_size % self.positives_per_id != 0 {
            return Err(bad("batch_size", "must be divisible by positives_per_id"));
        }
        if self.batch_size / self.positives_per_id < 2 {
            return Err(bad("batch_size", "needs at least two identities per batch"));
        }
        if self.epochs == 0 {
            return Err(bad("epochs", "must be positive"));
        }
        if !(self.base_lr > 0.0) {
            return Err(bad("base_lr", "must be positive"));
        }
        if !(self.external_fraction > 0.0 && self.external_fraction <= 1.0) {
            return Err(bad("external_fraction", "must lie in (0, 1]"));
        }
        for (key, p) in [
            ("clothes_aug_prob", self.clothes_aug_prob),
            ("lq_aug_prob", self.lq_aug_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(bad(key, "must lie in [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(bad("label_smoothing", "must lie in [0, 1)"));
        }
        if !(self.temperature > 0.0) {
            return Err(bad("temperature", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(bad("eval_every", "must be positive"));
        }
        if self.pose_k < 2 {
            return Err(bad("pose_k", "must be at least 2"));
        }
        if self.teacher_epochs == 0 {
            return Err(bad("teacher_epochs", "must be positive"));
        }
        self.lq_policy
            .validate()
            .map_err(|_| bad("lq_policy", "invalid artifact policy"))?;
        Ok(())
    }

    pub fn uses_cap_attributes(&self) -> bool {
        matches!(self.mode, Mode::CapOnly | Mode::Rlq)
    }

    pub fn uses_tad(&self) -> bool {
        matches!(self.mode, Mode::TadOnly | Mode::Rlq)
    }

    /// CAP on even epochs and TAD on odd ones when TAD is active; the
    /// `lq_aug_only` variant has no TAD epochs.
    pub fn phase(&self, epoch: usize) -> Phase {
        if self.uses_tad() && self.tad_variant != TadVariant::LqAugOnly && epoch % 2 == 1 {
            Phase::Tad
        } else {
            Phase::Cap
        }
    }

    /// Loss names an epoch of `phase` must report, no more and no fewer.
    pub fn expected_losses(&self, phase: Phase) -> BTreeSet<&'static str> {
        let mut s = BTreeSet::new();
        let cap = |s: &mut BTreeSet<&'static str>| {
            s.extend([
                "id_bot_ce",
                "id_cal_ce",
                "clothes_cls",
                "clothes_adv",
                "id_kl",
                "triplet",
            ]);
            if self.uses_cap_attributes() {
                s.extend(["pose_ce", "gender_ce", "cos"]);
            }
        };
        match phase {
            Phase::Cap => cap(&mut s),
            Phase::Tad => {
                match self.tad_variant {
                    TadVariant::Tad => s.extend(["tad_distill", "tad_self"]),
                    TadVariant::SsMseTad => s.extend(["tad_distill", "tad_self", "ss_mse"]),
                    TadVariant::SsMseNt | TadVariant::TargetSsNt => {
                        s.insert("ss_mse");
                    }
                    TadVariant::LqAugOnly => {}
                }
                if self.interleave_target {
                    cap(&mut s);
                }
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("config key `{key}`: {message}")]
    Config { key: &'static str, message: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Degrade(#[from] DegradeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error("{0:?} mode needs a pose cluster model")]
    MissingPoseModel(Mode),
    #[error("variant {0:?} needs a frozen teacher")]
    MissingTeacher(TadVariant),
    #[error("variant {0:?} needs an external dataset")]
    MissingExternal(TadVariant),
    #[error("the external dataset has no HQ training images")]
    EmptyExternal,
    #[error("no training images")]
    EmptyPool,
    #[error("{ids} identities cannot fill batches of {p}")]
    TooFewIdentities { ids: usize, p: usize },
    #[error("teacher parameters changed (checksum {expected:#x} -> {got:#x})")]
    TeacherMutated { expected: u64, got: u64 },
    #[error("{phase:?} epoch reported losses {got:?}, expected {expected:?}")]
    LedgerMismatch {
        phase: Phase,
        expected: Vec<&'static str>,
        got: Vec<&'static str>,
    },
}

pub type Result<T> = core::result::Result<T, TrainError>;

/// Batches of `p` distinct labels with `k` positions each, as indices into
/// `labels`. Every position appears in at least one batch. A label's last
/// partial group is topped up from its own positions; batches left short
/// of `p` labels are filled with fresh groups from unused labels.
pub fn pk_batches<R: Rng + ?Sized>(
    labels: &[usize],
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    if by_label.len() < p {
        return Err(TrainError::TooFewIdentities {
            ids: by_label.len(),
            p,
        });
    }
    let draw_group = |rng: &mut R, members: &[usize], start: Vec<usize>| -> Vec<usize> {
        let mut group = start;
        while group.len() < k {
            let unused: Vec<usize> = members
                .iter()
                .copied()
                .filter(|m| !group.contains(m))
                .collect();
            let pick = if unused.is_empty() {
                members[rng.random_range(0..members.len())]
            } else {
                unused[rng.random_range(0..unused.len())]
            };
            group.push(pick);
        }
        group
    };
    let mut chunks: Vec<(usize, Vec<usize>)> = Vec::new();
    for (&l, members) in &by_label {
        let mut m = members.clone();
        m.shuffle(rng);
        for c in m.chunks(k) {
            chunks.push((l, draw_group(rng, members, c.to_vec())));
        }
    }
    chunks.shuffle(rng);
    let all_labels: Vec<usize> = by_label.keys().copied().collect();
    let mut batches = Vec::new();
    while !chunks.is_empty() {
        let mut used = Vec::with_capacity(p);
        let mut batch = Vec::with_capacity(p * k);
        let mut i = 0;
        while i < chunks.len() && used.len() < p {
            if used.contains(&chunks[i].0) {
                i += 1;
                continue;
            }
            let (l, c) = chunks.remove(i);
            used.push(l);
            batch.extend(c);
        }
        while used.len() < p {
            let free: Vec<usize> = all_labels
                .iter()
                .copied()
                .filter(|l| !used.contains(l))
                .collect();
            let l = free[rng.random_range(0..free.len())];
            used.push(l);
            batch.extend(draw_group(rng, &by_label[&l], Vec::new()));
        }
        batches.push(batch);
    }
    Ok(batches)
}

fn sample_key(epoch: usize, step: usize, pos: usize) -> u64 {
    ((epoch as u64) << 40) | ((step as u64) << 16) | pos as u64
}

/// Index of the largest entry in each row.
fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = t.shape()[1];
    t.data()
        .chunks(c)
        .map(|r| {
            let mut best = 0;
            for j in 1..c {
                if r[j] > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolScore {
    pub top1: f64,
    pub map: f64,
    pub queries: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub general: ProtocolScore,
    pub cc: ProtocolScore,
    pub sc: ProtocolScore,
    pub compactness: Compactness,
    pub gender_accuracy: f64,
    pub gender_f1_female: f64,
    /// Mean |cos(f_bot, f_pose)| over the probe samples.
    pub cos_probe: f64,
}

impl EvalSummary {
    pub fn score(&self, p: Protocol) -> ProtocolScore {
        match p {
            Protocol::General => self.general,
            Protocol::Cc => self.cc,
            Protocol::Sc => self.sc,
        }
    }
}

/// Per-image outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    /// Unit `[f_bot, f_cal]` rows.
    pub embeddings: Tensor,
    pub gender: Vec<usize>,
    /// |cos(f_bot, f_pose)| per image.
    pub abs_cos: Vec<f64>,
}

const ANALYSIS_CHUNK: usize = 100;

/// Forward pass without gradients over `images`, in chunks.
pub fn analyze(params: &ModelParams, images: &[&Image]) -> Result<Analysis> {
    let dim = params.config.embedding_dim();
    let mut emb = Vec::with_capacity(images.len() * dim);
    let mut gender = Vec::with_capacity(images.len());
    let mut abs_cos = Vec::with_capacity(images.len());
    for chunk in images.chunks(ANALYSIS_CHUNK) {
        let x = params.input_tensor(chunk)?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let xv = g.constant(x);
        let fwd = bound.forward(&mut g, &params.config, xv, true)?;
        let cat = g.concat_cols(&[fwd.f_bot, fwd.f_cal])?;
        let e = g.l2_normalize(cat)?;
        emb.extend_from_slice(g.value(e).data());
        gender.extend(argmax_rows(g.value(fwd.gender)));
        let f_pose = fwd.f_pose.expect("pose branch requested");
        let a = g.l2_normalize(fwd.f_bot)?;
        let b = g.l2_normalize(f_pose)?;
        let c = g.row_dot(a, b)?;
        abs_cos.extend(g.value(c).data().iter().map(|v| math::abs(*v)));
    }
    Ok(Analysis {
        embeddings: Tensor::new(&[images.len(), dim], emb)?,
        gender,
        abs_cos,
    })
}

fn gather(t: &Tensor, rows: &[usize]) -> Tensor {
    let c = t.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(&[rows.len(), c], data).expect("row gather keeps shape")
}

/// Retrieval with LQ queries against the HQ gallery, tier compactness over
/// every test image, gender metrics on HQ test images and the pose
/// cosine probe on the first `probe_size` of them.
pub fn evaluate(params: &ModelParams, data: &Dataset, probe_size: usize) -> Result<EvalSummary> {
    let test: Vec<usize> = (0..data.records.len())
        .filter(|&i| data.records[i].split != Split::Train)
        .collect();
    let images: Vec<&Image> = test.iter().map(|&i| &data.images[i]).collect();
    let a = analyze(params, &images)?;
    let item = |i: usize| {
        let r = &data.records[i];
        EvalItem {
            identity: r.identity,
            clothes: r.clothes,
            camera: r.camera,
        }
    };
    let pos_q: Vec<usize> = (0..test.len())
        .filter(|&p| {
            data.records[test[p]].split == Split::Query && data.records[test[p]].tier == Tier::Lq
        })
        .collect();
    let pos_g: Vec<usize> = (0..test.len())
        .filter(|&p| {
            data.records[test[p]].split == Split::Gallery && data.records[test[p]].tier == Tier::Hq
        })
        .collect();
    let q_emb = gather(&a.embeddings, &pos_q);
    let g_emb = gather(&a.embeddings, &pos_g);
    let q_items: Vec<EvalItem> = pos_q.iter().map(|&p| item(test[p])).collect();
    let g_items: Vec<EvalItem> = pos_g.iter().map(|&p| item(test[p])).collect();
    let score = |p: Protocol| -> Result<ProtocolScore> {
        let r = eval::cmc_map(&q_emb, &g_emb, &q_items, &g_items, p)?;
        Ok(ProtocolScore {
            top1: r.top1(),
            map: r.map,
            queries: r.queries.len(),
            dropped: r.dropped.len(),
        })
    };
    let ids: Vec<usize> = test.iter().map(|&i| data.records[i].identity).collect();
    let tiers: Vec<Tier> = test.iter().map(|&i| data.records[i].tier).collect();
    let compactness = eval::lq_compactness(&a.embeddings, &ids, &tiers)?;
    let hq: Vec<usize> = (0..test.len()).filter(|&p| tiers[p] == Tier::Hq).collect();
    let pred: Vec<u8> = hq.iter().map(|&p| a.gender[p] as u8).collect();
    let truth: Vec<u8> = hq.iter().map(|&p| data.records[test[p]].gender).collect();
    let correct = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
    let probe: Vec<f64> = hq
        .iter()
        .take(probe_size.max(1))
        .map(|&p| a.abs_cos[p])
        .collect();
    Ok(EvalSummary {
        general: score(Protocol::General)?,
        cc: score(Protocol::Cc)?,
        sc: score(Protocol::Sc)?,
        compactness,
        gender_accuracy: correct as f64 / hq.len().max(1) as f64,
        gender_f1_female: eval::gender_f1(&pred, &truth, FEMALE)?,
        cos_probe: probe.iter().sum::<f64>() / probe.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub steps: usize,
    /// Mean of each loss term over the epoch's batches.
    pub losses: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub teacher_checksum: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<EvalSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Best {
    pub epoch: usize,
    pub summary: EvalSummary,
    pub params: ModelParams,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: ModelParams,
    pub optimizer: Adam,
    /// Next epoch to run.
    pub epoch: usize,
    pub best: Option<Best>,
}

#[derive(Default)]
struct LossSums {
    sums: BTreeMap<&'static str, (f64, usize)>,
}

impl LossSums {
    fn add(&mut self, name: &'static str, v: f64) {
        let e = self.sums.entry(name).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }

    fn means(&self) -> BTreeMap<String, f64> {
        self.sums
            .iter()
            .map(|(k, (s, n))| (k.to_string(), s / *n as f64))
            .collect()
    }
}

/// Unit-row teacher features for every external subsample image.
struct TeacherCache {
    cal: Tensor,
    bot: Tensor,
}

/// Read-only run context: data pools, labels and cached teacher features.
pub struct Trainer<'d> {
    cfg: ExperimentConfig,
    target: &'d Dataset,
    external: Option<&'d Dataset>,
    teacher: Option<&'d ModelParams>,
    teacher_checksum: Option<u64>,
    model_config: ModelConfig,
    /// Target records used by CAP epochs.
    pool: Vec<usize>,
    id_label: Vec<usize>,
    clothes_label: Vec<usize>,
    /// First reserved label for augmented clothes; identity `i` owns
    /// `aug_base + i`.
    aug_base: usize,
    id_to_clothes: Vec<Vec<usize>>,
    pose_label: Option<Vec<usize>>,
    /// External HQ records used by TAD epochs.
    subsample: Vec<usize>,
    cache: Option<TeacherCache>,
    /// `target_ss_nt`: blurry pool records, and sharp ones per identity label.
    blurry: Vec<usize>,
    sharp_by_id: Vec<Vec<usize>>,
    steps_per_epoch: usize,
    evaluate: bool,
}

fn branch_features(params: &ModelParams, images: &[&Image]) -> Result<(Tensor, Tensor)> {
    let (mut cal, mut bot) = (Vec::new(), Vec::new());
    for chunk in images.chunks(ANALYSIS_CHUNK) {
        let x = params.input_tensor(chunk)?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let xv = g.constant(x);
        let fwd = bound.forward(&mut g, &params.config, xv, false)?;
        let n = fwd.normalized(&mut g)?;
        cal.extend_from_slice(g.value(n.cal).data());
        bot.extend_from_slice(g.value(n.bot).data());
    }
    let d = params.config.feature_dim();
    Ok((
        Tensor::new(&[images.len(), d], cal)?,
        Tensor::new(&[images.len(), d], bot)?,
    ))
}

/// Pose cluster label of every record.
pub fn pose_labels(model: &PoseClusterModel, skeletons: &[Skeleton]) -> Vec<usize> {
    skeletons
        .iter()
        .map(|s| {
            pose::assign_cluster(
                model,
                pose::pose_vector(s, pose::DEFAULT_MIN_CONFIDENCE).as_ref(),
            )
        })
        .collect()
}

impl<'d> Trainer<'d> {
    /// Context for a run on the target training split.
    pub fn new(
        cfg: ExperimentConfig,
        target: &'d Dataset,
        external: Option<&'d Dataset>,
        pose_model: Option<&PoseClusterModel>,
        teacher: Option<&'d ModelParams>,
    ) -> Result<Self> {
        let pool = target.indices(Split::Train, Tier::Hq);
        Self::with_pool(cfg, target, pool, external, pose_model, teacher, true)
    }

    fn with_pool(
        cfg: ExperimentConfig,
        target: &'d Dataset,
        pool: Vec<usize>,
        external: Option<&'d Dataset>,
        pose_model: Option<&PoseClusterModel>,
        teacher: Option<&'d ModelParams>,
        evaluate: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        if pool.is_empty() {
            return Err(TrainError::EmptyPool);
        }
        let uses_tad = cfg.uses_tad();
        let variant = cfg.tad_variant;
        if cfg.uses_cap_attributes() && pose_model.is_none() {
            return Err(TrainError::MissingPoseModel(cfg.mode));
        }
        if uses_tad && variant.needs_teacher() && teacher.is_none() {
            return Err(TrainError::MissingTeacher(variant));
        }
        if uses_tad && variant.needs_external() && external.is_none() {
            return Err(TrainError::MissingExternal(variant));
        }
        if cfg.student_init == StudentInit::Teacher && teacher.is_none() {
            return Err(bad(
                "student_init",
                "teacher initialisation needs a teacher",
            ));
        }

        let ids: BTreeSet<usize> = pool.iter().map(|&i| target.records[i].identity).collect();
        let id_map: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(n, &i)| (i, n)).collect();
        let clothes: BTreeSet<usize> = pool.iter().map(|&i| target.records[i].clothes).collect();
        let clothes_map: BTreeMap<usize, usize> =
            clothes.iter().enumerate().map(|(n, &c)| (c, n)).collect();
        let id_label: Vec<usize> = pool
            .iter()
            .map(|&i| id_map[&target.records[i].identity])
            .collect();
        let clothes_label: Vec<usize> = pool
            .iter()
            .map(|&i| clothes_map[&target.records[i].clothes])
            .collect();
        let aug_base = clothes.len();
        let mut id_to_clothes: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); ids.len()];
        for (p, &l) in id_label.iter().enumerate() {
            id_to_clothes[l].insert(clothes_label[p]);
        }
        let id_to_clothes: Vec<Vec<usize>> = id_to_clothes
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.into_iter().chain([aug_base + i]).collect())
            .collect();

        let pose_label = pose_model.map(|m| {
            let sk: Vec<Skeleton> = pool.iter().map(|&i| target.skeletons[i].clone()).collect();
            pose_labels(m, &sk)
        });
        let pose_classes = pose_model.map_or(2, |m| m.k + 1);
        let mut model_config = ModelConfig::new(ids.len(), aug_base + ids.len(), pose_classes);
        let pool_images: Vec<&Image> = pool.iter().map(|&i| &target.images[i]).collect();
        model_config.normalization = Normalization::fit(&pool_images);

        let mut subsample = Vec::new();
        if let Some(ext) = external.filter(|_| uses_tad && variant.needs_external()) {
            let all = ext.indices(Split::Train, Tier::Hq);
            if all.is_empty() {
                return Err(TrainError::EmptyExternal);
            }
            let n = (math::round(cfg.external_fraction * all.len() as f64) as usize).max(1);
            let mut rng = substream(cfg.seed, tag::SUBSAMPLE, 0);
            let mut all = all;
            all.shuffle(&mut rng);
            subsample = all[..n].to_vec();
            subsample.sort_unstable();
        }
        let cache = match (teacher, external) {
            (Some(t), Some(ext)) if uses_tad && variant.needs_teacher() => {
                let imgs: Vec<&Image> = subsample.iter().map(|&i| &ext.images[i]).collect();
                let (cal, bot) = branch_features(t, &imgs)?;
                Some(TeacherCache { cal, bot })
            }
            _ => None,
        };

        let (mut blurry, mut sharp_by_id) = (Vec::new(), vec![Vec::new(); ids.len()]);
        if uses_tad && variant == TadVariant::TargetSsNt {
            let both: Vec<usize> = (0..target.records.len())
                .filter(|&i| target.records[i].split == Split::Train)
                .collect();
            let lv: Vec<f64> = both
                .iter()
                .map(|&i| laplacian_variance(&target.images[i]))
                .collect();
            let mut sorted = lv.clone();
            sorted.sort_by(f64::total_cmp);
            let median = sorted[sorted.len() / 2];
            for (n, &i) in both.iter().enumerate() {
                if lv[n] < median {
                    blurry.push(i);
                } else {
                    sharp_by_id[id_map[&target.records[i].identity]].push(i);
                }
            }
        }

        let steps_per_epoch = pool.len().div_ceil(cfg.batch_size);
        Ok(Self {
            teacher_checksum: teacher.map(|t| t.checksum()),
            cfg,
            target,
            external,
            teacher,
            model_config,
            pool,
            id_label,
            clothes_label,
            aug_base,
            id_to_clothes,
            pose_label,
            subsample,
            cache,
            blurry,
            sharp_by_id,
            steps_per_epoch,
            evaluate,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model_config
    }

    /// External records TAD draws from.
    pub fn subsample(&self) -> &[usize] {
        &self.subsample
    }

    pub fn teacher_checksum(&self) -> Option<u64> {
        self.teacher_checksum
    }

    pub fn init_state(&self) -> Result<TrainState> {
        let init_seed: u64 = substream(self.cfg.seed, tag::INIT, 0).random();
        let mut student = ModelParams::init(self.model_config.clone(), init_seed)?;
        if self.cfg.student_init == StudentInit::Teacher {
            let t = self.teacher.expect("checked at construction");
            for l in Layer::ALL.iter().filter(|l| !l.is_classifier()) {
                let src = t.layer(*l);
                let dst = student.layer_mut(*l);
                dst.weight = src.weight.clone();
                dst.bias = src.bias.clone();
            }
        }
        let optimizer = Adam::new(&student, self.cfg.base_lr);
        Ok(TrainState {
            student,
            optimizer,
            epoch: 0,
            best: None,
        })
    }

    /// Runs the next epoch, evaluating when due.
    pub fn run_epoch(&self, state: &mut TrainState) -> Result<MetricsRow> {
        let e = state.epoch;
        let lr = optim::warmup_lr(self.cfg.base_lr, self.cfg.warmup_epochs, e);
        let phase = self.cfg.phase(e);
        let mut sums = LossSums::default();
        let mut steps = 0;
        if phase == Phase::Tad {
            steps += self.tad_epoch(state, e, lr, &mut sums)?;
        }
        if phase == Phase::Cap || self.cfg.interleave_target {
            steps += self.cap_epoch(state, e, lr, &mut sums)?;
        }
        let got: Vec<&'static str> = sums.sums.keys().copied().collect();
        let expected: Vec<&'static str> = self.cfg.expected_losses(phase).into_iter().collect();
        if got != expected {
            return Err(TrainError::LedgerMismatch {
                phase,
                expected,
                got,
            });
        }
        if let (Some(t), Some(expected)) = (self.teacher, self.teacher_checksum) {
            let got = t.checksum();
            if got != expected {
                return Err(TrainError::TeacherMutated { expected, got });
            }
        }
        let due = (e + 1) % self.cfg.eval_every == 0 || e + 1 == self.cfg.epochs;
        let eval = if self.evaluate && due {
            let s = evaluate(&state.student, self.target, self.cfg.probe_size)?;
            let better = state
                .best
                .as_ref()
                .is_none_or(|b| s.cc.top1 > b.summary.cc.top1);
            if better {
                state.best = Some(Best {
                    epoch: e,
                    summary: s.clone(),
                    params: state.student.clone(),
                });
            }
            Some(s)
        } else {
            None
        };
        state.epoch += 1;
        Ok(MetricsRow {
            epoch: e,
            phase,
            lr,
            steps,
            losses: sums.means(),
            teacher_checksum: self.teacher_checksum,
            eval,
        })
    }

    /// Runs the remaining epochs, handing each row to `on_epoch`.
    pub fn run<E: From<TrainError>>(
        &self,
        state: &mut TrainState,
        mut on_epoch: impl FnMut(&TrainState, &MetricsRow) -> core::result::Result<(), E>,
    ) -> core::result::Result<(), E> {
        while state.epoch < self.cfg.epochs {
            let row = self.run_epoch(state)?;
            on_epoch(state, &row)?;
        }
        Ok(())
    }

    fn cap_epoch(
        &self,
        state: &mut TrainState,
        e: usize,
        lr: f64,
        sums: &mut LossSums,
    ) -> Result<usize> {
        let p = self.cfg.batch_size / self.cfg.positives_per_id;
        let mut rng = substream(self.cfg.seed, tag::BATCH, 2 * e as u64);
        let batches = pk_batches(&self.id_label, p, self.cfg.positives_per_id, &mut rng)?;
        for (step, batch) in batches.iter().enumerate() {
            self.cap_step(state, e, step, batch, lr, sums)?;
        }
        Ok(batches.len())
    }

    fn cap_step(
        &self,
        state: &mut TrainState,
        e: usize,
        step: usize,
        batch: &[usize],
        lr: f64,
        sums: &mut LossSums,
    ) -> Result<()> {
        let cfg = &self.cfg;
        let with_attrs = cfg.uses_cap_attributes();
        let lq_inject = cfg.uses_tad() && cfg.tad_variant == TadVariant::LqAugOnly;
        let policy = cfg.lq_policy.always();
        let mut images: Vec<Cow<'_, Image>> = Vec::with_capacity(batch.len());
        let mut ids = Vec::with_capacity(batch.len());
        let mut clothes = Vec::with_capacity(batch.len());
        let mut labeler = ClothesLabeler::new(0);
        for (pos, &p) in batch.iter().enumerate() {
            let rec = self.pool[p];
            let mut rng = substream(cfg.seed, tag::AUGMENT, sample_key(e, step, pos));
            let mut img = Cow::Borrowed(&self.target.images[rec]);
            let mut c = self.clothes_label[p];
            if lq_inject && rng.random::<f64>() < cfg.lq_aug_prob {
                img = Cow::Owned(degrade::apply_policy(&img, &policy, &mut rng)?.0);
            }
            if rng.random::<f64>() < cfg.clothes_aug_prob {
                let (aug, _) = synthdata::clothes_augment(
                    &img,
                    &self.target.masks[rec],
                    &mut rng,
                    &mut labeler,
                )?;
                img = Cow::Owned(aug);
                c = self.aug_base + self.id_label[p];
            }
            images.push(img);
            ids.push(self.id_label[p]);
            clothes.push(c);
        }
        let refs: Vec<&Image> = images.iter().map(|c| c.as_ref()).collect();
        let x = state.student.input_tensor(&refs)?;

        let student = &state.student;
        let optimizer = &mut state.optimizer;
        let mut g = Graph::new();
        let bound = student.bind(&mut g);
        let xv = g.constant(x);
        let fwd = bound.forward(&mut g, &student.config, xv, with_attrs)?;

        // Classifier half: fit the clothes head on detached CAL features.
        let head = student.layer(Layer::Clothes);
        let (mut w, mut b) = (head.weight.clone(), head.bias.clone());
        {
            let mut gc = Graph::new();
            let wv = gc.leaf(w.clone(), true);
            let bv = gc.leaf(b.clone(), true);
            let f = gc.constant(g.value(fwd.f_cal).clone());
            let logits = LinearHead {
                weight: wv,
                bias: bv,
            }
            .apply(&mut gc, f)?;
            let cls = losses::clothes_classifier_from_logits(&mut gc, logits, &clothes)?;
            sums.add(cls.name, cls.value(&gc));
            gc.backward(cls.var)?;
            let gw = gc.take_grad(wv).expect("leaf tracks grad");
            let gb = gc.take_grad(bv).expect("leaf tracks grad");
            if !head.frozen {
                optimizer.step_tensors(Layer::Clothes, &mut w, &mut b, &gw, &gb, lr);
            }
        }

        // Extractor half: the updated classifier is a constant here.
        let wv = g.constant(w.clone());
        let bv = g.constant(b.clone());
        let cl_logits = LinearHead {
            weight: wv,
            bias: bv,
        }
        .apply(&mut g, fwd.f_cal)?;
        let eps = cfg.label_smoothing;
        let mut terms: Vec<LossValue> = Vec::new();
        let mut named = |mut l: LossValue, name: &'static str| {
            l.name = name;
            terms.push(l);
        };
        named(
            losses::label_smoothed_ce(&mut g, fwd.id_bot, &ids, eps)?,
            "id_bot_ce",
        );
        named(
            losses::label_smoothed_ce(&mut g, fwd.id_cal, &ids, eps)?,
            "id_cal_ce",
        );
        named(
            losses::adversarial_from_logits(&mut g, cl_logits, &ids, &self.id_to_clothes)?,
            "clothes_adv",
        );
        named(
            losses::id_logit_kl(&mut g, fwd.id_bot, fwd.id_cal, cfg.temperature)?,
            "id_kl",
        );
        named(
            losses::triplet_loss(&mut g, fwd.f_bot, &ids, cfg.triplet_margin)?,
            "triplet",
        );
        if with_attrs {
            let pl = self.pose_label.as_ref().expect("checked at construction");
            let poses: Vec<usize> = batch.iter().map(|&p| pl[p]).collect();
            let genders: Vec<usize> = batch
                .iter()
                .map(|&p| self.target.records[self.pool[p]].gender as usize)
                .collect();
            let pose_logits = fwd.pose.expect("pose branch requested");
            named(
                losses::label_smoothed_ce(&mut g, pose_logits, &poses, eps)?,
                "pose_ce",
            );
            named(
                losses::label_smoothed_ce(&mut g, fwd.gender, &genders, eps)?,
                "gender_ce",
            );
            let f_pose = fwd.f_pose.expect("pose branch requested");
            named(
                losses::cosine_disentangle(&mut g, fwd.f_bot, f_pose)?,
                "cos",
            );
        }
        for t in &terms {
            sums.add(t.name, t.value(&g));
        }
        let total = losses::total(&mut g, &terms)?;
        g.backward(total)?;
        let grads = collect_grads(&mut g, &bound);
        drop(g);
        let layer = state.student.layer_mut(Layer::Clothes);
        layer.weight = w;
        layer.bias = b;
        state
            .optimizer
            .step_layers(&mut state.student, &grads, lr, |l| l != Layer::Clothes);
        Ok(())
    }

    fn tad_epoch(
        &self,
        state: &mut TrainState,
        e: usize,
        lr: f64,
        sums: &mut LossSums,
    ) -> Result<usize> {
        let bs = self.cfg.batch_size;
        let mut rng = substream(self.cfg.seed, tag::BATCH, 2 * e as u64 + 1);
        let source: &Dataset;
        let mut hq_rows: Vec<Vec<usize>> = Vec::new();
        let mut lq_rows: Vec<Vec<usize>> = Vec::new();
        if self.cfg.tad_variant == TadVariant::TargetSsNt {
            source = self.target;
            let mut order = self.blurry.clone();
            order.shuffle(&mut rng);
            let mut it = order.iter().cycle();
            for _ in 0..self.steps_per_epoch {
                let (mut hq, mut lq) = (Vec::new(), Vec::new());
                while lq.len() < bs {
                    let &i = it.next().expect("cycle over a nonempty pool");
                    let id = self.target.records[i].identity;
                    let label = self.pool_label_of_identity(id);
                    let sharp = &self.sharp_by_id[label];
                    if sharp.is_empty() {
                        continue;
                    }
                    lq.push(i);
                    hq.push(sharp[rng.random_range(0..sharp.len())]);
                }
                hq_rows.push(hq);
                lq_rows.push(lq);
            }
        } else {
            source = self.external.expect("checked at construction");
            let mut order: Vec<usize> = (0..self.subsample.len()).collect();
            order.shuffle(&mut rng);
            let mut it = order.iter().cycle();
            for _ in 0..self.steps_per_epoch {
                hq_rows.push(
                    (0..bs)
                        .map(|_| *it.next().expect("nonempty subsample"))
                        .collect(),
                );
            }
        }
        for step in 0..self.steps_per_epoch {
            self.tad_step(
                state,
                source,
                e,
                step,
                &hq_rows[step],
                lq_rows.get(step),
                lr,
                sums,
            )?;
        }
        Ok(self.steps_per_epoch)
    }

    fn pool_label_of_identity(&self, identity: usize) -> usize {
        let p = self
            .pool
            .iter()
            .position(|&i| self.target.records[i].identity == identity)
            .expect("identity present in the training pool");
        self.id_label[p]
    }

    /// One TAD batch. For external variants `hq` holds subsample positions
    /// and LQ twins are degraded on the fly; for `target_ss_nt` both lists
    /// are target record indices.
    #[allow(clippy::too_many_arguments)]
    fn tad_step(
        &self,
        state: &mut TrainState,
        source: &Dataset,
        e: usize,
        step: usize,
        hq: &[usize],
        lq: Option<&Vec<usize>>,
        lr: f64,
        sums: &mut LossSums,
    ) -> Result<()> {
        let cfg = &self.cfg;
        let (hq_imgs, lq_imgs): (Vec<&Image>, Vec<Cow<'_, Image>>) = match lq {
            Some(lq) => (
                hq.iter().map(|&i| &source.images[i]).collect(),
                lq.iter()
                    .map(|&i| Cow::Borrowed(&source.images[i]))
                    .collect(),
            ),
            None => {
                let policy = cfg.lq_policy.always();
                let hq_imgs: Vec<&Image> = hq
                    .iter()
                    .map(|&p| &source.images[self.subsample[p]])
                    .collect();
                let mut lq_imgs = Vec::with_capacity(hq.len());
                for (pos, img) in hq_imgs.iter().enumerate() {
                    let mut rng = substream(cfg.seed, tag::TAD_DEGRADE, sample_key(e, step, pos));
                    lq_imgs.push(Cow::Owned(degrade::apply_policy(img, &policy, &mut rng)?.0));
                }
                (hq_imgs, lq_imgs)
            }
        };
        let lq_refs: Vec<&Image> = lq_imgs.iter().map(|c| c.as_ref()).collect();
        let x_hq = state.student.input_tensor(&hq_imgs)?;
        let x_lq = state.student.input_tensor(&lq_refs)?;
        let student = &state.student;
        let mut g = Graph::new();
        let bound = student.bind(&mut g);
        let xh = g.constant(x_hq);
        let xl = g.constant(x_lq);
        let fh = bound.forward(&mut g, &student.config, xh, false)?;
        let fl = bound.forward(&mut g, &student.config, xl, false)?;
        let sh = fh.normalized(&mut g)?;
        let sl = fl.normalized(&mut g)?;
        let mut terms = Vec::new();
        let variant = cfg.tad_variant;
        if variant.needs_teacher() {
            let cache = self.cache.as_ref().expect("teacher features cached");
            let teacher = BranchFeatures {
                cal: g.constant(gather(&cache.cal, hq)),
                bot: g.constant(gather(&cache.bot, hq)),
            };
            terms.push(losses::tad_distill(&mut g, teacher, sh, sl)?);
            terms.push(losses::tad_self_supervise(
                &mut g,
                fh.head_logits(),
                fl.head_logits(),
                cfg.temperature,
                cfg.detach_hq,
            )?);
        }
        if matches!(
            variant,
            TadVariant::SsMseTad | TadVariant::SsMseNt | TadVariant::TargetSsNt
        ) {
            terms.push(losses::feature_mse(&mut g, sh, sl)?);
        }
        for t in &terms {
            sums.add(t.name, t.value(&g));
        }
        let total = losses::total(&mut g, &terms)?;
        g.backward(total)?;
        let grads = collect_grads(&mut g, &bound);
        drop(g);
        state.optimizer.step(&mut state.student, &grads, lr);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub train_images: usize,
    pub holdout_images: usize,
    /// ID-head accuracy on held-out external images.
    pub holdout_top1: f64,
    pub chance: f64,
}

/// Every fifth HQ image of each external identity is held out.
fn teacher_split(external: &Dataset) -> (Vec<usize>, Vec<usize>) {
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    let (mut train, mut hold) = (Vec::new(), Vec::new());
    for i in external.indices(Split::Train, Tier::Hq) {
        let n = seen.entry(external.records[i].identity).or_insert(0);
        if *n % 5 == 4 {
            hold.push(i);
        } else {
            train.push(i);
        }
        *n += 1;
    }
    (train, hold)
}

/// Baseline-mode training on the external HQ images with `teacher_seed`
/// and `teacher_epochs`. The returned parameters are frozen.
pub fn pretrain_teacher(
    external: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<(ModelParams, TeacherReport, Vec<MetricsRow>)> {
    let (train, hold) = teacher_split(external);
    if train.is_empty() {
        return Err(TrainError::EmptyExternal);
    }
    let tcfg = ExperimentConfig {
        mode: Mode::Baseline,
        epochs: cfg.teacher_epochs,
        seed: cfg.teacher_seed,
        student_init: StudentInit::Random,
        ..cfg.clone()
    };
    let trainer = Trainer::with_pool(tcfg, external, train.clone(), None, None, None, false)?;
    let mut state = trainer.init_state()?;
    let mut rows = Vec::new();
    trainer.run::<TrainError>(&mut state, |_, r| {
        rows.push(r.clone());
        Ok(())
    })?;
    let teacher = state.student.clone_frozen();
    let id_of: BTreeMap<usize, usize> = train
        .iter()
        .map(|&i| external.records[i].identity)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(n, id)| (id, n))
        .collect();
    let mut correct = 0;
    for chunk in hold.chunks(ANALYSIS_CHUNK) {
        let imgs: Vec<&Image> = chunk.iter().map(|&i| &external.images[i]).collect();
        let x = teacher.input_tensor(&imgs)?;
        let mut g = Graph::new();
        let bound = teacher.bind(&mut g);
        let xv = g.constant(x);
        let fwd = bound.forward(&mut g, &teacher.config, xv, false)?;
        let pred = argmax_rows(g.value(fwd.id_bot));
        correct += chunk
            .iter()
            .zip(pred)
            .filter(|(&i, p)| id_of.get(&external.records[i].identity) == Some(p))
            .count();
    }
    let report = TeacherReport {
        train_images: train.len(),
        holdout_images: hold.len(),
        holdout_top1: correct as f64 / hold.len().max(1) as f64,
        chance: 1.0 / id_of.len() as f64,
    };
    Ok((teacher, report, rows))
}

/// K-means pose classes fitted on the target training skeletons.
pub fn fit_pose_model(target: &Dataset, k: usize, seed: u64) -> Result<PoseClusterModel> {
    let vectors: Vec<pose::PoseVector> = target
        .indices(Split::Train, Tier::Hq)
        .into_iter()
        .filter_map(|i| pose::pose_vector(&target.skeletons[i], pose::DEFAULT_MIN_CONFIDENCE))
        .collect();
    let (model, _) = pose::kmeans_fit(&vectors, k, seed, pose::DEFAULT_MAX_ITERS)?;
    Ok(model)
}
