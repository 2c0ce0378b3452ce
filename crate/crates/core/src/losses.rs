//! Training objectives, built on the tape so every term is differentiable.
//!
//! Classification: label-smoothed cross-entropy. Metric: batch-hard triplet.
//! Clothes: a classifier loss on detached features plus an adversarial loss
//! pushing the extractor toward a uniform prediction over the clothes an
//! identity owns. Cross-branch: symmetric KL between ID logits. Pose:
//! absolute cosine between BOT and POSE features. Distillation: squared
//! distance to a frozen teacher's normalized features, and KL from HQ to LQ
//! logits.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const DEFAULT_TRIPLET_MARGIN: f64 = 0.3;
pub const DEFAULT_LABEL_SMOOTHING: f64 = 0.1;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// Tolerance on unit norms for distillation inputs.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("label count {labels} does not match batch size {batch}")]
    BatchMismatch { labels: usize, batch: usize },
    #[error("label smoothing {0} outside [0, 1)")]
    Smoothing(f64),
    #[error("triplet mining needs at least two identities in the batch")]
    SingleIdentity,
    #[error("identity {0} has a single sample in the batch")]
    LonelyIdentity(usize),
    #[error("identity {0} owns no clothes classes")]
    EmptyClothesSet(usize),
    #[error("feature row norm {0} is not 1")]
    Unnormalized(f64),
}

pub type Result<T> = core::result::Result<T, LossError>;

/// A named, weighted scalar loss on the tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub var: Var,
    pub name: &'static str,
    pub weight: f64,
}

impl LossValue {
    pub fn new(var: Var, name: &'static str) -> Self {
        Self {
            var,
            name,
            weight: 1.0,
        }
    }

    pub fn value(&self, g: &Graph<'_>) -> f64 {
        g.value(self.var).item()
    }
}

/// Weighted sum of the given losses.
pub fn total(g: &mut Graph<'_>, losses: &[LossValue]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for l in losses {
        let term = if l.weight == 1.0 {
            l.var
        } else {
            g.scale(l.var, l.weight)?
        };
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
}

/// `-mean_b Σ_k target[b,k] · log_softmax(logits)[b,k]`.
fn soft_target_ce(g: &mut Graph<'_>, logits: Var, target: Tensor) -> Result<Var> {
    let b = g.value(logits).dims2("cross_entropy")?.0;
    let ls = g.log_softmax(logits)?;
    let t = g.constant(target);
    let prod = g.mul(ls, t)?;
    let s = g.sum(prod)?;
    Ok(g.scale(s, -1.0 / b as f64)?)
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(LossError::BatchMismatch {
            labels: labels.len(),
            batch,
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(LossError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Cross-entropy against `(1-ε)·onehot + ε/C`, averaged over the batch.
pub fn label_smoothed_ce(
    g: &mut Graph<'_>,
    logits: Var,
    labels: &[usize],
    epsilon: f64,
) -> Result<LossValue> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(LossError::Smoothing(epsilon));
    }
    let (b, c) = g.value(logits).dims2("label_smoothed_ce")?;
    check_labels(labels, b, c)?;
    let mut q = vec![epsilon / c as f64; b * c];
    for (i, &l) in labels.iter().enumerate() {
        q[i * c + l] += 1.0 - epsilon;
    }
    let v = soft_target_ce(g, logits, Tensor::new(&[b, c], q)?)?;
    Ok(LossValue::new(v, "ce"))
}

/// Hardest positive / negative per anchor under Euclidean distance.
/// Ties resolve to the lowest index.
pub fn batch_hard_indices(dist: &Tensor, labels: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = labels.len();
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(n);
    for i in 0..n {
        let row = dist.row(i);
        let mut p: Option<usize> = None;
        let mut q: Option<usize> = None;
        for j in 0..n {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                if p.is_none_or(|p| row[j] > row[p]) {
                    p = Some(j);
                }
            } else if q.is_none_or(|q| row[j] < row[q]) {
                q = Some(j);
            }
        }
        pos.push(p.ok_or(LossError::LonelyIdentity(labels[i]))?);
        neg.push(q.ok_or(LossError::SingleIdentity)?);
    }
    Ok((pos, neg))
}

/// Batch-hard triplet loss `mean(relu(d_ap - d_an + margin))`.
pub fn triplet_loss(
    g: &mut Graph<'_>,
    features: Var,
    labels: &[usize],
    margin: f64,
) -> Result<LossValue> {
    let (b, _) = g.value(features).dims2("triplet_loss")?;
    if labels.len() != b {
        return Err(LossError::BatchMismatch {
            labels: labels.len(),
            batch: b,
        });
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(LossError::SingleIdentity);
    }
    let d = g.pairwise_dist(features)?;
    let (pos, neg) = batch_hard_indices(g.value(d), labels)?;
    let ap = g.pick_per_row(d, &pos)?;
    let an = g.pick_per_row(d, &neg)?;
    let diff = g.sub(ap, an)?;
    let shifted = g.add_scalar(diff, margin)?;
    let hinge = g.relu(shifted)?;
    let v = g.mean(hinge)?;
    Ok(LossValue::new(v, "triplet"))
}

/// Dense linear head `x·W + b` whose parameters live on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LinearHead {
    pub weight: Var,
    pub bias: Var,
}

impl LinearHead {
    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> core::result::Result<Var, TensorError> {
        let y = g.matmul(x, self.weight)?;
        g.add_row(y, self.bias)
    }

    /// Same head with its parameters detached.
    pub fn frozen(&self, g: &mut Graph<'_>) -> LinearHead {
        LinearHead {
            weight: g.detach(self.weight),
            bias: g.detach(self.bias),
        }
    }
}

/// Uniform target over each sample's identity-owned clothes classes.
fn owned_clothes_target(
    identities: &[usize],
    id_to_clothes: &[Vec<usize>],
    classes: usize,
) -> Result<Tensor> {
    let b = identities.len();
    let mut t = vec![0.0; b * classes];
    for (i, &id) in identities.iter().enumerate() {
        let owned = id_to_clothes
            .get(id)
            .filter(|c| !c.is_empty())
            .ok_or(LossError::EmptyClothesSet(id))?;
        for &c in owned {
            if c >= classes {
                return Err(LossError::LabelOutOfRange { label: c, classes });
            }
            t[i * classes + c] = 1.0 / owned.len() as f64;
        }
    }
    Ok(Tensor::new(&[b, classes], t)?)
}

/// Cross-entropy of clothes logits against the uniform distribution over
/// the clothes each sample's identity owns.
pub fn adversarial_from_logits(
    g: &mut Graph<'_>,
    clothes_logits: Var,
    identities: &[usize],
    id_to_clothes: &[Vec<usize>],
) -> Result<LossValue> {
    let (b, k) = g.value(clothes_logits).dims2("clothes_adversarial")?;
    if identities.len() != b {
        return Err(LossError::BatchMismatch {
            labels: identities.len(),
            batch: b,
        });
    }
    let target = owned_clothes_target(identities, id_to_clothes, k)?;
    let v = soft_target_ce(g, clothes_logits, target)?;
    Ok(LossValue::new(v, "clothes_adv"))
}

/// Plain cross-entropy for the clothes classifier.
pub fn clothes_classifier_from_logits(
    g: &mut Graph<'_>,
    clothes_logits: Var,
    clothes_labels: &[usize],
) -> Result<LossValue> {
    let mut l = label_smoothed_ce(g, clothes_logits, clothes_labels, 0.0)?;
    l.name = "clothes_cls";
    Ok(l)
}

/// Two-player clothes objective.
///
/// The classifier loss sees detached features, so it only reaches the
/// classifier. The adversarial loss goes through a detached copy of the
/// classifier, so it only reaches the feature extractor.
pub fn clothes_adversarial(
    g: &mut Graph<'_>,
    features: Var,
    classifier: &LinearHead,
    clothes_labels: &[usize],
    identities: &[usize],
    id_to_clothes: &[Vec<usize>],
) -> Result<(LossValue, LossValue)> {
    let f_det = g.detach(features);
    let cls_logits = classifier.apply(g, f_det)?;
    let cls = clothes_classifier_from_logits(g, cls_logits, clothes_labels)?;
    let frozen = classifier.frozen(g);
    let adv_logits = frozen.apply(g, features)?;
    let adv = adversarial_from_logits(g, adv_logits, identities, id_to_clothes)?;
    Ok((cls, adv))
}

/// `mean_b KL(softmax(p/T) ‖ softmax(q/T))`.
pub fn kl_divergence(
    g: &mut Graph<'_>,
    p_logits: Var,
    q_logits: Var,
    temperature: f64,
) -> Result<Var> {
    let (b, _) = g.value(p_logits).dims2("kl_divergence")?;
    if g.value(p_logits).shape() != g.value(q_logits).shape() {
        return Err(TensorError::ShapeMismatch {
            op: "kl_divergence",
            lhs: g.value(p_logits).shape().to_vec(),
            rhs: g.value(q_logits).shape().to_vec(),
        }
        .into());
    }
    let (ps, qs) = if temperature == 1.0 {
        (p_logits, q_logits)
    } else {
        (
            g.scale(p_logits, 1.0 / temperature)?,
            g.scale(q_logits, 1.0 / temperature)?,
        )
    };
    let lp = g.log_softmax(ps)?;
    let lq = g.log_softmax(qs)?;
    let p = g.exp(lp)?;
    let diff = g.sub(lp, lq)?;
    let prod = g.mul(p, diff)?;
    let s = g.sum(prod)?;
    Ok(g.scale(s, 1.0 / b as f64)?)
}

/// Symmetric KL between the ID logits of the two branches.
pub fn id_logit_kl(
    g: &mut Graph<'_>,
    logits_bot: Var,
    logits_cal: Var,
    temperature: f64,
) -> Result<LossValue> {
    let a = kl_divergence(g, logits_bot, logits_cal, temperature)?;
    let b = kl_divergence(g, logits_cal, logits_bot, temperature)?;
    let s = g.add(a, b)?;
    let v = g.scale(s, 0.5)?;
    Ok(LossValue::new(v, "id_kl"))
}

/// Mean absolute cosine similarity between paired rows.
pub fn cosine_disentangle(g: &mut Graph<'_>, f_bot: Var, f_pose: Var) -> Result<LossValue> {
    let a = g.l2_normalize(f_bot)?;
    let b = g.l2_normalize(f_pose)?;
    let cos = g.row_dot(a, b)?;
    let abs = g.abs(cos)?;
    let v = g.mean(abs)?;
    Ok(LossValue::new(v, "cos"))
}

/// Normalized CAL and BOT features of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BranchFeatures {
    pub cal: Var,
    pub bot: Var,
}

/// CAL clothes logits and both ID logits of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct HeadLogits {
    pub cal_clothes: Var,
    pub cal_id: Var,
    pub bot_id: Var,
}

fn check_unit_rows(t: &Tensor) -> Result<()> {
    let c = *t.shape().last().unwrap();
    for row in t.data().chunks(c) {
        let n = math::sqrt(row.iter().map(|v| v * v).sum());
        if math::abs(n - 1.0) > NORM_TOLERANCE {
            return Err(LossError::Unnormalized(n));
        }
    }
    Ok(())
}

/// `mean_b Σ_k (a - b)²`.
fn mean_sq_dist(g: &mut Graph<'_>, a: Var, b: Var) -> Result<Var> {
    let (n, _) = g.value(a).dims2("mean_sq_dist")?;
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq)?;
    Ok(g.scale(s, 1.0 / n as f64)?)
}

/// Teacher distillation over both quality tiers and both branches. The
/// teacher side is detached here regardless of how it was built.
pub fn tad_distill(
    g: &mut Graph<'_>,
    teacher: BranchFeatures,
    student_hq: BranchFeatures,
    student_lq: BranchFeatures,
) -> Result<LossValue> {
    for v in [
        teacher.cal,
        teacher.bot,
        student_hq.cal,
        student_hq.bot,
        student_lq.cal,
        student_lq.bot,
    ] {
        check_unit_rows(g.value(v))?;
    }
    let t_cal = g.detach(teacher.cal);
    let t_bot = g.detach(teacher.bot);
    let mut terms = Vec::with_capacity(4);
    for s in [student_hq, student_lq] {
        terms.push(mean_sq_dist(g, t_cal, s.cal)?);
        terms.push(mean_sq_dist(g, t_bot, s.bot)?);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(LossValue::new(acc, "tad_distill"))
}

/// KL from HQ to LQ distributions on the clothes head and both ID heads.
/// With `detach_hq` the HQ side acts as a fixed target.
pub fn tad_self_supervise(
    g: &mut Graph<'_>,
    hq: HeadLogits,
    lq: HeadLogits,
    temperature: f64,
    detach_hq: bool,
) -> Result<LossValue> {
    let pick = |g: &mut Graph<'_>, v: Var| if detach_hq { g.detach(v) } else { v };
    let hq_cl = pick(g, hq.cal_clothes);
    let hq_cal = pick(g, hq.cal_id);
    let hq_bot = pick(g, hq.bot_id);
    let a = kl_divergence(g, hq_cl, lq.cal_clothes, temperature)?;
    let b = kl_divergence(g, hq_cal, lq.cal_id, temperature)?;
    let c = kl_divergence(g, hq_bot, lq.bot_id, temperature)?;
    let ab = g.add(a, b)?;
    let v = g.add(ab, c)?;
    Ok(LossValue::new(v, "tad_self"))
}

/// Direct squared distance between a student's HQ and LQ features.
pub fn feature_mse(g: &mut Graph<'_>, hq: BranchFeatures, lq: BranchFeatures) -> Result<LossValue> {
    let a = mean_sq_dist(g, hq.cal, lq.cal)?;
    let b = mean_sq_dist(g, hq.bot, lq.bot)?;
    let v = g.add(a, b)?;
    Ok(LossValue::new(v, "ss_mse"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_relative_error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn unit_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Tensor {
        let mut t = rand_t(rng, &[b, d]);
        for row in t.data_mut().chunks_mut(d) {
            let n = math::sqrt(row.iter().map(|v| v * v).sum());
            row.iter_mut().for_each(|v| *v /= n);
        }
        t
    }

    fn direct_log_softmax(row: &[f64]) -> Vec<f64> {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + math::ln(row.iter().map(|v| math::exp(v - m)).sum::<f64>());
        row.iter().map(|v| v - lse).collect()
    }

    fn eval(t: &Tensor, f: impl FnOnce(&mut Graph<'_>, Var) -> Result<LossValue>) -> f64 {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let l = f(&mut g, v).unwrap();
        l.value(&g)
    }

    #[test]
    fn ce_uniform_logits_give_ln_c() {
        for eps in [0.0, 0.1, 0.5] {
            let t = Tensor::zeros(&[3, 7]);
            let v = eval(&t, |g, x| label_smoothed_ce(g, x, &[0, 3, 6], eps));
            assert!(math::abs(v - math::ln(7.0)) < 1e-12);
        }
    }

    #[test]
    fn ce_confident_logits_go_to_zero() {
        let t = Tensor::from_rows(&[&[60.0, 0.0, 0.0]]).unwrap();
        let v = eval(&t, |g, x| label_smoothed_ce(g, x, &[0], 0.0));
        assert!(v < 1e-20);
    }

    #[test]
    fn ce_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = rand_t(&mut rng, &[2, 3]);
        let labels = [2, 0];
        let eps = 0.1;
        let mut expect = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let ls = direct_log_softmax(t.row(i));
            for k in 0..3 {
                let q = if k == l {
                    1.0 - eps + eps / 3.0
                } else {
                    eps / 3.0
                };
                expect -= q * ls[k];
            }
        }
        expect /= 2.0;
        let v = eval(&t, |g, x| label_smoothed_ce(g, x, &labels, eps));
        assert!(math::abs(v - expect) < 1e-12);
    }

    #[test]
    fn ce_rejects_bad_labels() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        assert_eq!(
            label_smoothed_ce(&mut g, x, &[0, 3], 0.1).unwrap_err(),
            LossError::LabelOutOfRange {
                label: 3,
                classes: 3
            }
        );
    }

    #[test]
    fn triplet_zero_when_separated() {
        let t = Tensor::from_rows(&[&[0.0, 0.0], &[0.1, 0.0], &[5.0, 0.0], &[5.1, 0.0]]).unwrap();
        let v = eval(&t, |g, x| triplet_loss(g, x, &[0, 0, 1, 1], 0.3));
        assert_eq!(v, 0.0);
    }

    #[test]
    fn triplet_collapsed_equals_margin() {
        let t = Tensor::from_rows(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]).unwrap();
        let v = eval(&t, |g, x| triplet_loss(g, x, &[0, 0, 1, 1], 0.3));
        assert!(math::abs(v - 0.3) < 1e-15);
    }

    #[test]
    fn triplet_errors() {
        let t = Tensor::zeros(&[3, 2]);
        let mut g = Graph::new();
        let x = g.constant(t);
        assert_eq!(
            triplet_loss(&mut g, x, &[1, 1, 1], 0.3).unwrap_err(),
            LossError::SingleIdentity
        );
        assert_eq!(
            triplet_loss(&mut g, x, &[1, 1, 2], 0.3).unwrap_err(),
            LossError::LonelyIdentity(2)
        );
    }

    /// Exhaustive (a, p, n) enumeration: for each anchor take the largest
    /// hinge over all valid triplets. Batch-hard mining picks exactly that.
    fn exhaustive_triplet(x: &Tensor, labels: &[usize], margin: f64) -> f64 {
        let n = labels.len();
        let d = |i: usize, j: usize| {
            math::sqrt(
                x.row(i)
                    .iter()
                    .zip(x.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum(),
            )
        };
        let mut total = 0.0;
        for a in 0..n {
            let mut worst = f64::NEG_INFINITY;
            for p in 0..n {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                for q in 0..n {
                    if labels[q] == labels[a] {
                        continue;
                    }
                    worst = worst.max(d(a, p) - d(a, q));
                }
            }
            total += (worst + margin).max(0.0);
        }
        total / n as f64
    }

    #[test]
    fn triplet_matches_exhaustive_mining() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = rand_t(&mut rng, &[8, 4]);
            let labels = [0, 0, 1, 1, 2, 2, 3, 3];
            let v = eval(&t, |g, x| triplet_loss(g, x, &labels, 0.3));
            assert!(math::abs(v - exhaustive_triplet(&t, &labels, 0.3)) < 1e-12);
        }
    }

    #[test]
    fn adversarial_reference_values() {
        let k = 5;
        let owned = vec![(0..k).collect::<Vec<_>>()];
        let t = Tensor::zeros(&[2, k]);
        let v = eval(&t, |g, x| adversarial_from_logits(g, x, &[0, 0], &owned));
        assert!(math::abs(v - math::ln(k as f64)) < 1e-12);

        let owned = vec![vec![2]];
        let t = Tensor::from_rows(&[&[0.0, 0.0, 80.0, 0.0]]).unwrap();
        let v = eval(&t, |g, x| adversarial_from_logits(g, x, &[0], &owned));
        assert!(v < 1e-20);

        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        assert_eq!(
            adversarial_from_logits(&mut g, x, &[1], &[vec![0], vec![]]).unwrap_err(),
            LossError::EmptyClothesSet(1)
        );
    }

    #[test]
    fn adversarial_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let owned = vec![vec![0, 1], vec![2, 3]];
        let ids = [0, 1, 1];
        let t = rand_t(&mut rng, &[3, 4]);
        let mut expect = 0.0;
        for (i, &id) in ids.iter().enumerate() {
            let ls = direct_log_softmax(t.row(i));
            expect -= owned[id].iter().map(|&c| ls[c] / 2.0).sum::<f64>();
        }
        expect /= 3.0;
        let v = eval(&t, |g, x| adversarial_from_logits(g, x, &ids, &owned));
        assert!(math::abs(v - expect) < 1e-12);
    }

    #[test]
    fn clothes_losses_split_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats = rand_t(&mut rng, &[4, 3]);
        let w = rand_t(&mut rng, &[3, 4]);
        let b = rand_t(&mut rng, &[1, 4]);
        let owned = vec![vec![0, 1], vec![2, 3]];

        let mut g = Graph::new();
        let f = g.leaf(feats.clone(), true);
        let head = LinearHead {
            weight: g.leaf(w.clone(), true),
            bias: g.leaf(b.clone(), true),
        };
        let (cls, _) =
            clothes_adversarial(&mut g, f, &head, &[0, 1, 2, 3], &[0, 0, 1, 1], &owned).unwrap();
        g.backward(cls.var).unwrap();
        assert!(g.grad(f).is_none());
        assert!(g.grad(head.weight).is_some());

        let mut g = Graph::new();
        let f = g.leaf(feats, true);
        let head = LinearHead {
            weight: g.leaf(w, true),
            bias: g.leaf(b, true),
        };
        let (_, adv) =
            clothes_adversarial(&mut g, f, &head, &[0, 1, 2, 3], &[0, 0, 1, 1], &owned).unwrap();
        g.backward(adv.var).unwrap();
        assert!(g.grad(f).is_some());
        assert!(g.grad(head.weight).is_none());
    }

    #[test]
    fn id_kl_reference_values() {
        let t = Tensor::from_rows(&[&[0.3, -1.0, 2.0]]).unwrap();
        let mut g = Graph::new();
        let a = g.constant(t.clone());
        let b = g.constant(t);
        let l = id_logit_kl(&mut g, a, b, 1.0).unwrap();
        assert_eq!(l.value(&g), 0.0);

        // [0,0,1] vs [1,0,0]: the two softmaxes are permutations of each
        // other, so both KL directions are equal: (e-1)/(e+2).
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[&[0.0, 0.0, 1.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[&[1.0, 0.0, 0.0]]).unwrap());
        let l = id_logit_kl(&mut g, a, b, 1.0).unwrap();
        let e = core::f64::consts::E;
        let z = e + 2.0;
        let (p_hi, p_lo) = (e / z, 1.0 / z);
        let kl = p_lo * math::ln(p_lo / p_hi) + p_lo * 0.0 + p_hi * math::ln(p_hi / p_lo);
        assert!(math::abs(l.value(&g) - kl) < 1e-12);
        assert!(math::abs(kl - (e - 1.0) / z) < 1e-12);
    }

    #[test]
    fn cosine_reference_values() {
        let a = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[&[0.0, 3.0], &[-1.0, 0.0]]).unwrap();
        let mut g = Graph::new();
        let (x, y) = (g.constant(a.clone()), g.constant(b));
        assert_eq!(cosine_disentangle(&mut g, x, y).unwrap().value(&g), 0.0);
        let y3 = g.scale(x, 3.0).unwrap();
        assert!(math::abs(cosine_disentangle(&mut g, x, y3).unwrap().value(&g) - 1.0) < 1e-15);
        let yn = g.scale(x, -1.0).unwrap();
        assert!(math::abs(cosine_disentangle(&mut g, x, yn).unwrap().value(&g) - 1.0) < 1e-15);
        let z = g.constant(Tensor::zeros(&[2, 2]));
        assert!(cosine_disentangle(&mut g, x, z).is_err());
    }

    fn features(g: &mut Graph<'_>, cal: &Tensor, bot: &Tensor) -> BranchFeatures {
        BranchFeatures {
            cal: g.constant(cal.clone()),
            bot: g.constant(bot.clone()),
        }
    }

    #[test]
    fn distill_reference_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (c, b) = (unit_rows(&mut rng, 4, 8), unit_rows(&mut rng, 4, 8));
        let mut g = Graph::new();
        let t = features(&mut g, &c, &b);
        let s = features(&mut g, &c, &b);
        let l = tad_distill(&mut g, t, s, s).unwrap();
        assert_eq!(l.value(&g), 0.0);

        // antipodal unit vectors: each of the four terms is 4
        let u = Tensor::from_rows(&[&[1.0, 0.0]]).unwrap();
        let v = Tensor::from_rows(&[&[-1.0, 0.0]]).unwrap();
        let mut g = Graph::new();
        let t = features(&mut g, &u, &u);
        let s = features(&mut g, &v, &v);
        assert!(math::abs(tad_distill(&mut g, t, s, s).unwrap().value(&g) - 16.0) < 1e-12);

        let theta: f64 = 0.7;
        let w = Tensor::from_rows(&[&[math::cos(theta), math::sin(theta)]]).unwrap();
        let mut g = Graph::new();
        let t = features(&mut g, &u, &u);
        let s_hq = features(&mut g, &w, &u);
        let s_lq = features(&mut g, &u, &u);
        let got = tad_distill(&mut g, t, s_hq, s_lq).unwrap().value(&g);
        assert!(math::abs(got - (2.0 - 2.0 * math::cos(theta))) < 1e-12);
    }

    #[test]
    fn distill_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ts: Vec<Tensor> = (0..6).map(|_| unit_rows(&mut rng, 4, 8)).collect();
        let mut expect = 0.0;
        for (t, s) in [(0, 2), (1, 3), (0, 4), (1, 5)] {
            for i in 0..4 {
                expect += ts[t]
                    .row(i)
                    .iter()
                    .zip(ts[s].row(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / 4.0;
            }
        }
        let mut g = Graph::new();
        let t = features(&mut g, &ts[0], &ts[1]);
        let hq = features(&mut g, &ts[2], &ts[3]);
        let lq = features(&mut g, &ts[4], &ts[5]);
        let got = tad_distill(&mut g, t, hq, lq).unwrap().value(&g);
        assert!(math::abs(got - expect) < 1e-12);
    }

    #[test]
    fn distill_rejects_unnormalized() {
        let u = Tensor::from_rows(&[&[1.0, 0.0]]).unwrap();
        let bad = Tensor::from_rows(&[&[1.5, 0.0]]).unwrap();
        let mut g = Graph::new();
        let t = features(&mut g, &u, &u);
        let s = features(&mut g, &bad, &u);
        assert!(matches!(
            tad_distill(&mut g, t, s, t),
            Err(LossError::Unnormalized(_))
        ));
    }

    fn heads(g: &mut Graph<'_>, a: &Tensor, b: &Tensor, c: &Tensor) -> HeadLogits {
        HeadLogits {
            cal_clothes: g.constant(a.clone()),
            cal_id: g.constant(b.clone()),
            bot_id: g.constant(c.clone()),
        }
    }

    #[test]
    fn self_supervise_reference_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, b, c) = (
            rand_t(&mut rng, &[3, 4]),
            rand_t(&mut rng, &[3, 5]),
            rand_t(&mut rng, &[3, 5]),
        );
        let mut g = Graph::new();
        let h = heads(&mut g, &a, &b, &c);
        assert_eq!(
            tad_self_supervise(&mut g, h, h, 1.0, true)
                .unwrap()
                .value(&g),
            0.0
        );

        // 1×2 heads: p = softmax([0, 1]), q = softmax([0, 0]) on every head
        let p_l = Tensor::from_rows(&[&[0.0, 1.0]]).unwrap();
        let q_l = Tensor::from_rows(&[&[0.0, 0.0]]).unwrap();
        let mut g = Graph::new();
        let hq = heads(&mut g, &p_l, &p_l, &p_l);
        let lq = heads(&mut g, &q_l, &q_l, &q_l);
        let e = core::f64::consts::E;
        let p1 = e / (1.0 + e);
        let p0 = 1.0 - p1;
        let kl = p0 * math::ln(p0 / 0.5) + p1 * math::ln(p1 / 0.5);
        let got = tad_self_supervise(&mut g, hq, lq, 1.0, true)
            .unwrap()
            .value(&g);
        assert!(math::abs(got - 3.0 * kl) < 1e-12);
    }

    #[test]
    fn self_supervise_detach_flag() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ts: Vec<Tensor> = (0..6).map(|_| rand_t(&mut rng, &[2, 3])).collect();
        for detach in [true, false] {
            let mut g = Graph::new();
            let hq = HeadLogits {
                cal_clothes: g.leaf(ts[0].clone(), true),
                cal_id: g.leaf(ts[1].clone(), true),
                bot_id: g.leaf(ts[2].clone(), true),
            };
            let lq = HeadLogits {
                cal_clothes: g.leaf(ts[3].clone(), true),
                cal_id: g.leaf(ts[4].clone(), true),
                bot_id: g.leaf(ts[5].clone(), true),
            };
            let l = tad_self_supervise(&mut g, hq, lq, 1.0, detach).unwrap();
            g.backward(l.var).unwrap();
            assert_eq!(g.grad(hq.cal_id).is_none(), detach);
            assert!(g.grad(lq.cal_id).is_some());
        }
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (rand_t(&mut rng, &[2, 4]), rand_t(&mut rng, &[2, 4]));
            let mut g = Graph::new();
            let (x, y) = (g.constant(a), g.constant(b));
            let kl = kl_divergence(&mut g, x, y, 1.0).unwrap();
            prop_assert!(g.value(kl).item() >= 0.0);
        }

        #[test]
        fn id_kl_shift_invariant(seed in 0u64..1000, shift in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[3, 4]));
            let mut shifted = a.clone();
            for (i, row) in shifted.data_mut().chunks_mut(4).enumerate() {
                row.iter_mut().for_each(|v| *v += shift * (i as f64 + 1.0));
            }
            let mut g = Graph::new();
            let (x, xs, y) = (g.constant(a.clone()), g.constant(shifted.clone()), g.constant(b));
            let base = id_logit_kl(&mut g, x, y, 1.0).unwrap().value(&g);
            let moved = id_logit_kl(&mut g, xs, y, 1.0).unwrap().value(&g);
            prop_assert!((base - moved).abs() < 1e-12);
            let self_kl = id_logit_kl(&mut g, x, xs, 1.0).unwrap().value(&g);
            prop_assert!(self_kl.abs() < 1e-12);
        }

        #[test]
        fn cosine_scale_invariant(seed in 0u64..1000, s1 in 0.01f64..100.0, s2 in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[3, 4]));
            let mut g = Graph::new();
            let (x, y) = (g.constant(a), g.constant(b));
            let base = cosine_disentangle(&mut g, x, y).unwrap().value(&g);
            let xs = g.scale(x, s1).unwrap();
            let ys = g.scale(y, s2).unwrap();
            let scaled = cosine_disentangle(&mut g, xs, ys).unwrap().value(&g);
            prop_assert!((base - scaled).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-15).contains(&base));
        }
    }

    #[test]
    fn loss_gradients_pass_finite_differences() {
        let owned = vec![vec![0, 1], vec![2, 3]];
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let x = rand_t(&mut rng, &[4, 4]);
            let y = rand_t(&mut rng, &[4, 4]);
            let checks: [(&str, f64); 6] = [
                (
                    "ce",
                    max_relative_error(&[x.clone()], 1e-5, |g, v| {
                        Ok(label_smoothed_ce(g, v[0], &[0, 1, 2, 3], 0.1)
                            .map_err(unwrap_tensor)?
                            .var)
                    })
                    .unwrap(),
                ),
                (
                    "triplet",
                    max_relative_error(&[x.clone()], 1e-5, |g, v| {
                        Ok(triplet_loss(g, v[0], &[0, 0, 1, 1], 3.0)
                            .map_err(unwrap_tensor)?
                            .var)
                    })
                    .unwrap(),
                ),
                (
                    "adv",
                    max_relative_error(&[x.clone()], 1e-5, |g, v| {
                        Ok(adversarial_from_logits(g, v[0], &[0, 1, 0, 1], &owned)
                            .map_err(unwrap_tensor)?
                            .var)
                    })
                    .unwrap(),
                ),
                (
                    "id_kl",
                    max_relative_error(&[x.clone(), y.clone()], 1e-5, |g, v| {
                        Ok(id_logit_kl(g, v[0], v[1], 2.0).map_err(unwrap_tensor)?.var)
                    })
                    .unwrap(),
                ),
                (
                    "cos",
                    max_relative_error(&[x.clone(), y.clone()], 1e-5, |g, v| {
                        Ok(cosine_disentangle(g, v[0], v[1])
                            .map_err(unwrap_tensor)?
                            .var)
                    })
                    .unwrap(),
                ),
                (
                    "ss_mse",
                    max_relative_error(&[x.clone(), y.clone()], 1e-5, |g, v| {
                        let a = BranchFeatures {
                            cal: v[0],
                            bot: v[1],
                        };
                        let b = BranchFeatures {
                            cal: v[1],
                            bot: v[0],
                        };
                        Ok(feature_mse(g, a, b).map_err(unwrap_tensor)?.var)
                    })
                    .unwrap(),
                ),
            ];
            let w = rand_t(&mut rng, &[4, 4]);
            let b = rand_t(&mut rng, &[1, 4]);
            let z = rand_t(&mut rng, &[4, 4]);
            let more: [(&str, f64); 4] = [
                (
                    "clothes_cls",
                    max_relative_error(&[w.clone(), b.clone()], 1e-5, |g, v| {
                        let head = LinearHead {
                            weight: v[0],
                            bias: v[1],
                        };
                        let f = g.constant(x.clone());
                        let (cls, _) =
                            clothes_adversarial(g, f, &head, &[0, 1, 2, 3], &[0, 0, 1, 1], &owned)
                                .map_err(unwrap_tensor)?;
                        Ok(cls.var)
                    })
                    .unwrap(),
                ),
                (
                    "clothes_adv",
                    max_relative_error(&[x.clone()], 1e-5, |g, v| {
                        let head = LinearHead {
                            weight: g.constant(w.clone()),
                            bias: g.constant(b.clone()),
                        };
                        let (_, adv) = clothes_adversarial(
                            g,
                            v[0],
                            &head,
                            &[0, 1, 2, 3],
                            &[0, 0, 1, 1],
                            &owned,
                        )
                        .map_err(unwrap_tensor)?;
                        Ok(adv.var)
                    })
                    .unwrap(),
                ),
                (
                    "tad_distill",
                    max_relative_error(
                        &[x.clone(), y.clone(), z.clone(), w.clone()],
                        1e-5,
                        |g, v| {
                            let n: Vec<Var> = v
                                .iter()
                                .map(|&t| g.l2_normalize(t))
                                .collect::<core::result::Result<_, _>>()?;
                            let t_raw = [g.constant(y.clone()), g.constant(x.clone())];
                            let t_cal = g.l2_normalize(t_raw[0])?;
                            let t_bot = g.l2_normalize(t_raw[1])?;
                            let t = BranchFeatures {
                                cal: t_cal,
                                bot: t_bot,
                            };
                            let hq = BranchFeatures {
                                cal: n[0],
                                bot: n[1],
                            };
                            let lq = BranchFeatures {
                                cal: n[2],
                                bot: n[3],
                            };
                            Ok(tad_distill(g, t, hq, lq).map_err(unwrap_tensor)?.var)
                        },
                    )
                    .unwrap(),
                ),
                (
                    "tad_self",
                    max_relative_error(
                        &[x.clone(), y.clone(), z.clone(), w.clone()],
                        1e-5,
                        |g, v| {
                            let hq = HeadLogits {
                                cal_clothes: v[0],
                                cal_id: v[1],
                                bot_id: v[2],
                            };
                            let lq = HeadLogits {
                                cal_clothes: v[3],
                                cal_id: v[2],
                                bot_id: v[1],
                            };
                            Ok(tad_self_supervise(g, hq, lq, 2.0, false)
                                .map_err(unwrap_tensor)?
                                .var)
                        },
                    )
                    .unwrap(),
                ),
            ];
            for (name, err) in checks.into_iter().chain(more) {
                assert!(err < 1e-4, "{name} seed {seed}: {err}");
            }
        }
    }

    fn unwrap_tensor(e: LossError) -> TensorError {
        match e {
            LossError::Tensor(t) => t,
            other => panic!("{other}"),
        }
    }
}
