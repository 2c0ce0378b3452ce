//! Pose descriptors from 2-D skeletons and K-means pose classes.
//!
//! A pose vector concatenates the 17 joint locations (normalized per axis by
//! the skeleton bounding box) with the length and orientation of 13 body
//! lines. Cluster index 0 is reserved for skeletons too unreliable to
//! describe; fitted clusters are numbered from 1.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::math;

pub const NUM_KEYPOINTS: usize = 17;
pub const NUM_BODY_LINES: usize = 13;
pub const POSE_DIM: usize = 2 * NUM_KEYPOINTS + 2 * NUM_BODY_LINES;
pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.3;
pub const DEFAULT_K: usize = 15;
pub const NOISE_CLUSTER: usize = 0;
pub const DEFAULT_MAX_ITERS: usize = 300;

/// COCO keypoint order.
pub mod joint {
    pub const NOSE: usize = 0;
    pub const LEFT_EYE: usize = 1;
    pub const RIGHT_EYE: usize = 2;
    pub const LEFT_EAR: usize = 3;
    pub const RIGHT_EAR: usize = 4;
    pub const LEFT_SHOULDER: usize = 5;
    pub const RIGHT_SHOULDER: usize = 6;
    pub const LEFT_ELBOW: usize = 7;
    pub const RIGHT_ELBOW: usize = 8;
    pub const LEFT_WRIST: usize = 9;
    pub const RIGHT_WRIST: usize = 10;
    pub const LEFT_HIP: usize = 11;
    pub const RIGHT_HIP: usize = 12;
    pub const LEFT_KNEE: usize = 13;
    pub const RIGHT_KNEE: usize = 14;
    pub const LEFT_ANKLE: usize = 15;
    pub const RIGHT_ANKLE: usize = 16;
}

/// End of a body line: a joint or the midpoint of two joints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineEnd {
    Joint(usize),
    Mid(usize, usize),
}

use LineEnd::{Joint, Mid};

/// The 13 body lines, in descriptor order.
pub const BODY_LINES: [(LineEnd, LineEnd); NUM_BODY_LINES] = [
    (Joint(5), Joint(7)),   // left upper arm
    (Joint(6), Joint(8)),   // right upper arm
    (Joint(7), Joint(9)),   // left forearm
    (Joint(8), Joint(10)),  // right forearm
    (Joint(11), Joint(13)), // left thigh
    (Joint(12), Joint(14)), // right thigh
    (Joint(13), Joint(15)), // left shin
    (Joint(14), Joint(16)), // right shin
    (Joint(5), Joint(6)),   // shoulders
    (Joint(11), Joint(12)), // hips
    (Joint(5), Joint(11)),  // left torso
    (Joint(6), Joint(12)),  // right torso
    (Joint(0), Mid(5, 6)),  // neck
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PoseError {
    #[error("k must be at least 2, got {0}")]
    KTooSmall(usize),
    #[error("need at least {k} distinct pose vectors, found {distinct}")]
    TooFewDistinct { k: usize, distinct: usize },
    #[error("pose vector has {0} values, expected 60")]
    BadDimension(usize),
    #[error("elbow range [{0}, {1}] must lie within [2, 40]")]
    BadRange(usize, usize),
}

/// 17 keypoints as `[x, y, confidence]` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub keypoints: [[f64; 3]; NUM_KEYPOINTS],
}

impl Skeleton {
    pub fn xy(&self, j: usize) -> (f64, f64) {
        (self.keypoints[j][0], self.keypoints[j][1])
    }

    pub fn confidence(&self, j: usize) -> f64 {
        self.keypoints[j][2]
    }

    fn end(&self, e: LineEnd) -> (f64, f64) {
        match e {
            Joint(j) => self.xy(j),
            Mid(a, b) => {
                let (ax, ay) = self.xy(a);
                let (bx, by) = self.xy(b);
                ((ax + bx) / 2.0, (ay + by) / 2.0)
            }
        }
    }

    fn end_confidence(&self, e: LineEnd) -> f64 {
        match e {
            Joint(j) => self.confidence(j),
            Mid(a, b) => self.confidence(a).min(self.confidence(b)),
        }
    }

    /// Same skeleton moved by `(dx, dy)` pixels.
    pub fn translated(&self, dx: f64, dy: f64) -> Skeleton {
        let mut s = *self;
        for kp in &mut s.keypoints {
            kp[0] += dx;
            kp[1] += dy;
        }
        s
    }

    /// Same skeleton scaled by `f` about the origin.
    pub fn scaled(&self, f: f64) -> Skeleton {
        let mut s = *self;
        for kp in &mut s.keypoints {
            kp[0] *= f;
            kp[1] *= f;
        }
        s
    }
}

/// 60-dimensional pose descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseVector(pub Vec<f64>);

impl PoseVector {
    pub fn coords(&self) -> &[f64] {
        &self.0[..2 * NUM_KEYPOINTS]
    }

    pub fn lengths(&self) -> &[f64] {
        &self.0[2 * NUM_KEYPOINTS..2 * NUM_KEYPOINTS + NUM_BODY_LINES]
    }

    pub fn angles(&self) -> &[f64] {
        &self.0[2 * NUM_KEYPOINTS + NUM_BODY_LINES..]
    }
}

/// Builds the pose descriptor, or `None` (the noise sentinel) when any body
/// line endpoint is below `min_confidence` or the bounding box is degenerate.
///
/// Angles are `atan2` of the line direction with the y axis pointing up, so
/// a line running down the image has angle `-π/2`.
pub fn pose_vector(s: &Skeleton, min_confidence: f64) -> Option<PoseVector> {
    for (a, b) in BODY_LINES {
        if s.end_confidence(a) < min_confidence || s.end_confidence(b) < min_confidence {
            return None;
        }
    }
    let valid: Vec<usize> = (0..NUM_KEYPOINTS)
        .filter(|&j| s.confidence(j) >= min_confidence)
        .collect();
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &j in &valid {
        let (x, y) = s.xy(j);
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let (w, h) = (x1 - x0, y1 - y0);
    if !(w > 0.0 && h > 0.0) {
        return None;
    }
    let diag = math::hypot(w, h);

    let mut v = Vec::with_capacity(POSE_DIM);
    for j in 0..NUM_KEYPOINTS {
        if s.confidence(j) >= min_confidence {
            let (x, y) = s.xy(j);
            v.push((x - x0) / w);
            v.push((y - y0) / h);
        } else {
            v.push(0.0);
            v.push(0.0);
        }
    }
    let mut angles = Vec::with_capacity(NUM_BODY_LINES);
    for (a, b) in BODY_LINES {
        let (ax, ay) = s.end(a);
        let (bx, by) = s.end(b);
        v.push(math::hypot(bx - ax, by - ay) / diag);
        angles.push(math::atan2(ay - by, bx - ax));
    }
    v.extend(angles);
    Some(PoseVector(v))
}

/// Fitted K-means pose classes. Centroid `i` is cluster `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseClusterModel {
    pub k: usize,
    pub seed: u64,
    pub centroids: Vec<Vec<f64>>,
}

/// Diagnostics of one K-means fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Sum of squared distances after each assignment step.
    pub objectives: Vec<f64>,
    /// Final zero-based centroid index per input vector.
    pub assignment: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

impl FitReport {
    pub fn objective(&self) -> f64 {
        *self.objectives.last().unwrap_or(&0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(v: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(v, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn count_distinct(vectors: &[&[f64]], cap: usize) -> usize {
    let mut seen: Vec<&[f64]> = Vec::new();
    for v in vectors {
        if !seen.iter().any(|s| s == v) {
            seen.push(v);
            if seen.len() >= cap {
                break;
            }
        }
    }
    seen.len()
}

/// k-means++ seeding, extending `centroids` until it holds `k` entries.
fn plus_plus_extend(
    data: &[&[f64]],
    centroids: &mut Vec<Vec<f64>>,
    k: usize,
    rng: &mut ChaCha8Rng,
) {
    if centroids.is_empty() {
        centroids.push(data[rng.random_range(0..data.len())].to_vec());
    }
    while centroids.len() < k {
        let d2: Vec<f64> = data.iter().map(|v| nearest(v, centroids).1).collect();
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = data.len() - 1;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        if d2[pick] == 0.0 {
            // numeric tail: fall back to the farthest point
            pick = (0..data.len()).fold(0, |b, i| if d2[i] > d2[b] { i } else { b });
        }
        centroids.push(data[pick].to_vec());
    }
}

/// Lloyd iterations from the given centroids.
fn lloyd(
    data: &[&[f64]],
    mut centroids: Vec<Vec<f64>>,
    max_iters: usize,
) -> (Vec<Vec<f64>>, FitReport) {
    let k = centroids.len();
    let dim = data[0].len();
    let assign = |cs: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut obj = 0.0;
        let a = data
            .iter()
            .map(|v| {
                let (i, d) = nearest(v, cs);
                obj += d;
                i
            })
            .collect();
        (a, obj)
    };
    let (mut assignment, obj) = assign(&centroids);
    let mut objectives = vec![obj];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &a) in data.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(v.iter()) {
                *s += x;
            }
        }
        let mut next: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| {
                if n == 0 {
                    s
                } else {
                    s.into_iter().map(|x| x / n as f64).collect()
                }
            })
            .collect();
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..data.len())
                    .map(|i| (i, sq_dist(data[i], &next[assignment[i]])))
                    .fold((0, -1.0), |b, x| if x.1 > b.1 { x } else { b })
                    .0;
                next[c] = data[far].to_vec();
                assignment[far] = c;
            }
        }
        let (new_assignment, obj) = assign(&next);
        centroids = next;
        objectives.push(obj);
        let stable = new_assignment == assignment;
        assignment = new_assignment;
        if stable {
            converged = true;
            break;
        }
    }
    (
        centroids,
        FitReport {
            objectives,
            assignment,
            iterations,
            converged,
        },
    )
}

fn check_inputs(vectors: &[PoseVector]) -> Result<Vec<&[f64]>, PoseError> {
    vectors
        .iter()
        .map(|v| {
            if v.0.len() == POSE_DIM {
                Ok(v.0.as_slice())
            } else {
                Err(PoseError::BadDimension(v.0.len()))
            }
        })
        .collect()
}

/// K-means with k-means++ seeding. Noise-sentinel skeletons must be removed
/// by the caller.
pub fn kmeans_fit(
    vectors: &[PoseVector],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(PoseClusterModel, FitReport), PoseError> {
    let data = check_inputs(vectors)?;
    fit_raw(&data, k, seed, max_iters)
}

/// [`kmeans_fit`] over plain rows of any common dimension.
pub fn fit_raw(
    data: &[&[f64]],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(PoseClusterModel, FitReport), PoseError> {
    if k < 2 {
        return Err(PoseError::KTooSmall(k));
    }
    let distinct = count_distinct(data, k);
    if distinct < k {
        return Err(PoseError::TooFewDistinct { k, distinct });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Vec::with_capacity(k);
    plus_plus_extend(data, &mut centroids, k, &mut rng);
    let (centroids, report) = lloyd(data, centroids, max_iters);
    Ok((PoseClusterModel { k, seed, centroids }, report))
}

/// Cluster index in `[0, k]`: 0 for the noise sentinel, otherwise one plus
/// the nearest centroid (lowest index on ties).
pub fn assign_cluster(model: &PoseClusterModel, v: Option<&PoseVector>) -> usize {
    match v {
        None => NOISE_CLUSTER,
        Some(v) => 1 + nearest(&v.0, &model.centroids).0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowRow {
    pub k: usize,
    pub objective: f64,
    /// Filled in later with a downstream score (e.g. Top-1) when available.
    pub downstream: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElbowScan {
    /// Total squared deviation from the global mean (the k = 1 objective).
    pub single_cluster_objective: f64,
    pub rows: Vec<ElbowRow>,
}

pub const DEFAULT_ELBOW_RANGE: (usize, usize) = (2, 30);

/// Objective for each k in `[lo, hi]`. Each k is warm-started from the
/// previous solution plus one k-means++ draw, so the curve never increases.
pub fn elbow_scan(
    vectors: &[PoseVector],
    k_range: (usize, usize),
    seed: u64,
    max_iters: usize,
) -> Result<ElbowScan, PoseError> {
    let (lo, hi) = k_range;
    if lo < 2 || hi > 40 || lo > hi {
        return Err(PoseError::BadRange(lo, hi));
    }
    let data = check_inputs(vectors)?;
    elbow_raw(&data, k_range, seed, max_iters)
}

pub fn elbow_raw(
    data: &[&[f64]],
    (lo, hi): (usize, usize),
    seed: u64,
    max_iters: usize,
) -> Result<ElbowScan, PoseError> {
    let distinct = count_distinct(data, hi);
    if distinct < hi {
        return Err(PoseError::TooFewDistinct { k: hi, distinct });
    }
    let dim = data[0].len();
    let mut mean = vec![0.0; dim];
    for v in data {
        for (m, x) in mean.iter_mut().zip(v.iter()) {
            *m += x / data.len() as f64;
        }
    }
    let single = data.iter().map(|v| sq_dist(v, &mean)).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![mean];
    let mut rows = Vec::new();
    for k in 2..=hi {
        plus_plus_extend(data, &mut centroids, k, &mut rng);
        let (c, report) = lloyd(data, centroids, max_iters);
        centroids = c;
        if k >= lo {
            rows.push(ElbowRow {
                k,
                objective: report.objective(),
                downstream: None,
            });
        }
    }
    Ok(ElbowScan {
        single_cluster_objective: single,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    /// Front-facing T-pose with integer joint positions.
    fn t_pose() -> Skeleton {
        let mut k = [[0.0, 0.0, 1.0]; NUM_KEYPOINTS];
        let mut set = |j: usize, x: f64, y: f64| k[j] = [x, y, 1.0];
        set(joint::NOSE, 16.0, 6.0);
        set(joint::LEFT_EYE, 17.0, 5.0);
        set(joint::RIGHT_EYE, 15.0, 5.0);
        set(joint::LEFT_EAR, 18.0, 6.0);
        set(joint::RIGHT_EAR, 14.0, 6.0);
        set(joint::LEFT_SHOULDER, 20.0, 12.0);
        set(joint::RIGHT_SHOULDER, 12.0, 12.0);
        set(joint::LEFT_ELBOW, 25.0, 12.0);
        set(joint::RIGHT_ELBOW, 7.0, 12.0);
        set(joint::LEFT_WRIST, 30.0, 12.0);
        set(joint::RIGHT_WRIST, 2.0, 12.0);
        set(joint::LEFT_HIP, 20.0, 30.0);
        set(joint::RIGHT_HIP, 12.0, 30.0);
        set(joint::LEFT_KNEE, 19.0, 44.0);
        set(joint::RIGHT_KNEE, 13.0, 44.0);
        set(joint::LEFT_ANKLE, 19.0, 58.0);
        set(joint::RIGHT_ANKLE, 13.0, 58.0);
        Skeleton { keypoints: k }
    }

    #[test]
    fn zero_confidence_is_noise() {
        let mut s = t_pose();
        for kp in &mut s.keypoints {
            kp[2] = 0.0;
        }
        assert_eq!(pose_vector(&s, DEFAULT_MIN_CONFIDENCE), None);
        let mut one_bad = t_pose();
        one_bad.keypoints[joint::LEFT_WRIST][2] = 0.2;
        assert_eq!(pose_vector(&one_bad, DEFAULT_MIN_CONFIDENCE), None);
    }

    #[test]
    fn degenerate_box_is_noise() {
        let s = Skeleton {
            keypoints: [[5.0, 5.0, 1.0]; NUM_KEYPOINTS],
        };
        assert_eq!(pose_vector(&s, 0.3), None);
    }

    #[test]
    fn translation_and_scale_invariance() {
        let s = t_pose();
        let v = pose_vector(&s, 0.3).unwrap();
        assert_eq!(pose_vector(&s.translated(50.0, 50.0), 0.3).unwrap(), v);
        assert_eq!(pose_vector(&s.scaled(2.0), 0.3).unwrap(), v);
        assert_eq!(v.0.len(), POSE_DIM);
    }

    #[test]
    fn t_pose_angles() {
        let v = pose_vector(&t_pose(), 0.3).unwrap();
        let a = v.angles();
        // left/right torso and neck point down the image
        for i in [10, 11, 12] {
            assert!(math::abs(a[i] + PI / 2.0) < 1e-9, "line {i}: {}", a[i]);
        }
        assert!(math::abs(a[0]) < 1e-9);
        assert!(math::abs(a[1] - PI) < 1e-9);
        assert!(math::abs(a[2]) < 1e-9);
        assert!(math::abs(a[3] - PI) < 1e-9);
        for &l in v.lengths() {
            assert!((0.0..=1.0).contains(&l));
        }
        for &c in v.coords() {
            assert!((0.0..=1.0).contains(&c));
        }
    }

    fn blob(rng: &mut ChaCha8Rng, center: &[f64], n: usize, sd: f64) -> Vec<PoseVector> {
        let noise = Normal::new(0.0, sd).unwrap();
        (0..n)
            .map(|_| PoseVector(center.iter().map(|c| c + noise.sample(rng)).collect()))
            .collect()
    }

    #[test]
    fn repeated_points_recovered_exactly() {
        let k = 4;
        let points: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..POSE_DIM).map(|d| (i * 7 + d) as f64 * 0.1).collect())
            .collect();
        let data: Vec<PoseVector> = (0..k)
            .flat_map(|_| points.iter().cloned().map(PoseVector))
            .collect();
        let (model, report) = kmeans_fit(&data, k, 3, 50).unwrap();
        assert_eq!(report.objective(), 0.0);
        for p in &points {
            assert!(model.centroids.contains(p));
        }
    }

    #[test]
    fn two_blobs_separate() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut data = blob(&mut rng, &[0.0; POSE_DIM], 30, 0.1);
        data.extend(blob(&mut rng, &[5.0; POSE_DIM], 30, 0.1));
        let (model, report) = kmeans_fit(&data, 2, 1, 100).unwrap();
        let first = report.assignment[0];
        assert!(report.assignment[..30].iter().all(|&a| a == first));
        assert!(report.assignment[30..].iter().all(|&a| a != first));
        assert_eq!(assign_cluster(&model, Some(&data[0])), first + 1);
    }

    #[test]
    fn fixed_point_against_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let data: Vec<PoseVector> = (0..60)
            .map(|_| PoseVector((0..POSE_DIM).map(|_| rng.random::<f64>()).collect()))
            .collect();
        let (model, report) = kmeans_fit(&data, 5, 9, 500).unwrap();
        for (v, &a) in data.iter().zip(&report.assignment) {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, c) in model.centroids.iter().enumerate() {
                let d: f64 = v.0.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            assert_eq!(a, best);
        }
        assert!(report.objectives.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn assign_cluster_rules() {
        let model = PoseClusterModel {
            k: 2,
            seed: 0,
            centroids: vec![vec![0.0; POSE_DIM], vec![2.0; POSE_DIM]],
        };
        assert_eq!(assign_cluster(&model, None), NOISE_CLUSTER);
        assert_eq!(
            assign_cluster(&model, Some(&PoseVector(vec![2.0; POSE_DIM]))),
            2
        );
        assert_eq!(
            assign_cluster(&model, Some(&PoseVector(vec![1.0; POSE_DIM]))),
            1
        );
    }

    #[test]
    fn fit_errors() {
        let data = vec![PoseVector(vec![0.0; POSE_DIM]); 10];
        assert_eq!(
            kmeans_fit(&data, 2, 0, 10).unwrap_err(),
            PoseError::TooFewDistinct { k: 2, distinct: 1 }
        );
        assert_eq!(
            kmeans_fit(&data, 1, 0, 10).unwrap_err(),
            PoseError::KTooSmall(1)
        );
    }

    #[test]
    fn elbow_single_blob_strictly_decreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = blob(&mut rng, &[0.5; POSE_DIM], 120, 0.2);
        let scan = elbow_scan(&data, DEFAULT_ELBOW_RANGE, 4, 100).unwrap();
        assert!(scan.rows.iter().any(|r| r.k == DEFAULT_K));
        assert!(scan.rows[0].objective < scan.single_cluster_objective);
        assert!(scan
            .rows
            .windows(2)
            .all(|w| w[1].objective < w[0].objective));
    }

    #[test]
    fn elbow_two_blobs_big_drop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut data = blob(&mut rng, &[0.0; POSE_DIM], 40, 0.1);
        data.extend(blob(&mut rng, &[3.0; POSE_DIM], 40, 0.1));
        let scan = elbow_scan(&data, (2, 6), 1, 100).unwrap();
        assert!(scan.rows[0].objective < 0.05 * scan.single_cluster_objective);
        assert!(elbow_scan(&data, (1, 6), 1, 100).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn objective_never_increases(seed in 0u64..1000, k in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<PoseVector> = (0..40)
                .map(|_| PoseVector((0..POSE_DIM).map(|_| rng.random::<f64>()).collect()))
                .collect();
            let (model, report) = kmeans_fit(&data, k, seed, 200).unwrap();
            prop_assert!(report.objectives.windows(2).all(|w| w[1] <= w[0] + 1e-12));
            for (v, &a) in data.iter().zip(&report.assignment) {
                prop_assert_eq!(assign_cluster(&model, Some(v)), a + 1);
            }
        }

        #[test]
        fn pose_vector_translation_invariant(dx in -64i32..64, dy in -64i32..64) {
            let s = t_pose();
            let v = pose_vector(&s, 0.3).unwrap();
            let moved = pose_vector(&s.translated(dx as f64, dy as f64), 0.3).unwrap();
            prop_assert_eq!(v, moved);
        }
    }
}
