//! Retrieval evaluation under the clothes-changing protocols, plus the
//! analysis metrics: tier compactness, gender F1 and a PCA projection.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::rng::{substream, tag};
use crate::synthdata::Tier;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("embedding matrix has {rows} rows but {items} items were given")]
    RowMismatch { rows: usize, items: usize },
    #[error("query and gallery embeddings differ in width ({query} vs {gallery})")]
    WidthMismatch { query: usize, gallery: usize },
    #[error("embedding row {0} is not unit length")]
    Unnormalized(usize),
    #[error("no query has a valid match in the gallery")]
    EmptyGallery,
    #[error("{tier:?} tier has {ids} identities; at least 2 are needed")]
    TooFewIdentities { tier: Tier, ids: usize },
    #[error("{tier:?} tier has no pair of samples sharing an identity")]
    NoSameIdentityPair { tier: Tier },
    #[error("PCA needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("prediction and truth lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("expected a 2-D matrix")]
    NotMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    General,
    Cc,
    Sc,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::General, Protocol::Cc, Protocol::Sc];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::General => "general",
            Protocol::Cc => "cc",
            Protocol::Sc => "sc",
        }
    }
}

/// The labels retrieval cares about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EvalItem {
    pub identity: usize,
    pub clothes: usize,
    pub camera: usize,
}

/// Which gallery items count for `query`. Other identities always count;
/// the same identity seen by the same camera never does. CC further drops
/// same-identity items in the query's clothes, SC keeps only those.
pub fn protocol_filter(query: &EvalItem, gallery: &[EvalItem], protocol: Protocol) -> Vec<bool> {
    gallery
        .iter()
        .map(|g| {
            if g.identity != query.identity {
                return true;
            }
            if g.camera == query.camera {
                return false;
            }
            match protocol {
                Protocol::General => true,
                Protocol::Cc => g.clothes != query.clothes,
                Protocol::Sc => g.clothes == query.clothes,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub query: usize,
    /// Valid gallery indices, most similar first.
    pub ranked: Vec<usize>,
    pub ap: f64,
    /// Zero-based rank of the first correct match.
    pub first_hit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub protocol: Protocol,
    pub queries: Vec<QueryRanking>,
    /// Queries left with no valid match, excluded from every average.
    pub dropped: Vec<usize>,
    /// `cmc[k]`: fraction of evaluated queries with a hit in the top `k + 1`.
    pub cmc: Vec<f64>,
    pub map: f64,
}

impl RankingResult {
    pub fn top1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }
}

fn check_rows(t: &Tensor, items: usize) -> Result<(usize, usize), EvalError> {
    let (r, c) = t.dims2("eval").map_err(|_| EvalError::NotMatrix)?;
    if r != items {
        return Err(EvalError::RowMismatch { rows: r, items });
    }
    for i in 0..r {
        let n: f64 = t.row(i).iter().map(|x| x * x).sum();
        if math::abs(n - 1.0) > 1e-6 {
            return Err(EvalError::Unnormalized(i));
        }
    }
    Ok((r, c))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ranks each query's valid gallery by cosine similarity (ties broken by
/// gallery index) and scores it with uninterpolated AP and CMC.
pub fn cmc_map(
    query_emb: &Tensor,
    gallery_emb: &Tensor,
    queries: &[EvalItem],
    gallery: &[EvalItem],
    protocol: Protocol,
) -> Result<RankingResult, EvalError> {
    let (_, qc) = check_rows(query_emb, queries.len())?;
    let (_, gc) = check_rows(gallery_emb, gallery.len())?;
    if qc != gc {
        return Err(EvalError::WidthMismatch {
            query: qc,
            gallery: gc,
        });
    }
    let mut out = Vec::new();
    let mut dropped = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        let mask = protocol_filter(q, gallery, protocol);
        let valid: Vec<usize> = (0..gallery.len()).filter(|&j| mask[j]).collect();
        if !valid.iter().any(|&j| gallery[j].identity == q.identity) {
            dropped.push(qi);
            continue;
        }
        let qv = query_emb.row(qi);
        let mut scored: Vec<(f64, usize)> = valid
            .iter()
            .map(|&j| (dot(qv, gallery_emb.row(j)), j))
            .collect();
        // Signed zeros compare equal so they fall through to the index.
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        let ranked: Vec<usize> = scored.into_iter().map(|(_, j)| j).collect();
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit = usize::MAX;
        for (r, &j) in ranked.iter().enumerate() {
            if gallery[j].identity == q.identity {
                hits += 1;
                precision_sum += hits as f64 / (r + 1) as f64;
                first_hit = first_hit.min(r);
            }
        }
        out.push(QueryRanking {
            query: qi,
            ranked,
            ap: precision_sum / hits as f64,
            first_hit,
        });
    }
    if out.is_empty() {
        return Err(EvalError::EmptyGallery);
    }
    let n = out.len() as f64;
    let mut cmc = vec![0.0; gallery.len()];
    for q in &out {
        for c in cmc.iter_mut().skip(q.first_hit) {
            *c += 1.0;
        }
    }
    for c in cmc.iter_mut() {
        *c /= n;
    }
    let map = out.iter().map(|q| q.ap).sum::<f64>() / n;
    Ok(RankingResult {
        protocol,
        queries: out,
        dropped,
        cmc,
        map,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierCompactness {
    pub ratio: f64,
    pub inter: f64,
    pub intra: f64,
    /// Every embedding in the tier coincides; the ratio is reported as 1.
    pub collapsed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Compactness {
    pub hq: TierCompactness,
    pub lq: TierCompactness,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    math::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

fn tier_compactness(
    emb: &Tensor,
    ids: &[usize],
    rows: &[usize],
    tier: Tier,
) -> Result<TierCompactness, EvalError> {
    let mut distinct: Vec<usize> = rows.iter().map(|&r| ids[r]).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(EvalError::TooFewIdentities {
            tier,
            ids: distinct.len(),
        });
    }
    let (mut inter, mut n_inter, mut intra, mut n_intra) = (0.0, 0usize, 0.0, 0usize);
    for (a, &i) in rows.iter().enumerate() {
        for &j in &rows[a + 1..] {
            let d = dist(emb.row(i), emb.row(j));
            if ids[i] == ids[j] {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 {
        return Err(EvalError::NoSameIdentityPair { tier });
    }
    let (inter, intra) = (inter / n_inter as f64, intra / n_intra as f64);
    let collapsed = inter == 0.0 && intra == 0.0;
    let ratio = if collapsed { 1.0 } else { inter / intra };
    Ok(TierCompactness {
        ratio,
        inter,
        intra,
        collapsed,
    })
}

/// Mean inter-identity over mean intra-identity Euclidean distance, per
/// quality tier. A low LQ ratio means LQ features cluster by quality rather
/// than by identity.
pub fn lq_compactness(
    emb: &Tensor,
    ids: &[usize],
    tiers: &[Tier],
) -> Result<Compactness, EvalError> {
    let (r, _) = emb
        .dims2("lq_compactness")
        .map_err(|_| EvalError::NotMatrix)?;
    if r != ids.len() || r != tiers.len() {
        return Err(EvalError::RowMismatch {
            rows: r,
            items: ids.len().min(tiers.len()),
        });
    }
    let rows = |t: Tier| (0..r).filter(|&i| tiers[i] == t).collect::<Vec<_>>();
    Ok(Compactness {
        hq: tier_compactness(emb, ids, &rows(Tier::Hq), Tier::Hq)?,
        lq: tier_compactness(emb, ids, &rows(Tier::Lq), Tier::Lq)?,
    })
}

/// F1 of `positive` as the positive class; 0 when precision and recall are
/// both 0.
pub fn gender_f1(predicted: &[u8], truth: &[u8], positive: u8) -> Result<f64, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch(predicted.len(), truth.len()));
    }
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p == positive, t == positive) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            _ => {}
        }
    }
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fneg > 0.0 {
        tp / (tp + fneg)
    } else {
        0.0
    };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    /// Projected coordinates, one row per sample.
    pub coords: Vec<Vec<f64>>,
    /// Unit principal directions, largest variance first.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Share of total variance the kept components explain.
    pub captured: f64,
    /// Fewer than the requested components carried any variance.
    pub rank_deficient: bool,
}

/// Symmetric eigendecomposition by cyclic Jacobi; fine for the tiny
/// Rayleigh-Ritz matrices used here. Returns (values, column vectors).
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (math::abs(theta) + math::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// Orthonormalizes columns in place, dropping those that vanish.
fn gram_schmidt(cols: &mut Vec<Vec<f64>>, tol: f64) {
    let mut kept: Vec<Vec<f64>> = Vec::new();
    for mut c in cols.drain(..) {
        for _ in 0..2 {
            for k in &kept {
                let p = dot(&c, k);
                c.iter_mut().zip(k).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = math::sqrt(dot(&c, &c));
        if n > tol {
            c.iter_mut().for_each(|x| *x /= n);
            kept.push(c);
        }
    }
    *cols = kept;
}

/// Mean-centred projection onto the top `dims` principal directions, found
/// by orthogonal (block power) iteration on the covariance with a final
/// Rayleigh-Ritz step. Each direction's sign is fixed so its largest
/// coordinate is positive.
pub fn pca_project(data: &Tensor, dims: usize) -> Result<Pca, EvalError> {
    let (n, d) = data
        .dims2("pca_project")
        .map_err(|_| EvalError::NotMatrix)?;
    if n < dims + 1 {
        return Err(EvalError::TooFewSamples {
            needed: dims + 1,
            got: n,
        });
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(data.row(i)).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<Vec<f64>> = (0..n)
        .map(|i| data.row(i).iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in &centred {
        for a in 0..d {
            if r[a] == 0.0 {
                continue;
            }
            for b in a..d {
                cov[a][b] += r[a] * r[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[a][b] /= (n - 1) as f64;
            cov[b][a] = cov[a][b];
        }
    }
    let trace: f64 = (0..d).map(|a| cov[a][a]).sum();
    let apply = |v: &[f64]| -> Vec<f64> { cov.iter().map(|row| dot(row, v)).collect() };
    let k = dims.min(d);
    let mut rng = substream(0, tag::SUBSAMPLE, 0x7ca);
    let mut q: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| rng.random::<f64>() - 0.5).collect())
        .collect();
    let tol = 1e-12 * trace.max(f64::MIN_POSITIVE);
    gram_schmidt(&mut q, 1e-12);
    for _ in 0..2000 {
        let mut z: Vec<Vec<f64>> = q.iter().map(|c| apply(c)).collect();
        gram_schmidt(&mut z, tol);
        let converged = z.len() == q.len()
            && z.iter()
                .zip(&q)
                .all(|(a, b)| 1.0 - math::abs(dot(a, b)) < 1e-14);
        q = z;
        if converged || q.is_empty() {
            break;
        }
    }
    // Rayleigh-Ritz inside the converged subspace orders and separates the
    // directions even when their eigenvalues nearly tie.
    let cq: Vec<Vec<f64>> = q.iter().map(|c| apply(c)).collect();
    let t: Vec<Vec<f64>> = q
        .iter()
        .map(|a| cq.iter().map(|b| dot(a, b)).collect())
        .collect();
    let (vals, vecs) = jacobi_eigen(t);
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let mut components = Vec::new();
    let mut eigenvalues = Vec::new();
    for &o in &order {
        if vals[o] <= tol {
            continue;
        }
        let mut c = vec![0.0; d];
        for (j, qj) in q.iter().enumerate() {
            c.iter_mut().zip(qj).for_each(|(x, y)| *x += vecs[j][o] * y);
        }
        let big = c.iter().copied().fold(
            0.0f64,
            |m, x| if math::abs(x) > math::abs(m) { x } else { m },
        );
        if big < 0.0 {
            c.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(c);
        eigenvalues.push(vals[o]);
    }
    let coords = centred
        .iter()
        .map(|r| components.iter().map(|c| dot(r, c)).collect())
        .collect();
    let captured = if trace > 0.0 {
        eigenvalues.iter().sum::<f64>() / trace
    } else {
        1.0
    };
    Ok(Pca {
        coords,
        rank_deficient: components.len() < dims,
        components,
        eigenvalues,
        captured,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn item(identity: usize, clothes: usize, camera: usize) -> EvalItem {
        EvalItem {
            identity,
            clothes,
            camera,
        }
    }

    fn unit_rows(rows: &[Vec<f64>]) -> Tensor {
        let d = rows[0].len();
        let mut data = Vec::new();
        for r in rows {
            let n = math::sqrt(dot(r, r));
            data.extend(r.iter().map(|x| x / n));
        }
        Tensor::new(&[rows.len(), d], data).unwrap()
    }

    #[test]
    fn protocol_truth_table() {
        let q = item(0, 0, 0);
        // (same id, same clothes, same camera) for each of the eight cells,
        // then three more cross-identity items.
        let gallery = [
            item(0, 0, 0),
            item(0, 0, 1),
            item(0, 1, 0),
            item(0, 1, 1),
            item(1, 0, 0),
            item(1, 0, 1),
            item(1, 1, 0),
            item(1, 1, 1),
            item(2, 5, 0),
            item(3, 0, 2),
            item(4, 7, 3),
        ];
        let general = [
            false, true, false, true, true, true, true, true, true, true, true,
        ];
        let cc = [
            false, false, false, true, true, true, true, true, true, true, true,
        ];
        let sc = [
            false, true, false, false, true, true, true, true, true, true, true,
        ];
        assert_eq!(protocol_filter(&q, &gallery, Protocol::General), general);
        assert_eq!(protocol_filter(&q, &gallery, Protocol::Cc), cc);
        assert_eq!(protocol_filter(&q, &gallery, Protocol::Sc), sc);
    }

    #[test]
    fn sc_and_cc_share_no_same_identity_item() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let q = item(
                rng.random_range(0..3),
                rng.random_range(0..3),
                rng.random_range(0..3),
            );
            let g: Vec<EvalItem> = (0..20)
                .map(|_| {
                    item(
                        rng.random_range(0..3),
                        rng.random_range(0..3),
                        rng.random_range(0..3),
                    )
                })
                .collect();
            let cc = protocol_filter(&q, &g, Protocol::Cc);
            let sc = protocol_filter(&q, &g, Protocol::Sc);
            for j in 0..g.len() {
                if g[j].identity == q.identity {
                    assert!(!(cc[j] && sc[j]));
                }
            }
        }
    }

    #[test]
    fn two_item_examples() {
        let q = unit_rows(&[vec![1.0, 0.0]]);
        let qi = [item(0, 0, 0)];
        let g_items = [item(0, 1, 1), item(1, 2, 1)];
        let right_first = unit_rows(&[vec![1.0, 0.1], vec![0.0, 1.0]]);
        let r = cmc_map(&q, &right_first, &qi, &g_items, Protocol::General).unwrap();
        assert_eq!((r.map, r.top1()), (1.0, 1.0));
        let wrong_first = unit_rows(&[vec![0.0, 1.0], vec![1.0, 0.1]]);
        let r = cmc_map(&q, &wrong_first, &qi, &g_items, Protocol::General).unwrap();
        assert_eq!((r.map, r.top1()), (0.5, 0.0));
        assert_eq!(r.cmc, vec![0.0, 1.0]);
    }

    /// Independent reference: score every valid item, count for each
    /// relevant item how many valid items score strictly higher or tie with
    /// a lower index.
    fn brute_force(
        q: &Tensor,
        g: &Tensor,
        qi: &[EvalItem],
        gi: &[EvalItem],
        p: Protocol,
    ) -> (f64, Vec<f64>) {
        let mut aps = Vec::new();
        let mut firsts = Vec::new();
        for (a, qa) in qi.iter().enumerate() {
            let valid: Vec<usize> = (0..gi.len())
                .filter(|&j| {
                    gi[j].identity != qa.identity
                        || (gi[j].camera != qa.camera
                            && match p {
                                Protocol::General => true,
                                Protocol::Cc => gi[j].clothes != qa.clothes,
                                Protocol::Sc => gi[j].clothes == qa.clothes,
                            })
                })
                .collect();
            let s = |j: usize| dot(q.row(a), g.row(j));
            let rank = |j: usize| {
                valid
                    .iter()
                    .filter(|&&k| s(k) > s(j) || (s(k) == s(j) && k < j))
                    .count()
            };
            let mut rel: Vec<usize> = valid
                .iter()
                .copied()
                .filter(|&j| gi[j].identity == qa.identity)
                .map(rank)
                .collect();
            if rel.is_empty() {
                continue;
            }
            rel.sort_unstable();
            let ap = rel
                .iter()
                .enumerate()
                .map(|(h, &r)| (h + 1) as f64 / (r + 1) as f64)
                .sum::<f64>()
                / rel.len() as f64;
            aps.push(ap);
            firsts.push(rel[0]);
        }
        let cmc = (0..gi.len())
            .map(|k| firsts.iter().filter(|&&f| f <= k).count() as f64 / firsts.len() as f64)
            .collect();
        (aps.iter().sum::<f64>() / aps.len() as f64, cmc)
    }

    pub(crate) fn random_config(seed: u64) -> (Tensor, Tensor, Vec<EvalItem>, Vec<EvalItem>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nq = rng.random_range(3..=10);
        let ng = rng.random_range(10..=40);
        let d = 6;
        let mut gen = |n: usize| -> (Tensor, Vec<EvalItem>) {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            let items = (0..n)
                .map(|_| {
                    item(
                        rng.random_range(0..4),
                        rng.random_range(0..3),
                        rng.random_range(0..3),
                    )
                })
                .collect();
            (unit_rows(&rows), items)
        };
        let (q, qi) = gen(nq);
        let (g, gi) = gen(ng);
        (q, g, qi, gi)
    }

    #[test]
    fn cmc_map_matches_brute_force() {
        let mut checked = 0;
        for seed in 0..40 {
            let (q, g, qi, gi) = random_config(seed);
            for p in Protocol::ALL {
                let Ok(r) = cmc_map(&q, &g, &qi, &gi, p) else {
                    continue;
                };
                let (map, cmc) = brute_force(&q, &g, &qi, &gi, p);
                assert!((r.map - map).abs() < 1e-12);
                assert_eq!(r.cmc.len(), cmc.len());
                for (a, b) in r.cmc.iter().zip(&cmc) {
                    assert!((a - b).abs() < 1e-12);
                }
                assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
                assert_eq!(*r.cmc.last().unwrap(), 1.0);
                assert!((0.0..=1.0).contains(&r.map));
                assert_eq!(r.queries.len() + r.dropped.len(), qi.len());
                checked += 1;
            }
        }
        assert!(checked >= 60);
    }

    #[test]
    fn gallery_permutation_leaves_summary_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..10 {
            let (q, g, qi, gi) = random_config(seed);
            let mut perm: Vec<usize> = (0..gi.len()).collect();
            perm.shuffle(&mut rng);
            let d = g.shape()[1];
            let g2 = Tensor::new(
                &[gi.len(), d],
                perm.iter().flat_map(|&j| g.row(j).to_vec()).collect(),
            )
            .unwrap();
            let gi2: Vec<EvalItem> = perm.iter().map(|&j| gi[j]).collect();
            for p in Protocol::ALL {
                let (Ok(a), Ok(b)) = (cmc_map(&q, &g, &qi, &gi, p), cmc_map(&q, &g2, &qi, &gi2, p))
                else {
                    continue;
                };
                assert_eq!(a.map, b.map);
                assert_eq!(a.cmc, b.cmc);
                assert_eq!(a.dropped, b.dropped);
            }
        }
    }

    #[test]
    fn queries_without_matches_are_dropped_or_error() {
        let q = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let g = unit_rows(&[vec![1.0, 1.0]]);
        let qi = [item(0, 0, 0), item(1, 0, 0)];
        let r = cmc_map(&q, &g, &qi, &[item(0, 1, 1)], Protocol::Cc).unwrap();
        assert_eq!(r.dropped, vec![1]);
        assert_eq!(r.queries.len(), 1);
        assert_eq!(
            cmc_map(&q, &g, &qi, &[item(5, 0, 0)], Protocol::Cc),
            Err(EvalError::EmptyGallery)
        );
        let bad = Tensor::new(&[1, 2], vec![2.0, 0.0]).unwrap();
        assert_eq!(
            cmc_map(&q, &bad, &qi, &[item(0, 1, 1)], Protocol::Cc),
            Err(EvalError::Unnormalized(0))
        );
    }

    #[test]
    fn compactness_hand_computed() {
        // HQ: ids 0,0,1 at x = 0, 1, 4 on a line. LQ: ids 0,1,1 at y = 0, 2, 5.
        let pts = [
            [0.0, 0.0],
            [1.0, 0.0],
            [4.0, 0.0],
            [0.0, 0.0],
            [0.0, 2.0],
            [0.0, 5.0],
        ];
        let emb = Tensor::new(&[6, 2], pts.iter().flatten().copied().collect()).unwrap();
        let ids = [0, 0, 1, 0, 1, 1];
        let tiers = [Tier::Hq, Tier::Hq, Tier::Hq, Tier::Lq, Tier::Lq, Tier::Lq];
        let c = lq_compactness(&emb, &ids, &tiers).unwrap();
        // HQ inter: |0-4|, |1-4| -> 3.5; intra: 1.
        assert!((c.hq.ratio - 3.5).abs() < 1e-12);
        // LQ inter: 2, 5 -> 3.5; intra: 3.
        assert!((c.lq.ratio - 3.5 / 3.0).abs() < 1e-12);
        assert!(!c.lq.collapsed);
    }

    #[test]
    fn compactness_tier_blind_and_collapse() {
        let per_id = [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]];
        let ids: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let tiers: Vec<Tier> = (0..12)
            .map(|i| if i < 6 { Tier::Hq } else { Tier::Lq })
            .collect();
        let emb = Tensor::new(&[12, 2], ids.iter().flat_map(|&i| per_id[i]).collect()).unwrap();
        let c = lq_compactness(&emb, &ids, &tiers).unwrap();
        assert_eq!(c.hq.ratio, c.lq.ratio);

        let mut data = emb.data().to_vec();
        for v in &mut data[12..] {
            *v = 0.5;
        }
        let c = lq_compactness(&Tensor::new(&[12, 2], data).unwrap(), &ids, &tiers).unwrap();
        assert_eq!(c.lq.ratio, 1.0);
        assert!(c.lq.collapsed);

        let one_id = [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2];
        let tiers2: Vec<Tier> = (0..12)
            .map(|i| if i < 4 { Tier::Lq } else { Tier::Hq })
            .collect();
        assert_eq!(
            lq_compactness(&emb, &one_id, &tiers2),
            Err(EvalError::TooFewIdentities {
                tier: Tier::Lq,
                ids: 1
            })
        );
    }

    #[test]
    fn f1_examples() {
        assert_eq!(gender_f1(&[0, 1, 0], &[0, 1, 0], 0).unwrap(), 1.0);
        assert_eq!(gender_f1(&[1, 1, 1], &[0, 1, 0], 0).unwrap(), 0.0);
        // TP=2, FP=1, FN=1.
        let f = gender_f1(&[0, 0, 0, 1, 1], &[0, 0, 1, 0, 1], 0).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        assert!(gender_f1(&[0], &[0, 1], 0).is_err());
    }

    #[test]
    fn pca_planar_data_is_fully_captured() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u: Vec<f64> = (0..10).map(|_| StandardNormal.sample(&mut rng)).collect();
        let v: Vec<f64> = (0..10).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut rows = Vec::new();
        for _ in 0..50 {
            let (a, b): (f64, f64) = (
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            );
            rows.extend((0..10).map(|k| 3.0 + a * u[k] + 0.3 * b * v[k]));
        }
        let p = pca_project(&Tensor::new(&[50, 10], rows).unwrap(), 2).unwrap();
        assert!((p.captured - 1.0).abs() < 1e-9, "{}", p.captured);
        assert!(!p.rank_deficient);
    }

    #[test]
    fn pca_isotropic_eigenvalues_are_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<f64> = (0..2000 * 6)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let p = pca_project(&Tensor::new(&[2000, 6], rows).unwrap(), 2).unwrap();
        let ratio = p.eigenvalues[0] / p.eigenvalues[1];
        assert!((0.8..=1.25).contains(&ratio), "{ratio}");
        assert!(p.eigenvalues[0] >= p.eigenvalues[1]);
    }

    #[test]
    fn pca_reordering_invariant_up_to_sign_and_rank_flag() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scales = [5.0, 2.0, 1.0, 0.5];
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|_| {
                scales
                    .iter()
                    .map(|s| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        s * z
                    })
                    .collect()
            })
            .collect();
        let a = pca_project(&Tensor::new(&[60, 4], rows.concat()).unwrap(), 2).unwrap();
        let mut perm: Vec<usize> = (0..60).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<f64> = perm.iter().flat_map(|&i| rows[i].clone()).collect();
        let b = pca_project(&Tensor::new(&[60, 4], shuffled).unwrap(), 2).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            for k in 0..2 {
                assert!((a.coords[src][k].abs() - b.coords[i][k].abs()).abs() < 1e-8);
            }
        }
        let line: Vec<f64> = (0..20)
            .flat_map(|i| [i as f64, 2.0 * i as f64, 0.0])
            .collect();
        let p = pca_project(&Tensor::new(&[20, 3], line).unwrap(), 2).unwrap();
        assert!(p.rank_deficient);
        assert_eq!(p.components.len(), 1);
        assert!(matches!(
            pca_project(&Tensor::new(&[2, 3], vec![0.0; 6]).unwrap(), 2),
            Err(EvalError::TooFewSamples { .. })
        ));
    }
}
