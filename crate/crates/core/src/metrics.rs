//! Measurement instruments: distance to orthogonality with an exact
//! nearest-signed-permutation search, the kNN-based disentanglement score,
//! polarized-regime detection and active-variable selection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::FactorKind;
use crate::linalg::{self, Matrix};
use crate::models::{kl_approx_polarized, kl_diagonal, GaussianPosterior};
use crate::nets::MlpNetwork;
use crate::tol;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("linalg: {0}")]
    Linalg(#[from] linalg::LinalgError),
    #[error("net: {0}")]
    Net(#[from] crate::nets::NetError),
    #[error("model: {0}")]
    Model(#[from] crate::models::ModelError),
    #[error("invalid: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub const KNN_K: usize = 5;

/// Exact search budget: beyond this the d! * 2^d verification oracle and the
/// assignment reduction are no longer guaranteed cheap.
pub const MAX_PERMUTATION_DIM: usize = 12;

/// A signed permutation matrix: one entry of +-1 per row and column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedPermutation {
    /// `perm[row]` is the column carrying the nonzero entry.
    pub perm: Vec<usize>,
    /// `signs[row]` is that entry, +1 or -1.
    pub signs: Vec<i8>,
}

impl SignedPermutation {
    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn as_matrix(&self) -> Matrix {
        let d = self.dim();
        let mut m = Matrix::zeros(d, d);
        for (row, (&col, &sign)) in self.perm.iter().zip(&self.signs).enumerate() {
            m.set(row, col, sign as f64);
        }
        m
    }

    /// `sum_ij |V_ij - P_ij|`.
    pub fn l1_distance_to(&self, v: &Matrix) -> f64 {
        let d = self.dim();
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                let p = if self.perm[i] == j { self.signs[i] as f64 } else { 0.0 };
                acc += (v.get(i, j) - p).abs();
            }
        }
        acc
    }

    pub fn frobenius_distance_to(&self, v: &Matrix) -> f64 {
        v.sub(&self.as_matrix()).frobenius_norm()
    }
}

/// Minimum-cost assignment (Hungarian algorithm with potentials, O(d^3)).
/// Returns `assignment[row] = column`.
fn solve_assignment(cost: &Matrix) -> Vec<usize> {
    let n = cost.rows();
    debug_assert_eq!(n, cost.cols());
    // 1-indexed potentials formulation
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // column -> row
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Globally optimal signed permutation in the L1 sense.
///
/// The objective separates per cell once the carried sign is chosen as
/// `sign(V_ij)`, leaving a d x d assignment problem over
/// `cost_ij = ||V_ij| - 1| - |V_ij|`; the Hungarian solver finds the exact
/// optimum. The returned distance is recomputed directly from the chosen
/// matrix so it matches brute-force enumeration.
pub fn nearest_signed_permutation(v: &Matrix) -> Result<(SignedPermutation, f64)> {
    let d = v.rows();
    if v.cols() != d {
        return Err(MetricsError::Invalid("matrix must be square".into()));
    }
    if d > MAX_PERMUTATION_DIM {
        return Err(MetricsError::Invalid(format!(
            "dimension {d} exceeds the exact search budget {MAX_PERMUTATION_DIM}"
        )));
    }
    let cost = Matrix::from_fn(d, d, |i, j| {
        let a = v.get(i, j).abs();
        (a - 1.0).abs() - a
    });
    let assignment = solve_assignment(&cost);
    let signs: Vec<i8> = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| if v.get(i, j) < 0.0 { -1 } else { 1 })
        .collect();
    let sp = SignedPermutation { perm: assignment, signs };
    let dist = sp.l1_distance_to(v);
    Ok((sp, dist))
}

/// Brute-force oracle over all d! * 2^d signed permutations. Exponential;
/// used to verify the assignment reduction.
pub fn nearest_signed_permutation_brute_force(v: &Matrix) -> Result<(SignedPermutation, f64)> {
    let d = v.rows();
    if v.cols() != d {
        return Err(MetricsError::Invalid("matrix must be square".into()));
    }
    if d > 8 {
        return Err(MetricsError::Invalid("brute force capped at d = 8".into()));
    }
    let mut perm: Vec<usize> = (0..d).collect();
    let mut best: Option<(SignedPermutation, f64)> = None;
    permute(&mut perm, 0, &mut |perm| {
        for mask in 0..(1u32 << d) {
            let signs: Vec<i8> = (0..d).map(|i| if mask & (1 << i) != 0 { -1 } else { 1 }).collect();
            let sp = SignedPermutation { perm: perm.to_vec(), signs };
            let dist = sp.l1_distance_to(v);
            if best.as_ref().map(|(_, b)| dist < *b).unwrap_or(true) {
                best = Some((sp, dist));
            }
        }
    });
    Ok(best.unwrap())
}

fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

/// Distance-to-orthogonality outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DtoOutcome {
    Value {
        dto: f64,
        /// Samples whose active-column Jacobian had full column rank.
        used: usize,
        /// Rank-deficient samples skipped (counted against the 95% precondition).
        skipped: usize,
    },
    /// Every sampled Jacobian was rank-deficient on the active columns.
    Degenerate,
}

/// Mean Frobenius distance between the right SVD factors of the decoder
/// Jacobians (restricted to active columns, evaluated at the latent means)
/// and their nearest signed permutations.
pub fn dto(decoder: &MlpNetwork, latent_means: &[Vec<f64>], active: &[usize]) -> Result<DtoOutcome> {
    if active.is_empty() {
        return Ok(DtoOutcome::Degenerate);
    }
    let mut acc = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for mu in latent_means {
        let j = decoder.decoder_jacobian(mu)?;
        let j_active = j.select_columns(active);
        let f = linalg::svd(&j_active)?;
        let largest = f.sigma[0];
        let smallest = *f.sigma.last().unwrap();
        if largest <= 0.0 || smallest <= tol::RANK_REL * largest {
            skipped += 1;
            continue;
        }
        let (sp, _) = nearest_signed_permutation(&f.v)?;
        acc += sp.frobenius_distance_to(&f.v);
        used += 1;
    }
    if used == 0 {
        return Ok(DtoOutcome::Degenerate);
    }
    Ok(DtoOutcome::Value { dto: acc / used as f64, used, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnnMode {
    Regress,
    Classify,
}

/// k-nearest-neighbor prediction on a single latent coordinate.
///
/// Euclidean distance on the scalar; distance ties break toward the earlier
/// training index. Classification is a majority vote with the smallest label
/// winning vote ties.
pub fn knn_predict(train: &[(f64, f64)], query: f64, k: usize, mode: KnnMode) -> Result<f64> {
    if train.len() < k || k == 0 {
        return Err(MetricsError::Invalid(format!(
            "need at least k={k} training points, got {}",
            train.len()
        )));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by(|&a, &b| {
        let da = (train[a].0 - query).abs();
        let db = (train[b].0 - query).abs();
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });
    let neighbors = &order[..k];
    match mode {
        KnnMode::Regress => {
            Ok(neighbors.iter().map(|&i| train[i].1).sum::<f64>() / k as f64)
        }
        KnnMode::Classify => {
            let mut votes: Vec<(f64, usize)> = Vec::new();
            for &i in neighbors {
                let label = train[i].1;
                match votes.iter_mut().find(|(l, _)| *l == label) {
                    Some((_, c)) => *c += 1,
                    None => votes.push((label, 1)),
                }
            }
            votes.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.partial_cmp(&b.0).unwrap()));
            Ok(votes[0].0)
        }
    }
}

/// Sorted training view for repeated kNN queries on one coordinate.
struct SortedKnn {
    zs: Vec<f64>,
    targets: Vec<f64>,
}

impl SortedKnn {
    fn new(train: &[(f64, f64)]) -> SortedKnn {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.sort_by(|&a, &b| {
            train[a].0.partial_cmp(&train[b].0).unwrap().then(a.cmp(&b))
        });
        SortedKnn {
            zs: order.iter().map(|&i| train[i].0).collect(),
            targets: order.iter().map(|&i| train[i].1).collect(),
        }
    }

    /// Indices of the k nearest neighbors by two-pointer expansion.
    fn neighbors(&self, query: f64, k: usize, out: &mut Vec<usize>) {
        out.clear();
        let n = self.zs.len();
        let mut right = self.zs.partition_point(|z| *z < query);
        let mut left = right;
        while out.len() < k {
            let dl = if left > 0 { (self.zs[left - 1] - query).abs() } else { f64::INFINITY };
            let dr = if right < n { (self.zs[right] - query).abs() } else { f64::INFINITY };
            if dl <= dr {
                left -= 1;
                out.push(left);
            } else {
                out.push(right);
                right += 1;
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DisentanglementScore {
    pub score: f64,
    /// Factor columns excluded for having (numerically) zero variance.
    pub excluded_factors: Vec<usize>,
}

/// kNN-gap disentanglement score.
///
/// Per factor, every latent coordinate is scored by its kNN prediction
/// performance (k = 5, fitted on 80% of the rows, evaluated on the held-out
/// 20%); the gap between the two best coordinates, normalized by the
/// best-constant predictor, is averaged over factors and clamped to [0, 1].
/// Continuous factors use regression performance
/// `sqrt(var(w)) - sqrt(mse)`, discrete ones use accuracy.
pub fn disentanglement_score(
    latents: &Matrix,
    factors: &Matrix,
    kinds: &[FactorKind],
) -> Result<DisentanglementScore> {
    let n = latents.rows();
    let d = latents.cols();
    if factors.rows() != n {
        return Err(MetricsError::Invalid("latents and factors must align".into()));
    }
    if kinds.len() != factors.cols() {
        return Err(MetricsError::Invalid("one kind per factor required".into()));
    }
    if d < 2 {
        return Err(MetricsError::Invalid("score needs at least two latent coordinates".into()));
    }
    if n < 5 * KNN_K {
        return Err(MetricsError::Invalid("too few samples for the 80/20 kNN split".into()));
    }

    // deterministic 80/20 split: every 5th row is held out
    let eval_idx: Vec<usize> = (0..n).filter(|i| i % 5 == 4).collect();
    let train_idx: Vec<usize> = (0..n).filter(|i| i % 5 != 4).collect();

    let mut scores = Vec::new();
    let mut excluded = Vec::new();
    for (fi, kind) in kinds.iter().enumerate() {
        let eval_w: Vec<f64> = eval_idx.iter().map(|&i| factors.get(i, fi)).collect();
        let mean = eval_w.iter().sum::<f64>() / eval_w.len() as f64;
        let var = eval_w.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / eval_w.len() as f64;
        if var <= 1e-24 {
            log::warn!("factor {fi} has zero variance; excluded from the disentanglement score");
            excluded.push(fi);
            continue;
        }
        let normalizer = match kind {
            FactorKind::Continuous => var.sqrt(),
            FactorKind::Discrete => {
                // best-constant accuracy: the modal label share
                let mut labels: Vec<(f64, usize)> = Vec::new();
                for w in &eval_w {
                    match labels.iter_mut().find(|(l, _)| l == w) {
                        Some((_, c)) => *c += 1,
                        None => labels.push((*w, 1)),
                    }
                }
                labels.iter().map(|(_, c)| *c).max().unwrap() as f64 / eval_w.len() as f64
            }
        };

        let mut performances = Vec::with_capacity(d);
        let mut scratch = Vec::new();
        for j in 0..d {
            let train: Vec<(f64, f64)> = train_idx
                .iter()
                .map(|&i| (latents.get(i, j), factors.get(i, fi)))
                .collect();
            let sorted = SortedKnn::new(&train);
            let a = match kind {
                FactorKind::Continuous => {
                    let mut mse = 0.0;
                    for (&i, w) in eval_idx.iter().zip(&eval_w) {
                        sorted.neighbors(latents.get(i, j), KNN_K, &mut scratch);
                        let pred: f64 =
                            scratch.iter().map(|&t| sorted.targets[t]).sum::<f64>() / KNN_K as f64;
                        mse += (pred - w) * (pred - w);
                    }
                    mse /= eval_idx.len() as f64;
                    var.sqrt() - mse.sqrt()
                }
                FactorKind::Discrete => {
                    let mut correct = 0usize;
                    for (&i, w) in eval_idx.iter().zip(&eval_w) {
                        sorted.neighbors(latents.get(i, j), KNN_K, &mut scratch);
                        let mut votes: Vec<(f64, usize)> = Vec::new();
                        for &t in scratch.iter() {
                            let label = sorted.targets[t];
                            match votes.iter_mut().find(|(l, _)| *l == label) {
                                Some((_, c)) => *c += 1,
                                None => votes.push((label, 1)),
                            }
                        }
                        votes.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.partial_cmp(&b.0).unwrap()));
                        if votes[0].0 == *w {
                            correct += 1;
                        }
                    }
                    correct as f64 / eval_idx.len() as f64
                }
            };
            performances.push(a);
        }
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| performances[b].partial_cmp(&performances[a]).unwrap());
        let gap = (performances[order[0]] - performances[order[1]]) / normalizer;
        scores.push(gap);
    }
    if scores.is_empty() {
        return Err(MetricsError::Invalid("all factors were excluded".into()));
    }
    let raw = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(DisentanglementScore { score: raw.clamp(0.0, 1.0), excluded_factors: excluded })
}

/// Relative error between the closed-form KL and its polarized approximation
/// aggregated over a batch of diagonal posteriors. `None` when the batch KL
/// vanishes (the relative error is undefined there).
pub fn delta_kl(posteriors: &[GaussianPosterior], active: &[usize]) -> Result<Option<f64>> {
    let mut kl_sum = 0.0;
    let mut approx_sum = 0.0;
    for p in posteriors {
        kl_sum += kl_diagonal(p)?;
        approx_sum += kl_approx_polarized(p, active)?;
    }
    if kl_sum <= 1e-12 {
        return Ok(None);
    }
    Ok(Some((kl_sum - approx_sum).abs() / kl_sum))
}

/// Latent coordinates whose mean trace varies: empirical std over the rows
/// of `latent_means` above the shared threshold.
pub fn active_variables(latent_means: &Matrix) -> Result<Vec<usize>> {
    let n = latent_means.rows();
    if n < 2 {
        return Err(MetricsError::Invalid("need at least two samples".into()));
    }
    let d = latent_means.cols();
    let mut active = Vec::new();
    for j in 0..d {
        let mean: f64 = (0..n).map(|i| latent_means.get(i, j)).sum::<f64>() / n as f64;
        let var: f64 = (0..n)
            .map(|i| {
                let v = latent_means.get(i, j) - mean;
                v * v
            })
            .sum::<f64>()
            / (n as f64 - 1.0);
        if var.sqrt() > tol::ACTIVE_STD_THRESHOLD {
            active.push(j);
        }
    }
    Ok(active)
}

/// Fraction of the trace after the last excursion above the threshold:
/// the length of the maximal suffix with `delta_kl < threshold` over the
/// total length. Non-finite entries (undefined KL) count as excursions.
pub fn polarized_fraction(delta_kl_trace: &[f64], threshold: f64) -> Result<f64> {
    if delta_kl_trace.is_empty() {
        return Err(MetricsError::Invalid("empty trace".into()));
    }
    let mut suffix = 0usize;
    for v in delta_kl_trace.iter().rev() {
        if v.is_finite() && *v < threshold {
            suffix += 1;
        } else {
            break;
        }
    }
    Ok(suffix as f64 / delta_kl_trace.len() as f64)
}

/// Per-run measurement record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dto: DtoOutcome,
    pub disentanglement: Option<f64>,
    pub delta_kl_trace: Vec<(u64, f64)>,
    pub polarized_fraction: f64,
    pub active_set: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Activation, Layer};
    use crate::rng::{seeded_rng, standard_normal};
    use rand::Rng;

    #[test]
    fn nearest_perm_fixed_points() {
        let (sp, dist) = nearest_signed_permutation(&Matrix::identity(3)).unwrap();
        assert_eq!(sp.perm, vec![0, 1, 2]);
        assert_eq!(sp.signs, vec![1, 1, 1]);
        assert_eq!(dist, 0.0);

        let v = Matrix::diag(&[-1.0, 1.0]);
        let (sp, dist) = nearest_signed_permutation(&v).unwrap();
        assert_eq!(sp.signs, vec![-1, 1]);
        assert_eq!(dist, 0.0);
        assert_eq!(sp.frobenius_distance_to(&v), 0.0);
    }

    #[test]
    fn nearest_perm_rotation_45() {
        let v = linalg::rotation_2d(std::f64::consts::FRAC_PI_4);
        let (sp, dist) = nearest_signed_permutation(&v).unwrap();
        // enumerated by hand over all 8 signed 2-permutations:
        // L1 distance 2(1 - sqrt(2)/2) + 2 sqrt(2)/2 = 2
        assert!((dist - 2.0).abs() <= 1e-12, "L1 {dist}");
        let f = sp.frobenius_distance_to(&v);
        assert!((f - 1.0824).abs() <= 1e-3, "Frobenius {f}");
        let (_, brute) = nearest_signed_permutation_brute_force(&v).unwrap();
        assert!((dist - brute).abs() <= 1e-12);
    }

    #[test]
    fn assignment_solver_matches_enumeration() {
        let mut rng = seeded_rng(61, 0);
        for trial in 0..400 {
            let d = 2 + trial % 4; // 2..=5
            let v = Matrix::from_fn(d, d, |_, _| standard_normal(&mut rng));
            let (_, fast) = nearest_signed_permutation(&v).unwrap();
            let (_, brute) = nearest_signed_permutation_brute_force(&v).unwrap();
            assert!(
                (fast - brute).abs() <= 1e-12,
                "d={d} trial={trial}: {fast} vs {brute}"
            );
        }
    }

    fn linear_decoder(rows: &[Vec<f64>]) -> MlpNetwork {
        MlpNetwork::from_layers(vec![Layer {
            weight: Matrix::from_rows(rows).unwrap(),
            bias: vec![0.0; rows.len()],
            activation: Activation::Linear,
        }])
        .unwrap()
    }

    #[test]
    fn dto_zero_for_orthogonal_distinct_columns() {
        let dec = linear_decoder(&[vec![2.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]);
        let means: Vec<Vec<f64>> = (0..16).map(|i| vec![i as f64 * 0.1, -0.3]).collect();
        match dto(&dec, &means, &[0, 1]).unwrap() {
            DtoOutcome::Value { dto, used, skipped } => {
                assert!(dto <= 1e-9, "dto {dto}");
                assert_eq!(used, 16);
                assert_eq!(skipped, 0);
            }
            DtoOutcome::Degenerate => panic!("unexpected degenerate"),
        }
    }

    #[test]
    fn dto_invariant_under_signed_permutation_of_latents() {
        let mut rng = seeded_rng(71, 0);
        let dec = crate::nets::MlpNetwork::init(2, &[6], 4, Activation::Tanh, &mut rng);
        let means: Vec<Vec<f64>> = (0..32)
            .map(|_| vec![standard_normal(&mut rng), standard_normal(&mut rng)])
            .collect();
        let base = match dto(&dec, &means, &[0, 1]).unwrap() {
            DtoOutcome::Value { dto, .. } => dto,
            _ => panic!("degenerate"),
        };
        // compose the decoder with the signed permutation (z1, z2) -> (-z2, z1)
        let p = SignedPermutation { perm: vec![1, 0], signs: vec![-1, 1] };
        let mut layers = vec![Layer {
            weight: p.as_matrix(),
            bias: vec![0.0; 2],
            activation: Activation::Linear,
        }];
        layers.extend(dec.layers().iter().cloned());
        let permuted = MlpNetwork::from_layers(layers).unwrap();
        let pinv = p.as_matrix().transpose();
        let permuted_means: Vec<Vec<f64>> = means.iter().map(|m| pinv.matvec(m)).collect();
        let moved = match dto(&permuted, &permuted_means, &[0, 1]).unwrap() {
            DtoOutcome::Value { dto, .. } => dto,
            _ => panic!("degenerate"),
        };
        assert!((base - moved).abs() <= 1e-8, "{base} vs {moved}");
    }

    #[test]
    fn dto_flags_degenerate_when_no_active_columns() {
        let dec = linear_decoder(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(dto(&dec, &[vec![0.0, 0.0]], &[]).unwrap(), DtoOutcome::Degenerate);
        // rank-deficient active submatrix on every sample
        let dec = linear_decoder(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(
            dto(&dec, &[vec![0.1, 0.2], vec![0.3, 0.4]], &[0, 1]).unwrap(),
            DtoOutcome::Degenerate
        );
    }

    #[test]
    fn knn_basics() {
        let train: Vec<(f64, f64)> = vec![(0.0, 3.0), (1.0, 3.0), (2.0, 3.0), (3.0, 3.0), (4.0, 3.0)];
        assert_eq!(knn_predict(&train, 1.7, 5, KnnMode::Regress).unwrap(), 3.0);

        let train: Vec<(f64, f64)> = vec![(0.0, 1.0), (1.0, 2.0), (2.0, 5.0)];
        assert_eq!(knn_predict(&train, 1.0, 1, KnnMode::Regress).unwrap(), 2.0);
        assert_eq!(knn_predict(&train, 2.0, 1, KnnMode::Classify).unwrap(), 5.0);

        // dense grid, linear relation: error bounded by grid spacing
        let spacing = 0.01;
        let grid: Vec<(f64, f64)> = (0..=1000).map(|i| {
            let z = i as f64 * spacing;
            (z, 2.0 * z)
        }).collect();
        for q in [0.105, 0.5, 0.995] {
            let pred = knn_predict(&grid, q, KNN_K, KnnMode::Regress).unwrap();
            assert!((pred - 2.0 * q).abs() <= 2.0 * spacing, "{pred} vs {}", 2.0 * q);
        }
    }

    #[test]
    fn knn_classify_tie_breaks_to_smallest_label() {
        // two labels, two votes each within k=4
        let train: Vec<(f64, f64)> = vec![(0.0, 2.0), (0.1, 2.0), (0.2, 1.0), (0.3, 1.0)];
        assert_eq!(knn_predict(&train, 0.15, 4, KnnMode::Classify).unwrap(), 1.0);
    }

    fn unit_square_factors(n: usize, seed: u64) -> Matrix {
        let mut rng = seeded_rng(seed, 0);
        Matrix::from_fn(n, 2, |_, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn disentanglement_identity_code_is_high() {
        let factors = unit_square_factors(2000, 5);
        let latents = factors.clone();
        let kinds = [FactorKind::Continuous, FactorKind::Continuous];
        let s = disentanglement_score(&latents, &factors, &kinds).unwrap();
        assert!(s.score >= 0.95, "score {}", s.score);
        assert!(s.excluded_factors.is_empty());
    }

    #[test]
    fn disentanglement_noise_code_is_low() {
        let factors = unit_square_factors(2000, 6);
        let latents = unit_square_factors(2000, 7);
        let kinds = [FactorKind::Continuous, FactorKind::Continuous];
        let s = disentanglement_score(&latents, &factors, &kinds).unwrap();
        assert!(s.score <= 0.1, "score {}", s.score);
    }

    #[test]
    fn disentanglement_invariant_to_monotone_rescaling() {
        let factors = unit_square_factors(2000, 8);
        let mut latents = factors.clone();
        let base = disentanglement_score(&latents, &factors, &[FactorKind::Continuous; 2])
            .unwrap()
            .score;
        for i in 0..latents.rows() {
            let a = latents.get(i, 0);
            latents.set(i, 0, 10.0 * a + 3.0);
            let b = latents.get(i, 1);
            latents.set(i, 1, b.powi(3));
        }
        let moved = disentanglement_score(&latents, &factors, &[FactorKind::Continuous; 2])
            .unwrap()
            .score;
        assert!((base - moved).abs() <= 0.02, "{base} vs {moved}");
    }

    #[test]
    fn disentanglement_excludes_constant_factor() {
        let factors = {
            let base = unit_square_factors(1000, 9);
            Matrix::from_fn(1000, 2, |i, j| if j == 0 { base.get(i, 0) } else { 0.25 })
        };
        let latents = unit_square_factors(1000, 9);
        let s = disentanglement_score(&latents, &factors, &[FactorKind::Continuous; 2]).unwrap();
        assert_eq!(s.excluded_factors, vec![1]);
    }

    #[test]
    fn disentanglement_discrete_factor() {
        let n = 2000;
        let mut rng = seeded_rng(10, 0);
        let labels: Vec<f64> = (0..n).map(|_| rng.gen_range(0..4) as f64).collect();
        let latents = Matrix::from_fn(n, 2, |i, j| {
            if j == 0 {
                labels[i] + rng.gen_range(-0.05..0.05)
            } else {
                rng.gen_range(0.0..1.0)
            }
        });
        let factors = Matrix::from_vec(n, 1, labels).unwrap();
        let s = disentanglement_score(&latents, &factors, &[FactorKind::Discrete]).unwrap();
        assert!(s.score >= 0.9, "score {}", s.score);
    }

    #[test]
    fn delta_kl_regimes() {
        // strongly polarized: active with tiny variance, large mean
        let posts: Vec<GaussianPosterior> = (0..8)
            .map(|i| GaussianPosterior::diag(vec![2.0 + i as f64 * 0.1, 0.0], vec![-12.0, 0.0]))
            .collect();
        let d = delta_kl(&posts, &[0]).unwrap().unwrap();
        assert!(d <= 1e-5, "delta {d}");

        // all passive: KL is exactly zero, undefined
        let passive: Vec<GaussianPosterior> =
            (0..4).map(|_| GaussianPosterior::diag(vec![0.0, 0.0], vec![0.0, 0.0])).collect();
        assert_eq!(delta_kl(&passive, &[]).unwrap(), None);

        // mixed batch sits strictly between
        let mixed: Vec<GaussianPosterior> = (0..8)
            .map(|i| GaussianPosterior::diag(vec![1.0, 0.1 * i as f64], vec![-2.0, -0.5]))
            .collect();
        let d = delta_kl(&mixed, &[0]).unwrap().unwrap();
        assert!(d > 0.0 && d < 1.0, "delta {d}");
    }

    #[test]
    fn active_variable_selection() {
        let mut rng = seeded_rng(11, 0);
        let means = Matrix::from_fn(5000, 2, |_, j| {
            if j == 0 {
                0.0
            } else {
                rng.gen_range(0.0..10.0)
            }
        });
        let active = active_variables(&means).unwrap();
        assert_eq!(active, vec![1]); // uniform [0,10] has std ~ 2.89
    }

    #[test]
    fn polarized_fraction_cases() {
        assert_eq!(polarized_fraction(&[0.01, 0.02, 0.001], 0.03).unwrap(), 1.0);
        assert_eq!(polarized_fraction(&[0.01, 0.02, 0.5], 0.03).unwrap(), 0.0);
        let half = polarized_fraction(&[0.5, 0.9, 0.01, 0.02], 0.03).unwrap();
        assert_eq!(half, 0.5);
        // undefined entries interrupt the suffix
        let with_nan = polarized_fraction(&[0.01, f64::NAN, 0.01, 0.02], 0.03).unwrap();
        assert_eq!(with_nan, 0.5);
    }
}
