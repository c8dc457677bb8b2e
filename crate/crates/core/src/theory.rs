//! Executable form of the decoder-orthogonality theory.
//!
//! The isolated optimization problem fixes a set of decoder Jacobians and
//! optimizes per-sample noise variances and latent rotations under a total
//! precision budget. Its global minimum has a closed form; gradient-free
//! local improvement (pairwise precision rebalancing and planar rotations)
//! reaches it from any start, and the certified states have column-orthogonal
//! Jacobians. The PCA baseline and the axes-preserving classification live
//! here too.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, Matrix};
use crate::rng::seeded_rng;
use crate::tol;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("linalg: {0}")]
    Linalg(#[from] linalg::LinalgError),
    #[error("column {0} has zero norm: unbounded precision allocation")]
    ZeroColumn(usize),
    #[error("invalid: {0}")]
    Invalid(String),
    #[error(
        "improvement stuck: no move above the slack floor but objective gap {gap:.3e} exceeds the certificate tolerance"
    )]
    Stuck { gap: f64 },
    #[error("iteration cap {0} reached before certification")]
    IterationCap(usize),
}

pub type Result<T> = std::result::Result<T, TheoryError>;

/// `E ||J eps||^2` for `eps ~ N(0, diag(sigmas))`: the exact value is the
/// variance-weighted sum of squared column norms.
pub fn expected_stochastic_loss(j: &Matrix, sigmas: &[f64]) -> Result<f64> {
    if sigmas.len() != j.cols() {
        return Err(TheoryError::Invalid(format!(
            "{} variances for {} columns",
            sigmas.len(),
            j.cols()
        )));
    }
    let g = j.gram();
    Ok((0..j.cols()).map(|c| g.get(c, c) * sigmas[c]).sum())
}

/// Squared Euclidean column norms.
pub fn column_norms_squared(j: &Matrix) -> Vec<f64> {
    let g = j.gram();
    (0..j.cols()).map(|c| g.get(c, c)).collect()
}

/// Product of Euclidean column norms.
pub fn column_norm_product(j: &Matrix) -> f64 {
    column_norms_squared(j).iter().map(|v| v.sqrt()).product()
}

/// Optimal variance allocation under a per-coordinate precision budget.
///
/// Minimizes `sum_j ||c_j||^2 s2_j` subject to `sum_j -log s2_j = d * budget`
/// (each latent coordinate carries `budget` on average). The optimum puts
/// `s2_j` proportional to `1 / ||c_j||^2` and attains
/// `d * (prod_j ||c_j||^2)^(1/d) * exp(-budget)`.
pub fn optimal_sigmas(j: &Matrix, budget: f64) -> Result<(Vec<f64>, f64)> {
    let norms2 = column_norms_squared(j);
    let d = norms2.len();
    let mut log_prod = 0.0;
    for (c, n2) in norms2.iter().enumerate() {
        if *n2 <= 0.0 || n2.sqrt() <= tol::RANK_REL {
            return Err(TheoryError::ZeroColumn(c));
        }
        log_prod += n2.ln();
    }
    let t = (log_prod / d as f64 - budget).exp();
    let sigmas: Vec<f64> = norms2.iter().map(|n2| t / n2).collect();
    let minimum = d as f64 * t;
    Ok((sigmas, minimum))
}

/// Right-multiplier that orthogonalizes the columns of `j`.
#[derive(Debug, Clone)]
pub struct OrthogonalizingRotation {
    /// Orthogonal `d x d` matrix; the columns of `j * v^T` are pairwise
    /// orthogonal.
    pub v: Matrix,
    /// Set when two singular values coincide to relative tolerance: the
    /// rotation is then not unique.
    pub degenerate: bool,
}

/// Builds the orthogonalizing right factor from the SVD of `j`.
pub fn orthogonalizing_rotation(j: &Matrix) -> Result<OrthogonalizingRotation> {
    let f = linalg::svd(j)?;
    let largest = f.sigma[0];
    let smallest = *f.sigma.last().unwrap();
    if largest <= 0.0 || smallest <= tol::RANK_REL * largest {
        return Err(TheoryError::Linalg(linalg::LinalgError::RankDeficient {
            ratio: if largest > 0.0 { smallest / largest } else { 0.0 },
        }));
    }
    let degenerate = f
        .sigma
        .windows(2)
        .any(|w| (w[0] - w[1]).abs() <= tol::DEGENERATE_SV_REL * largest);
    // j * v^T with v = (svd V)^T equals U Sigma, whose columns are orthogonal
    Ok(OrthogonalizingRotation { v: f.v.transpose(), degenerate })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxesPreserving {
    Yes,
    No,
    Degenerate,
}

/// Column-orthogonality classification of a linear map.
///
/// `Yes` when the Gram matrix is diagonal to relative tolerance, `No`
/// otherwise, `Degenerate` when two singular values coincide so closely that
/// orthogonality no longer pins down the axes.
pub fn axes_preserving_check(m: &Matrix) -> Result<AxesPreserving> {
    let f = linalg::svd(m)?;
    let largest = f.sigma[0];
    if largest <= 0.0 {
        return Ok(AxesPreserving::Degenerate);
    }
    if f
        .sigma
        .windows(2)
        .any(|w| (w[0] - w[1]).abs() <= tol::DEGENERATE_SV_REL * largest)
    {
        return Ok(AxesPreserving::Degenerate);
    }
    let g = m.gram();
    let diag_scale = (0..g.rows()).map(|i| g.get(i, i)).fold(0.0_f64, f64::max);
    for i in 0..g.rows() {
        for j in (i + 1)..g.cols() {
            if g.get(i, j).abs() > tol::AXES_OFF_DIAG_REL * diag_scale {
                return Ok(AxesPreserving::No);
            }
        }
    }
    Ok(AxesPreserving::Yes)
}

/// The isolated optimization problem: fixed Jacobians, free per-sample
/// variances and latent rotations, total precision budget
/// `sum_i sum_j -log s2_j(i) = budget`.
#[derive(Debug, Clone)]
pub struct IsolatedProblem {
    jacobians: Vec<Matrix>,
    budget: f64,
}

impl IsolatedProblem {
    pub fn new(jacobians: Vec<Matrix>, budget: f64) -> Result<IsolatedProblem> {
        if jacobians.is_empty() {
            return Err(TheoryError::Invalid("problem needs at least one Jacobian".into()));
        }
        if !budget.is_finite() {
            return Err(TheoryError::Invalid("budget must be finite".into()));
        }
        let d = jacobians[0].cols();
        for j in &jacobians {
            if j.cols() != d {
                return Err(TheoryError::Invalid("Jacobians must share the latent dimension".into()));
            }
            linalg::psdet(j)?; // full column rank required
        }
        Ok(IsolatedProblem { jacobians, budget })
    }

    pub fn jacobians(&self) -> &[Matrix] {
        &self.jacobians
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn latent_dim(&self) -> usize {
        self.jacobians[0].cols()
    }

    pub fn sample_count(&self) -> usize {
        self.jacobians.len()
    }
}

/// A feasible point: per-sample variances and latent rotations. The
/// effective Jacobian of sample `i` is `J_i * R_i`.
#[derive(Debug, Clone, Serialize)]
pub struct Assignment {
    pub sigmas: Vec<Vec<f64>>,
    pub rotations: Vec<Matrix>,
}

impl Assignment {
    /// Uniform variances meeting the budget exactly, identity rotations.
    pub fn uniform(p: &IsolatedProblem) -> Assignment {
        let d = p.latent_dim();
        let n = p.sample_count();
        let s2 = (-p.budget / (n * d) as f64).exp();
        Assignment {
            sigmas: vec![vec![s2; d]; n],
            rotations: vec![Matrix::identity(d); n],
        }
    }

    /// Random feasible start: log-uniform variances shifted onto the budget
    /// surface, Haar-like random rotations.
    pub fn random(p: &IsolatedProblem, rng: &mut impl Rng) -> Assignment {
        let d = p.latent_dim();
        let n = p.sample_count();
        let mut logs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let total: f64 = logs.iter().flatten().sum();
        let shift = (-p.budget - total) / (n * d) as f64;
        for row in &mut logs {
            for v in row.iter_mut() {
                *v += shift;
            }
        }
        Assignment {
            sigmas: logs.iter().map(|row| row.iter().map(|v| v.exp()).collect()).collect(),
            rotations: (0..n).map(|_| linalg::random_orthogonal_with(d, rng)).collect(),
        }
    }

    /// `sum_i sum_j -log s2_j(i)`; equals the problem budget when feasible.
    pub fn spent_budget(&self) -> f64 {
        -self.sigmas.iter().flatten().map(|v| v.ln()).sum::<f64>()
    }
}

/// Closed-form lower bound on the objective:
/// `N log d - budget/d + (2/d) sum_i log psdet(J_i)`.
pub fn global_lower_bound(p: &IsolatedProblem) -> Result<f64> {
    let d = p.latent_dim() as f64;
    let n = p.sample_count() as f64;
    let mut acc = n * d.ln() - p.budget / d;
    for j in &p.jacobians {
        acc += 2.0 / d * linalg::psdet(j)?.ln();
    }
    Ok(acc)
}

fn effective_jacobian(p: &IsolatedProblem, asg: &Assignment, i: usize) -> Matrix {
    p.jacobians[i].matmul(&asg.rotations[i])
}

fn sample_term(p: &IsolatedProblem, asg: &Assignment, i: usize) -> Result<f64> {
    let m = effective_jacobian(p, asg, i);
    Ok(expected_stochastic_loss(&m, &asg.sigmas[i])?.ln())
}

/// `sum_i log E ||J_i R_i eps_i||^2`.
pub fn objective(p: &IsolatedProblem, asg: &Assignment) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..p.sample_count() {
        acc += sample_term(p, asg, i)?;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    /// Objective strictly decreased (or a rotation strictly reduced the
    /// column-norm product at unchanged objective, which the next
    /// rebalancing turns into a decrease).
    Improved { objective: f64 },
    /// No move above the slack floor remains and the objective sits within
    /// the certificate tolerance of the lower bound.
    Optimal { objective: f64 },
}

struct MoveScan {
    /// (sample, max index, min index, relative slack)
    am_gm: Option<(usize, usize, usize, f64)>,
    /// (sample, column p, column q, normalized inner product)
    hadamard: Option<(usize, usize, usize, f64)>,
}

fn scan_moves(p: &IsolatedProblem, asg: &Assignment) -> MoveScan {
    let d = p.latent_dim();
    let mut best_amgm: Option<(usize, usize, usize, f64)> = None;
    let mut best_had: Option<(usize, usize, usize, f64)> = None;
    for i in 0..p.sample_count() {
        let m = effective_jacobian(p, asg, i);
        let g = m.gram();
        let mut max_j = 0;
        let mut min_j = 0;
        for j in 0..d {
            let a = g.get(j, j) * asg.sigmas[i][j];
            if a > g.get(max_j, max_j) * asg.sigmas[i][max_j] {
                max_j = j;
            }
            if a < g.get(min_j, min_j) * asg.sigmas[i][min_j] {
                min_j = j;
            }
        }
        let a_max = g.get(max_j, max_j) * asg.sigmas[i][max_j];
        let a_min = g.get(min_j, min_j) * asg.sigmas[i][min_j];
        let slack = (a_max - a_min) / a_max.max(1e-300);
        if slack > best_amgm.map(|b| b.3).unwrap_or(0.0) {
            best_amgm = Some((i, max_j, min_j, slack));
        }
        for pcol in 0..d {
            for qcol in (pcol + 1)..d {
                let denom = (g.get(pcol, pcol) * g.get(qcol, qcol)).sqrt().max(1e-300);
                let rho = g.get(pcol, qcol).abs() / denom;
                if rho > best_had.map(|b| b.3).unwrap_or(0.0) {
                    best_had = Some((i, pcol, qcol, rho));
                }
            }
        }
    }
    MoveScan { am_gm: best_amgm, hadamard: best_had }
}

/// Applies the plane rotation by `delta` in latent coordinates `(pcol, qcol)`
/// to sample `i`'s rotation.
fn rotate_assignment(asg: &mut Assignment, i: usize, pcol: usize, qcol: usize, delta: f64) {
    let (s, c) = delta.sin_cos();
    let r = &mut asg.rotations[i];
    for row in 0..r.rows() {
        let vp = r.get(row, pcol);
        let vq = r.get(row, qcol);
        r.set(row, pcol, c * vp + s * vq);
        r.set(row, qcol, -s * vp + c * vq);
    }
}

/// One local-improvement move.
///
/// Precision rebalancing takes priority: the worst AM-GM pair is rebalanced
/// multiplicatively with delta backtracked from 0.1 until the objective
/// strictly decreases. Otherwise the most non-orthogonal column pair gets a
/// backtracked planar rotation; a rotation that leaves the objective flat
/// (exactly balanced variances) is accepted when it strictly reduces the
/// column-norm product, which re-opens an AM-GM gap for the next step. When
/// no move remains above the slack floor, the state is certified against the
/// closed-form bound.
pub fn local_improvement_step(p: &IsolatedProblem, asg: &mut Assignment) -> Result<StepOutcome> {
    let obj = objective(p, asg)?;
    let bound = global_lower_bound(p)?;
    let scan = scan_moves(p, asg);

    // AM-GM rebalancing
    if let Some((i, jmax, jmin, slack)) = scan.am_gm {
        if slack > tol::IMPROVEMENT_SLACK_FLOOR {
            let term_old = sample_term(p, asg, i)?;
            let mut delta = 0.1;
            while delta > 1e-14 {
                let factor = 1.0 + delta;
                let old_max = asg.sigmas[i][jmax];
                let old_min = asg.sigmas[i][jmin];
                asg.sigmas[i][jmax] = old_max / factor;
                asg.sigmas[i][jmin] = old_min * factor;
                let term_new = sample_term(p, asg, i)?;
                if term_new < term_old {
                    return Ok(StepOutcome::Improved { objective: obj - term_old + term_new });
                }
                asg.sigmas[i][jmax] = old_max;
                asg.sigmas[i][jmin] = old_min;
                delta *= 0.5;
            }
        }
    }

    // Hadamard rotation
    if let Some((i, pcol, qcol, rho)) = scan.hadamard {
        if rho > tol::IMPROVEMENT_SLACK_FLOOR {
            let term_old = sample_term(p, asg, i)?;
            let colprod_old = column_norm_product(&effective_jacobian(p, asg, i));
            let mut delta = 0.1;
            let mut neutral: Option<f64> = None;
            while delta > 1e-14 {
                for signed in [delta, -delta] {
                    rotate_assignment(asg, i, pcol, qcol, signed);
                    let term_new = sample_term(p, asg, i)?;
                    let colprod_new = column_norm_product(&effective_jacobian(p, asg, i));
                    if term_new < term_old {
                        return Ok(StepOutcome::Improved { objective: obj - term_old + term_new });
                    }
                    if neutral.is_none() && term_new <= term_old && colprod_new < colprod_old {
                        neutral = Some(signed);
                    }
                    rotate_assignment(asg, i, pcol, qcol, -signed);
                }
                delta *= 0.5;
            }
            if let Some(signed) = neutral {
                rotate_assignment(asg, i, pcol, qcol, signed);
                return Ok(StepOutcome::Improved { objective: obj });
            }
        }
    }

    let gap = (obj - bound).abs();
    if gap <= tol::CERTIFICATE_REL * bound.abs().max(1e-6) {
        Ok(StepOutcome::Optimal { objective: obj })
    } else {
        Err(TheoryError::Stuck { gap })
    }
}

/// Certified optimum of the isolated problem.
#[derive(Debug, Clone, Serialize)]
pub struct OptimumCertificate {
    pub sigmas: Vec<Vec<f64>>,
    pub rotations: Vec<Matrix>,
    pub achieved_objective: f64,
    pub lower_bound: f64,
    /// Largest normalized off-diagonal Gram entry per sample at the optimum.
    pub orthogonality_residuals: Vec<f64>,
}

/// Runs improvement steps until certification (or the iteration cap).
pub fn improve_to_certificate(
    p: &IsolatedProblem,
    mut asg: Assignment,
    max_steps: usize,
) -> Result<OptimumCertificate> {
    for _ in 0..max_steps {
        match local_improvement_step(p, &mut asg)? {
            StepOutcome::Improved { .. } => {}
            StepOutcome::Optimal { objective } => {
                let residuals = (0..p.sample_count())
                    .map(|i| {
                        let g = effective_jacobian(p, &asg, i).gram();
                        let mut worst = 0.0_f64;
                        for a in 0..g.rows() {
                            for b in (a + 1)..g.cols() {
                                let denom = (g.get(a, a) * g.get(b, b)).sqrt().max(1e-300);
                                worst = worst.max(g.get(a, b).abs() / denom);
                            }
                        }
                        worst
                    })
                    .collect();
                return Ok(OptimumCertificate {
                    sigmas: asg.sigmas,
                    rotations: asg.rotations,
                    achieved_objective: objective,
                    lower_bound: global_lower_bound(p)?,
                    orthogonality_residuals: residuals,
                });
            }
        }
    }
    Err(TheoryError::IterationCap(max_steps))
}

/// Random test problem with full-column-rank Gaussian Jacobians.
pub fn random_problem(seed: u64, n: usize, d: usize, samples: usize, budget: f64) -> Result<IsolatedProblem> {
    let mut rng = seeded_rng(seed, 7);
    let mut jacobians = Vec::with_capacity(samples);
    while jacobians.len() < samples {
        let j = Matrix::from_fn(n, d, |_, _| crate::rng::standard_normal(&mut rng));
        if linalg::psdet(&j).is_ok() {
            jacobians.push(j);
        }
    }
    IsolatedProblem::new(jacobians, budget)
}

/// PCA of row-major samples, fitted on centered data.
#[derive(Debug, Clone)]
pub struct PcaModel {
    /// `d x n`; rows are the top eigenvectors of the sample covariance,
    /// eigenvalue-descending.
    pub components: Matrix,
    pub mean: Vec<f64>,
    /// Top `d` eigenvalues of the sample covariance.
    pub eigenvalues: Vec<f64>,
    /// Set when leading eigenvalues coincide to relative tolerance: the
    /// principal directions are then implementation-dependent.
    pub degenerate: bool,
}

pub fn pca_fit(data: &Matrix, d: usize) -> Result<PcaModel> {
    let n = data.cols();
    let rows = data.rows();
    if d == 0 || d > n {
        return Err(TheoryError::Invalid(format!("cannot keep {d} of {n} components")));
    }
    if rows < 2 {
        return Err(TheoryError::Invalid("need at least two samples".into()));
    }
    let mut mean = vec![0.0; n];
    for i in 0..rows {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += data.get(i, j);
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    let mut cov = Matrix::zeros(n, n);
    for i in 0..rows {
        for a in 0..n {
            let va = data.get(i, a) - mean[a];
            for b in a..n {
                let vb = data.get(i, b) - mean[b];
                cov.set(a, b, cov.get(a, b) + va * vb);
            }
        }
    }
    for a in 0..n {
        for b in a..n {
            let v = cov.get(a, b) / (rows as f64 - 1.0);
            cov.set(a, b, v);
            cov.set(b, a, v);
        }
    }
    let (evals, evecs) = linalg::eigh_symmetric(&cov)?;
    let scale = evals[0].abs().max(1e-300);
    let check = (d + 1).min(n);
    let degenerate = evals[..check]
        .windows(2)
        .any(|w| (w[0] - w[1]).abs() <= tol::PCA_DEGENERATE_EIGENGAP_REL * scale);
    let components = Matrix::from_fn(d, n, |r, c| evecs.get(c, r));
    Ok(PcaModel { components, mean, eigenvalues: evals[..d].to_vec(), degenerate })
}

impl PcaModel {
    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        self.components.matvec(&centered)
    }

    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (r, zr) in z.iter().enumerate() {
            for (c, o) in out.iter_mut().enumerate() {
                *o += self.components.get(r, c) * zr;
            }
        }
        out
    }

    /// Mean squared reconstruction error over the rows of `data`.
    pub fn reconstruction_mse(&self, data: &Matrix) -> f64 {
        let mut acc = 0.0;
        for i in 0..data.rows() {
            let x = data.row(i);
            let rec = self.decode(&self.encode(x));
            acc += x.iter().zip(&rec).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        acc / data.rows() as f64
    }
}
