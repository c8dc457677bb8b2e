//! Shared numerical tolerances.
//!
//! Every threshold used by more than one operation (or by an operation and
//! its tests) lives here so the two sides cannot drift apart.

/// Off-diagonal convergence threshold for the one-sided Jacobi SVD sweep.
pub const SVD_JACOBI_OFF_DIAG: f64 = 1e-12;

/// Maximum number of Jacobi sweeps before the SVD reports non-convergence.
pub const SVD_MAX_SWEEPS: usize = 100;

/// Orthonormality tolerance for SVD factors (Gram matrix vs identity).
pub const SVD_ORTHONORMALITY: f64 = 1e-9;

/// Relative Frobenius reconstruction error allowed for `U diag(sigma) V^T`.
pub const SVD_RECONSTRUCTION_REL: f64 = 1e-8;

/// Relative rank threshold: smallest/largest singular value ratios below this
/// count as rank deficiency.
pub const RANK_REL: f64 = 1e-12;

/// `L L^T` reconstruction tolerance for the Cholesky factor.
pub const CHOLESKY_RECONSTRUCTION: f64 = 1e-10;

/// Orthogonality tolerance for generated orthogonal matrices (`Q^T Q` vs identity).
pub const ORTHOGONAL_QTQ: f64 = 1e-10;

/// Relative off-diagonal tolerance for the axes-preserving (column
/// orthogonality) check on `M^T M`.
pub const AXES_OFF_DIAG_REL: f64 = 1e-6;

/// Relative gap below which two singular values count as repeated
/// (degenerate: the right SVD factor is no longer pinned down).
pub const DEGENERATE_SV_REL: f64 = 1e-6;

/// Relative eigenvalue-gap threshold below which a fitted PCA spectrum
/// counts as degenerate. Looser than the matrix-level threshold because
/// sample covariances of N draws carry O(1/sqrt(N)) eigenvalue noise.
pub const PCA_DEGENERATE_EIGENGAP_REL: f64 = 0.05;

/// Relative certification tolerance for the isolated-problem optimum
/// (achieved objective vs closed-form lower bound).
pub const CERTIFICATE_REL: f64 = 1e-7;

/// Relative convergence target for local-improvement iteration in tests.
pub const IMPROVEMENT_CONVERGENCE_REL: f64 = 1e-5;

/// Relative slack below which an AM-GM or Hadamard move is considered
/// exhausted and the step looks for certification instead. Below ~1e-7 a
/// rebalance changes the objective by less than one ulp, so smaller floors
/// cannot be driven by strict decreases.
pub const IMPROVEMENT_SLACK_FLOOR: f64 = 1e-7;

/// Standard-deviation threshold on latent means above which a latent
/// coordinate counts as active.
pub const ACTIVE_STD_THRESHOLD: f64 = 0.5;

/// Relative KL-approximation error below which training counts as polarized.
pub const POLARIZED_DELTA_KL: f64 = 0.03;

/// Number of test points at which decoder Jacobians are sampled for DtO.
pub const DTO_SAMPLE_COUNT: usize = 256;

/// Step size for central finite differences in gradient checks.
pub const FINITE_DIFF_STEP: f64 = 1e-5;
