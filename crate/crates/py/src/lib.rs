//! Python bindings for the vaepca library.
//!
//! Matrices cross the boundary as nested lists; everything else is plain
//! scalars, strings and tuples so the module stays dependency-free on the
//! Python side.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use vaepca::data::FactorKind;
use vaepca::linalg::Matrix;
use vaepca::models::GaussianPosterior;
use vaepca::{data, experiment, linalg, metrics, models, theory};

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_lists(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Thin SVD: returns (u, sigma, v) with u * diag(sigma) * v_k^T = m.
#[pyfunction]
fn svd(m: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)> {
    let f = linalg::svd(&to_matrix(m)?).map_err(value_err)?;
    Ok((to_lists(&f.u), f.sigma.clone(), to_lists(&f.v)))
}

/// Product of singular values.
#[pyfunction]
fn psdet(m: Vec<Vec<f64>>) -> PyResult<f64> {
    linalg::psdet(&to_matrix(m)?).map_err(value_err)
}

#[pyfunction]
fn cholesky_factor(spd: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_lists(&linalg::cholesky_factor(&to_matrix(spd)?).map_err(value_err)?))
}

#[pyfunction]
fn random_orthogonal(dim: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    if dim == 0 {
        return Err(PyValueError::new_err("dim must be >= 1"));
    }
    Ok(to_lists(&linalg::random_orthogonal(dim, seed)))
}

#[pyfunction]
fn rotation_2d(theta: f64) -> Vec<Vec<f64>> {
    to_lists(&linalg::rotation_2d(theta))
}

/// E ||J eps||^2 for eps ~ N(0, diag(sigmas)).
#[pyfunction]
fn expected_stochastic_loss(jacobian: Vec<Vec<f64>>, sigmas: Vec<f64>) -> PyResult<f64> {
    theory::expected_stochastic_loss(&to_matrix(jacobian)?, &sigmas).map_err(value_err)
}

/// Optimal variance allocation under a per-coordinate precision budget.
/// Returns (sigmas, minimum).
#[pyfunction]
fn optimal_sigmas(jacobian: Vec<Vec<f64>>, budget: f64) -> PyResult<(Vec<f64>, f64)> {
    theory::optimal_sigmas(&to_matrix(jacobian)?, budget).map_err(value_err)
}

#[pyfunction]
fn column_norm_product(jacobian: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(theory::column_norm_product(&to_matrix(jacobian)?))
}

/// Closed-form lower bound of the isolated problem.
#[pyfunction]
fn global_lower_bound(jacobians: Vec<Vec<Vec<f64>>>, budget: f64) -> PyResult<f64> {
    let mats: PyResult<Vec<Matrix>> = jacobians.into_iter().map(to_matrix).collect();
    let p = theory::IsolatedProblem::new(mats?, budget).map_err(value_err)?;
    theory::global_lower_bound(&p).map_err(value_err)
}

/// Runs local improvement from a seeded random start until certification.
/// Returns (achieved_objective, lower_bound, per_sample_sigmas).
#[pyfunction]
fn solve_isolated_problem(
    jacobians: Vec<Vec<Vec<f64>>>,
    budget: f64,
    seed: u64,
) -> PyResult<(f64, f64, Vec<Vec<f64>>)> {
    let mats: PyResult<Vec<Matrix>> = jacobians.into_iter().map(to_matrix).collect();
    let p = theory::IsolatedProblem::new(mats?, budget).map_err(value_err)?;
    let mut rng = vaepca::rng::seeded_rng(seed, 0);
    let start = theory::Assignment::random(&p, &mut rng);
    let cert = theory::improve_to_certificate(&p, start, 500_000).map_err(runtime_err)?;
    Ok((cert.achieved_objective, cert.lower_bound, cert.sigmas))
}

/// "yes", "no" or "degenerate".
#[pyfunction]
fn axes_preserving_check(m: Vec<Vec<f64>>) -> PyResult<String> {
    let r = theory::axes_preserving_check(&to_matrix(m)?).map_err(value_err)?;
    Ok(match r {
        theory::AxesPreserving::Yes => "yes".into(),
        theory::AxesPreserving::No => "no".into(),
        theory::AxesPreserving::Degenerate => "degenerate".into(),
    })
}

/// PCA on row-major samples. Returns (components, mean, eigenvalues, degenerate).
#[pyfunction]
fn pca_fit(
    data: Vec<Vec<f64>>,
    components: usize,
) -> PyResult<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>, bool)> {
    let model = theory::pca_fit(&to_matrix(data)?, components).map_err(value_err)?;
    Ok((to_lists(&model.components), model.mean.clone(), model.eigenvalues.clone(), model.degenerate))
}

/// Exact nearest signed permutation in the L1 sense.
/// Returns (perm, signs, l1_distance, frobenius_distance).
#[pyfunction]
fn nearest_signed_permutation(
    v: Vec<Vec<f64>>,
) -> PyResult<(Vec<usize>, Vec<i8>, f64, f64)> {
    let m = to_matrix(v)?;
    let (sp, l1) = metrics::nearest_signed_permutation(&m).map_err(value_err)?;
    let frob = sp.frobenius_distance_to(&m);
    Ok((sp.perm.clone(), sp.signs.clone(), l1, frob))
}

/// kNN prediction on a scalar coordinate; mode is "regress" or "classify".
#[pyfunction]
#[pyo3(signature = (train, query, mode, k = 5))]
fn knn_predict(train: Vec<(f64, f64)>, query: f64, mode: &str, k: usize) -> PyResult<f64> {
    let mode = match mode {
        "regress" => metrics::KnnMode::Regress,
        "classify" => metrics::KnnMode::Classify,
        other => return Err(PyValueError::new_err(format!("unknown mode '{other}'"))),
    };
    metrics::knn_predict(&train, query, k, mode).map_err(value_err)
}

/// kNN-gap disentanglement score; factor kinds are "continuous"/"discrete".
#[pyfunction]
fn disentanglement_score(
    latents: Vec<Vec<f64>>,
    factors: Vec<Vec<f64>>,
    kinds: Vec<String>,
) -> PyResult<f64> {
    let kinds: PyResult<Vec<FactorKind>> = kinds
        .iter()
        .map(|k| match k.as_str() {
            "continuous" => Ok(FactorKind::Continuous),
            "discrete" => Ok(FactorKind::Discrete),
            other => Err(PyValueError::new_err(format!("unknown factor kind '{other}'"))),
        })
        .collect();
    let s = metrics::disentanglement_score(&to_matrix(latents)?, &to_matrix(factors)?, &kinds?)
        .map_err(value_err)?;
    Ok(s.score)
}

#[pyfunction]
fn active_variables(latent_means: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    metrics::active_variables(&to_matrix(latent_means)?).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (delta_kl_trace, threshold = 0.03))]
fn polarized_fraction(delta_kl_trace: Vec<f64>, threshold: f64) -> PyResult<f64> {
    metrics::polarized_fraction(&delta_kl_trace, threshold).map_err(value_err)
}

#[pyfunction]
fn kl_diagonal(mean: Vec<f64>, logvar: Vec<f64>) -> PyResult<f64> {
    if mean.len() != logvar.len() {
        return Err(PyValueError::new_err("mean and logvar lengths differ"));
    }
    models::kl_diagonal(&GaussianPosterior::diag(mean, logvar)).map_err(value_err)
}

#[pyfunction]
fn kl_full(mean: Vec<f64>, factor: Vec<Vec<f64>>) -> PyResult<f64> {
    let post = GaussianPosterior::full(mean, to_matrix(factor)?).map_err(value_err)?;
    models::kl_full(&post).map_err(value_err)
}

#[pyfunction]
fn kl_approx_polarized(mean: Vec<f64>, logvar: Vec<f64>, active: Vec<usize>) -> PyResult<f64> {
    if mean.len() != logvar.len() {
        return Err(PyValueError::new_err("mean and logvar lengths differ"));
    }
    let d = mean.len();
    if active.iter().any(|&j| j >= d) {
        return Err(PyValueError::new_err("active index out of range"));
    }
    models::kl_approx_polarized(&GaussianPosterior::diag(mean, logvar), &active).map_err(value_err)
}

/// Relative error between the closed-form KL and its polarized
/// approximation over a batch of (mean, logvar) posteriors; None when the
/// batch KL vanishes.
#[pyfunction]
fn delta_kl(
    means: Vec<Vec<f64>>,
    logvars: Vec<Vec<f64>>,
    active: Vec<usize>,
) -> PyResult<Option<f64>> {
    if means.len() != logvars.len() {
        return Err(PyValueError::new_err("means and logvars lengths differ"));
    }
    let posts: Vec<GaussianPosterior> = means
        .into_iter()
        .zip(logvars)
        .map(|(m, lv)| {
            if m.len() != lv.len() {
                Err(PyValueError::new_err("mean and logvar lengths differ"))
            } else {
                Ok(GaussianPosterior::diag(m, lv))
            }
        })
        .collect::<PyResult<_>>()?;
    metrics::delta_kl(&posts, &active).map_err(value_err)
}

/// Generates a synthetic dataset. Returns (inputs, factors).
#[pyfunction]
#[pyo3(signature = (kind, seed, samples, ratio = 2.0))]
fn generate_dataset(
    kind: &str,
    seed: u64,
    samples: usize,
    ratio: f64,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let ds = match kind {
        "linear" => data::generate_linear(seed, ratio, samples),
        "nonlinear" => data::generate_nonlinear(seed, samples),
        other => return Err(PyValueError::new_err(format!("unknown dataset kind '{other}'"))),
    }
    .map_err(value_err)?;
    Ok((to_lists(&ds.inputs), to_lists(&ds.factors)))
}

/// The 3x2 embedding matrix of the linear synthetic task.
#[pyfunction]
#[pyo3(signature = (ratio = 2.0))]
fn linear_embedding_matrix(ratio: f64) -> Vec<Vec<f64>> {
    to_lists(&data::linear_embedding_matrix(ratio))
}

/// Built-in experiment presets as TOML ("synth-lin", "synth-nonlin").
#[pyfunction]
fn preset_config(name: &str) -> PyResult<String> {
    let cfg = experiment::preset(name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown preset '{name}'")))?;
    cfg.to_toml().map_err(value_err)
}

/// Full pipeline on a TOML config: generate (if needed), train all seeds,
/// write run artifacts under out_dir, return the summary as a JSON string.
#[pyfunction]
#[pyo3(signature = (config_toml, out_dir, jobs = 1))]
fn run_experiment(config_toml: &str, out_dir: &str, jobs: usize) -> PyResult<String> {
    let cfg = experiment::ExperimentConfig::from_toml(config_toml).map_err(value_err)?;
    let out = std::path::Path::new(out_dir);
    match experiment::cmd_generate(&cfg, out, false) {
        Ok(_) | Err(experiment::ExperimentError::WouldOverwrite(_)) => {}
        Err(e) => return Err(runtime_err(e)),
    }
    let runs = experiment::cmd_train(&cfg, out, jobs).map_err(runtime_err)?;
    let summary = experiment::summarize(&cfg, &runs);
    serde_json::to_string_pretty(&summary).map_err(runtime_err)
}

/// Worked-example and optimization-property suite.
/// Returns a list of (name, passed, residual) tuples.
#[pyfunction]
fn theory_check(out_dir: &str) -> PyResult<Vec<(String, bool, f64)>> {
    let lines = experiment::cmd_theory_check(std::path::Path::new(out_dir)).map_err(runtime_err)?;
    Ok(lines.into_iter().map(|l| (l.name, l.passed, l.residual)).collect())
}

#[pymodule]
fn vaepca_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(svd, m)?)?;
    m.add_function(wrap_pyfunction!(psdet, m)?)?;
    m.add_function(wrap_pyfunction!(cholesky_factor, m)?)?;
    m.add_function(wrap_pyfunction!(random_orthogonal, m)?)?;
    m.add_function(wrap_pyfunction!(rotation_2d, m)?)?;
    m.add_function(wrap_pyfunction!(expected_stochastic_loss, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_sigmas, m)?)?;
    m.add_function(wrap_pyfunction!(column_norm_product, m)?)?;
    m.add_function(wrap_pyfunction!(global_lower_bound, m)?)?;
    m.add_function(wrap_pyfunction!(solve_isolated_problem, m)?)?;
    m.add_function(wrap_pyfunction!(axes_preserving_check, m)?)?;
    m.add_function(wrap_pyfunction!(pca_fit, m)?)?;
    m.add_function(wrap_pyfunction!(nearest_signed_permutation, m)?)?;
    m.add_function(wrap_pyfunction!(knn_predict, m)?)?;
    m.add_function(wrap_pyfunction!(disentanglement_score, m)?)?;
    m.add_function(wrap_pyfunction!(active_variables, m)?)?;
    m.add_function(wrap_pyfunction!(polarized_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(kl_diagonal, m)?)?;
    m.add_function(wrap_pyfunction!(kl_full, m)?)?;
    m.add_function(wrap_pyfunction!(kl_approx_polarized, m)?)?;
    m.add_function(wrap_pyfunction!(delta_kl, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(linear_embedding_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(preset_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(theory_check, m)?)?;
    Ok(())
}
