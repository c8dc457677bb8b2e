//! Config-driven experiment harness.
//!
//! One TOML file per experiment: dataset spec, model kind and architecture,
//! optimizer, beta, epochs, seeds. Runs land in `runs/<name>/<seed>/` with a
//! model checkpoint, a loss trace CSV (one row per `eval_every` batches) and
//! a metrics JSON; aggregates land in `runs/<name>/summary.{json,csv}`.
//! Seeds execute concurrently up to a jobs limit; every output is a pure
//! function of (config, seed).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, GeneratorKind, SyntheticDataset};
use crate::linalg::Matrix;
use crate::metrics::{self, DtoOutcome, MetricsReport};
use crate::models::{self, training_step, AutoencoderModel, ModelKind};
use crate::nets::{Activation, MlpNetwork, OptimizerKind, OptimizerState};
use crate::rng::{seeded_rng, stream};
use crate::theory;
use crate::tol;

/// Reduction convention recorded in every report: it fixes the scale of beta.
pub const LOSS_CONVENTION: &str =
    "reconstruction: sum over output coordinates; KL: sum over latent coordinates; both averaged over the batch; total = rec + beta * kl";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("bad config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("toml: {0}")]
    Toml(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("data: {0}")]
    Data(#[from] data::DataError),
    #[error("model: {0}")]
    Model(#[from] models::ModelError),
    #[error("net: {0}")]
    Net(#[from] crate::nets::NetError),
    #[error("metrics: {0}")]
    Metrics(#[from] metrics::MetricsError),
    #[error("theory: {0}")]
    Theory(#[from] theory::TheoryError),
    #[error("dataset not generated yet: {0} (run the generate subcommand first)")]
    MissingDataset(PathBuf),
    #[error("refusing to overwrite {0} (pass --overwrite)")]
    WouldOverwrite(PathBuf),
    #[error("certificate failed: {0}")]
    CertificateFailed(String),
    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn default_batch_size() -> usize {
    64
}

fn default_eval_every() -> usize {
    500
}

fn default_ratio() -> f64 {
    data::DEFAULT_STRETCH_RATIO
}

fn default_samples() -> usize {
    data::DEFAULT_SAMPLES
}

fn default_activation() -> Activation {
    Activation::Tanh
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: GeneratorKind,
    pub seed: u64,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

impl DatasetConfig {
    pub fn to_spec(&self) -> data::GeneratorSpec {
        data::GeneratorSpec {
            kind: self.kind,
            seed: self.seed,
            ratio: self.ratio,
            samples: self.samples,
            mlp_checkpoint: None,
        }
    }

    /// Stable file stem identifying the dataset contents.
    pub fn file_stem(&self) -> String {
        let kind = match self.kind {
            GeneratorKind::Linear => "linear",
            GeneratorKind::Nonlinear => "nonlinear",
        };
        format!("{kind}_s{}_r{}_n{}", self.seed, self.ratio, self.samples)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub latent_dim: usize,
    #[serde(default)]
    pub encoder_hidden: Vec<usize>,
    #[serde(default)]
    pub decoder_hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub hidden_activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub beta: f64,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(ExperimentError::Config("name must be a nonempty path segment".into()));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(ExperimentError::Config("beta must be finite and >= 0".into()));
        }
        if self.model.latent_dim < 1 {
            return Err(ExperimentError::Config("latent_dim must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("at least one seed required".into()));
        }
        if self.batch_size < 1 {
            return Err(ExperimentError::Config("batch_size must be >= 1".into()));
        }
        if self.eval_every < 1 {
            return Err(ExperimentError::Config("eval_every must be >= 1".into()));
        }
        if self.dataset.ratio <= 0.0 {
            return Err(ExperimentError::Config("dataset ratio must be positive".into()));
        }
        if self.dataset.samples < 50 {
            return Err(ExperimentError::Config("dataset needs at least 50 samples".into()));
        }
        if self.optimizer.learning_rate < 0.0 {
            return Err(ExperimentError::Config("learning rate must be >= 0".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| ExperimentError::Toml(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ExperimentError::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        Self::from_toml(&fs::read_to_string(path)?)
    }
}

/// Table-3 linear synthetic task: linear encoder/decoder, latent 2,
/// Adam 1e-3, 600 epochs, beta 1e-4, 10 seeds.
///
/// Batch size 16: the weak orthogonalization signal at beta = 1e-4 needs
/// the extra optimizer steps; larger batches leave the decoder visibly
/// misaligned after the 600-epoch budget.
pub fn synth_lin_config() -> ExperimentConfig {
    ExperimentConfig {
        name: "synth_lin_beta_vae".into(),
        dataset: DatasetConfig {
            kind: GeneratorKind::Linear,
            seed: 1,
            ratio: data::DEFAULT_STRETCH_RATIO,
            samples: data::DEFAULT_SAMPLES,
        },
        model: ModelConfig {
            kind: ModelKind::BetaVae,
            latent_dim: 2,
            encoder_hidden: vec![],
            decoder_hidden: vec![],
            hidden_activation: Activation::Linear,
        },
        optimizer: OptimizerConfig { kind: OptimizerKind::Adam, learning_rate: 1e-3 },
        beta: 1e-4,
        epochs: 600,
        batch_size: 16,
        seeds: (0..10).collect(),
        eval_every: default_eval_every(),
    }
}

/// Table-3 nonlinear synthetic task: 60-40-20 tanh on both sides, latent 2,
/// Adam 1e-3, 600 epochs, beta 1e-3.
pub fn synth_nonlin_config() -> ExperimentConfig {
    ExperimentConfig {
        name: "synth_nonlin_beta_vae".into(),
        dataset: DatasetConfig {
            kind: GeneratorKind::Nonlinear,
            seed: 1,
            ratio: 1.0,
            samples: data::DEFAULT_SAMPLES,
        },
        model: ModelConfig {
            kind: ModelKind::BetaVae,
            latent_dim: 2,
            encoder_hidden: vec![60, 40, 20],
            decoder_hidden: vec![60, 40, 20],
            hidden_activation: Activation::Tanh,
        },
        optimizer: OptimizerConfig { kind: OptimizerKind::Adam, learning_rate: 1e-3 },
        beta: 1e-3,
        epochs: 600,
        batch_size: default_batch_size(),
        seeds: (0..10).collect(),
        eval_every: default_eval_every(),
    }
}

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    match name {
        "synth-lin" => Some(synth_lin_config()),
        "synth-nonlin" => Some(synth_nonlin_config()),
        _ => None,
    }
}

pub fn dataset_path(out_dir: &Path, cfg: &DatasetConfig) -> PathBuf {
    out_dir.join("datasets").join(cfg.file_stem())
}

/// Generates the dataset files for a config. Existing files require
/// `overwrite`.
pub fn cmd_generate(cfg: &ExperimentConfig, out_dir: &Path, overwrite: bool) -> Result<PathBuf> {
    cfg.validate()?;
    let stem = dataset_path(out_dir, &cfg.dataset);
    let csv = stem.with_extension("csv");
    if csv.exists() && !overwrite {
        return Err(ExperimentError::WouldOverwrite(csv));
    }
    let ds = data::generate(&cfg.dataset.to_spec())?;
    data::write_dataset(&ds, &stem)?;
    Ok(stem)
}

fn load_dataset(out_dir: &Path, cfg: &DatasetConfig) -> Result<SyntheticDataset> {
    let stem = dataset_path(out_dir, cfg);
    if !stem.with_extension("csv").exists() {
        return Err(ExperimentError::MissingDataset(stem.with_extension("csv")));
    }
    Ok(data::read_dataset(&stem)?)
}

/// One row of the loss trace, written every `eval_every` batches on the
/// evaluation split. `delta_kl` is NaN where the relative error is undefined
/// (zero KL, or a model without a diagonal posterior).
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub step: u64,
    pub rec_total: f64,
    pub rec_det: f64,
    pub rec_stoch: f64,
    pub kl: f64,
    pub kl_approx: f64,
    pub delta_kl: f64,
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "step,rec_total,rec_det,rec_stoch,kl,kl_approx,delta_kl")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.step, r.rec_total, r.rec_det, r.rec_stoch, r.kl, r.kl_approx, r.delta_kl
        )?;
    }
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(ExperimentError::Parse(format!("trace row has {} fields", fields.len())));
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|e| ExperimentError::Parse(e.to_string()));
        rows.push(TraceRow {
            step: fields[0].parse().map_err(|_| ExperimentError::Parse("bad step".into()))?,
            rec_total: parse(fields[1])?,
            rec_det: parse(fields[2])?,
            rec_stoch: parse(fields[3])?,
            kl: parse(fields[4])?,
            kl_approx: parse(fields[5])?,
            delta_kl: parse(fields[6])?,
        });
    }
    Ok(rows)
}

pub struct RunResult {
    pub seed: u64,
    pub model: AutoencoderModel,
    pub trace: Vec<TraceRow>,
    /// Divergence note; the model is the last checkpoint before the failure.
    pub diverged: Option<String>,
}

fn build_model(cfg: &ExperimentConfig, seed: u64, data_dim: usize) -> Result<AutoencoderModel> {
    let mut rng = seeded_rng(seed, stream::WEIGHT_INIT);
    let encoder = MlpNetwork::init(
        data_dim,
        &cfg.model.encoder_hidden,
        cfg.model.kind.encoder_output_dim(cfg.model.latent_dim),
        cfg.model.hidden_activation,
        &mut rng,
    );
    let decoder = MlpNetwork::init(
        cfg.model.latent_dim,
        &cfg.model.decoder_hidden,
        data_dim,
        cfg.model.hidden_activation,
        &mut rng,
    );
    Ok(AutoencoderModel::new(cfg.model.kind, cfg.model.latent_dim, encoder, decoder)?)
}

fn eval_trace_row(
    model: &AutoencoderModel,
    eval_inputs: &Matrix,
    beta: f64,
    seed: u64,
    step: u64,
) -> Result<TraceRow> {
    let mut rng = seeded_rng(seed.wrapping_add(step), stream::REPARAM + 100);
    let b = models::evaluate_breakdown(model, eval_inputs, beta, &mut rng)?;
    let delta_kl = match model.kind {
        ModelKind::Vae | ModelKind::BetaVae => {
            let posts = model.encode_posterior_batch(eval_inputs)?;
            let refs: Vec<&models::GaussianPosterior> = posts.iter().collect();
            let active = models::batch_active_set(&refs);
            metrics::delta_kl(&posts, &active)?.unwrap_or(f64::NAN)
        }
        _ => f64::NAN,
    };
    Ok(TraceRow {
        step,
        rec_total: b.rec_total,
        rec_det: b.rec_deterministic,
        rec_stoch: b.rec_stochastic,
        kl: b.kl,
        kl_approx: b.kl_approx,
        delta_kl,
    })
}

/// Trains one seed: deterministic in (config, seed).
pub fn train_run(
    cfg: &ExperimentConfig,
    seed: u64,
    train_inputs: &Matrix,
    eval_inputs: &Matrix,
) -> Result<RunResult> {
    let mut model = build_model(cfg, seed, train_inputs.cols())?;
    let mut enc_opt = OptimizerState::new(
        cfg.optimizer.kind,
        cfg.optimizer.learning_rate,
        model.encoder.param_count(),
    );
    let mut dec_opt = OptimizerState::new(
        cfg.optimizer.kind,
        cfg.optimizer.learning_rate,
        model.decoder.param_count(),
    );
    let mut shuffle_rng = seeded_rng(seed, stream::SHUFFLE);
    let mut noise_rng = seeded_rng(seed, stream::REPARAM);

    let n = train_inputs.rows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch = Matrix::zeros(cfg.batch_size.min(n), train_inputs.cols());
    let mut trace = Vec::new();
    let mut step: u64 = 0;
    let mut last_good = model.clone();

    for _epoch in 0..cfg.epochs {
        for i in (1..n).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut offset = 0;
        while offset < n {
            let size = cfg.batch_size.min(n - offset);
            if batch.rows() != size {
                batch = Matrix::zeros(size, train_inputs.cols());
            }
            for (row, &idx) in order[offset..offset + size].iter().enumerate() {
                batch.row_mut(row).copy_from_slice(train_inputs.row(idx));
            }
            offset += size;
            match training_step(&mut model, &batch, cfg.beta, &mut enc_opt, &mut dec_opt, &mut noise_rng)
            {
                Ok(_) => {}
                Err(e) => {
                    return Ok(RunResult {
                        seed,
                        model: last_good,
                        trace,
                        diverged: Some(format!("step {step}: {e}")),
                    });
                }
            }
            step += 1;
            if step % cfg.eval_every as u64 == 0 {
                trace.push(eval_trace_row(&model, eval_inputs, cfg.beta, seed, step)?);
                last_good = model.clone();
            }
        }
    }
    Ok(RunResult { seed, model, trace, diverged: None })
}

/// Per-run metrics record written as `metrics.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub epochs: usize,
    pub model_kind: ModelKind,
    pub loss_convention: String,
    /// Wall-clock stamp; excluded from determinism comparisons.
    pub timestamp: String,
    pub diverged: Option<String>,
    pub report: MetricsReport,
    /// Untrained same-architecture decoder baseline, measured identically
    /// over all latent coordinates.
    pub random_decoder_dto: Option<f64>,
    pub final_rec_total: Option<f64>,
    pub polarized_fraction_defined: bool,
}

/// Numeric DtO for summaries; NaN when degenerate.
fn dto_value(outcome: &DtoOutcome) -> f64 {
    match outcome {
        DtoOutcome::Value { dto, .. } => *dto,
        DtoOutcome::Degenerate => f64::NAN,
    }
}

/// Evenly strided subset of row indices.
fn strided_indices(n: usize, count: usize) -> Vec<usize> {
    let count = count.min(n);
    (0..count).map(|i| i * n / count).collect()
}

/// Computes the metrics report for a trained model on the test split.
pub fn compute_run_metrics(
    cfg: &ExperimentConfig,
    run: &RunResult,
    test: &SyntheticDataset,
) -> Result<RunMetrics> {
    let latents = run.model.encode_mean_batch(&test.inputs)?;
    // The std>threshold rule identifies the polarized regime's passive
    // coordinates; a deterministic AE has no pruning mechanism and an
    // arbitrary latent scale, so all its coordinates count.
    let active = match cfg.model.kind {
        ModelKind::Ae => (0..cfg.model.latent_dim).collect(),
        _ => metrics::active_variables(&latents)?,
    };

    let idx = strided_indices(test.len(), tol::DTO_SAMPLE_COUNT);
    let means: Vec<Vec<f64>> = idx.iter().map(|&i| latents.row(i).to_vec()).collect();
    let dto = metrics::dto(&run.model.decoder, &means, &active)?;

    let disentanglement = match metrics::disentanglement_score(
        &latents,
        &test.factors,
        &test.factor_kinds,
    ) {
        Ok(s) => Some(s.score),
        Err(e) => {
            log::warn!("disentanglement score unavailable for seed {}: {e}", run.seed);
            None
        }
    };

    let deltas: Vec<f64> = run.trace.iter().map(|r| r.delta_kl).collect();
    let polarized_defined = matches!(cfg.model.kind, ModelKind::Vae | ModelKind::BetaVae)
        && !deltas.is_empty();
    let polarized = if polarized_defined {
        metrics::polarized_fraction(&deltas, tol::POLARIZED_DELTA_KL)?
    } else {
        0.0
    };

    // Random-decoder baseline: fresh untrained encoder/decoder pair of the
    // same architecture; all latent coordinates count as active because an
    // untrained encoder has no meaningful activity split.
    let baseline = {
        let mut rng = seeded_rng(run.seed, stream::BASELINE);
        let encoder = MlpNetwork::init(
            test.input_dim(),
            &cfg.model.encoder_hidden,
            cfg.model.kind.encoder_output_dim(cfg.model.latent_dim),
            cfg.model.hidden_activation,
            &mut rng,
        );
        let decoder = MlpNetwork::init(
            cfg.model.latent_dim,
            &cfg.model.decoder_hidden,
            test.input_dim(),
            cfg.model.hidden_activation,
            &mut rng,
        );
        let fresh =
            AutoencoderModel::new(cfg.model.kind, cfg.model.latent_dim, encoder, decoder)?;
        let fresh_latents = fresh.encode_mean_batch(&test.inputs)?;
        let fresh_means: Vec<Vec<f64>> = idx.iter().map(|&i| fresh_latents.row(i).to_vec()).collect();
        let all: Vec<usize> = (0..cfg.model.latent_dim).collect();
        match metrics::dto(&fresh.decoder, &fresh_means, &all)? {
            DtoOutcome::Value { dto, .. } => Some(dto),
            DtoOutcome::Degenerate => None,
        }
    };

    let trace_pairs: Vec<(u64, f64)> = run
        .trace
        .iter()
        .filter(|r| r.delta_kl.is_finite())
        .map(|r| (r.step, r.delta_kl))
        .collect();

    Ok(RunMetrics {
        seed: run.seed,
        epochs: cfg.epochs,
        model_kind: cfg.model.kind,
        loss_convention: LOSS_CONVENTION.into(),
        timestamp: now_stamp(),
        diverged: run.diverged.clone(),
        report: MetricsReport {
            dto,
            disentanglement,
            delta_kl_trace: trace_pairs,
            polarized_fraction: polarized,
            active_set: active,
        },
        random_decoder_dto: baseline,
        final_rec_total: run.trace.last().map(|r| r.rec_total),
        polarized_fraction_defined: polarized_defined,
    })
}

fn now_stamp() -> String {
    use std::time::{SystemTime, UNIX_EPOCH};
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    secs.to_string()
}

pub fn run_dir(out_dir: &Path, name: &str, seed: u64) -> PathBuf {
    out_dir.join("runs").join(name).join(seed.to_string())
}

/// Trains every seed of a config (up to `jobs` in parallel), writing
/// checkpoints, traces and per-seed metrics, then aggregates a summary.
/// Divergent seeds are recorded and the remaining seeds continue.
pub fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path, jobs: usize) -> Result<Vec<RunMetrics>> {
    cfg.validate()?;
    let ds = load_dataset(out_dir, &cfg.dataset)?;
    let (train, eval, test) = data::split(&ds, (0.8, 0.1, 0.1), cfg.dataset.seed)?;
    let metrics = run_all_seeds(cfg, &train.inputs, &eval.inputs, &test, jobs, Some(out_dir))?;
    write_summary(cfg, &metrics, out_dir)?;
    Ok(metrics)
}

/// Library-level runner used by `cmd_train` and the test suites: trains all
/// seeds against already-split data, optionally persisting run artifacts.
pub fn run_all_seeds(
    cfg: &ExperimentConfig,
    train_inputs: &Matrix,
    eval_inputs: &Matrix,
    test: &SyntheticDataset,
    jobs: usize,
    out_dir: Option<&Path>,
) -> Result<Vec<RunMetrics>> {
    let jobs = jobs.max(1);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<RunMetrics>)>> = Mutex::new(Vec::new());

    std::thread::scope(|scope| {
        for _ in 0..jobs.min(cfg.seeds.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cfg.seeds.len() {
                    break;
                }
                let seed = cfg.seeds[i];
                let outcome = (|| -> Result<RunMetrics> {
                    let run = train_run(cfg, seed, train_inputs, eval_inputs)?;
                    let rm = compute_run_metrics(cfg, &run, test)?;
                    if let Some(dir) = out_dir {
                        let rd = run_dir(dir, &cfg.name, seed);
                        fs::create_dir_all(&rd)?;
                        let mut ckpt = std::io::BufWriter::new(fs::File::create(rd.join("model.txt"))?);
                        models::write_model(&run.model, &mut ckpt)?;
                        ckpt.flush()?;
                        write_trace_csv(&rd.join("trace.csv"), &run.trace)?;
                        fs::write(rd.join("metrics.json"), serde_json::to_string_pretty(&rm)?)?;
                    }
                    Ok(rm)
                })();
                results.lock().unwrap().push((i, outcome));
            });
        }
    });

    let mut collected = results.into_inner().unwrap();
    collected.sort_by_key(|(i, _)| *i);
    collected.into_iter().map(|(_, r)| r).collect()
}

fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return None;
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let var = if finite.len() > 1 {
        finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateStat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

fn aggregate(values: &[f64]) -> Option<AggregateStat> {
    mean_std(values).map(|(mean, std)| AggregateStat {
        mean,
        std,
        count: values.iter().filter(|v| v.is_finite()).count(),
    })
}

/// Mean-and-std aggregate over the seeds of one config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub model_kind: ModelKind,
    pub beta: f64,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub loss_convention: String,
    pub dto: Option<AggregateStat>,
    pub dto_degenerate_runs: usize,
    pub disentanglement: Option<AggregateStat>,
    pub polarized_fraction: Option<AggregateStat>,
    pub random_decoder_dto: Option<AggregateStat>,
    pub active_count: Option<AggregateStat>,
    pub diverged_seeds: Vec<u64>,
}

pub fn summarize(cfg: &ExperimentConfig, runs: &[RunMetrics]) -> Summary {
    let dto_vals: Vec<f64> = runs.iter().map(|r| dto_value(&r.report.dto)).collect();
    let disent: Vec<f64> = runs
        .iter()
        .filter_map(|r| r.report.disentanglement)
        .collect();
    let polarized: Vec<f64> = runs
        .iter()
        .filter(|r| r.polarized_fraction_defined)
        .map(|r| r.report.polarized_fraction)
        .collect();
    let baseline: Vec<f64> = runs.iter().filter_map(|r| r.random_decoder_dto).collect();
    let active: Vec<f64> = runs.iter().map(|r| r.report.active_set.len() as f64).collect();
    Summary {
        name: cfg.name.clone(),
        model_kind: cfg.model.kind,
        beta: cfg.beta,
        epochs: cfg.epochs,
        seeds: cfg.seeds.clone(),
        loss_convention: LOSS_CONVENTION.into(),
        dto: aggregate(&dto_vals),
        dto_degenerate_runs: dto_vals.iter().filter(|v| !v.is_finite()).count(),
        disentanglement: aggregate(&disent),
        polarized_fraction: aggregate(&polarized),
        random_decoder_dto: aggregate(&baseline),
        active_count: aggregate(&active),
        diverged_seeds: runs.iter().filter(|r| r.diverged.is_some()).map(|r| r.seed).collect(),
    }
}

fn write_summary(cfg: &ExperimentConfig, runs: &[RunMetrics], out_dir: &Path) -> Result<Summary> {
    let summary = summarize(cfg, runs);
    let dir = out_dir.join("runs").join(&cfg.name);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;

    let mut csv = String::from("seed,epochs,dto,disent,polarized_fraction,active_count\n");
    for r in runs {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.seed,
            r.epochs,
            dto_value(&r.report.dto),
            r.report.disentanglement.unwrap_or(f64::NAN),
            if r.polarized_fraction_defined { r.report.polarized_fraction } else { f64::NAN },
            r.report.active_set.len()
        ));
    }
    fs::write(dir.join("summary.csv"), csv)?;
    Ok(summary)
}

/// Recomputes metrics for already-trained runs in a run directory.
pub fn cmd_metrics(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<RunMetrics>> {
    cfg.validate()?;
    let ds = load_dataset(out_dir, &cfg.dataset)?;
    let (_, _, test) = data::split(&ds, (0.8, 0.1, 0.1), cfg.dataset.seed)?;
    let mut all = Vec::new();
    for &seed in &cfg.seeds {
        let rd = run_dir(out_dir, &cfg.name, seed);
        let ckpt = rd.join("model.txt");
        if !ckpt.exists() {
            return Err(ExperimentError::MissingDataset(ckpt));
        }
        let model = models::read_model(std::io::BufReader::new(fs::File::open(&ckpt)?))?;
        let trace = read_trace_csv(&rd.join("trace.csv"))?;
        let run = RunResult { seed, model, trace, diverged: None };
        let rm = compute_run_metrics(cfg, &run, &test)?;
        fs::write(rd.join("metrics.json"), serde_json::to_string_pretty(&rm)?)?;
        all.push(rm);
    }
    write_summary(cfg, &all, out_dir)?;
    Ok(all)
}

/// One row of a beta sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub disentanglement: Option<AggregateStat>,
    pub dto: Option<AggregateStat>,
    pub active_count: Option<AggregateStat>,
    /// Active coordinates dropped below the factor count: overpruning.
    pub overpruned: bool,
    /// Marks the beta the base config chose.
    pub chosen: bool,
}

/// Runs the config once per beta and aggregates score-vs-beta tables.
/// Emits plot-ready two-column files and a plotting stub alongside.
pub fn cmd_sweep_beta(
    cfg: &ExperimentConfig,
    betas: &[f64],
    out_dir: &Path,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if betas.is_empty() {
        return Err(ExperimentError::Config("beta list must not be empty".into()));
    }
    let ds = load_dataset(out_dir, &cfg.dataset)?;
    let (train, eval, test) = data::split(&ds, (0.8, 0.1, 0.1), cfg.dataset.seed)?;
    let factor_count = test.factor_count();

    let mut rows = Vec::new();
    for &beta in betas {
        let mut sub = cfg.clone();
        sub.beta = beta;
        sub.name = format!("{}_beta_{beta:e}", cfg.name);
        let runs = run_all_seeds(&sub, &train.inputs, &eval.inputs, &test, jobs, Some(out_dir))?;
        write_summary(&sub, &runs, out_dir)?;
        let summary = summarize(&sub, &runs);
        let overpruned = summary
            .active_count
            .as_ref()
            .map(|a| a.mean < factor_count as f64)
            .unwrap_or(false);
        rows.push(SweepRow {
            beta,
            disentanglement: summary.disentanglement,
            dto: summary.dto,
            active_count: summary.active_count,
            overpruned,
            chosen: beta == cfg.beta,
        });
    }

    let sweep_dir = out_dir.join("runs").join(format!("{}_beta_sweep", cfg.name));
    fs::create_dir_all(&sweep_dir)?;
    fs::write(sweep_dir.join("sweep.json"), serde_json::to_string_pretty(&rows)?)?;
    let mut disent_dat = String::new();
    let mut dto_dat = String::new();
    for r in &rows {
        let marker = if r.chosen { " # chosen" } else { "" };
        let disent_mean = r.disentanglement.as_ref().map(|d| d.mean).unwrap_or(f64::NAN);
        let dto_mean = r.dto.as_ref().map(|d| d.mean).unwrap_or(f64::NAN);
        disent_dat.push_str(&format!("{} {}{}\n", r.beta, disent_mean, marker));
        dto_dat.push_str(&format!("{} {}{}\n", r.beta, dto_mean, marker));
    }
    fs::write(sweep_dir.join("beta_disent.dat"), disent_dat)?;
    fs::write(sweep_dir.join("beta_dto.dat"), dto_dat)?;
    fs::write(sweep_dir.join("plot.py"), PLOT_STUB)?;
    Ok(rows)
}

const PLOT_STUB: &str = r#"#!/usr/bin/env python3
"""Plot stub for beta sweeps: score and DtO against beta (log x)."""
import matplotlib.pyplot as plt

def load(path):
    xs, ys = [], []
    for line in open(path):
        parts = line.split('#')[0].split()
        if len(parts) >= 2:
            xs.append(float(parts[0])); ys.append(float(parts[1]))
    return xs, ys

fig, (top, bottom) = plt.subplots(2, 1, sharex=True)
for ax, name, label in [(top, 'beta_disent.dat', 'Disentanglement'),
                        (bottom, 'beta_dto.dat', 'DtO')]:
    xs, ys = load(name)
    ax.plot(xs, ys, marker='o')
    ax.set_xscale('log')
    ax.set_ylabel(label)
bottom.set_xlabel('beta')
fig.savefig('beta_sweep.png', dpi=150)
"#;

/// Reads every summary under `runs/` and renders an aligned table.
pub fn cmd_report(out_dir: &Path) -> Result<String> {
    let runs_dir = out_dir.join("runs");
    let mut summaries: Vec<Summary> = Vec::new();
    if runs_dir.exists() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&runs_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for dir in entries {
            let f = dir.join("summary.json");
            if f.exists() {
                summaries.push(serde_json::from_str(&fs::read_to_string(f)?)?);
            }
        }
    }
    let mut out = String::new();
    out.push_str(&format!("loss convention: {LOSS_CONVENTION}\n"));
    out.push_str(&format!(
        "{:<34} {:>12} {:>6} {:>16} {:>16} {:>16} {:>16}\n",
        "name", "kind", "seeds", "DtO", "Disent", "Polarized", "RandomDec DtO"
    ));
    let fmt = |s: &Option<AggregateStat>| match s {
        Some(a) => format!("{:.3} \u{b1} {:.3}", a.mean, a.std),
        None => "--".into(),
    };
    for s in &summaries {
        out.push_str(&format!(
            "{:<34} {:>12} {:>6} {:>16} {:>16} {:>16} {:>16}\n",
            s.name,
            s.model_kind.name(),
            s.seeds.len(),
            fmt(&s.dto),
            fmt(&s.disentanglement),
            fmt(&s.polarized_fraction),
            fmt(&s.random_decoder_dto),
        ));
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.txt"), &out)?;
    Ok(out)
}

/// Outcome of one theory-check item.
#[derive(Debug, Clone, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub residual: f64,
    pub detail: String,
}

/// Runs the worked-example and optimization-property suite and writes a
/// certificate dump. Any failed line is an error for the caller to turn
/// into a nonzero exit.
pub fn cmd_theory_check(out_dir: &Path) -> Result<Vec<CheckLine>> {
    let mut lines = Vec::new();
    let m1 = Matrix::from_rows(&[vec![4.0, 1.0], vec![-3.0, 1.0], vec![5.0, -1.0]]).unwrap();
    let m2 = m1.matmul_bt(&crate::linalg::rotation_2d(std::f64::consts::FRAC_PI_4));

    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);

    // precision-budget worked examples
    let cx = theory::expected_stochastic_loss(&m1, &[1.0, 0.0])?;
    let cy = theory::expected_stochastic_loss(&m1, &[0.0, 1.0])?;
    let r = rel(cx, 50.0).max(rel(cy, 3.0));
    lines.push(CheckLine {
        name: "stochastic-loss coefficients (first example)".into(),
        passed: r <= 1e-9,
        residual: r,
        detail: format!("coefficients ({cx}, {cy}) vs (50, 3)"),
    });

    let cx2 = theory::expected_stochastic_loss(&m2, &[1.0, 0.0])?;
    let cy2 = theory::expected_stochastic_loss(&m2, &[0.0, 1.0])?;
    let r = rel(cx2, 30.5).max(rel(cy2, 22.5));
    lines.push(CheckLine {
        name: "stochastic-loss coefficients (rotated example)".into(),
        passed: r <= 1e-9,
        residual: r,
        detail: format!("coefficients ({cx2}, {cy2}) vs (30.5, 22.5)"),
    });

    for (name, m, expect) in [
        ("optimal budget minimum (first example)", &m1, 2.0 * 150.0_f64.sqrt()),
        ("optimal budget minimum (rotated example)", &m2, 2.0 * (61.0 * 45.0 / 4.0_f64).sqrt()),
    ] {
        let mut worst = 0.0_f64;
        for budget in [0.0, 1.0, 2.5] {
            let (_, min) = theory::optimal_sigmas(m, budget)?;
            worst = worst.max(rel(min, expect * (-budget).exp()));
        }
        lines.push(CheckLine {
            name: name.into(),
            passed: worst <= 1e-9,
            residual: worst,
            detail: format!("target {expect} * exp(-budget)"),
        });
    }

    // bound tightness and convergence on random problems
    let mut worst_gap = 0.0_f64;
    let mut worst_residual = 0.0_f64;
    let mut certificate = None;
    for seed in 0..20u64 {
        let p = theory::random_problem(
            1000 + seed,
            3 + (seed % 6) as usize + 2,
            2 + (seed % 3) as usize,
            1 + (seed % 5) as usize,
            (seed as f64) / 4.0 - 2.0,
        )?;
        let bound = theory::global_lower_bound(&p)?;
        let mut rng = seeded_rng(2000 + seed, 0);
        let asg = theory::Assignment::random(&p, &mut rng);
        let cert = theory::improve_to_certificate(&p, asg, 500_000)?;
        worst_gap = worst_gap.max(rel(cert.achieved_objective, bound));
        worst_residual = worst_residual
            .max(cert.orthogonality_residuals.iter().copied().fold(0.0, f64::max));
        if certificate.is_none() {
            certificate = Some(cert);
        }
    }
    lines.push(CheckLine {
        name: "local improvement certifies the closed-form bound".into(),
        passed: worst_gap <= tol::IMPROVEMENT_CONVERGENCE_REL,
        residual: worst_gap,
        detail: "20 random problems, one random start each".into(),
    });
    lines.push(CheckLine {
        name: "certified states have orthogonal columns".into(),
        passed: worst_residual <= 1e-6,
        residual: worst_residual,
        detail: "max normalized off-diagonal Gram entry".into(),
    });

    let cert_dir = out_dir.join("certificates");
    fs::create_dir_all(&cert_dir)?;
    fs::write(
        cert_dir.join("isolated_problem.json"),
        serde_json::to_string_pretty(&certificate)?,
    )?;

    if lines.iter().all(|l| l.passed) {
        Ok(lines)
    } else {
        let failed: Vec<String> =
            lines.iter().filter(|l| !l.passed).map(|l| l.name.clone()).collect();
        Err(ExperimentError::CertificateFailed(failed.join("; ")))
    }
}
