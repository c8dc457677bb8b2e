//! Synthetic dataset generation and persistence.
//!
//! Two generators embed the uniform unit square into a higher-dimensional
//! space: a linear map (stretch, trivial embedding, 3D rotation) and a
//! seeded random one-hidden-layer tanh MLP. Factors are stored as the raw
//! pre-stretch square coordinates; the stretch belongs to the embedding.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::nets::{Activation, MlpNetwork};
use crate::rng::{seeded_rng, stream};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(String),
    #[error("net: {0}")]
    Net(#[from] crate::nets::NetError),
    #[error("invalid: {0}")]
    Invalid(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub const DEFAULT_SAMPLES: usize = 50_000;
pub const DEFAULT_STRETCH_RATIO: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Continuous,
    Discrete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Linear,
    Nonlinear,
}

/// Everything needed to regenerate a dataset, persisted as the sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub seed: u64,
    /// Stretch applied to the first factor before embedding (linear kind).
    pub ratio: f64,
    pub samples: usize,
    /// Checkpoint of the generator MLP (nonlinear kind), stored inline.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlp_checkpoint: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    /// N x n embedded inputs.
    pub inputs: Matrix,
    /// N x F generating factors (raw unit-square coordinates).
    pub factors: Matrix,
    pub factor_kinds: Vec<FactorKind>,
    pub spec: GeneratorSpec,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn factor_count(&self) -> usize {
        self.factors.cols()
    }

    /// Row subset in the given index order.
    pub fn subset(&self, indices: &[usize]) -> SyntheticDataset {
        let inputs = Matrix::from_fn(indices.len(), self.input_dim(), |i, j| {
            self.inputs.get(indices[i], j)
        });
        let factors = Matrix::from_fn(indices.len(), self.factor_count(), |i, j| {
            self.factors.get(indices[i], j)
        });
        SyntheticDataset {
            inputs,
            factors,
            factor_kinds: self.factor_kinds.clone(),
            spec: self.spec.clone(),
        }
    }
}

/// The 3x2 embedding matrix of the linear task: stretch the first factor by
/// `ratio`, embed into the xy-plane, rotate 45 degrees about (1,-1,1)/sqrt(3)
/// (right-handed, Rodrigues form). Columns stay orthogonal with norms
/// `ratio` and 1.
pub fn linear_embedding_matrix(ratio: f64) -> Matrix {
    let axis = {
        let n = (3.0_f64).sqrt();
        [1.0 / n, -1.0 / n, 1.0 / n]
    };
    let theta = std::f64::consts::FRAC_PI_4;
    let (sin, cos) = theta.sin_cos();
    // Rodrigues: R = cos I + sin [u]_x + (1 - cos) u u^T
    let mut r = Matrix::zeros(3, 3);
    let cross = [
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ];
    for i in 0..3 {
        for j in 0..3 {
            let mut v = sin * cross[i][j] + (1.0 - cos) * axis[i] * axis[j];
            if i == j {
                v += cos;
            }
            r.set(i, j, v);
        }
    }
    // embed (w1, w2) -> (ratio * w1, w2, 0), then rotate
    let embed = Matrix::from_rows(&[vec![ratio, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
    r.matmul(&embed)
}

/// Linear synthetic dataset: uniform unit-square factors pushed through
/// `linear_embedding_matrix(ratio)`.
pub fn generate_linear(seed: u64, ratio: f64, samples: usize) -> Result<SyntheticDataset> {
    if ratio <= 0.0 {
        return Err(DataError::Invalid(format!("ratio must be positive, got {ratio}")));
    }
    let mut rng = seeded_rng(seed, stream::DATASET);
    let map = linear_embedding_matrix(ratio);
    let mut factors = Matrix::zeros(samples, 2);
    let mut inputs = Matrix::zeros(samples, 3);
    for i in 0..samples {
        let w1: f64 = rng.gen_range(0.0..1.0);
        let w2: f64 = rng.gen_range(0.0..1.0);
        factors.set(i, 0, w1);
        factors.set(i, 1, w2);
        let x = map.matvec(&[w1, w2]);
        inputs.row_mut(i).copy_from_slice(&x);
    }
    Ok(SyntheticDataset {
        inputs,
        factors,
        factor_kinds: vec![FactorKind::Continuous; 2],
        spec: GeneratorSpec {
            kind: GeneratorKind::Linear,
            seed,
            ratio,
            samples,
            mlp_checkpoint: None,
        },
    })
}

/// Nonlinear synthetic dataset: unit-square factors through a seeded random
/// MLP with one hidden tanh layer of width 10, mapping into R^6.
///
/// The generator draws weights uniform in +-2 and biases uniform in +-1.
/// At this scale the tanh units operate well inside their curved region,
/// so the embedding is genuinely nonlinear over the unit square (about 20%
/// of its variance escapes the best linear fit) while the local Jacobian
/// keeps rank 2 everywhere. Zero-bias inits leave the map effectively
/// linear, which defeats the purpose of this task.
pub fn generate_nonlinear(seed: u64, samples: usize) -> Result<SyntheticDataset> {
    let mut init_rng = seeded_rng(seed, stream::WEIGHT_INIT);
    let generator = random_generator_mlp(&mut init_rng);
    generate_nonlinear_with(seed, samples, &generator)
}

fn random_generator_mlp(rng: &mut impl Rng) -> MlpNetwork {
    const W_BOUND: f64 = 2.0;
    const B_BOUND: f64 = 1.0;
    let mut layer = |rows: usize, cols: usize, activation: Activation| crate::nets::Layer {
        weight: Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-W_BOUND..W_BOUND)),
        bias: (0..rows).map(|_| rng.gen_range(-B_BOUND..B_BOUND)).collect(),
        activation,
    };
    let layers = vec![layer(10, 2, Activation::Tanh), layer(6, 10, Activation::Linear)];
    MlpNetwork::from_layers(layers).expect("generator chain is consistent")
}

fn generate_nonlinear_with(
    seed: u64,
    samples: usize,
    generator: &MlpNetwork,
) -> Result<SyntheticDataset> {
    let mut rng = seeded_rng(seed, stream::DATASET);
    let mut factors = Matrix::zeros(samples, 2);
    let mut inputs = Matrix::zeros(samples, generator.output_dim());
    for i in 0..samples {
        let w1: f64 = rng.gen_range(0.0..1.0);
        let w2: f64 = rng.gen_range(0.0..1.0);
        factors.set(i, 0, w1);
        factors.set(i, 1, w2);
        let x = generator.forward(&[w1, w2])?;
        inputs.row_mut(i).copy_from_slice(&x);
    }
    let mut ckpt = Vec::new();
    generator.write_checkpoint(&mut ckpt)?;
    Ok(SyntheticDataset {
        inputs,
        factors,
        factor_kinds: vec![FactorKind::Continuous; 2],
        spec: GeneratorSpec {
            kind: GeneratorKind::Nonlinear,
            seed,
            ratio: 1.0,
            samples,
            mlp_checkpoint: Some(String::from_utf8(ckpt).expect("checkpoint is ascii")),
        },
    })
}

pub fn generate(spec: &GeneratorSpec) -> Result<SyntheticDataset> {
    match spec.kind {
        GeneratorKind::Linear => generate_linear(spec.seed, spec.ratio, spec.samples),
        GeneratorKind::Nonlinear => generate_nonlinear(spec.seed, spec.samples),
    }
}

/// Disjoint, exhaustive seeded split. Sizes are rounded so they sum to the
/// dataset length, with the remainder going to the first part.
pub fn split(
    ds: &SyntheticDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(SyntheticDataset, SyntheticDataset, SyntheticDataset)> {
    let (f1, f2, f3) = fractions;
    if (f1 + f2 + f3 - 1.0).abs() > 1e-9 || f1 < 0.0 || f2 < 0.0 || f3 < 0.0 {
        return Err(DataError::Invalid(format!("fractions must sum to 1, got {fractions:?}")));
    }
    let n = ds.len();
    let n2 = (f2 * n as f64).round() as usize;
    let n3 = (f3 * n as f64).round() as usize;
    let n1 = n - n2 - n3;

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(seed, stream::SPLIT);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let train = ds.subset(&order[..n1]);
    let eval = ds.subset(&order[n1..n1 + n2]);
    let test = ds.subset(&order[n1 + n2..]);
    Ok((train, eval, test))
}

/// Writes `<path>.csv` (header `w1..wF,x1..xn`, one row per sample) and
/// `<path>.json` (the generator sidecar).
pub fn write_dataset(ds: &SyntheticDataset, path_stem: &Path) -> Result<()> {
    if let Some(dir) = path_stem.parent() {
        fs::create_dir_all(dir)?;
    }
    let csv_path = path_stem.with_extension("csv");
    let mut w = BufWriter::new(fs::File::create(&csv_path)?);
    let mut header: Vec<String> = (1..=ds.factor_count()).map(|i| format!("w{i}")).collect();
    header.extend((1..=ds.input_dim()).map(|i| format!("x{i}")));
    writeln!(w, "{}", header.join(","))?;
    for i in 0..ds.len() {
        let mut fields: Vec<String> = ds.factors.row(i).iter().map(|v| v.to_string()).collect();
        fields.extend(ds.inputs.row(i).iter().map(|v| v.to_string()));
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;

    let sidecar_path = path_stem.with_extension("json");
    let json = serde_json::to_string_pretty(&ds.spec)?;
    fs::write(sidecar_path, json)?;
    Ok(())
}

pub fn read_dataset(path_stem: &Path) -> Result<SyntheticDataset> {
    let sidecar_path = path_stem.with_extension("json");
    let spec: GeneratorSpec = serde_json::from_str(&fs::read_to_string(&sidecar_path)?)?;

    let csv_path = path_stem.with_extension("csv");
    let reader = BufReader::new(fs::File::open(&csv_path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| DataError::Parse("empty dataset file".into()))??;
    let columns: Vec<&str> = header.split(',').collect();
    let factor_count = columns.iter().filter(|c| c.starts_with('w')).count();
    let input_dim = columns.len() - factor_count;
    if factor_count == 0 || input_dim == 0 {
        return Err(DataError::Parse(format!("bad dataset header '{header}'")));
    }

    let mut factors = Vec::new();
    let mut inputs = Vec::new();
    let mut rows = 0;
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        for _ in 0..factor_count {
            let f = fields
                .next()
                .ok_or_else(|| DataError::Parse("short row".into()))?;
            factors.push(f.parse::<f64>().map_err(|e| DataError::Parse(e.to_string()))?);
        }
        for _ in 0..input_dim {
            let f = fields
                .next()
                .ok_or_else(|| DataError::Parse("short row".into()))?;
            inputs.push(f.parse::<f64>().map_err(|e| DataError::Parse(e.to_string()))?);
        }
        if fields.next().is_some() {
            return Err(DataError::Parse("long row".into()));
        }
        rows += 1;
    }
    Ok(SyntheticDataset {
        inputs: Matrix::from_vec(rows, input_dim, inputs)
            .map_err(|e| DataError::Parse(e.to_string()))?,
        factors: Matrix::from_vec(rows, factor_count, factors)
            .map_err(|e| DataError::Parse(e.to_string()))?,
        factor_kinds: vec![FactorKind::Continuous; factor_count],
        spec,
    })
}

/// Restores the nonlinear generator MLP from a sidecar.
pub fn generator_mlp(spec: &GeneratorSpec) -> Result<Option<MlpNetwork>> {
    match &spec.mlp_checkpoint {
        None => Ok(None),
        Some(text) => {
            let mut lines = BufReader::new(text.as_bytes()).lines();
            Ok(Some(MlpNetwork::read_checkpoint(&mut lines)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{eigh_symmetric, svd};

    #[test]
    fn linear_map_is_linear_and_column_orthogonal() {
        let m = linear_embedding_matrix(2.0);
        // linearity of the composed map
        let u = [0.3, 0.9];
        let v = [-0.5, 0.2];
        let (a, b) = (1.7, -0.4);
        let lhs = m.matvec(&[a * u[0] + b * v[0], a * u[1] + b * v[1]]);
        let mu = m.matvec(&u);
        let mv = m.matvec(&v);
        for i in 0..3 {
            assert!((lhs[i] - (a * mu[i] + b * mv[i])).abs() <= 1e-12);
        }
        // orthogonal columns with norms ratio and 1
        let g = m.gram();
        assert!((g.get(0, 0) - 4.0).abs() <= 1e-12);
        assert!((g.get(1, 1) - 1.0).abs() <= 1e-12);
        assert!(g.get(0, 1).abs() <= 1e-12);
    }

    #[test]
    fn ratio_one_gives_degenerate_singular_values() {
        let m = linear_embedding_matrix(1.0);
        let f = svd(&m).unwrap();
        assert!((f.sigma[0] - f.sigma[1]).abs() <= 1e-12);
    }

    #[test]
    fn linear_dataset_covariance_spectrum() {
        let ds = generate_linear(3, 2.0, DEFAULT_SAMPLES).unwrap();
        assert_eq!(ds.len(), 50_000);
        let n = ds.len() as f64;
        let mut mean = vec![0.0; 3];
        for i in 0..ds.len() {
            for j in 0..3 {
                mean[j] += ds.inputs.get(i, j) / n;
            }
        }
        let mut cov = Matrix::zeros(3, 3);
        for i in 0..ds.len() {
            for a in 0..3 {
                for b in 0..3 {
                    let va = ds.inputs.get(i, a) - mean[a];
                    let vb = ds.inputs.get(i, b) - mean[b];
                    cov.set(a, b, cov.get(a, b) + va * vb / (n - 1.0));
                }
            }
        }
        let (evals, _) = eigh_symmetric(&cov).unwrap();
        let expect = [4.0 / 12.0, 1.0 / 12.0];
        for (got, want) in evals.iter().zip(expect.iter()) {
            assert!((got - want).abs() / want <= 0.02, "{got} vs {want}");
        }
        assert!(evals[2].abs() <= 1e-10);
    }

    #[test]
    fn nonlinear_dataset_shape_and_determinism() {
        let a = generate_nonlinear(5, 300).unwrap();
        let b = generate_nonlinear(5, 300).unwrap();
        assert_eq!(a.input_dim(), 6);
        assert_eq!(a.factor_count(), 2);
        assert_eq!(a.inputs.data(), b.inputs.data());
        assert_eq!(a.factors.data(), b.factors.data());
        let c = generate_nonlinear(6, 300).unwrap();
        assert_ne!(a.inputs.data(), c.inputs.data());
    }

    #[test]
    fn nonlinear_generator_jacobian_has_rank_two() {
        let ds = generate_nonlinear(7, 10).unwrap();
        let generator = generator_mlp(&ds.spec).unwrap().unwrap();
        let h = 1e-5;
        let mut rng = seeded_rng(9, 0);
        for _ in 0..100 {
            let w = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            // finite-difference Jacobian of the generator
            let mut j = Matrix::zeros(6, 2);
            for c in 0..2 {
                let mut wp = w;
                wp[c] += h;
                let mut wm = w;
                wm[c] -= h;
                let fp = generator.forward(&wp).unwrap();
                let fm = generator.forward(&wm).unwrap();
                for r in 0..6 {
                    j.set(r, c, (fp[r] - fm[r]) / (2.0 * h));
                }
            }
            let f = svd(&j).unwrap();
            assert!(f.sigma[1] > 1e-6 * f.sigma[0], "rank-deficient generator at {w:?}");
        }
    }

    #[test]
    fn split_sizes_and_exhaustiveness() {
        let ds = generate_linear(11, 2.0, 1000).unwrap();
        let (train, eval, test) = split(&ds, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!(train.len(), 800);
        assert_eq!(eval.len(), 100);
        assert_eq!(test.len(), 100);

        // union equals the dataset (compare as multisets of first coordinates)
        let mut all: Vec<u64> = Vec::new();
        for part in [&train, &eval, &test] {
            for i in 0..part.len() {
                all.push(part.inputs.get(i, 0).to_bits());
            }
        }
        let mut orig: Vec<u64> = (0..ds.len()).map(|i| ds.inputs.get(i, 0).to_bits()).collect();
        all.sort_unstable();
        orig.sort_unstable();
        assert_eq!(all, orig);

        // different seed, same sizes, different partition
        let (train2, _, _) = split(&ds, (0.8, 0.1, 0.1), 4).unwrap();
        assert_eq!(train2.len(), 800);
        let same = (0..train.len())
            .all(|i| train.inputs.get(i, 0).to_bits() == train2.inputs.get(i, 0).to_bits());
        assert!(!same);
    }

    #[test]
    fn default_split_sizes_at_50000() {
        let ds = generate_linear(1, 2.0, DEFAULT_SAMPLES).unwrap();
        let (train, eval, test) = split(&ds, (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((train.len(), eval.len(), test.len()), (40_000, 5_000, 5_000));
    }

    #[test]
    fn dataset_roundtrip_is_value_identical() {
        let dir = tempfile::tempdir().unwrap();
        for ds in [
            generate_linear(13, 1.5, 200).unwrap(),
            generate_nonlinear(13, 150).unwrap(),
        ] {
            let stem = dir.path().join("ds");
            write_dataset(&ds, &stem).unwrap();
            let back = read_dataset(&stem).unwrap();
            assert_eq!(ds.inputs.data(), back.inputs.data());
            assert_eq!(ds.factors.data(), back.factors.data());
            assert_eq!(ds.spec.seed, back.spec.seed);
            assert_eq!(ds.spec.ratio, back.spec.ratio);
            // nonlinear generator survives the sidecar
            if let Some(gen) = generator_mlp(&back.spec).unwrap() {
                let orig = generator_mlp(&ds.spec).unwrap().unwrap();
                let y0 = orig.forward(&[0.25, 0.75]).unwrap();
                let y1 = gen.forward(&[0.25, 0.75]).unwrap();
                assert_eq!(y0, y1);
            }
        }
    }
}
