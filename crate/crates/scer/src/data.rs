//! Seeded generators for group-conditional Gaussian datasets and the
//! featurized color surrogate with extreme spurious correlation and omitted
//! subpopulations.
//!
//! Every generator is a pure function of `(spec, seed)`: the same inputs give
//! byte-identical datasets, which the CLI relies on for reproducible output
//! files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{SpdMatrix, Vector};

/// A `(class, domain)` pair identifying a subpopulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub class: usize,
    pub domain: usize,
}

impl GroupKey {
    pub fn new(class: usize, domain: usize) -> Self {
        Self { class, domain }
    }

    /// Row-major position in a `num_classes x num_domains` table.
    pub fn index(&self, num_domains: usize) -> usize {
        self.class * num_domains + self.domain
    }

    pub fn from_index(index: usize, num_domains: usize) -> Self {
        Self {
            class: index / num_domains,
            domain: index % num_domains,
        }
    }
}

/// All group keys of an `m x k` layout in row-major order.
pub fn group_keys(num_classes: usize, num_domains: usize) -> Vec<GroupKey> {
    (0..num_classes * num_domains)
        .map(|i| GroupKey::from_index(i, num_domains))
        .collect()
}

/// Per-group means, shared covariance, and a probability table over groups.
///
/// Zero-probability entries encode subpopulations that are never sampled
/// (extreme spurious correlation).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupGaussianSpec {
    pub num_classes: usize,
    pub num_domains: usize,
    /// Row-major by group index: `means[class * num_domains + domain]`.
    pub means: Vec<Vector>,
    pub covariance: SpdMatrix,
    /// Row-major by group index; sums to 1, zeros allowed.
    pub group_probs: Vec<f64>,
}

impl GroupGaussianSpec {
    pub fn validate(&self) -> Result<()> {
        let groups = self.num_classes * self.num_domains;
        if self.means.len() != groups {
            return Err(Error::DimensionMismatch {
                expected: groups,
                got: self.means.len(),
            });
        }
        if self.group_probs.len() != groups {
            return Err(Error::DimensionMismatch {
                expected: groups,
                got: self.group_probs.len(),
            });
        }
        let dim = self.covariance.dim();
        for m in &self.means {
            if m.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: m.dim(),
                });
            }
        }
        if self.group_probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::InvalidProbabilities {
                context: "group probabilities must be finite and >= 0".into(),
            });
        }
        let total: f64 = self.group_probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidProbabilities {
                context: format!("group probabilities sum to {total}, expected 1"),
            });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.covariance.dim()
    }

    pub fn mean(&self, key: GroupKey) -> &Vector {
        &self.means[key.index(self.num_domains)]
    }
}

/// Where a dataset came from: the generator seed and a digest of its spec.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub spec_digest: String,
}

/// Features, labels, and domain attributes with shared indexing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    pub num_classes: usize,
    pub num_domains: usize,
    pub features: Vec<Vector>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.labels.len() || self.labels.len() != self.domains.len() {
            return Err(Error::Schema {
                context: "features/labels/domains length mismatch".into(),
            });
        }
        for (&y, &d) in self.labels.iter().zip(&self.domains) {
            if y >= self.num_classes || d >= self.num_domains {
                return Err(Error::Schema {
                    context: format!(
                        "label/domain ({y},{d}) out of bounds for ({}, {})",
                        self.num_classes, self.num_domains
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vector::dim)
    }

    pub fn group_key(&self, i: usize) -> GroupKey {
        GroupKey::new(self.labels[i], self.domains[i])
    }

    /// Sample counts per group, row-major.
    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes * self.num_domains];
        for i in 0..self.len() {
            counts[self.group_key(i).index(self.num_domains)] += 1;
        }
        counts
    }
}

/// SHA-256 hex digest of a value's canonical JSON form.
pub fn spec_digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("spec serialization cannot fail");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Draws `n` samples: group from the probability table, then
/// `x = mu + L z` with `z` standard normal and `L` the Cholesky factor of the
/// shared covariance.
pub fn sample_group_gaussian(spec: &GroupGaussianSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::EmptyInput {
            context: "sample_group_gaussian needs n >= 1".into(),
        });
    }
    let chol = spec.covariance.cholesky()?;
    let dim = spec.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut domains = Vec::with_capacity(n);
    let mut z = vec![0.0f64; dim];
    for _ in 0..n {
        let key = sample_group(&spec.group_probs, spec.num_domains, &mut rng);
        for zi in &mut z {
            *zi = rng.sample(StandardNormal);
        }
        let mut x = chol.mul_lower(&z);
        x.axpy(1.0, spec.mean(key));
        features.push(x);
        labels.push(key.class);
        domains.push(key.domain);
    }
    Ok(Dataset {
        num_classes: spec.num_classes,
        num_domains: spec.num_domains,
        features,
        labels,
        domains,
        provenance: Provenance {
            seed,
            spec_digest: spec_digest(spec),
        },
    })
}

fn sample_group(probs: &[f64], num_domains: usize, rng: &mut ChaCha8Rng) -> GroupKey {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
        }
        acc += p;
        if u < acc {
            return GroupKey::from_index(i, num_domains);
        }
    }
    // u landed in the rounding slack at the top; attribute it to the last
    // group with positive probability so zero groups stay exactly empty
    GroupKey::from_index(last_nonzero, num_domains)
}

/// Construction parameters for the featurized color benchmark: a core
/// coordinate tied to the clean label, a spurious coordinate tied to the
/// color, and pure-noise padding.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ColorSurrogateSpec {
    /// Probability that the color agrees with the (noisy) label in training.
    pub rho_train: f64,
    /// Same for the test split; below 0.5 reverses the training correlation.
    pub rho_test: f64,
    /// Probability that the observed label differs from the clean class.
    pub label_noise: f64,
    pub core_scale: f64,
    pub spur_scale: f64,
    pub noise_dims: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// When set, training draws `(label, color)` from this normalized 2x2
    /// table (row-major) instead of the rho chain; zeros omit a subpopulation
    /// entirely. Validation and test keep their rho-driven construction.
    pub train_group_weights: Option<[f64; 4]>,
}

impl Default for ColorSurrogateSpec {
    fn default() -> Self {
        Self {
            rho_train: 0.9,
            rho_test: 0.1,
            label_noise: 0.25,
            core_scale: 2.0,
            spur_scale: 2.0,
            noise_dims: 8,
            n_train: 20_000,
            n_val: 5_000,
            n_test: 20_000,
            train_group_weights: None,
        }
    }
}

impl ColorSurrogateSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("rho_train", self.rho_train),
            ("rho_test", self.rho_test),
            ("label_noise", self.label_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig {
                    path: name.into(),
                    message: format!("probability {p} outside [0,1]"),
                });
            }
        }
        if self.core_scale <= 0.0 || self.spur_scale < 0.0 {
            return Err(Error::InvalidConfig {
                path: "core_scale/spur_scale".into(),
                message: "scales must be positive (spur_scale may be 0 for ablations)".into(),
            });
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::InvalidConfig {
                path: "n_train/n_test".into(),
                message: "split sizes must be >= 1".into(),
            });
        }
        if let Some(w) = &self.train_group_weights {
            make_omitted_group_probs(*w)?;
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        2 + self.noise_dims
    }
}

/// Normalizes four nonnegative weights into a probability table over the
/// `(label, color)` groups in row-major order, preserving zeros exactly.
pub fn make_omitted_group_probs(weights: [f64; 4]) -> Result<Vec<f64>> {
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidProbabilities {
            context: "weights must be finite and >= 0".into(),
        });
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidProbabilities {
            context: "weights must sum to a positive value".into(),
        });
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

fn sign_of(bit: usize) -> f64 {
    if bit == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Builds the train/val/test splits of the color surrogate.
///
/// Per sample: clean class `c` uniform; observed label `y = c` flipped with
/// probability `label_noise`; color `d = y` flipped with probability
/// `1 - rho` (rho is `rho_train`, 0.5, `rho_test` for the three splits — the
/// validation split is balanced). The feature vector is
/// `(core_scale * s(c) + eps, spur_scale * s(d) + eps, noise...)` with
/// `s(0) = -1`, `s(1) = +1` and unit Gaussian noise everywhere.
pub fn make_color_surrogate(
    spec: &ColorSurrogateSpec,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let digest = spec_digest(spec);
    let train = surrogate_split(spec, seed, 0, spec.n_train, SplitKind::Train, &digest)?;
    let val = surrogate_split(spec, seed, 1, spec.n_val, SplitKind::Val, &digest)?;
    let test = surrogate_split(spec, seed, 2, spec.n_test, SplitKind::Test, &digest)?;
    Ok((train, val, test))
}

#[derive(Clone, Copy)]
enum SplitKind {
    Train,
    Val,
    Test,
}

fn surrogate_split(
    spec: &ColorSurrogateSpec,
    seed: u64,
    salt: u64,
    n: usize,
    kind: SplitKind,
    digest: &str,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt);
    let rho = match kind {
        SplitKind::Train => spec.rho_train,
        SplitKind::Val => 0.5,
        SplitKind::Test => spec.rho_test,
    };
    let train_probs = match (kind, &spec.train_group_weights) {
        (SplitKind::Train, Some(w)) => Some(make_omitted_group_probs(*w)?),
        _ => None,
    };
    let dim = spec.feature_dim();
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut domains = Vec::with_capacity(n);
    for _ in 0..n {
        let (c, y, d) = match &train_probs {
            Some(probs) => {
                // draw (y, d) from the explicit table, then the clean class
                // behind y; for balanced classes the joint of (c, y) matches
                // the rho-driven construction
                let key = sample_group(probs, 2, &mut rng);
                let y = key.class;
                let c = if rng.random_bool(spec.label_noise) {
                    1 - y
                } else {
                    y
                };
                (c, y, key.domain)
            }
            None => {
                let c = usize::from(rng.random_bool(0.5));
                let y = if rng.random_bool(spec.label_noise) {
                    1 - c
                } else {
                    c
                };
                let d = if rng.random_bool(1.0 - rho) { 1 - y } else { y };
                (c, y, d)
            }
        };
        let mut x = Vec::with_capacity(dim);
        let e1: f64 = rng.sample(StandardNormal);
        x.push(spec.core_scale * sign_of(c) + e1);
        let e2: f64 = rng.sample(StandardNormal);
        x.push(spec.spur_scale * sign_of(d) + e2);
        for _ in 0..spec.noise_dims {
            x.push(rng.sample(StandardNormal));
        }
        features.push(Vector::new(x)?);
        labels.push(y);
        domains.push(d);
    }
    Ok(Dataset {
        num_classes: 2,
        num_domains: 2,
        features,
        labels,
        domains,
        provenance: Provenance {
            seed,
            spec_digest: digest.to_string(),
        },
    })
}

// ---------------------------------------------------------------------------
// Serialization: CSV rows plus a JSON manifest, both byte-stable.
// ---------------------------------------------------------------------------

pub const DATASET_CSV_SCHEMA: &str = "# scer-csv v1 dataset";

/// Renders the dataset as CSV with header `y,d,f0,...,f{p-1}` (preceded by a
/// schema-version comment line).
pub fn dataset_to_csv(ds: &Dataset) -> String {
    let dim = ds.dim();
    let mut out = String::new();
    out.push_str(DATASET_CSV_SCHEMA);
    out.push('\n');
    out.push_str("y,d");
    for j in 0..dim {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for i in 0..ds.len() {
        out.push_str(&format!("{},{}", ds.labels[i], ds.domains[i]));
        for v in ds.features[i].as_slice() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn write_dataset_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(dataset_to_csv(ds).as_bytes())?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path, num_classes: usize, num_domains: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| Error::Schema {
        context: format!("{}: empty file", path.display()),
    })?;
    let header = if first.starts_with('#') {
        if first != DATASET_CSV_SCHEMA {
            return Err(Error::Schema {
                context: format!("{}: unsupported schema `{first}`", path.display()),
            });
        }
        lines.next().ok_or_else(|| Error::Schema {
            context: format!("{}: missing header", path.display()),
        })?
    } else {
        first
    };
    if !header.starts_with("y,d") {
        return Err(Error::Schema {
            context: format!("{}: expected header starting with `y,d`", path.display()),
        });
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut domains = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let parse_usize = |s: Option<&str>| -> Result<usize> {
            s.and_then(|t| t.parse().ok()).ok_or_else(|| Error::Schema {
                context: format!("{}: bad row {}", path.display(), lineno + 3),
            })
        };
        labels.push(parse_usize(fields.next())?);
        domains.push(parse_usize(fields.next())?);
        let mut x = Vec::new();
        for f in fields {
            x.push(f.parse::<f64>().map_err(|_| Error::Schema {
                context: format!("{}: bad float in row {}", path.display(), lineno + 3),
            })?);
        }
        features.push(Vector::new(x)?);
    }
    let ds = Dataset {
        num_classes,
        num_domains,
        features,
        labels,
        domains,
        provenance: Provenance {
            seed: 0,
            spec_digest: format!("file:{}", path.display()),
        },
    };
    ds.validate()?;
    Ok(ds)
}

/// JSON manifest describing how a dataset file was produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: String,
    pub seed: u64,
    pub spec_digest: String,
    pub num_classes: usize,
    pub num_domains: usize,
    pub rows: usize,
    pub spec: serde_json::Value,
}

pub fn dataset_manifest<T: Serialize>(kind: &str, spec: &T, ds: &Dataset) -> DatasetManifest {
    DatasetManifest {
        kind: kind.to_string(),
        seed: ds.provenance.seed,
        spec_digest: ds.provenance.spec_digest.clone(),
        num_classes: ds.num_classes,
        num_domains: ds.num_domains,
        rows: ds.len(),
        spec: serde_json::to_value(spec).expect("spec serialization cannot fail"),
    }
}

/// How a training run obtains its data: a generator spec or CSV files.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    ColorSurrogate {
        spec: ColorSurrogateSpec,
    },
    GroupGaussian {
        spec: GroupGaussianSpec,
        n_train: usize,
        n_test: usize,
        /// Optional distinct spec for the test split (e.g. all groups
        /// observed when training omits some).
        test_spec: Option<GroupGaussianSpec>,
    },
    Csv {
        train: String,
        test: String,
        num_classes: usize,
        num_domains: usize,
    },
}

impl DatasetConfig {
    /// Materializes `(train, val, test)`; `val` is only produced by the
    /// surrogate generator.
    pub fn materialize(&self, seed: u64) -> Result<(Dataset, Option<Dataset>, Dataset)> {
        match self {
            DatasetConfig::ColorSurrogate { spec } => {
                let (train, val, test) = make_color_surrogate(spec, seed)?;
                Ok((train, Some(val), test))
            }
            DatasetConfig::GroupGaussian {
                spec,
                n_train,
                n_test,
                test_spec,
            } => {
                let train = sample_group_gaussian(spec, *n_train, seed)?;
                let test = sample_group_gaussian(
                    test_spec.as_ref().unwrap_or(spec),
                    *n_test,
                    seed ^ 0x5EED_7E57,
                )?;
                Ok((train, None, test))
            }
            DatasetConfig::Csv {
                train,
                test,
                num_classes,
                num_domains,
            } => {
                let train = read_dataset_csv(Path::new(train), *num_classes, *num_domains)?;
                let test = read_dataset_csv(Path::new(test), *num_classes, *num_domains)?;
                Ok((train, None, test))
            }
        }
    }
}

/// Group frequencies observed in a dataset, as a map for reporting.
pub fn group_frequencies(ds: &Dataset) -> BTreeMap<GroupKey, f64> {
    let counts = ds.group_counts();
    let n = ds.len() as f64;
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (GroupKey::from_index(i, ds.num_domains), c as f64 / n))
        .collect()
}
