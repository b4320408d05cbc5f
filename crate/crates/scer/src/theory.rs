//! Closed-form evaluators for the Gaussian worst-group theory, plus the
//! Monte Carlo estimator that verifies them.
//!
//! Setting: binary labels with two domains, group-conditional Gaussians
//! `x | (y, d) ~ N(mu^(y,d), Sigma)` with a shared covariance, a core
//! difference constant across domains and a spurious difference constant
//! across classes. Under extreme spurious correlation only two of the four
//! cells are observed, the population cross-entropy minimizer points along
//! `Sigma^{-1} (d_core + d_spur)`, and every subgroup error of a linear
//! classifier is an explicit Gaussian CDF value. The multiclass analogue
//! bounds each subgroup error between the worst pairwise margin and the
//! union bound over pairwise margins.
//!
//! Conventions used throughout:
//! - class index 1 is the `+1` label, class index 0 is `-1`;
//! - domain index 0 is the domain positively associated with class 1 in the
//!   extreme-shift construction;
//! - the sign ambiguity of the cross-entropy direction (both `beta` and
//!   `-beta` describe the same decision family) is resolved adversarially:
//!   worst-case quantities take the max over both signs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{spec_digest, GroupGaussianSpec, GroupKey};
use crate::error::{Error, Result};
use crate::model::{predict, SoftmaxHead};
use crate::numerics::{phi, sigma_norm, solve_spd, SpdMatrix, Vector};

/// The binary-setting instance: the two direction vectors and the shared
/// covariance. Absolute mean positions are derived, not stored.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BinaryTheoryInstance {
    pub delta_core: Vector,
    pub delta_spur: Vector,
    pub sigma: SpdMatrix,
}

impl BinaryTheoryInstance {
    pub fn validate(&self) -> Result<()> {
        let dim = self.sigma.dim();
        for (name, v) in [
            ("delta_core", &self.delta_core),
            ("delta_spur", &self.delta_spur),
        ] {
            if v.dim() != dim {
                return Err(Error::InvalidConfig {
                    path: name.into(),
                    message: format!("dimension {} does not match sigma ({dim})", v.dim()),
                });
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.sigma.dim()
    }

    pub fn delta_tilde(&self) -> Vector {
        self.delta_core.add(&self.delta_spur)
    }
}

/// Population cross-entropy direction `Sigma^{-1} (d_core + d_spur)`,
/// unnormalized; callers compare directions only.
pub fn erm_direction(inst: &BinaryTheoryInstance) -> Result<Vector> {
    inst.validate()?;
    let dt = inst.delta_tilde();
    if dt.is_zero() {
        return Err(Error::ZeroDirection {
            context: "delta_core + delta_spur is zero".into(),
        });
    }
    solve_spd(&inst.sigma, &dt)
}

/// Pairwise direction for a multiclass pair: `Sigma^{-1} (core_ij + spur_pq)`.
pub fn multiclass_erm_pair_direction(
    core_ij: &Vector,
    spur_pq: &Vector,
    sigma: &SpdMatrix,
) -> Result<Vector> {
    let sum = core_ij.add(spur_pq);
    if sum.is_zero() {
        return Err(Error::ZeroDirection {
            context: "core_ij + spur_pq is zero".into(),
        });
    }
    solve_spd(sigma, &sum)
}

/// Exact misclassification probability of subgroup `(y, mu)` under the
/// linear sign classifier `f(x) = sign(beta^T x + beta0)`:
/// `Phi(-y (beta^T mu + beta0) / ||beta||_Sigma)`.
pub fn subgroup_error(
    beta: &Vector,
    beta0: f64,
    mu: &Vector,
    sigma: &SpdMatrix,
    y: i8,
) -> Result<f64> {
    if y != 1 && y != -1 {
        return Err(Error::InvalidConfig {
            path: "y".into(),
            message: format!("label must be +1 or -1, got {y}"),
        });
    }
    if beta.is_zero() {
        return Err(Error::ZeroDirection {
            context: "classifier vector is zero".into(),
        });
    }
    let norm = sigma_norm(beta, sigma)?;
    if norm == 0.0 {
        return Err(Error::ZeroDirection {
            context: "classifier vector has zero Sigma-norm".into(),
        });
    }
    let margin = f64::from(y) * (beta.dot(mu) + beta0);
    Ok(phi(-margin / norm))
}

/// Worst-group error of the extreme-shift binary instance for classifier
/// direction `beta`, with the sign ambiguity resolved as a max:
/// `z = beta^T (d_core + d_spur) / (2 ||beta||_Sigma)` and the result is
/// `max(Phi(z), Phi(-z))`. Always at least 1/2, and invariant under
/// `beta -> c beta` for any `c != 0`.
pub fn wge_binary(beta: &Vector, inst: &BinaryTheoryInstance) -> Result<f64> {
    inst.validate()?;
    if beta.is_zero() {
        return Err(Error::ZeroDirection {
            context: "classifier vector is zero".into(),
        });
    }
    let norm = sigma_norm(beta, &inst.sigma)?;
    if norm == 0.0 {
        return Err(Error::ZeroDirection {
            context: "classifier vector has zero Sigma-norm".into(),
        });
    }
    let z = 0.5 * beta.dot(&inst.delta_tilde()) / norm;
    Ok(phi(z).max(phi(-z)))
}

/// The same `z` computed through the per-direction alignment identity
/// `beta^T v / ||beta||_Sigma = cor(beta, v) ||v||_Sigma`; used to assert the
/// decomposition's internal consistency.
pub fn wge_binary_z_via_alignments(beta: &Vector, inst: &BinaryTheoryInstance) -> Result<f64> {
    let norm = sigma_norm(beta, &inst.sigma)?;
    let mag_spur = sigma_norm(&inst.delta_spur, &inst.sigma)?;
    let mag_core = sigma_norm(&inst.delta_core, &inst.sigma)?;
    let cor_of = |delta: &Vector, mag: f64| -> f64 {
        if mag == 0.0 {
            0.0
        } else {
            beta.dot(delta) / (norm * mag)
        }
    };
    // cor * mag reproduces beta^T delta / ||beta|| even when mag == 0,
    // because the term is then exactly zero
    Ok(0.5
        * (cor_of(&inst.delta_spur, mag_spur) * mag_spur
            + cor_of(&inst.delta_core, mag_core) * mag_core))
}

/// The four-cell Gaussian spec realizing the extreme-shift geometry of an
/// instance, centered so the observed pair straddles the origin:
/// observed `(class 1, domain 0)` at `+d_tilde/2` and `(class 0, domain 1)`
/// at `-d_tilde/2` with probability 1/2 each; the two unobserved cells sit
/// at `+-(d_spur - d_core)/2` with probability zero.
pub fn extreme_shift_spec(inst: &BinaryTheoryInstance) -> Result<GroupGaussianSpec> {
    inst.validate()?;
    let dt = inst.delta_tilde();
    let half_dt = dt.scale(0.5);
    let half_gap = inst.delta_spur.sub(&inst.delta_core).scale(0.5);
    let spec = GroupGaussianSpec {
        num_classes: 2,
        num_domains: 2,
        // row-major: (y0,d0), (y0,d1), (y1,d0), (y1,d1)
        means: vec![
            half_gap.clone(),
            half_dt.scale(-1.0),
            half_dt,
            half_gap.scale(-1.0),
        ],
        covariance: inst.sigma.clone(),
        group_probs: vec![0.0, 0.5, 0.5, 0.0],
    };
    spec.validate()?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Multiclass margins and bounds.
// ---------------------------------------------------------------------------

/// Standardized pairwise margins `m_{i->j}` of a softmax head on one
/// subgroup mean.
#[derive(Clone, Debug)]
pub struct MarginTable {
    pub num_classes: usize,
    /// `values[i * num_classes + j]` is `m_{i->j}`; the diagonal is unused.
    pub values: Vec<f64>,
}

impl MarginTable {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.num_classes + j]
    }
}

/// Full ordered-pair margin table for the subgroup whose mean is `mu`:
/// `m_{i->j} = ((beta_i - beta_j)^T mu + (b_i - b_j)) / ||beta_i - beta_j||_Sigma`.
pub fn margin_table(head: &SoftmaxHead, mu: &Vector, sigma: &SpdMatrix) -> Result<MarginTable> {
    let m = head.num_classes();
    let mut values = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let diff = head.columns[i].sub(&head.columns[j]);
            if diff.is_zero() {
                return Err(Error::IdenticalColumns { i, j });
            }
            let norm = sigma_norm(&diff, sigma)?;
            if norm == 0.0 {
                return Err(Error::IdenticalColumns { i, j });
            }
            values[i * m + j] = (diff.dot(mu) + head.biases[i] - head.biases[j]) / norm;
        }
    }
    Ok(MarginTable {
        num_classes: m,
        values,
    })
}

/// Bounds on `P(f(x) != i)` for the subgroup behind a margin table:
/// lower `max_j Phi(-m_{i->j})`, upper `min(1, sum_j Phi(-m_{i->j}))`.
pub fn subgroup_error_bounds(margins: &MarginTable, true_class: usize) -> (f64, f64) {
    let m = margins.num_classes;
    let mut lower = 0.0f64;
    let mut upper = 0.0f64;
    for j in 0..m {
        if j == true_class {
            continue;
        }
        let p = phi(-margins.get(true_class, j));
        lower = lower.max(p);
        upper += p;
    }
    (lower, upper.min(1.0))
}

/// Conservative pairwise-margin lower bound under the least favorable
/// spurious sign: `cor(w, core) ||core||_S - max_s |cor(w, s)| ||s||_S`,
/// with single-vector alignments (so both reduce to `w^T v / ||w||_S`).
pub fn conservative_core_spur_margin(
    pair_dir: &Vector,
    core_ij: &Vector,
    spur_set: &[Vector],
    sigma: &SpdMatrix,
) -> Result<f64> {
    if pair_dir.is_zero() {
        return Err(Error::ZeroDirection {
            context: "pair direction is zero".into(),
        });
    }
    if core_ij.is_zero() {
        return Err(Error::ZeroDirection {
            context: "core difference is zero".into(),
        });
    }
    let norm = sigma_norm(pair_dir, sigma)?;
    if norm == 0.0 {
        return Err(Error::ZeroDirection {
            context: "pair direction has zero Sigma-norm".into(),
        });
    }
    let core_term = pair_dir.dot(core_ij) / norm;
    let worst_spur = spur_set
        .iter()
        .map(|s| (pair_dir.dot(s) / norm).abs())
        .fold(0.0f64, f64::max);
    Ok(core_term - worst_spur)
}

// ---------------------------------------------------------------------------
// Classifiers and Monte Carlo.
// ---------------------------------------------------------------------------

/// Anything that maps a feature vector to a class index.
pub trait Classifier {
    fn classify(&self, x: &Vector) -> usize;
}

/// `sign(beta^T x + beta0)`: positive sign is class 1, negative is class 0,
/// and an exact tie goes to the smaller index.
#[derive(Clone, Debug)]
pub struct LinearSignClassifier {
    pub beta: Vector,
    pub beta0: f64,
}

impl Classifier for LinearSignClassifier {
    fn classify(&self, x: &Vector) -> usize {
        usize::from(self.beta.dot(x) + self.beta0 > 0.0)
    }
}

impl Classifier for SoftmaxHead {
    fn classify(&self, x: &Vector) -> usize {
        predict(self, x)
    }
}

/// Gaussian Bayes (LDA) classifier: `argmax_i x^T Sigma^{-1} mu_i
/// - mu_i^T Sigma^{-1} mu_i / 2 + log pi_i`, ties toward the smaller index.
#[derive(Clone, Debug)]
pub struct BayesClassifier {
    weights: Vec<Vector>,
    constants: Vec<f64>,
}

/// Precomputes the Bayes discriminants for per-class means, a shared
/// covariance, and class priors.
pub fn bayes_predict(
    means: &[Vector],
    sigma: &SpdMatrix,
    priors: &[f64],
) -> Result<BayesClassifier> {
    if means.is_empty() || means.len() != priors.len() {
        return Err(Error::InvalidConfig {
            path: "priors".into(),
            message: "need one prior per class mean".into(),
        });
    }
    if priors.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::InvalidProbabilities {
            context: "priors must be finite and >= 0".into(),
        });
    }
    let total: f64 = priors.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidProbabilities {
            context: format!("priors sum to {total}"),
        });
    }
    let chol = sigma.cholesky()?;
    let mut weights = Vec::with_capacity(means.len());
    let mut constants = Vec::with_capacity(means.len());
    for (mu, &pi) in means.iter().zip(priors) {
        let w = chol.solve(mu)?;
        constants.push(-0.5 * mu.dot(&w) + pi.ln());
        weights.push(w);
    }
    Ok(BayesClassifier { weights, constants })
}

impl Classifier for BayesClassifier {
    fn classify(&self, x: &Vector) -> usize {
        let mut best = 0usize;
        let mut best_score = self.weights[0].dot(x) + self.constants[0];
        for i in 1..self.weights.len() {
            let score = self.weights[i].dot(x) + self.constants[i];
            if score > best_score {
                best = i;
                best_score = score;
            }
        }
        best
    }
}

/// Empirical misclassification rate of one group with its binomial standard
/// error.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GroupErrorEstimate {
    pub error: f64,
    pub std_err: f64,
    pub n: usize,
}

/// Conditional Monte Carlo per group: `n_per_group` fresh draws from every
/// cell of the spec (including zero-probability cells), classified and
/// scored against the cell's class index. Each group gets its own seeded
/// stream, so estimates are independent of evaluation order.
pub fn monte_carlo_group_errors<C: Classifier + ?Sized>(
    spec: &GroupGaussianSpec,
    classifier: &C,
    n_per_group: usize,
    seed: u64,
) -> Result<Vec<GroupErrorEstimate>> {
    spec.validate()?;
    if n_per_group < 1000 {
        return Err(Error::InvalidConfig {
            path: "n_per_group".into(),
            message: format!("need at least 1000 draws per group, got {n_per_group}"),
        });
    }
    let chol = spec.covariance.cholesky()?;
    let dim = spec.dim();
    let groups = spec.num_classes * spec.num_domains;
    let mut out = Vec::with_capacity(groups);
    let mut z = vec![0.0f64; dim];
    for g in 0..groups {
        let key = GroupKey::from_index(g, spec.num_domains);
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (g as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mu = spec.mean(key);
        let mut wrong = 0usize;
        for _ in 0..n_per_group {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            let mut x = chol.mul_lower(&z);
            x.axpy(1.0, mu);
            if classifier.classify(&x) != key.class {
                wrong += 1;
            }
        }
        let p = wrong as f64 / n_per_group as f64;
        out.push(GroupErrorEstimate {
            error: p,
            std_err: (p * (1.0 - p) / n_per_group as f64).sqrt(),
            n: n_per_group,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Random instances for verification runs.
// ---------------------------------------------------------------------------

/// Random SPD matrix with 2-norm condition number at most `cond_max`:
/// eigenvalues log-uniform in `[1, cond_max]` under a random rotation.
pub fn random_spd_with_condition<R: Rng>(rng: &mut R, dim: usize, cond_max: f64) -> SpdMatrix {
    let q = random_rotation(rng, dim);
    let mut eigs: Vec<f64> = (0..dim)
        .map(|_| (rng.random_range(0.0..1.0) * cond_max.ln()).exp())
        .collect();
    // pin the extremes so the condition number is exactly representative
    if dim >= 2 {
        eigs[0] = 1.0;
        eigs[1] = cond_max.max(1.0);
    }
    let mut data = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in i..dim {
            let mut acc = 0.0;
            for k in 0..dim {
                acc += q[i * dim + k] * eigs[k] * q[j * dim + k];
            }
            data[i * dim + j] = acc;
            data[j * dim + i] = acc;
        }
    }
    SpdMatrix::from_entries(
        (0..dim)
            .map(|i| data[i * dim..(i + 1) * dim].to_vec())
            .collect(),
    )
    .expect("constructed symmetric")
}

/// Random orthogonal matrix via Gram-Schmidt on a Gaussian matrix,
/// row-major.
fn random_rotation<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    let mut q = vec![0.0f64; dim * dim];
    for r in 0..dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for prev in 0..r {
            let dot: f64 = (0..dim).map(|i| v[i] * q[prev * dim + i]).sum();
            for i in 0..dim {
                v[i] -= dot * q[prev * dim + i];
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (i, x) in v.iter().enumerate() {
            q[r * dim + i] = x / norm;
        }
    }
    q
}

/// Random vector rescaled to a target Sigma-norm.
pub fn random_direction_with_norm<R: Rng>(
    rng: &mut R,
    sigma: &SpdMatrix,
    target_sigma_norm: f64,
) -> Vector {
    let dim = sigma.dim();
    loop {
        let v = Vector::new((0..dim).map(|_| rng.sample(StandardNormal)).collect())
            .expect("gaussian draws are finite");
        let n = sigma_norm(&v, sigma).expect("dims match");
        if n > 1e-9 {
            return v.scale(target_sigma_norm / n);
        }
    }
}

/// Random binary instance with the stated dimension/condition/magnitude
/// envelope.
pub fn random_binary_instance<R: Rng>(
    rng: &mut R,
    dim: usize,
    cond_max: f64,
    mag_range: (f64, f64),
) -> BinaryTheoryInstance {
    let sigma = random_spd_with_condition(rng, dim, cond_max);
    let mag_core = rng.random_range(mag_range.0..mag_range.1);
    let mag_spur = rng.random_range(mag_range.0..mag_range.1);
    let delta_core = random_direction_with_norm(rng, &sigma, mag_core);
    let delta_spur = random_direction_with_norm(rng, &sigma, mag_spur);
    BinaryTheoryInstance {
        delta_core,
        delta_spur,
        sigma,
    }
}

// ---------------------------------------------------------------------------
// Verification harnesses (shared by the CLI's theory command and the
// acceptance suite).
// ---------------------------------------------------------------------------

/// One worst-group-error check: closed form vs Monte Carlo on the
/// extreme-shift geometry, with the direction's sign ambiguity resolved
/// adversarially on both sides.
#[derive(Clone, Debug, Serialize)]
pub struct BinaryWorstGroupCheck {
    pub instance_digest: String,
    pub dim: usize,
    pub z: f64,
    pub closed_form_wge: f64,
    /// Gap between `z` computed directly and via the alignment identity.
    pub z_identity_gap: f64,
    /// Closed-form per-cell errors for `+beta` (row-major group order).
    pub per_cell_closed: Vec<f64>,
    /// Monte Carlo per-cell errors for `+beta` and for `-beta`.
    pub mc_per_cell: Vec<GroupErrorEstimate>,
    pub mc_per_cell_flipped: Vec<GroupErrorEstimate>,
    /// Worst observed-cell error over both signs, and its standard error.
    pub mc_worst_observed: f64,
    pub mc_worst_se: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Verifies the binary worst-group closed form for the population direction
/// `beta = Sigma^{-1} (d_core + d_spur)` of an instance.
pub fn verify_binary_worst_group(
    inst: &BinaryTheoryInstance,
    n_per_group: usize,
    seed: u64,
) -> Result<BinaryWorstGroupCheck> {
    let beta = erm_direction(inst)?;
    let closed = wge_binary(&beta, inst)?;
    let norm = sigma_norm(&beta, &inst.sigma)?;
    let z = 0.5 * beta.dot(&inst.delta_tilde()) / norm;
    let z_identity_gap = (z - wge_binary_z_via_alignments(&beta, inst)?).abs();

    let spec = extreme_shift_spec(inst)?;
    let sign_of_class = |c: usize| if c == 1 { 1i8 } else { -1i8 };
    let mut per_cell_closed = Vec::with_capacity(4);
    for g in 0..4 {
        let key = GroupKey::from_index(g, 2);
        per_cell_closed.push(subgroup_error(
            &beta,
            0.0,
            spec.mean(key),
            &inst.sigma,
            sign_of_class(key.class),
        )?);
    }
    let plus = LinearSignClassifier {
        beta: beta.clone(),
        beta0: 0.0,
    };
    let minus = LinearSignClassifier {
        beta: beta.scale(-1.0),
        beta0: 0.0,
    };
    let mc_per_cell = monte_carlo_group_errors(&spec, &plus, n_per_group, seed)?;
    let mc_per_cell_flipped = monte_carlo_group_errors(&spec, &minus, n_per_group, seed ^ 0xABCD)?;

    // worst subgroup over observed cells, maxed over the sign ambiguity
    let mut mc_worst_observed = f64::NEG_INFINITY;
    let mut mc_worst_se = 0.0;
    for g in 0..4 {
        if spec.group_probs[g] == 0.0 {
            continue;
        }
        for est in [&mc_per_cell[g], &mc_per_cell_flipped[g]] {
            if est.error > mc_worst_observed {
                mc_worst_observed = est.error;
                mc_worst_se = est.std_err;
            }
        }
    }
    let tolerance = 4.0 * mc_worst_se + 1e-3;
    let pass = (closed - mc_worst_observed).abs() <= tolerance && z_identity_gap <= 1e-12;
    Ok(BinaryWorstGroupCheck {
        instance_digest: spec_digest(inst),
        dim: inst.dim(),
        z,
        closed_form_wge: closed,
        z_identity_gap,
        per_cell_closed,
        mc_per_cell,
        mc_per_cell_flipped,
        mc_worst_observed,
        mc_worst_se,
        tolerance,
        pass,
    })
}

/// One subgroup's bound check for the multiclass margin analysis.
#[derive(Clone, Debug, Serialize)]
pub struct SubgroupBoundCheck {
    pub class: usize,
    pub domain: usize,
    pub lower: f64,
    pub upper: f64,
    pub mc_error: f64,
    pub mc_se: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct MulticlassBoundsCheck {
    pub instance_digest: String,
    pub subgroups: Vec<SubgroupBoundCheck>,
    pub pass: bool,
}

/// Verifies that Monte Carlo subgroup errors of a softmax head lie inside
/// the pairwise-margin bounds (within 3 standard errors of slack) on every
/// cell of a multiclass Gaussian spec.
pub fn verify_multiclass_bounds(
    spec: &GroupGaussianSpec,
    head: &SoftmaxHead,
    n_per_group: usize,
    seed: u64,
) -> Result<MulticlassBoundsCheck> {
    let mc = monte_carlo_group_errors(spec, head, n_per_group, seed)?;
    let mut subgroups = Vec::new();
    let mut pass = true;
    for g in 0..spec.num_classes * spec.num_domains {
        let key = GroupKey::from_index(g, spec.num_domains);
        let margins = margin_table(head, spec.mean(key), &spec.covariance)?;
        let (lower, upper) = subgroup_error_bounds(&margins, key.class);
        let est = mc[g];
        let ok = est.error >= lower - 3.0 * est.std_err && est.error <= upper + 3.0 * est.std_err;
        pass &= ok;
        subgroups.push(SubgroupBoundCheck {
            class: key.class,
            domain: key.domain,
            lower,
            upper,
            mc_error: est.error,
            mc_se: est.std_err,
            pass: ok,
        });
    }
    Ok(MulticlassBoundsCheck {
        instance_digest: spec_digest(&(spec_digest(spec), spec_digest(&head_digestable(head)))),
        subgroups,
        pass,
    })
}

fn head_digestable(head: &SoftmaxHead) -> (Vec<Vec<f64>>, Vec<f64>) {
    (
        head.columns.iter().map(|c| c.as_slice().to_vec()).collect(),
        head.biases.clone(),
    )
}

/// Random multiclass Gaussian spec plus a random head, for bound checks.
pub fn random_multiclass_instance<R: Rng>(
    rng: &mut R,
    num_classes: usize,
    num_domains: usize,
    dim: usize,
    cond_max: f64,
) -> (GroupGaussianSpec, SoftmaxHead) {
    let sigma = random_spd_with_condition(rng, dim, cond_max);
    let groups = num_classes * num_domains;
    let means: Vec<Vector> = (0..groups)
        .map(|_| {
            Vector::new(
                (0..dim)
                    .map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            )
            .expect("finite")
        })
        .collect();
    let spec = GroupGaussianSpec {
        num_classes,
        num_domains,
        means,
        covariance: sigma,
        group_probs: vec![1.0 / groups as f64; groups],
    };
    let head = SoftmaxHead::new(
        (0..num_classes)
            .map(|_| {
                Vector::new(
                    (0..dim)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
                .expect("finite")
            })
            .collect(),
        (0..num_classes)
            .map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
    .expect("valid head");
    (spec, head)
}
