//! The embedding regularizer: group mean embeddings, spurious/core
//! directions, weight-direction alignments, and the embedding loss with
//! exact gradients.
//!
//! Directions are built from differences of group mean embeddings:
//! the spurious direction averages domain differences within each class,
//! the core direction averages class differences within each domain. The
//! alignment of a classifier column `beta_j` with a direction `delta` is
//!
//! ```text
//! cor_j = <beta_j, delta> / (||beta_j||_S * ||delta||_S)
//! ```
//!
//! (Euclidean numerator, Mahalanobis denominators; the `euclidean` norm mode
//! replaces both denominators with plain norms for ablations). The embedding
//! loss combines `cor * magnitude` terms:
//!
//! ```text
//! L_embedding = lambda_spur * cor(beta, d_spur) ||d_spur||_S
//!             - lambda_core * cor(beta, d_core) ||d_core||_S
//! ```
//!
//! Note `cor * magnitude` simplifies to `mean_j <beta_j, delta> / ||beta_j||_S`
//! — the direction-norm cancels — which is the form the gradients use. The
//! covariance inside the norms is a constant of the step (stop-gradient);
//! only the classifier columns and the group means carry gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::GroupKey;
use crate::error::{Error, Result};
use crate::model::SoftmaxHead;
use crate::numerics::{euclidean_norm, sigma_norm, SpdMatrix, Vector};

/// Whether direction differences keep their sign or take elementwise
/// absolute values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMode {
    #[default]
    Signed,
    ElementwiseAbs,
}

/// Which norm scales alignments and magnitudes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    Sigma,
    Euclidean,
}

fn norm_of(v: &Vector, sigma: &SpdMatrix, mode: NormMode) -> Result<f64> {
    match mode {
        NormMode::Sigma => sigma_norm(v, sigma),
        NormMode::Euclidean => Ok(euclidean_norm(v)),
    }
}

/// `Sigma * v` under sigma mode, `v` under euclidean mode: the gradient of
/// `0.5 * ||v||^2` for the configured norm.
fn norm_grad_vec(v: &Vector, sigma: &SpdMatrix, mode: NormMode) -> Result<Vector> {
    match mode {
        NormMode::Sigma => sigma.matvec(v),
        NormMode::Euclidean => Ok(v.clone()),
    }
}

/// Per-group arithmetic means of a batch of embeddings.
#[derive(Clone, Debug)]
pub struct GroupMeans {
    pub means: BTreeMap<GroupKey, Vector>,
    pub counts: BTreeMap<GroupKey, usize>,
}

impl GroupMeans {
    pub fn classes(&self) -> Vec<usize> {
        let mut cs: Vec<usize> = self.means.keys().map(|k| k.class).collect();
        cs.dedup();
        cs
    }

    pub fn domains(&self) -> Vec<usize> {
        let mut ds: Vec<usize> = self.means.keys().map(|k| k.domain).collect();
        ds.sort_unstable();
        ds.dedup();
        ds
    }
}

/// Exact per-group means; groups absent from the batch are absent from the
/// table.
pub fn group_means(embeddings: &[Vector], keys: &[GroupKey]) -> Result<GroupMeans> {
    if embeddings.is_empty() {
        return Err(Error::EmptyInput {
            context: "group_means needs at least one sample".into(),
        });
    }
    if embeddings.len() != keys.len() {
        return Err(Error::DimensionMismatch {
            expected: embeddings.len(),
            got: keys.len(),
        });
    }
    let dim = embeddings[0].dim();
    let mut sums: BTreeMap<GroupKey, Vector> = BTreeMap::new();
    let mut counts: BTreeMap<GroupKey, usize> = BTreeMap::new();
    for (e, &k) in embeddings.iter().zip(keys) {
        if e.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: e.dim(),
            });
        }
        sums.entry(k)
            .or_insert_with(|| Vector::zeros(dim))
            .axpy(1.0, e);
        *counts.entry(k).or_insert(0) += 1;
    }
    let means = sums
        .into_iter()
        .map(|(k, s)| {
            let n = counts[&k] as f64;
            (k, s.scale(1.0 / n))
        })
        .collect();
    Ok(GroupMeans { means, counts })
}

/// One `(group, group)` difference entering a direction, with its averaging
/// weight. Kept so gradients can replay the exact construction.
#[derive(Clone, Debug)]
struct PairTerm {
    plus: GroupKey,  // mean with coefficient +weight
    minus: GroupKey, // mean with coefficient -weight
    weight: f64,
}

/// Enumerates the pair terms of the spurious direction: unordered domain
/// pairs (i < j, difference `mu[d_i] - mu[d_j]`) inside each class with at
/// least two domains present, pairs averaged within a class, classes
/// averaged with equal weight.
fn spurious_pairs(gm: &GroupMeans) -> Result<Vec<PairTerm>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for key in gm.means.keys() {
        by_class.entry(key.class).or_default().push(key.domain);
    }
    by_class.retain(|_, doms| doms.len() >= 2);
    if by_class.is_empty() {
        return Err(Error::MissingPairs {
            context: "spurious direction".into(),
        });
    }
    let class_weight = 1.0 / by_class.len() as f64;
    let mut terms = Vec::new();
    for (class, doms) in &by_class {
        let pairs = doms.len() * (doms.len() - 1) / 2;
        let w = class_weight / pairs as f64;
        for a in 0..doms.len() {
            for b in (a + 1)..doms.len() {
                terms.push(PairTerm {
                    plus: GroupKey::new(*class, doms[a]),
                    minus: GroupKey::new(*class, doms[b]),
                    weight: w,
                });
            }
        }
    }
    Ok(terms)
}

/// Mirror image of [`spurious_pairs`]: class pairs inside each domain.
fn core_pairs(gm: &GroupMeans) -> Result<Vec<PairTerm>> {
    let mut by_domain: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for key in gm.means.keys() {
        by_domain.entry(key.domain).or_default().push(key.class);
    }
    for classes in by_domain.values_mut() {
        classes.sort_unstable();
    }
    by_domain.retain(|_, classes| classes.len() >= 2);
    if by_domain.is_empty() {
        return Err(Error::MissingPairs {
            context: "core direction".into(),
        });
    }
    let domain_weight = 1.0 / by_domain.len() as f64;
    let mut terms = Vec::new();
    for (domain, classes) in &by_domain {
        let pairs = classes.len() * (classes.len() - 1) / 2;
        let w = domain_weight / pairs as f64;
        for a in 0..classes.len() {
            for b in (a + 1)..classes.len() {
                terms.push(PairTerm {
                    plus: GroupKey::new(classes[a], *domain),
                    minus: GroupKey::new(classes[b], *domain),
                    weight: w,
                });
            }
        }
    }
    Ok(terms)
}

fn direction_from_pairs(gm: &GroupMeans, terms: &[PairTerm], mode: DirectionMode) -> Vector {
    let dim = gm.means.values().next().expect("nonempty").dim();
    let mut out = Vector::zeros(dim);
    for t in terms {
        let a = &gm.means[&t.plus];
        let b = &gm.means[&t.minus];
        match mode {
            DirectionMode::Signed => {
                out.axpy(t.weight, a);
                out.axpy(-t.weight, b);
            }
            DirectionMode::ElementwiseAbs => {
                for i in 0..dim {
                    out[i] += t.weight * (a[i] - b[i]).abs();
                }
            }
        }
    }
    out
}

/// Spurious direction: expected within-class mean-embedding difference
/// across domains.
pub fn spurious_direction(gm: &GroupMeans, mode: DirectionMode) -> Result<Vector> {
    Ok(direction_from_pairs(gm, &spurious_pairs(gm)?, mode))
}

/// Core direction: expected within-domain mean-embedding difference across
/// classes.
pub fn core_direction(gm: &GroupMeans, mode: DirectionMode) -> Result<Vector> {
    Ok(direction_from_pairs(gm, &core_pairs(gm)?, mode))
}

/// Both directions with their magnitudes under the configured norm.
#[derive(Clone, Debug)]
pub struct DirectionSet {
    pub delta_spur: Vector,
    pub delta_core: Vector,
    pub mag_spur: f64,
    pub mag_core: f64,
    pub direction_mode: DirectionMode,
    pub norm_mode: NormMode,
}

pub fn build_directions(
    gm: &GroupMeans,
    sigma: &SpdMatrix,
    direction_mode: DirectionMode,
    norm_mode: NormMode,
) -> Result<DirectionSet> {
    let delta_spur = spurious_direction(gm, direction_mode)?;
    let delta_core = core_direction(gm, direction_mode)?;
    let mag_spur = norm_of(&delta_spur, sigma, norm_mode)?;
    let mag_core = norm_of(&delta_core, sigma, norm_mode)?;
    Ok(DirectionSet {
        delta_spur,
        delta_core,
        mag_spur,
        mag_core,
        direction_mode,
        norm_mode,
    })
}

/// Mean class-wise alignment of classifier columns with a direction:
/// Euclidean inner product over the configured norms of both sides.
pub fn weight_alignment(
    head: &SoftmaxHead,
    delta: &Vector,
    sigma: &SpdMatrix,
    norm_mode: NormMode,
) -> Result<f64> {
    if delta.is_zero() {
        return Err(Error::ZeroDirection {
            context: "direction vector is zero".into(),
        });
    }
    let mag = norm_of(delta, sigma, norm_mode)?;
    if mag == 0.0 {
        return Err(Error::ZeroDirection {
            context: "direction has zero norm".into(),
        });
    }
    let m = head.num_classes() as f64;
    let mut total = 0.0;
    for (j, col) in head.columns.iter().enumerate() {
        if col.is_zero() {
            return Err(Error::ZeroDirection {
                context: format!("classifier column {j} is zero"),
            });
        }
        let col_norm = norm_of(col, sigma, norm_mode)?;
        if col_norm == 0.0 {
            return Err(Error::ZeroDirection {
                context: format!("classifier column {j} has zero norm"),
            });
        }
        total += col.dot(delta) / (col_norm * mag);
    }
    Ok(total / m)
}

/// Alignments, per-term losses, and the combined embedding loss for one step.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub cor_spur: f64,
    pub cor_core: f64,
    pub mag_spur: f64,
    pub mag_core: f64,
    pub loss_spur: f64,
    pub loss_core: f64,
    pub loss_embedding: f64,
}

/// Computes the embedding loss. A zero direction or zero classifier column is
/// an error only when the corresponding lambda is positive; with lambda = 0
/// that term is exactly zero (and its cor reported as 0 when undefined).
pub fn embedding_loss(
    head: &SoftmaxHead,
    dirs: &DirectionSet,
    sigma: &SpdMatrix,
    lambda_spur: f64,
    lambda_core: f64,
) -> Result<AlignmentReport> {
    let term = |delta: &Vector, mag: f64, lambda: f64| -> Result<(f64, f64)> {
        match weight_alignment(head, delta, sigma, dirs.norm_mode) {
            Ok(cor) => Ok((cor, cor * mag)),
            Err(e @ Error::ZeroDirection { .. }) => {
                if lambda > 0.0 {
                    Err(e)
                } else {
                    Ok((0.0, 0.0))
                }
            }
            Err(e) => Err(e),
        }
    };
    let (cor_spur, loss_spur) = term(&dirs.delta_spur, dirs.mag_spur, lambda_spur)?;
    let (cor_core, loss_core) = term(&dirs.delta_core, dirs.mag_core, lambda_core)?;
    Ok(AlignmentReport {
        cor_spur,
        cor_core,
        mag_spur: dirs.mag_spur,
        mag_core: dirs.mag_core,
        loss_spur,
        loss_core,
        loss_embedding: lambda_spur * loss_spur - lambda_core * loss_core,
    })
}

/// Gradients of the embedding loss: per-column head gradients plus
/// per-group mean-embedding gradients (for feature maps that train).
#[derive(Clone, Debug)]
pub struct EmbeddingLossGrads {
    pub head_columns: Vec<Vector>,
    /// `d L_embedding / d mu_g` for every group present in the batch;
    /// divide by the group count to get the per-sample embedding gradient.
    pub group_mean_grads: BTreeMap<GroupKey, Vector>,
}

/// Exact gradients of `L_embedding` with respect to the head columns and the
/// group means, treating the covariance (and therefore all norms' metric) as
/// a constant of the step.
pub fn embedding_loss_grads(
    head: &SoftmaxHead,
    gm: &GroupMeans,
    dirs: &DirectionSet,
    sigma: &SpdMatrix,
    lambda_spur: f64,
    lambda_core: f64,
) -> Result<EmbeddingLossGrads> {
    let p = head.embed_dim();
    let m = head.num_classes() as f64;
    let mut head_grads = vec![Vector::zeros(p); head.num_classes()];
    let mut group_mean_grads: BTreeMap<GroupKey, Vector> =
        gm.means.keys().map(|&k| (k, Vector::zeros(p))).collect();

    if lambda_spur == 0.0 && lambda_core == 0.0 {
        return Ok(EmbeddingLossGrads {
            head_columns: head_grads,
            group_mean_grads,
        });
    }

    // cor(beta, delta) * ||delta|| = mean_j <beta_j, delta> / ||beta_j||,
    // so each term needs the per-column 1/||beta_j|| and the quotient-rule
    // correction through ||beta_j||.
    let mut col_norms = Vec::with_capacity(head.columns.len());
    for (j, col) in head.columns.iter().enumerate() {
        let n = norm_of(col, sigma, dirs.norm_mode)?;
        if n == 0.0 {
            return Err(Error::ZeroDirection {
                context: format!("classifier column {j} has zero norm"),
            });
        }
        col_norms.push(n);
    }

    // accumulate for one signed term: sign * lambda * d/d(beta, mu) of
    // mean_j <beta_j, delta> / ||beta_j||
    let mut apply_term = |delta: &Vector, pairs: &[PairTerm], coeff: f64| -> Result<()> {
        if coeff == 0.0 {
            return Ok(());
        }
        // head side
        let mut sum_unit_cols = Vector::zeros(p);
        for (j, col) in head.columns.iter().enumerate() {
            let n = col_norms[j];
            let ip = col.dot(delta);
            // d/d beta_j [ <beta_j, delta> / ||beta_j|| ]
            //   = delta / ||beta_j|| - <beta_j, delta> * N beta_j / ||beta_j||^3
            let nvec = norm_grad_vec(col, sigma, dirs.norm_mode)?;
            head_grads[j].axpy(coeff / (m * n), delta);
            head_grads[j].axpy(-coeff * ip / (m * n * n * n), &nvec);
            sum_unit_cols.axpy(1.0 / n, col);
        }
        // mean side: d term / d delta = mean_j beta_j / ||beta_j||
        let d_delta = sum_unit_cols.scale(coeff / m);
        for t in pairs {
            match dirs.direction_mode {
                DirectionMode::Signed => {
                    group_mean_grads
                        .get_mut(&t.plus)
                        .expect("pair groups present")
                        .axpy(t.weight, &d_delta);
                    group_mean_grads
                        .get_mut(&t.minus)
                        .expect("pair groups present")
                        .axpy(-t.weight, &d_delta);
                }
                DirectionMode::ElementwiseAbs => {
                    let a = &gm.means[&t.plus];
                    let b = &gm.means[&t.minus];
                    let gp = group_mean_grads.get_mut(&t.plus).expect("present");
                    for i in 0..p {
                        let s = (a[i] - b[i]).signum();
                        if a[i] == b[i] {
                            continue; // subgradient 0 at the kink
                        }
                        gp[i] += t.weight * s * d_delta[i];
                    }
                    let gm_ = group_mean_grads.get_mut(&t.minus).expect("present");
                    for i in 0..p {
                        let s = (a[i] - b[i]).signum();
                        if a[i] == b[i] {
                            continue;
                        }
                        gm_[i] -= t.weight * s * d_delta[i];
                    }
                }
            }
        }
        Ok(())
    };

    if lambda_spur > 0.0 {
        if dirs.delta_spur.is_zero() {
            return Err(Error::ZeroDirection {
                context: "spurious direction is zero".into(),
            });
        }
        let pairs = spurious_pairs(gm)?;
        apply_term(&dirs.delta_spur, &pairs, lambda_spur)?;
    }
    if lambda_core > 0.0 {
        if dirs.delta_core.is_zero() {
            return Err(Error::ZeroDirection {
                context: "core direction is zero".into(),
            });
        }
        let pairs = core_pairs(gm)?;
        apply_term(&dirs.delta_core, &pairs, -lambda_core)?;
    }

    Ok(EmbeddingLossGrads {
        head_columns: head_grads,
        group_mean_grads,
    })
}
