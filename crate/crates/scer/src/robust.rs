//! Group-reweighted classification: exponentiated-gradient weights on the
//! group simplex, the weighted group loss, the combined objective, and
//! accuracy metrics.

use serde::{Deserialize, Serialize};

use crate::data::GroupKey;
use crate::error::{Error, Result};
use crate::regularizer::AlignmentReport;

/// Simplex weights over the `(class, domain)` groups plus the
/// exponentiated-gradient step size.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustState {
    pub num_classes: usize,
    pub num_domains: usize,
    /// Row-major by group index; strictly positive, sums to 1.
    pub q: Vec<f64>,
    pub eta: f64,
}

impl RobustState {
    pub fn uniform(num_classes: usize, num_domains: usize, eta: f64) -> Self {
        let n = num_classes * num_domains;
        Self {
            num_classes,
            num_domains,
            q: vec![1.0 / n as f64; n],
            eta,
        }
    }

    pub fn num_groups(&self) -> usize {
        self.num_classes * self.num_domains
    }

    pub fn validate(&self) -> Result<()> {
        if self.q.len() != self.num_groups() {
            return Err(Error::DimensionMismatch {
                expected: self.num_groups(),
                got: self.q.len(),
            });
        }
        if self.q.iter().any(|&w| w <= 0.0 || !w.is_finite()) {
            return Err(Error::InvalidProbabilities {
                context: "group weights must be strictly positive".into(),
            });
        }
        let total: f64 = self.q.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidProbabilities {
                context: format!("group weights sum to {total}"),
            });
        }
        Ok(())
    }
}

/// Mean per-group loss and sample counts for one batch. A zero count marks a
/// group absent from the batch; its mean loss slot is unused.
#[derive(Clone, Debug)]
pub struct GroupLossTable {
    pub num_classes: usize,
    pub num_domains: usize,
    pub mean_loss: Vec<f64>,
    pub counts: Vec<usize>,
}

impl GroupLossTable {
    pub fn from_samples(
        losses: &[f64],
        keys: &[GroupKey],
        num_classes: usize,
        num_domains: usize,
    ) -> Result<Self> {
        if losses.len() != keys.len() {
            return Err(Error::DimensionMismatch {
                expected: losses.len(),
                got: keys.len(),
            });
        }
        let n = num_classes * num_domains;
        let mut sums = vec![0.0; n];
        let mut counts = vec![0usize; n];
        for (&l, key) in losses.iter().zip(keys) {
            let idx = key.index(num_domains);
            sums[idx] += l;
            counts[idx] += 1;
        }
        let mean_loss = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        Ok(Self {
            num_classes,
            num_domains,
            mean_loss,
            counts,
        })
    }

    pub fn present(&self, idx: usize) -> bool {
        self.counts[idx] > 0
    }
}

/// One exponentiated-gradient step: `q_g <- q_g * exp(eta * meanloss_g)` for
/// groups present in the batch, absent groups unchanged, then renormalized.
///
/// The exponent is shifted by its maximum (with absent groups acting as
/// exponent 0), which leaves the ratios exactly as in the unshifted update
/// but cannot overflow.
pub fn eg_update(state: &RobustState, losses: &GroupLossTable) -> Result<RobustState> {
    state.validate()?;
    if losses.mean_loss.len() != state.num_groups() {
        return Err(Error::DimensionMismatch {
            expected: state.num_groups(),
            got: losses.mean_loss.len(),
        });
    }
    let mut max_arg = 0.0f64; // absent groups keep exponent 0
    for g in 0..state.num_groups() {
        if losses.present(g) {
            max_arg = max_arg.max(state.eta * losses.mean_loss[g]);
        }
    }
    let mut q: Vec<f64> = (0..state.num_groups())
        .map(|g| {
            let arg = if losses.present(g) {
                state.eta * losses.mean_loss[g]
            } else {
                0.0
            };
            // the lower clamp keeps hopelessly outweighed groups strictly
            // positive instead of underflowing to an exact zero
            state.q[g] * (arg - max_arg).max(-700.0).exp()
        })
        .collect();
    let total: f64 = q.iter().sum();
    for w in &mut q {
        *w /= total;
    }
    Ok(RobustState {
        num_classes: state.num_classes,
        num_domains: state.num_domains,
        q,
        eta: state.eta,
    })
}

/// `L_wge = sum_g q_g * meanloss_g` over groups present in the batch.
pub fn weighted_group_loss(state: &RobustState, losses: &GroupLossTable) -> f64 {
    (0..state.num_groups())
        .filter(|&g| losses.present(g))
        .map(|g| state.q[g] * losses.mean_loss[g])
        .sum()
}

/// Combined objective: classification loss plus embedding loss.
pub fn total_loss(l_wge: f64, report: &AlignmentReport) -> f64 {
    l_wge + report.loss_embedding
}

/// Average, worst-group, and per-group accuracy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub avg_acc: f64,
    pub worst_acc: f64,
    /// Row-major by group index; `None` for groups with no samples.
    pub per_group_acc: Vec<Option<f64>>,
    pub per_group_counts: Vec<usize>,
}

pub fn compute_metrics(
    predictions: &[usize],
    labels: &[usize],
    domains: &[usize],
    num_classes: usize,
    num_domains: usize,
) -> Result<Metrics> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput {
            context: "compute_metrics needs at least one sample".into(),
        });
    }
    if predictions.len() != labels.len() || labels.len() != domains.len() {
        return Err(Error::DimensionMismatch {
            expected: predictions.len(),
            got: labels.len().min(domains.len()),
        });
    }
    let n_groups = num_classes * num_domains;
    let mut correct = vec![0usize; n_groups];
    let mut counts = vec![0usize; n_groups];
    let mut total_correct = 0usize;
    for ((&p, &y), &d) in predictions.iter().zip(labels).zip(domains) {
        let idx = GroupKey::new(y, d).index(num_domains);
        counts[idx] += 1;
        if p == y {
            correct[idx] += 1;
            total_correct += 1;
        }
    }
    let per_group_acc: Vec<Option<f64>> = correct
        .iter()
        .zip(&counts)
        .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
        .collect();
    let worst_acc = per_group_acc
        .iter()
        .flatten()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    Ok(Metrics {
        avg_acc: total_correct as f64 / predictions.len() as f64,
        worst_acc,
        per_group_acc,
        per_group_counts: counts,
    })
}
