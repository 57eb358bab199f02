//! Regression objectives with their gradients with respect to the scores.
//!
//! Grid losses work on a [`Grid2D`] of scores `s_k` sampled at cells of area
//! `A`; sample losses work on scores evaluated at Monte-Carlo draws.
//!
//! | loss | value |
//! |------|-------|
//! | L2 | `A sum_k (s_k - a_k)^2` |
//! | robust L2 | as L2 where `a_k > T`, `A sum_k max(0, s_k)^2` elsewhere |
//! | NLL | `log(A sum_k e^{s_k}) - s(y_i)` |
//! | KL (grid) | `log(A sum_k e^{s_k}) - A sum_k s_k p_k` |
//! | KL (MC) | `log(1/K sum_k e^{s_k}/q_k) - 1/K sum_k s_k p_k / q_k` |

use crate::error::{dim_err, domain_err, Result};
use crate::gridmath::{log_sum_exp, logsumexp, softmax, softmax_slice, Grid2D};

/// Default robust-L2 threshold as a fraction of the peak pseudo-label.
pub const DEFAULT_ROBUST_THRESHOLD: f64 = 0.05;

/// A loss value together with `d loss / d scores`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValueGrad<G> {
    pub value: f64,
    pub grad: G,
}

/// How the label grid mass is treated by [`kl_grid_loss_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelMass {
    /// Rescale so that `A * sum_k p_k == 1` before use.
    #[default]
    Renormalize,
    /// Use the label values as given.
    Raw,
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return dim_err(format!("{what}: lengths {a} and {b} differ"));
    }
    Ok(())
}

/// Squared error over samples, weighted by `weight` (the cell area for grids).
pub fn l2_loss_samples(scores: &[f64], labels: &[f64], weight: f64) -> Result<LossValueGrad<Vec<f64>>> {
    check_len(scores.len(), labels.len(), "l2 loss")?;
    let mut value = 0.0;
    let grad = scores
        .iter()
        .zip(labels)
        .map(|(s, a)| {
            let r = s - a;
            value += r * r;
            2.0 * weight * r
        })
        .collect();
    Ok(LossValueGrad {
        value: weight * value,
        grad,
    })
}

/// Robust squared error: the hinge `max(0, s)^2` replaces `(s - a)^2` for
/// samples whose pseudo-label is at most `threshold`.
pub fn robust_l2_loss_samples(
    scores: &[f64],
    labels: &[f64],
    threshold: f64,
    weight: f64,
) -> Result<LossValueGrad<Vec<f64>>> {
    check_len(scores.len(), labels.len(), "robust l2 loss")?;
    let mut value = 0.0;
    let grad = scores
        .iter()
        .zip(labels)
        .map(|(&s, &a)| {
            let r = if a > threshold { s - a } else { s.max(0.0) };
            value += r * r;
            2.0 * weight * r
        })
        .collect();
    Ok(LossValueGrad {
        value: weight * value,
        grad,
    })
}

pub fn l2_loss(scores: &Grid2D, pseudo_labels: &Grid2D, cell_area: f64) -> Result<LossValueGrad<Grid2D>> {
    scores.same_shape(pseudo_labels)?;
    let lg = l2_loss_samples(scores.values(), pseudo_labels.values(), cell_area)?;
    Ok(LossValueGrad {
        value: lg.value,
        grad: Grid2D::from_raw(scores.height(), scores.width(), lg.grad),
    })
}

pub fn robust_l2_loss(
    scores: &Grid2D,
    pseudo_labels: &Grid2D,
    threshold: f64,
    cell_area: f64,
) -> Result<LossValueGrad<Grid2D>> {
    scores.same_shape(pseudo_labels)?;
    let lg = robust_l2_loss_samples(scores.values(), pseudo_labels.values(), threshold, cell_area)?;
    Ok(LossValueGrad {
        value: lg.value,
        grad: Grid2D::from_raw(scores.height(), scores.width(), lg.grad),
    })
}

/// Grid cell nearest to a `(row, col)` coordinate measured in units of
/// `sqrt(cell_area)`.
pub fn nearest_cell(shape: (usize, usize), coordinate: (f64, f64), cell_area: f64) -> Result<(usize, usize)> {
    let spacing = cell_area.sqrt();
    let r = (coordinate.0 / spacing).round();
    let c = (coordinate.1 / spacing).round();
    if !(r >= 0.0 && c >= 0.0 && r < shape.0 as f64 && c < shape.1 as f64) {
        return domain_err(format!(
            "label coordinate {coordinate:?} lies outside the {}x{} grid",
            shape.0, shape.1
        ));
    }
    Ok((r as usize, c as usize))
}

/// Negative log-likelihood of the label cell under the grid density.
pub fn nll_loss(scores: &Grid2D, label: (f64, f64), cell_area: f64) -> Result<LossValueGrad<Grid2D>> {
    let (r, c) = nearest_cell(scores.shape(), label, cell_area)?;
    let value = log_sum_exp(scores, cell_area)? - scores.get(r, c);
    let mut grad = softmax(scores);
    grad.set(r, c, grad.get(r, c) - 1.0);
    Ok(LossValueGrad { value, grad })
}

/// KL-divergence loss with grid sampling; the label grid is renormalized.
pub fn kl_grid_loss(scores: &Grid2D, label_grid: &Grid2D, cell_area: f64) -> Result<LossValueGrad<Grid2D>> {
    kl_grid_loss_with(scores, label_grid, cell_area, LabelMass::Renormalize)
}

pub fn kl_grid_loss_with(
    scores: &Grid2D,
    label_grid: &Grid2D,
    cell_area: f64,
    mass: LabelMass,
) -> Result<LossValueGrad<Grid2D>> {
    scores.same_shape(label_grid)?;
    if label_grid.values().iter().any(|&p| p < 0.0) {
        return domain_err("label grid must be non-negative");
    }
    let scale = match mass {
        LabelMass::Raw => 1.0,
        LabelMass::Renormalize => {
            let total = cell_area * label_grid.sum();
            if !(total > 0.0) {
                return domain_err("label grid has zero mass");
            }
            1.0 / total
        }
    };
    let lse = log_sum_exp(scores, cell_area)?;
    let cross: f64 = scores
        .values()
        .iter()
        .zip(label_grid.values())
        .map(|(s, p)| s * p * scale)
        .sum();
    let value = lse - cell_area * cross;
    let soft = softmax(scores);
    let grad = soft
        .values()
        .iter()
        .zip(label_grid.values())
        .map(|(m, p)| m - cell_area * p * scale)
        .collect();
    Ok(LossValueGrad {
        value,
        grad: Grid2D::from_raw(scores.height(), scores.width(), grad),
    })
}

/// `A * sum_k p_k log p_k` over cells with positive label density, the grid
/// approximation of the label distribution's negative entropy.
///
/// `kl_grid_loss + label_neg_entropy` is the discrete KL divergence between
/// the (renormalized) label masses and the predicted masses.
pub fn label_neg_entropy(label_grid: &Grid2D, cell_area: f64) -> Result<f64> {
    let total = cell_area * label_grid.sum();
    if !(total > 0.0) {
        return domain_err("label grid has zero mass");
    }
    Ok(label_grid
        .values()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| {
            let p = p / total;
            cell_area * p * p.ln()
        })
        .sum())
}

/// Monte-Carlo KL loss from densities; see [`kl_mc_loss_log`].
pub fn kl_mc_loss(
    sample_scores: &[f64],
    label_densities: &[f64],
    proposal_densities: &[f64],
) -> Result<LossValueGrad<Vec<f64>>> {
    check_len(sample_scores.len(), label_densities.len(), "kl mc loss")?;
    check_len(sample_scores.len(), proposal_densities.len(), "kl mc loss")?;
    if let Some(q) = proposal_densities.iter().find(|&&q| !(q > 0.0)) {
        return domain_err(format!("proposal density must be positive, got {q}"));
    }
    if label_densities.iter().any(|&p| p < 0.0) {
        return domain_err("label densities must be non-negative");
    }
    let log_p: Vec<f64> = label_densities.iter().map(|p| p.ln()).collect();
    let log_q: Vec<f64> = proposal_densities.iter().map(|q| q.ln()).collect();
    kl_mc_loss_log(sample_scores, &log_p, &log_q)
}

/// Importance-sampled KL loss with log-domain densities.
///
/// The first term is a log-sum-exp over `s_k - log q_k`; the gradient is
/// `softmax(s - log q)_k - p_k / (K q_k)`.
pub fn kl_mc_loss_log(sample_scores: &[f64], log_label: &[f64], log_proposal: &[f64]) -> Result<LossValueGrad<Vec<f64>>> {
    let k = sample_scores.len();
    check_len(k, log_label.len(), "kl mc loss")?;
    check_len(k, log_proposal.len(), "kl mc loss")?;
    if k == 0 {
        return domain_err("kl mc loss needs at least one sample");
    }
    if log_proposal.iter().any(|q| !q.is_finite()) {
        return domain_err("proposal densities must be positive and finite");
    }
    let kf = k as f64;
    let shifted: Vec<f64> = sample_scores.iter().zip(log_proposal).map(|(s, lq)| s - lq).collect();
    let first = logsumexp(&shifted) - kf.ln();
    let ratios: Vec<f64> = log_label.iter().zip(log_proposal).map(|(lp, lq)| (lp - lq).exp()).collect();
    let second: f64 = sample_scores.iter().zip(&ratios).map(|(s, r)| s * r).sum::<f64>() / kf;
    let grad = softmax_slice(&shifted)
        .into_iter()
        .zip(&ratios)
        .map(|(w, r)| w - r / kf)
        .collect();
    Ok(LossValueGrad {
        value: first - second,
        grad,
    })
}

/// Monte-Carlo NLL loss `log(1/K sum_k e^{s_k}/q_k) - s(y_i)`.
///
/// The gradient has `K + 1` entries: the `K` sample scores followed by the
/// score of the annotation itself.
pub fn nll_mc_loss(sample_scores: &[f64], log_proposal: &[f64], annotation_score: f64) -> Result<LossValueGrad<Vec<f64>>> {
    let k = sample_scores.len();
    check_len(k, log_proposal.len(), "nll mc loss")?;
    if k == 0 {
        return domain_err("nll mc loss needs at least one sample");
    }
    if log_proposal.iter().any(|q| !q.is_finite()) {
        return domain_err("proposal densities must be positive and finite");
    }
    let shifted: Vec<f64> = sample_scores.iter().zip(log_proposal).map(|(s, lq)| s - lq).collect();
    let value = logsumexp(&shifted) - (k as f64).ln() - annotation_score;
    let mut grad = softmax_slice(&shifted);
    grad.push(-1.0);
    Ok(LossValueGrad { value, grad })
}
