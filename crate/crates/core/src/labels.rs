//! Label distributions `p(y|y_i)`, pseudo-labels `a(y, y_i)` and the
//! Gaussian-mixture proposal `q(y|y_i)` used for Monte-Carlo losses.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::bbox::BoxParam;
use crate::error::{dim_err, domain_err, Result};
use crate::gridmath::{logsumexp, softmax_slice, Grid2D};

/// Default label standard deviation for 4D box regression, in box-parameter units.
pub const DEFAULT_SIGMA_BB: f64 = 0.05;
/// Default center label std as a fraction of the geometric-mean target size.
pub const DEFAULT_SIGMA_TC_FACTOR: f64 = 0.25;

/// Isotropic Gaussian `N(y; center, sigma^2 I)` of any dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLabel {
    center: Vec<f64>,
    sigma: f64,
}

impl GaussianLabel {
    pub fn new(center: Vec<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return domain_err(format!("label sigma must be positive, got {sigma}"));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return domain_err("label center must be finite");
        }
        Ok(Self { center, sigma })
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn log_density(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.center.len() {
            return dim_err(format!(
                "point has dimension {}, label has {}",
                y.len(),
                self.center.len()
            ));
        }
        Ok(isotropic_log_density(&self.center, self.sigma, y))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn isotropic_log_density(center: &[f64], sigma: f64, y: &[f64]) -> f64 {
    let d = center.len() as f64;
    let var = sigma * sigma;
    -0.5 * d * (2.0 * PI * var).ln() - sq_dist(center, y) / (2.0 * var)
}

/// Center label std `factor * sqrt(w * h)` for a target of size `w x h`.
pub fn center_label_sigma(width: f64, height: f64, factor: f64) -> f64 {
    factor * (width * height).sqrt()
}

/// `(2 pi sigma^2)^{-d/2} exp(-|y - c|^2 / (2 sigma^2))`.
pub fn gaussian_density(label: &GaussianLabel, y: &[f64]) -> Result<f64> {
    Ok(label.log_density(y)?.exp())
}

fn check_grid_label(label: &GaussianLabel, cell_area: f64) -> Result<f64> {
    if label.dim() != 2 {
        return dim_err(format!("grid labels need a 2D center, got {}D", label.dim()));
    }
    if !(cell_area > 0.0) {
        return domain_err(format!("cell area must be positive, got {cell_area}"));
    }
    Ok(cell_area.sqrt())
}

/// Gaussian label density evaluated at every cell center.
///
/// Cell `(r, c)` sits at coordinate `(r * s, c * s)` with spacing
/// `s = sqrt(cell_area)`; the label center uses the same `(row, col)` order.
pub fn label_grid(label: &GaussianLabel, shape: (usize, usize), cell_area: f64) -> Result<Grid2D> {
    let spacing = check_grid_label(label, cell_area)?;
    Ok(Grid2D::from_fn(shape.0, shape.1, |r, c| {
        isotropic_log_density(&label.center, label.sigma, &[r as f64 * spacing, c as f64 * spacing]).exp()
    }))
}

/// Label grid renormalized so that `cell_area * sum == 1`.
///
/// Normalization happens in the log domain, so as `sigma -> 0` the grid
/// tends to a point mass on the nearest cell instead of underflowing.
pub fn normalized_label_grid(label: &GaussianLabel, shape: (usize, usize), cell_area: f64) -> Result<Grid2D> {
    let spacing = check_grid_label(label, cell_area)?;
    let logs = Grid2D::from_fn(shape.0, shape.1, |r, c| {
        -sq_dist(&label.center, &[r as f64 * spacing, c as f64 * spacing]) / (2.0 * label.sigma * label.sigma)
    });
    if logs.is_empty() {
        return domain_err("label grid is empty");
    }
    let masses = softmax_slice(logs.values());
    Ok(Grid2D::from_raw(
        shape.0,
        shape.1,
        masses.into_iter().map(|m| m / cell_area).collect(),
    ))
}

/// Gaussian mixture `sum_m weight_m N(y; center, sigma_m^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureProposal {
    center: Vec<f64>,
    components: Vec<(f64, f64)>,
}

impl MixtureProposal {
    /// `components` are `(weight, sigma)` pairs; weights must sum to one.
    pub fn new(center: Vec<f64>, components: Vec<(f64, f64)>) -> Result<Self> {
        if components.is_empty() {
            return domain_err("mixture needs at least one component");
        }
        if components.iter().any(|&(w, s)| !(w > 0.0) || !(s > 0.0) || !s.is_finite()) {
            return domain_err("mixture weights and sigmas must be positive");
        }
        let total: f64 = components.iter().map(|c| c.0).sum();
        if (total - 1.0).abs() > 1e-12 {
            return domain_err(format!("mixture weights sum to {total}, expected 1"));
        }
        Ok(Self { center, components })
    }

    /// `0.5 N(sigma = 0.05) + 0.5 N(sigma = 0.5)`, the box-regression proposal.
    pub fn box_default(center: Vec<f64>) -> Self {
        Self {
            center,
            components: vec![(0.5, 0.05), (0.5, 0.5)],
        }
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn components(&self) -> &[(f64, f64)] {
        &self.components
    }

    pub fn with_center(&self, center: Vec<f64>) -> Self {
        Self {
            center,
            components: self.components.clone(),
        }
    }

    /// Per-coordinate variance `sum_m weight_m sigma_m^2`.
    pub fn variance(&self) -> f64 {
        self.components.iter().map(|(w, s)| w * s * s).sum()
    }

    pub fn log_density(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.center.len() {
            return dim_err(format!(
                "point has dimension {}, proposal has {}",
                y.len(),
                self.center.len()
            ));
        }
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|&(w, s)| w.ln() + isotropic_log_density(&self.center, s, y))
            .collect();
        Ok(logsumexp(&terms))
    }

    /// Offset drawn from the mixture (component by weight, then isotropic
    /// Gaussian), without the center added.
    pub fn sample_offset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut sigma = self.components[self.components.len() - 1].1;
        for &(w, s) in &self.components {
            acc += w;
            if u < acc {
                sigma = s;
                break;
            }
        }
        (0..self.center.len())
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// One draw `y ~ q(y|y_i)`.
pub fn proposal_sample<R: Rng + ?Sized>(q: &MixtureProposal, rng: &mut R) -> Vec<f64> {
    q.sample_offset(rng)
        .into_iter()
        .zip(&q.center)
        .map(|(o, c)| c + o)
        .collect()
}

/// `q(y|y_i)`. Underflows to zero only at distances of many dozen sigmas;
/// use [`MixtureProposal::log_density`] when the ratio `p/q` is needed.
pub fn proposal_density(q: &MixtureProposal, y: &[f64]) -> Result<f64> {
    Ok(q.log_density(y)?.exp())
}

/// Intersection-over-union of the two decoded boxes.
pub fn iou_pseudo_label(y: &BoxParam, y_i: &BoxParam) -> Result<f64> {
    Ok(y.decode()?.iou(&y_i.decode()?))
}
