//! Bounding-box regression: box encoding, differentiable box scorers, their
//! Monte-Carlo training and gradient-based refinement at inference.

use rand::Rng;

use crate::error::{domain_err, Error, Result};
use crate::labels::{iou_pseudo_label, GaussianLabel, MixtureProposal};
use crate::losses::{kl_mc_loss_log, l2_loss_samples, nll_mc_loss, robust_l2_loss_samples, LossValueGrad};

/// Axis-aligned box given by its center and size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = ((self.cx + self.w / 2.0).min(other.cx + other.w / 2.0)
            - (self.cx - self.w / 2.0).max(other.cx - other.w / 2.0))
        .max(0.0);
        let iy = ((self.cy + self.h / 2.0).min(other.cy + other.h / 2.0)
            - (self.cy - self.h / 2.0).max(other.cy - other.h / 2.0))
        .max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            // Rounding in the edge arithmetic can push identical boxes past 1.
            (inter / union).min(1.0)
        } else {
            0.0
        }
    }
}

/// Box encoded as `(c_x / w_0, c_y / h_0, log w, log h)` relative to a
/// reference size `(w_0, h_0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxParam {
    values: [f64; 4],
    reference: (f64, f64),
}

fn check_reference(reference: (f64, f64)) -> Result<()> {
    if !(reference.0 > 0.0 && reference.1 > 0.0) || !reference.0.is_finite() || !reference.1.is_finite() {
        return domain_err(format!("reference size must be positive, got {reference:?}"));
    }
    Ok(())
}

impl BoxParam {
    /// Encodes `[c_x, c_y, w, h]`.
    pub fn encode(b: [f64; 4], reference: (f64, f64)) -> Result<Self> {
        check_reference(reference)?;
        let [cx, cy, w, h] = b;
        if !(w > 0.0 && h > 0.0) {
            return domain_err(format!("box size must be positive, got {w}x{h}"));
        }
        Ok(Self {
            values: [cx / reference.0, cy / reference.1, w.ln(), h.ln()],
            reference,
        })
    }

    pub fn from_values(values: [f64; 4], reference: (f64, f64)) -> Result<Self> {
        check_reference(reference)?;
        if values.iter().any(|v| !v.is_finite()) {
            return domain_err("box parameters must be finite");
        }
        Ok(Self { values, reference })
    }

    pub fn values(&self) -> [f64; 4] {
        self.values
    }

    pub fn reference(&self) -> (f64, f64) {
        self.reference
    }

    pub fn decode(&self) -> Result<BBox> {
        let [u, v, lw, lh] = self.values;
        let (w, h) = (lw.exp(), lh.exp());
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return domain_err(format!("decoded box size {w}x{h} is not positive"));
        }
        Ok(BBox::new(u * self.reference.0, v * self.reference.1, w, h))
    }

    pub fn with_values(&self, values: [f64; 4]) -> Result<Self> {
        Self::from_values(values, self.reference)
    }
}

pub fn box_encode(b: [f64; 4], reference: (f64, f64)) -> Result<BoxParam> {
    BoxParam::encode(b, reference)
}

pub fn box_decode(p: &BoxParam) -> Result<[f64; 4]> {
    let b = p.decode()?;
    Ok([b.cx, b.cy, b.w, b.h])
}

/// A differentiable scalar field `s(y)` over box-parameter space.
pub trait BoxScorer {
    /// Family name used in the parameter file.
    fn family(&self) -> &'static str;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn score(&self, y: &[f64; 4]) -> f64;
    fn grad_y(&self, y: &[f64; 4]) -> [f64; 4];
    fn grad_params(&self, y: &[f64; 4]) -> Vec<f64>;
}

/// `s(y) = c - 1/2 sum_d exp(rho_d) (y_d - mu_d)^2`.
///
/// Parameters are laid out as `[mu_0..mu_3, rho_0..rho_3, c]`; `exp(rho_d)`
/// is the precision of dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticScorer {
    params: Vec<f64>,
}

impl QuadraticScorer {
    pub const N_PARAMS: usize = 9;

    /// Peak at `mu` with per-dimension width `tau` and peak value `offset`.
    pub fn new(mu: [f64; 4], tau: [f64; 4], offset: f64) -> Result<Self> {
        if tau.iter().any(|&t| !(t > 0.0)) {
            return domain_err("scorer widths must be positive");
        }
        let mut params = mu.to_vec();
        params.extend(tau.iter().map(|t| -2.0 * t.ln()));
        params.push(offset);
        Ok(Self { params })
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self> {
        if params.len() != Self::N_PARAMS || params.iter().any(|p| !p.is_finite()) {
            return domain_err(format!("quadratic scorer needs {} finite parameters", Self::N_PARAMS));
        }
        Ok(Self { params })
    }

    pub fn mu(&self) -> [f64; 4] {
        [self.params[0], self.params[1], self.params[2], self.params[3]]
    }

    pub fn precision(&self) -> [f64; 4] {
        [4, 5, 6, 7].map(|i| self.params[i].exp())
    }
}

impl BoxScorer for QuadraticScorer {
    fn family(&self) -> &'static str {
        "quadratic"
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn score(&self, y: &[f64; 4]) -> f64 {
        let mut s = self.params[8];
        for d in 0..4 {
            s -= 0.5 * self.params[4 + d].exp() * (y[d] - self.params[d]).powi(2);
        }
        s
    }

    fn grad_y(&self, y: &[f64; 4]) -> [f64; 4] {
        let mut g = [0.0; 4];
        for d in 0..4 {
            g[d] = -self.params[4 + d].exp() * (y[d] - self.params[d]);
        }
        g
    }

    fn grad_params(&self, y: &[f64; 4]) -> Vec<f64> {
        let mut g = vec![0.0; Self::N_PARAMS];
        for d in 0..4 {
            let prec = self.params[4 + d].exp();
            let r = y[d] - self.params[d];
            g[d] = prec * r;
            g[4 + d] = -0.5 * prec * r * r;
        }
        g[8] = 1.0;
        g
    }
}

/// Sum of isotropic radial bumps `s(y) = sum_m a_m exp(-1/2 exp(rho_m) |y - c_m|^2)`.
///
/// Each component occupies six parameters `[a_m, rho_m, c_m0..c_m3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfScorer {
    params: Vec<f64>,
}

impl RbfScorer {
    pub const PARAMS_PER_COMPONENT: usize = 6;

    /// Components are `(amplitude, width, center)` triples.
    pub fn new(components: &[(f64, f64, [f64; 4])]) -> Result<Self> {
        if components.is_empty() {
            return domain_err("rbf scorer needs at least one component");
        }
        let mut params = Vec::with_capacity(components.len() * Self::PARAMS_PER_COMPONENT);
        for &(a, width, c) in components {
            if !(width > 0.0) {
                return domain_err("rbf widths must be positive");
            }
            params.push(a);
            params.push(-2.0 * width.ln());
            params.extend(c);
        }
        Ok(Self { params })
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self> {
        if params.is_empty()
            || params.len() % Self::PARAMS_PER_COMPONENT != 0
            || params.iter().any(|p| !p.is_finite())
        {
            return domain_err("rbf scorer needs a positive multiple of 6 finite parameters");
        }
        Ok(Self { params })
    }

    pub fn n_components(&self) -> usize {
        self.params.len() / Self::PARAMS_PER_COMPONENT
    }

    fn component(&self, m: usize, y: &[f64; 4]) -> (f64, f64, f64, [f64; 4]) {
        let p = &self.params[m * Self::PARAMS_PER_COMPONENT..(m + 1) * Self::PARAMS_PER_COMPONENT];
        let prec = p[1].exp();
        let diff = [y[0] - p[2], y[1] - p[3], y[2] - p[4], y[3] - p[5]];
        let r2: f64 = diff.iter().map(|d| d * d).sum();
        let bump = (-0.5 * prec * r2).exp();
        (p[0], prec, bump, diff)
    }
}

impl BoxScorer for RbfScorer {
    fn family(&self) -> &'static str {
        "rbf"
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn score(&self, y: &[f64; 4]) -> f64 {
        (0..self.n_components())
            .map(|m| {
                let (a, _, bump, _) = self.component(m, y);
                a * bump
            })
            .sum()
    }

    fn grad_y(&self, y: &[f64; 4]) -> [f64; 4] {
        let mut g = [0.0; 4];
        for m in 0..self.n_components() {
            let (a, prec, bump, diff) = self.component(m, y);
            for d in 0..4 {
                g[d] -= a * bump * prec * diff[d];
            }
        }
        g
    }

    fn grad_params(&self, y: &[f64; 4]) -> Vec<f64> {
        let mut g = vec![0.0; self.params.len()];
        for m in 0..self.n_components() {
            let (a, prec, bump, diff) = self.component(m, y);
            let r2: f64 = diff.iter().map(|d| d * d).sum();
            let base = m * Self::PARAMS_PER_COMPONENT;
            g[base] = bump;
            g[base + 1] = -0.5 * a * bump * prec * r2;
            for d in 0..4 {
                g[base + 2 + d] = a * bump * prec * diff[d];
            }
        }
        g
    }
}

/// Closed set of scorer families, so a trained scorer can be stored,
/// cloned and re-read from its parameter file.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyScorer {
    Quadratic(QuadraticScorer),
    Rbf(RbfScorer),
}

impl AnyScorer {
    fn inner(&self) -> &dyn BoxScorer {
        match self {
            AnyScorer::Quadratic(s) => s,
            AnyScorer::Rbf(s) => s,
        }
    }
}

impl BoxScorer for AnyScorer {
    fn family(&self) -> &'static str {
        self.inner().family()
    }

    fn params(&self) -> &[f64] {
        self.inner().params()
    }

    fn params_mut(&mut self) -> &mut [f64] {
        match self {
            AnyScorer::Quadratic(s) => s.params_mut(),
            AnyScorer::Rbf(s) => s.params_mut(),
        }
    }

    fn score(&self, y: &[f64; 4]) -> f64 {
        self.inner().score(y)
    }

    fn grad_y(&self, y: &[f64; 4]) -> [f64; 4] {
        self.inner().grad_y(y)
    }

    fn grad_params(&self, y: &[f64; 4]) -> Vec<f64> {
        self.inner().grad_params(y)
    }
}

/// Parameter file: the family name, then one parameter per line.
pub fn scorer_to_text(scorer: &dyn BoxScorer) -> String {
    let mut out = format!("{}\n", scorer.family());
    for p in scorer.params() {
        out.push_str(&format!("{p:?}\n"));
    }
    out
}

pub fn scorer_from_text(text: &str) -> Result<AnyScorer> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let name = lines.next().ok_or_else(|| Error::Parse("empty scorer file".into()))?;
    let params: Vec<f64> = lines
        .map(|l| l.parse::<f64>().map_err(|e| Error::Parse(format!("bad parameter {l:?}: {e}"))))
        .collect::<Result<_>>()?;
    match name {
        "quadratic" => Ok(AnyScorer::Quadratic(QuadraticScorer::from_params(params)?)),
        "rbf" => Ok(AnyScorer::Rbf(RbfScorer::from_params(params)?)),
        other => Err(Error::Parse(format!("unknown scorer family {other:?}"))),
    }
}

/// A scorer evaluated relative to an anchor: `s'(y) = s(y - anchor)`.
///
/// The tracker anchors its scorer on a box measured from the current frame,
/// which makes the scorer a conditional density over boxes.
pub struct Anchored<'a, S: BoxScorer + ?Sized> {
    pub scorer: &'a S,
    pub anchor: [f64; 4],
}

impl<S: BoxScorer + ?Sized> Anchored<'_, S> {
    fn shift(&self, y: &[f64; 4]) -> [f64; 4] {
        [0, 1, 2, 3].map(|d| y[d] - self.anchor[d])
    }

    pub fn score(&self, y: &[f64; 4]) -> f64 {
        self.scorer.score(&self.shift(y))
    }

    pub fn grad_y(&self, y: &[f64; 4]) -> [f64; 4] {
        self.scorer.grad_y(&self.shift(y))
    }
}

/// Objective used to fit a box scorer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoxLoss {
    /// KL divergence to `N(y_i, sigma^2)` via importance sampling.
    Kl { sigma: f64 },
    /// Negative log-likelihood of the annotation via importance sampling.
    Nll,
    /// Squared error to IoU pseudo-labels.
    L2,
    /// Robust squared error to IoU pseudo-labels.
    RobustL2 { threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateRule {
    Sgd,
    Adam { beta1: f64, beta2: f64 },
}

/// First-order training settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Learning rate at the last epoch as a fraction of the initial one;
    /// decay is geometric in between.
    pub final_lr_fraction: f64,
    pub rule: UpdateRule,
    /// Draw proposal offsets in `+/-` pairs.
    pub antithetic: bool,
    /// Evaluate the annotation itself as the first sample.
    pub include_annotation: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.05,
            final_lr_fraction: 0.01,
            rule: UpdateRule::Adam {
                beta1: 0.9,
                beta2: 0.999,
            },
            antithetic: true,
            include_annotation: false,
        }
    }
}

/// A training target: the annotated box, and the anchor the scorer is
/// evaluated relative to (zero for an unconditional scorer).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxAnnotation {
    pub target: BoxParam,
    pub anchor: [f64; 4],
}

impl BoxAnnotation {
    pub fn unanchored(target: BoxParam) -> Self {
        Self {
            target,
            anchor: [0.0; 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean loss over annotations for every epoch.
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

fn draw_offsets<R: Rng + ?Sized>(q: &MixtureProposal, k: usize, cfg: &SgdConfig, rng: &mut R) -> Vec<[f64; 4]> {
    let mut offsets = Vec::with_capacity(k);
    if cfg.include_annotation {
        offsets.push([0.0; 4]);
    }
    while offsets.len() < k {
        let o = q.sample_offset(rng);
        let o = [o[0], o[1], o[2], o[3]];
        offsets.push(o);
        if cfg.antithetic && offsets.len() < k {
            offsets.push(o.map(|v| -v));
        }
    }
    offsets
}

/// Loss of one annotation with its gradient with respect to the scorer
/// parameters, for a fixed set of proposal offsets.
pub fn annotation_loss<S: BoxScorer + ?Sized>(
    scorer: &S,
    annotation: &BoxAnnotation,
    offsets: &[[f64; 4]],
    loss: BoxLoss,
    proposal: &MixtureProposal,
) -> Result<(f64, Vec<f64>)> {
    let target = annotation.target.values();
    let rel = |y: &[f64; 4]| [0, 1, 2, 3].map(|d| y[d] - annotation.anchor[d]);
    let samples: Vec<[f64; 4]> = offsets.iter().map(|o| [0, 1, 2, 3].map(|d| target[d] + o[d])).collect();
    let scores: Vec<f64> = samples.iter().map(|y| scorer.score(&rel(y))).collect();
    let q = proposal.with_center(target.to_vec());
    let log_q = || -> Result<Vec<f64>> { samples.iter().map(|y| q.log_density(y)).collect() };
    let weight = 1.0 / samples.len() as f64;
    let iou_labels = || -> Result<Vec<f64>> {
        samples
            .iter()
            .map(|y| iou_pseudo_label(&annotation.target.with_values(*y)?, &annotation.target))
            .collect()
    };
    let LossValueGrad { value, grad } = match loss {
        BoxLoss::Kl { sigma } => {
            let label = GaussianLabel::new(target.to_vec(), sigma)?;
            let log_p: Vec<f64> = samples.iter().map(|y| label.log_density(y)).collect::<Result<_>>()?;
            kl_mc_loss_log(&scores, &log_p, &log_q()?)?
        }
        BoxLoss::Nll => nll_mc_loss(&scores, &log_q()?, scorer.score(&rel(&target)))?,
        BoxLoss::L2 => l2_loss_samples(&scores, &iou_labels()?, weight)?,
        BoxLoss::RobustL2 { threshold } => robust_l2_loss_samples(&scores, &iou_labels()?, threshold, weight)?,
    };
    let mut pgrad = vec![0.0; scorer.params().len()];
    for (y, g) in samples.iter().zip(&grad) {
        if *g == 0.0 {
            continue;
        }
        for (acc, d) in pgrad.iter_mut().zip(scorer.grad_params(&rel(y))) {
            *acc += g * d;
        }
    }
    if grad.len() > samples.len() {
        let g = grad[samples.len()];
        for (acc, d) in pgrad.iter_mut().zip(scorer.grad_params(&rel(&target))) {
            *acc += g * d;
        }
    }
    Ok((value, pgrad))
}

/// Fits `scorer` to `annotations` by first-order minimization of `loss`.
///
/// Every epoch visits the annotations in order; each visit draws
/// `samples_per_annotation` proposals from `proposal` (re-centered on the
/// annotation) and takes one update step.
pub fn train_box_scorer<S, R>(
    mut scorer: S,
    annotations: &[BoxAnnotation],
    loss: BoxLoss,
    proposal: &MixtureProposal,
    samples_per_annotation: usize,
    cfg: &SgdConfig,
    rng: &mut R,
) -> Result<(S, TrainReport)>
where
    S: BoxScorer,
    R: Rng + ?Sized,
{
    if samples_per_annotation < 2 {
        return domain_err("at least two samples per annotation are required");
    }
    if let BoxLoss::Kl { sigma } = loss {
        if !(sigma > 0.0) {
            return domain_err(format!("label sigma must be positive, got {sigma}"));
        }
    }
    let n = scorer.params().len();
    let (mut m1, mut m2) = (vec![0.0; n], vec![0.0; n]);
    let mut step = 0i32;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let frac = if cfg.epochs > 1 {
            epoch as f64 / (cfg.epochs - 1) as f64
        } else {
            0.0
        };
        let lr = cfg.learning_rate * cfg.final_lr_fraction.powf(frac);
        let mut total = 0.0;
        for annotation in annotations {
            let offsets = draw_offsets(proposal, samples_per_annotation, cfg, rng);
            let (value, grad) = annotation_loss(&scorer, annotation, &offsets, loss, proposal)?;
            if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric {
                    iteration: epoch,
                    message: format!("non-finite box loss {value}"),
                });
            }
            total += value;
            step += 1;
            let params = scorer.params_mut();
            match cfg.rule {
                UpdateRule::Sgd => {
                    for (p, g) in params.iter_mut().zip(&grad) {
                        *p -= lr * g;
                    }
                }
                UpdateRule::Adam { beta1, beta2 } => {
                    let c1 = 1.0 - beta1.powi(step);
                    let c2 = 1.0 - beta2.powi(step);
                    for i in 0..n {
                        m1[i] = beta1 * m1[i] + (1.0 - beta1) * grad[i];
                        m2[i] = beta2 * m2[i] + (1.0 - beta2) * grad[i] * grad[i];
                        params[i] -= lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + 1e-12);
                    }
                }
            }
        }
        epoch_losses.push(if annotations.is_empty() {
            0.0
        } else {
            total / annotations.len() as f64
        });
    }
    let final_loss = epoch_losses.last().copied().unwrap_or(0.0);
    Ok((
        scorer,
        TrainReport {
            epoch_losses,
            final_loss,
        },
    ))
}

/// Gradient-ascent settings for box refinement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefConfig {
    pub step_length: f64,
    pub steps: usize,
    /// Refinement stops once a proposed move is shorter than this.
    pub convergence_tol: f64,
}

impl Default for RefConfig {
    fn default() -> Self {
        Self {
            step_length: 1e-2,
            steps: 10,
            convergence_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub best: BoxParam,
    pub best_score: f64,
    pub steps_taken: usize,
    /// Set when a non-finite score or gradient stopped the ascent early; `best`
    /// then holds the best box found before the failure.
    pub failure: Option<Error>,
}

/// Gradient ascent on `score` starting from `y0`.
///
/// A step `y + alpha * grad` is accepted only if it raises the score;
/// otherwise `alpha` is halved. `alpha` is also halved when the gradient
/// turns against the last accepted step, which stops the ascent from
/// bouncing across a narrow peak. The returned box is therefore the best
/// iterate encountered and never scores below `y0`.
pub fn refine_box(
    score: impl Fn(&[f64; 4]) -> f64,
    grad: impl Fn(&[f64; 4]) -> [f64; 4],
    y0: &BoxParam,
    cfg: &RefConfig,
) -> Result<RefineOutcome> {
    let mut y = y0.values();
    let mut best = score(&y);
    if !best.is_finite() {
        return Err(Error::Numeric {
            iteration: 0,
            message: "scorer is not finite at the initial box".into(),
        });
    }
    let mut alpha = cfg.step_length;
    let mut failure = None;
    let mut steps_taken = 0;
    let mut previous: Option<[f64; 4]> = None;
    for i in 0..cfg.steps {
        steps_taken = i + 1;
        let g = grad(&y);
        if g.iter().any(|v| !v.is_finite()) {
            failure = Some(Error::Numeric {
                iteration: i,
                message: "non-finite box gradient".into(),
            });
            break;
        }
        if let Some(p) = previous {
            if p.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
                alpha *= 0.5;
            }
        }
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || alpha * norm < cfg.convergence_tol {
            break;
        }
        let candidate = [0, 1, 2, 3].map(|d| y[d] + alpha * g[d]);
        let s = score(&candidate);
        if s.is_nan() {
            failure = Some(Error::Numeric {
                iteration: i,
                message: "non-finite box score".into(),
            });
            break;
        }
        if s > best {
            y = candidate;
            best = s;
            previous = Some(g);
        } else {
            alpha *= 0.5;
        }
    }
    Ok(RefineOutcome {
        best: y0.with_values(y)?,
        best_score: best,
        steps_taken,
        failure,
    })
}

/// [`refine_box`] for a scorer object.
pub fn refine_with<S: BoxScorer + ?Sized>(scorer: &S, y0: &BoxParam, cfg: &RefConfig) -> Result<RefineOutcome> {
    refine_box(|y| scorer.score(y), |y| scorer.grad_y(y), y0, cfg)
}
