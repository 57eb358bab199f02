//! Online target-model predictor: steepest descent with a Newton step length
//! on the regularized support-set objective.

use crate::error::{dim_err, domain_err, Error, Result};
use crate::gridmath::{conv_adjoint, conv_apply, logsumexp, softmax, FeatureMap, Grid2D, Kernel2D};

/// One training sample of the support set.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSample {
    pub features: FeatureMap,
    /// Label mass per cell for the cross-entropy loss, pseudo-labels for the
    /// squared-error losses.
    pub label_grid: Grid2D,
    pub weight: f64,
}

impl SupportSample {
    pub fn new(features: FeatureMap, label_grid: Grid2D, weight: f64) -> Result<Self> {
        if !(weight >= 0.0) || !weight.is_finite() {
            return domain_err(format!("sample weight must be non-negative, got {weight}"));
        }
        if (label_grid.height(), label_grid.width()) != (features.height(), features.width()) {
            return dim_err(format!(
                "label grid {:?} does not match feature map {}x{}",
                label_grid.shape(),
                features.height(),
                features.width()
            ));
        }
        Ok(Self {
            features,
            label_grid,
            weight,
        })
    }
}

/// Per-sample data term of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum CenterLoss {
    /// `log(1^T e^s) - p^T s`, the grid KL / NLL objective.
    #[default]
    CrossEntropy,
    /// `|s - a|^2`.
    L2,
    /// `(s - a)^2` where `a > T`, `max(0, s)^2` elsewhere.
    RobustL2 { threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub lambda: f64,
    pub iterations: usize,
    /// Curvature below `step_length_floor * g^T g` clamps the step to `1 / lambda`.
    pub step_length_floor: f64,
    /// Times a step that raises the objective is halved before it is taken
    /// anyway; 0 keeps the plain steepest-descent recursion.
    pub max_halvings: usize,
    pub loss: CenterLoss,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-2,
            iterations: 5,
            step_length_floor: 1e-10,
            max_halvings: 0,
            loss: CenterLoss::CrossEntropy,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return domain_err(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.step_length_floor > 0.0) {
            return domain_err("step length floor must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    pub weights: Kernel2D,
}

impl TargetModel {
    pub fn new(weights: Kernel2D) -> Result<Self> {
        if !weights.is_finite() {
            return domain_err("target model weights must be finite");
        }
        Ok(Self { weights })
    }

    /// Dense score map of the model on `features`.
    pub fn scores(&self, features: &FeatureMap) -> Result<Grid2D> {
        conv_apply(features, &self.weights)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Objective before the update of this iteration.
    pub objective: f64,
    pub step_length: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOutcome {
    pub model: TargetModel,
    pub trace: Vec<TraceEntry>,
    pub final_objective: f64,
}

pub fn trace_to_csv(trace: &[TraceEntry]) -> String {
    let mut out = String::from("iteration,objective,step_length,grad_norm\n");
    for e in trace {
        out.push_str(&format!("{},{:?},{:?},{:?}\n", e.iteration, e.objective, e.step_length, e.grad_norm));
    }
    out
}

fn sample_scores(w: &Kernel2D, s: &SupportSample) -> Result<Grid2D> {
    if s.features.channels() != w.channels() {
        return dim_err(format!(
            "sample has {} channels, weights have {}",
            s.features.channels(),
            w.channels()
        ));
    }
    conv_apply(&s.features, w)
}

fn robust_residual(s: f64, a: f64, threshold: f64) -> f64 {
    if a > threshold {
        s - a
    } else {
        s.max(0.0)
    }
}

fn data_term(scores: &Grid2D, label: &Grid2D, loss: CenterLoss) -> f64 {
    let (s, p) = (scores.values(), label.values());
    match loss {
        CenterLoss::CrossEntropy => logsumexp(s) - s.iter().zip(p).map(|(a, b)| a * b).sum::<f64>(),
        CenterLoss::L2 => s.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum(),
        CenterLoss::RobustL2 { threshold } => {
            s.iter().zip(p).map(|(&a, &b)| robust_residual(a, b, threshold).powi(2)).sum()
        }
    }
}

/// Derivative of the data term with respect to the scores.
fn score_gradient(scores: &Grid2D, label: &Grid2D, loss: CenterLoss) -> Grid2D {
    let out = match loss {
        CenterLoss::CrossEntropy => {
            let p_hat = softmax(scores);
            p_hat.values().iter().zip(label.values()).map(|(a, b)| a - b).collect()
        }
        CenterLoss::L2 => scores.values().iter().zip(label.values()).map(|(a, b)| 2.0 * (a - b)).collect(),
        CenterLoss::RobustL2 { threshold } => scores
            .values()
            .iter()
            .zip(label.values())
            .map(|(&a, &b)| 2.0 * robust_residual(a, b, threshold))
            .collect(),
    };
    Grid2D::from_raw(scores.height(), scores.width(), out)
}

/// `v^T H v` of the data term at `scores` for a score-space direction `v`.
fn score_curvature(scores: &Grid2D, label: &Grid2D, v: &Grid2D, loss: CenterLoss) -> f64 {
    match loss {
        CenterLoss::CrossEntropy => {
            let p_hat = softmax(scores);
            let mean: f64 = p_hat.values().iter().zip(v.values()).map(|(p, x)| p * x).sum();
            p_hat
                .values()
                .iter()
                .zip(v.values())
                .map(|(p, x)| x * p * (x - mean))
                .sum()
        }
        CenterLoss::L2 => 2.0 * v.values().iter().map(|x| x * x).sum::<f64>(),
        CenterLoss::RobustL2 { threshold } => {
            let mut acc = 0.0;
            for ((&s, &a), &x) in scores.values().iter().zip(label.values()).zip(v.values()) {
                if a > threshold || s > 0.0 {
                    acc += x * x;
                }
            }
            2.0 * acc
        }
    }
}

/// `sum_j gamma_j L(z_j * w; p_j) + lambda/2 |w|^2`.
pub fn objective(w: &TargetModel, support: &[SupportSample], cfg: &OptimizerConfig) -> Result<f64> {
    let mut total = 0.5 * cfg.lambda * w.weights.norm_sq();
    for s in support {
        let scores = sample_scores(&w.weights, s)?;
        total += s.weight * data_term(&scores, &s.label_grid, cfg.loss);
    }
    Ok(total)
}

/// Objective, gradient and the per-sample scores they were computed from.
fn objective_and_gradient(
    w: &TargetModel,
    support: &[SupportSample],
    cfg: &OptimizerConfig,
) -> Result<(f64, Kernel2D, Vec<Grid2D>)> {
    let mut total = 0.5 * cfg.lambda * w.weights.norm_sq();
    let mut g = w.weights.scaled(cfg.lambda);
    let (_, kh, kw) = w.weights.shape();
    let mut all_scores = Vec::with_capacity(support.len());
    for s in support {
        let scores = sample_scores(&w.weights, s)?;
        total += s.weight * data_term(&scores, &s.label_grid, cfg.loss);
        let residual = score_gradient(&scores, &s.label_grid, cfg.loss);
        g.axpy(s.weight, &conv_adjoint(&s.features, &residual, kh, kw)?)?;
        all_scores.push(scores);
    }
    Ok((total, g, all_scores))
}

pub fn gradient(w: &TargetModel, support: &[SupportSample], cfg: &OptimizerConfig) -> Result<Kernel2D> {
    Ok(objective_and_gradient(w, support, cfg)?.1)
}

fn quadratic_form_at(g: &Kernel2D, support: &[SupportSample], scores: &[Grid2D], cfg: &OptimizerConfig) -> Result<f64> {
    let mut total = cfg.lambda * g.norm_sq();
    for (s, sc) in support.iter().zip(scores) {
        let v = conv_apply(&s.features, g)?;
        total += s.weight * score_curvature(sc, &s.label_grid, &v, cfg.loss);
    }
    Ok(total)
}

/// `g^T H g` without forming `H`.
pub fn hessian_quadratic_form(
    w: &TargetModel,
    g: &Kernel2D,
    support: &[SupportSample],
    cfg: &OptimizerConfig,
) -> Result<f64> {
    if g.shape() != w.weights.shape() {
        return dim_err(format!(
            "direction shape {:?} differs from weights {:?}",
            g.shape(),
            w.weights.shape()
        ));
    }
    let scores: Vec<Grid2D> = support.iter().map(|s| sample_scores(&w.weights, s)).collect::<Result<_>>()?;
    quadratic_form_at(g, support, &scores, cfg)
}

/// Runs `cfg.iterations` steps of `w <- w - alpha g`, `alpha = g^T g / g^T H g`.
pub fn optimize(w0: &TargetModel, support: &[SupportSample], cfg: &OptimizerConfig) -> Result<OptimizeOutcome> {
    optimize_iterations(w0, support, cfg, cfg.iterations)
}

/// [`optimize`] with an explicit iteration count.
pub fn optimize_iterations(
    w0: &TargetModel,
    support: &[SupportSample],
    cfg: &OptimizerConfig,
    iterations: usize,
) -> Result<OptimizeOutcome> {
    cfg.validate()?;
    let mut w = w0.clone();
    let mut trace = Vec::with_capacity(iterations);
    for iteration in 0..iterations {
        let (obj, g, scores) = objective_and_gradient(&w, support, cfg)?;
        if !obj.is_finite() {
            return Err(Error::Numeric {
                iteration,
                message: format!("objective is {obj}"),
            });
        }
        let gg = g.norm_sq();
        let mut step_length = if gg == 0.0 {
            0.0
        } else {
            let curvature = quadratic_form_at(&g, support, &scores, cfg)?;
            if curvature < cfg.step_length_floor * gg || !curvature.is_finite() {
                1.0 / cfg.lambda
            } else {
                gg / curvature
            }
        };
        if step_length > 0.0 {
            for _ in 0..cfg.max_halvings {
                let mut trial = w.clone();
                trial.weights.axpy(-step_length, &g)?;
                match objective(&trial, support, cfg) {
                    Ok(v) if v <= obj => break,
                    _ => step_length *= 0.5,
                }
            }
        }
        trace.push(TraceEntry {
            iteration,
            objective: obj,
            step_length,
            grad_norm: gg.sqrt(),
        });
        if step_length > 0.0 {
            w.weights.axpy(-step_length, &g)?;
        }
        if !w.weights.is_finite() {
            return Err(Error::Numeric {
                iteration,
                message: "weights became non-finite".into(),
            });
        }
    }
    let final_objective = objective(&w, support, cfg)?;
    if !final_objective.is_finite() {
        return Err(Error::Numeric {
            iteration: iterations,
            message: format!("objective is {final_objective}"),
        });
    }
    Ok(OptimizeOutcome {
        model: w,
        trace,
        final_objective,
    })
}

/// Closed-form initial weights `c * sum_j gamma_j X_j^T p_j`, scaled so the
/// peak response on the first sample is 1 (`c = 1` when that is undefined).
pub fn init_weights(support: &[SupportSample], kernel_shape: (usize, usize)) -> Result<TargetModel> {
    let first = support
        .first()
        .ok_or_else(|| Error::Domain("cannot initialize weights from an empty support set".into()))?;
    let (kh, kw) = kernel_shape;
    let mut w = Kernel2D::zeros(first.features.channels(), kh, kw)?;
    for s in support {
        w.axpy(s.weight, &conv_adjoint(&s.features, &s.label_grid, kh, kw)?)?;
    }
    let peak = conv_apply(&first.features, &w)?.max();
    let c = if peak > 0.0 && peak.is_finite() { 1.0 / peak } else { 1.0 };
    TargetModel::new(w.scaled(c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(rng: &mut ChaCha8Rng, loss: CenterLoss) -> (TargetModel, Vec<SupportSample>) {
        let c = rng.random_range(1..3);
        let (h, w) = (rng.random_range(3..7), rng.random_range(3..7));
        let k = if rng.random_bool(0.5) { 1 } else { 3 };
        let n = rng.random_range(1..4);
        let support = (0..n)
            .map(|_| {
                let f = FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
                let raw: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
                let label = match loss {
                    CenterLoss::CrossEntropy => {
                        let t: f64 = raw.iter().sum();
                        raw.iter().map(|v| v / t).collect()
                    }
                    _ => raw,
                };
                SupportSample::new(f, Grid2D::new(h, w, label).unwrap(), rng.random_range(0.1..1.0)).unwrap()
            })
            .collect();
        let weights = Kernel2D::new(c, k, k, (0..c * k * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        (TargetModel::new(weights).unwrap(), support)
    }

    fn cfg_for(loss: CenterLoss, lambda: f64) -> OptimizerConfig {
        OptimizerConfig {
            lambda,
            loss,
            ..OptimizerConfig::default()
        }
    }

    fn with_values(w: &TargetModel, values: Vec<f64>) -> TargetModel {
        let (c, h, k) = w.weights.shape();
        TargetModel::new(Kernel2D::new(c, h, k, values).unwrap()).unwrap()
    }

    fn straight_line_objective(w: &TargetModel, support: &[SupportSample], lambda: f64) -> f64 {
        let (ch, kh, kw) = w.weights.shape();
        let mut total = 0.5 * lambda * w.weights.values().iter().map(|v| v * v).sum::<f64>();
        for s in support {
            let (h, wd) = (s.features.height(), s.features.width());
            let mut scores = vec![0.0; h * wd];
            for r in 0..h {
                for c in 0..wd {
                    let mut acc = 0.0;
                    for k in 0..ch {
                        for i in 0..kh {
                            for j in 0..kw {
                                let rr = r as isize + i as isize - (kh / 2) as isize;
                                let cc = c as isize + j as isize - (kw / 2) as isize;
                                if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < wd {
                                    acc += w.weights.get(k, i, j) * s.features.get(k, rr as usize, cc as usize);
                                }
                            }
                        }
                    }
                    scores[r * wd + c] = acc;
                }
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + scores.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let ps: f64 = scores.iter().zip(s.label_grid.values()).map(|(a, b)| a * b).sum();
            total += s.weight * (lse - ps);
        }
        total
    }

    #[test]
    fn objective_examples() {
        let cfg = OptimizerConfig::default();
        let w = TargetModel::new(Kernel2D::new(1, 1, 1, vec![3.0]).unwrap()).unwrap();
        assert!((objective(&w, &[], &cfg).unwrap() - 0.5 * 1e-2 * 9.0).abs() < 1e-15);

        let zero = TargetModel::new(Kernel2D::zeros(2, 3, 3).unwrap()).unwrap();
        let f = FeatureMap::new(2, 3, 3, (0..18).map(|v| v as f64).collect()).unwrap();
        let s = SupportSample::new(f, Grid2D::filled(3, 3, 1.0 / 9.0), 1.0).unwrap();
        assert!((objective(&zero, &[s], &cfg).unwrap() - 9f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (w, support) = random_problem(&mut rng, CenterLoss::CrossEntropy);
            let a = objective(&w, &support, &cfg).unwrap();
            let b = straight_line_objective(&w, &support, cfg.lambda);
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn shape_errors() {
        let cfg = OptimizerConfig::default();
        let w = TargetModel::new(Kernel2D::zeros(2, 1, 1).unwrap()).unwrap();
        let s = SupportSample::new(FeatureMap::zeros(1, 3, 3), Grid2D::zeros(3, 3), 1.0).unwrap();
        assert!(matches!(objective(&w, &[s.clone()], &cfg), Err(Error::Dimension(_))));
        assert!(matches!(gradient(&w, &[s], &cfg), Err(Error::Dimension(_))));
        let g = Kernel2D::zeros(2, 3, 3).unwrap();
        assert!(matches!(hessian_quadratic_form(&w, &g, &[], &cfg), Err(Error::Dimension(_))));
        assert!(SupportSample::new(FeatureMap::zeros(1, 3, 3), Grid2D::zeros(3, 4), 1.0).is_err());
        assert!(SupportSample::new(FeatureMap::zeros(1, 3, 3), Grid2D::zeros(3, 3), -1.0).is_err());
    }

    #[test]
    fn gradient_examples() {
        let cfg = OptimizerConfig {
            lambda: 0.0 + 1e-300,
            ..OptimizerConfig::default()
        };
        // identity features: z = e_0 in one channel and e_1 in another, 1x1 kernel
        let f = FeatureMap::new(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = SupportSample::new(f, Grid2D::new(1, 2, vec![1.0, 0.0]).unwrap(), 1.0).unwrap();
        let w = TargetModel::new(Kernel2D::zeros(2, 1, 1).unwrap()).unwrap();
        let g = gradient(&w, &[s], &cfg).unwrap();
        assert!((g.values()[0] + 0.5).abs() < 1e-15);
        assert!((g.values()[1] - 0.5).abs() < 1e-15);

        let cfg = OptimizerConfig::default();
        let w = TargetModel::new(Kernel2D::new(1, 1, 3, vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let g = gradient(&w, &[], &cfg).unwrap();
        assert_eq!(g, w.weights.scaled(cfg.lambda));
    }

    fn fd_gradient(w: &TargetModel, support: &[SupportSample], cfg: &OptimizerConfig) -> Vec<f64> {
        let h = 1e-5;
        (0..w.weights.values().len())
            .map(|i| {
                let mut p = w.weights.values().to_vec();
                let mut m = p.clone();
                p[i] += h;
                m[i] -= h;
                (objective(&with_values(w, p), support, cfg).unwrap() - objective(&with_values(w, m), support, cfg).unwrap())
                    / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for loss in [CenterLoss::CrossEntropy, CenterLoss::L2, CenterLoss::RobustL2 { threshold: 0.3 }] {
            for _ in 0..100 {
                let (w, support) = random_problem(&mut rng, loss);
                let cfg = cfg_for(loss, rng.random_range(1e-3..1.0));
                let g = gradient(&w, &support, &cfg).unwrap();
                let fd = fd_gradient(&w, &support, &cfg);
                let scale = g.values().iter().fold(1.0f64, |m, v| m.max(v.abs()));
                for (a, b) in g.values().iter().zip(&fd) {
                    assert!((a - b).abs() <= 1e-6 * scale, "{loss:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn ce_gradient_sums_to_label_deficit() {
        // 1x1 kernel on a constant single-channel feature map: the gradient is
        // the sum of the score residuals
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let label = Grid2D::from_fn(3, 4, |_, _| rng.random_range(0.0..0.2));
            let s = SupportSample::new(FeatureMap::new(1, 3, 4, vec![1.0; 12]).unwrap(), label.clone(), 1.0).unwrap();
            let w = TargetModel::new(Kernel2D::new(1, 1, 1, vec![rng.random_range(-1.0..1.0)]).unwrap()).unwrap();
            let cfg = cfg_for(CenterLoss::CrossEntropy, 1e-300);
            let g = gradient(&w, &[s], &cfg).unwrap();
            assert!((g.values()[0] - (1.0 - label.sum())).abs() < 1e-12);
        }
    }

    #[test]
    fn hessian_examples() {
        let cfg = OptimizerConfig::default();
        let w = TargetModel::new(Kernel2D::new(1, 1, 1, vec![0.3]).unwrap()).unwrap();
        let g = Kernel2D::new(1, 1, 1, vec![2.0]).unwrap();
        assert!((hessian_quadratic_form(&w, &g, &[], &cfg).unwrap() - cfg.lambda * 4.0).abs() < 1e-15);

        // features [1, -1], weight 0 -> uniform p_hat, v = g * [1, -1]
        let f = FeatureMap::new(1, 1, 2, vec![1.0, -1.0]).unwrap();
        let s = SupportSample::new(f, Grid2D::new(1, 2, vec![0.5, 0.5]).unwrap(), 1.0).unwrap();
        let w = TargetModel::new(Kernel2D::zeros(1, 1, 1).unwrap()).unwrap();
        let g = Kernel2D::new(1, 1, 1, vec![1.0]).unwrap();
        let tiny = cfg_for(CenterLoss::CrossEntropy, 1e-300);
        assert!((hessian_quadratic_form(&w, &g, &[s], &tiny).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hessian_matches_directional_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for loss in [CenterLoss::CrossEntropy, CenterLoss::L2] {
            for _ in 0..100 {
                let (w, support) = random_problem(&mut rng, loss);
                let cfg = cfg_for(loss, rng.random_range(1e-3..1.0));
                let d: Vec<f64> = (0..w.weights.values().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let (c, kh, kw) = w.weights.shape();
                let dir = Kernel2D::new(c, kh, kw, d.clone()).unwrap();
                let h = 1e-5;
                let shifted = |t: f64| {
                    let v: Vec<f64> = w.weights.values().iter().zip(&d).map(|(a, b)| a + t * b).collect();
                    gradient(&with_values(&w, v), &support, &cfg).unwrap()
                };
                let (gp, gm) = (shifted(h), shifted(-h));
                let fd: f64 = gp.values().iter().zip(gm.values()).zip(&d).map(|((a, b), x)| x * (a - b) / (2.0 * h)).sum();
                let q = hessian_quadratic_form(&w, &dir, &support, &cfg).unwrap();
                assert!((q - fd).abs() <= 1e-5 * q.abs().max(1.0), "{loss:?}: {q} vs {fd}");
                assert!(q >= cfg.lambda * dir.norm_sq() - 1e-12);
            }
        }
    }

    #[test]
    fn regularizer_only_is_solved_in_one_step() {
        let cfg = OptimizerConfig {
            iterations: 1,
            ..OptimizerConfig::default()
        };
        let w0 = TargetModel::new(Kernel2D::new(2, 3, 3, (0..18).map(|v| v as f64 - 7.0).collect()).unwrap()).unwrap();
        let out = optimize(&w0, &[], &cfg).unwrap();
        assert!(out.model.weights.values().iter().all(|v| v.abs() < 1e-12));
        assert!((out.trace[0].step_length - 1.0 / cfg.lambda).abs() < 1e-9);
        assert!(out.final_objective < 1e-24);
    }

    #[test]
    fn trace_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (w, support) = random_problem(&mut rng, CenterLoss::CrossEntropy);
            let cfg = cfg_for(CenterLoss::CrossEntropy, rng.random_range(1e-3..1.0));
            let out = optimize(&w, &support, &cfg).unwrap();
            let mut objs: Vec<f64> = out.trace.iter().map(|e| e.objective).collect();
            objs.push(out.final_objective);
            for pair in objs.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-12, "{objs:?}");
            }
        }
    }

    #[test]
    fn halving_keeps_sharp_problems_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut plain_uphill = 0;
        for _ in 0..100 {
            let (w, mut support) = random_problem(&mut rng, CenterLoss::CrossEntropy);
            for s in &mut support {
                s.features.values_mut().iter_mut().for_each(|v| *v *= 20.0);
            }
            let plain = OptimizerConfig {
                iterations: 8,
                ..cfg_for(CenterLoss::CrossEntropy, 1e-3)
            };
            let guarded = OptimizerConfig { max_halvings: 40, ..plain };
            let objs = |cfg: &OptimizerConfig| {
                let out = optimize(&w, &support, cfg).unwrap();
                let mut v: Vec<f64> = out.trace.iter().map(|e| e.objective).collect();
                v.push(out.final_objective);
                v
            };
            if objs(&plain).windows(2).any(|p| p[1] > p[0] + 1e-12) {
                plain_uphill += 1;
            }
            let g = objs(&guarded);
            for pair in g.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-12, "{g:?}");
            }
        }
        assert!(plain_uphill > 0);
    }

    #[test]
    fn matches_gradient_descent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = FeatureMap::new(2, 3, 3, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let raw: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..1.0)).collect();
        let t: f64 = raw.iter().sum();
        let label = Grid2D::new(3, 3, raw.iter().map(|v| v / t).collect()).unwrap();
        let support = vec![SupportSample::new(f, label, 1.0).unwrap()];
        let cfg = OptimizerConfig {
            lambda: 0.1,
            iterations: 50,
            ..OptimizerConfig::default()
        };
        let w0 = TargetModel::new(Kernel2D::zeros(2, 1, 1).unwrap()).unwrap();
        let out = optimize(&w0, &support, &cfg).unwrap();
        let mut w = w0.clone();
        for _ in 0..100_000 {
            let g = gradient(&w, &support, &cfg).unwrap();
            w.weights.axpy(-1e-2, &g).unwrap();
        }
        let oracle = objective(&w, &support, &cfg).unwrap();
        assert!((out.final_objective - oracle).abs() < 1e-6, "{} vs {oracle}", out.final_objective);
    }

    #[test]
    fn zero_gradient_gives_zero_step() {
        let cfg = OptimizerConfig::default();
        let w0 = TargetModel::new(Kernel2D::zeros(1, 1, 1).unwrap()).unwrap();
        let out = optimize(&w0, &[], &cfg).unwrap();
        assert!(out.trace.iter().all(|e| e.step_length == 0.0));
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = OptimizerConfig {
            lambda: 0.0,
            ..OptimizerConfig::default()
        };
        let w0 = TargetModel::new(Kernel2D::zeros(1, 1, 1).unwrap()).unwrap();
        assert!(matches!(optimize(&w0, &[], &cfg), Err(Error::Domain(_))));
    }

    #[test]
    fn trace_csv_layout() {
        let csv = trace_to_csv(&[TraceEntry {
            iteration: 0,
            objective: 1.5,
            step_length: 0.25,
            grad_norm: 2.0,
        }]);
        assert_eq!(csv, "iteration,objective,step_length,grad_norm\n0,1.5,0.25,2.0\n");
    }

    #[test]
    fn init_weights_examples() {
        assert!(matches!(init_weights(&[], (3, 3)), Err(Error::Domain(_))));

        // delta label at (1, 1): the adjoint copies the 3x3 feature patch there
        let f = FeatureMap::new(1, 3, 3, (1..=9).map(|v| v as f64).collect()).unwrap();
        let mut label = Grid2D::zeros(3, 3);
        label.set(1, 1, 1.0);
        let s = SupportSample::new(f.clone(), label.clone(), 1.0).unwrap();
        let w = init_weights(&[s.clone()], (3, 3)).unwrap();
        let ratio = w.weights.values()[0] / 1.0;
        for (k, v) in w.weights.values().iter().enumerate() {
            assert!((v - ratio * (k + 1) as f64).abs() < 1e-12);
        }
        let peak = conv_apply(&f, &w.weights).unwrap().max();
        assert!((peak - 1.0).abs() < 1e-12);

        let zero = SupportSample::new(FeatureMap::zeros(1, 3, 3), label.clone(), 1.0).unwrap();
        let w = init_weights(&[zero], (3, 3)).unwrap();
        assert!(w.weights.values().iter().all(|&v| v == 0.0));

        let doubled = SupportSample::new(f, label, 2.0).unwrap();
        let a = init_weights(&[s.clone(), s], (3, 3)).unwrap();
        let b = init_weights(&[doubled], (3, 3)).unwrap();
        for (x, y) in a.weights.values().iter().zip(b.weights.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn curvature_is_bounded_below(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, support) = random_problem(&mut rng, CenterLoss::CrossEntropy);
            let (c, kh, kw) = w.weights.shape();
            let g = Kernel2D::new(c, kh, kw, (0..c * kh * kw).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            let psd = hessian_quadratic_form(&w, &g, &support, &cfg_for(CenterLoss::CrossEntropy, 1e-300)).unwrap();
            prop_assert!(psd >= -1e-12);
            let lambda = rng.random_range(1e-3..1.0);
            let q = hessian_quadratic_form(&w, &g, &support, &cfg_for(CenterLoss::CrossEntropy, lambda)).unwrap();
            prop_assert!(q >= lambda * g.norm_sq() - 1e-12);
        }
    }
}
