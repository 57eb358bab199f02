//! Two-stage tracker: dense center density over a search region, then
//! gradient refinement of the box with a trained box scorer, with a
//! bounded support-set memory and probability-mass based miss detection.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bbox::{refine_box, train_box_scorer, AnyScorer, BBox, BoxAnnotation, BoxLoss, BoxParam, BoxScorer, QuadraticScorer, RefConfig, SgdConfig};
use crate::density::{argmax_state, expected_state, normalize, GridDensity};
use crate::error::{dim_err, domain_err, Error, Result};
use crate::gridmath::{FeatureMap, Grid2D};
use crate::labels::{center_label_sigma, normalized_label_grid, GaussianLabel, MixtureProposal};
use crate::losses::nearest_cell;
use crate::optimizer::{init_weights, optimize_iterations, CenterLoss, OptimizerConfig, SupportSample, TargetModel};
use crate::sim::{Frame, SyntheticSequence};

/// Which regression objective trains both the center model and the box scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossModel {
    /// Squared error to Gaussian pseudo-labels / IoU pseudo-labels.
    L2,
    /// Robust squared error, hinged below the label threshold.
    RobustL2,
    /// Negative log-likelihood of the annotation.
    Nll,
    /// KL divergence to a Gaussian label distribution.
    Kl,
}

impl LossModel {
    pub const ALL: [LossModel; 4] = [LossModel::L2, LossModel::RobustL2, LossModel::Nll, LossModel::Kl];

    pub fn name(&self) -> &'static str {
        match self {
            LossModel::L2 => "l2",
            LossModel::RobustL2 => "rl2",
            LossModel::Nll => "nll",
            LossModel::Kl => "kl",
        }
    }

    /// Whether the model outputs a normalized density (as opposed to a
    /// confidence score).
    pub fn is_probabilistic(&self) -> bool {
        matches!(self, LossModel::Nll | LossModel::Kl)
    }
}

impl fmt::Display for LossModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossModel::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown loss model {s:?}; expected one of l2, rl2, nll, kl")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub model: LossModel,
    /// Search-region side as a multiple of `sqrt(w h)` of the initial box.
    pub search_scale: f64,
    /// Filter side as a multiple of `sqrt(w h)` of the initial box.
    pub kernel_scale: f64,
    /// Extra shifted / flipped copies of the first frame in the support set.
    pub augmentations: usize,
    /// Shift of the augmented copies as a fraction of `sqrt(w h)`.
    pub augmentation_shift: f64,
    pub capacity: usize,
    /// Per-frame decay of the support-sample weights.
    pub decay: f64,
    pub update_interval: usize,
    pub online_iterations: usize,
    pub init_iterations: usize,
    pub optimizer: OptimizerConfig,
    /// `sigma_tc = factor * sqrt(w h)`.
    pub sigma_tc_factor: f64,
    pub sigma_bb: f64,
    /// Label threshold of the robust squared-error loss.
    pub robust_threshold: f64,
    /// Minimum density mass in the 3x3 peak neighbourhood (density models).
    pub miss_threshold: f64,
    /// Minimum peak score (confidence models).
    pub miss_score_threshold: f64,
    /// Report the density-weighted mean around the mode instead of the mode cell.
    pub subcell: bool,
    /// Box refinement for density models.
    pub refine: RefConfig,
    /// Box refinement for confidence models, whose scores are on a different scale.
    pub refine_confidence: RefConfig,
    pub box_samples: usize,
    pub box_annotations: usize,
    /// Center jitter of box-training anchors as a fraction of the box size.
    pub box_jitter: f64,
    /// Fraction of box-training patches that carry a nearby distractor, used
    /// when the first frame shows an object similar to the target.
    pub box_distractor_rate: f64,
    pub box_training: SgdConfig,
    /// Width of the box-measurement window as a fraction of the box size.
    pub measure_window: f64,
    /// Largest per-frame change of the box width or height, as a factor.
    pub max_scale_change: f64,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            model: LossModel::Kl,
            search_scale: 5.0,
            kernel_scale: 1.0,
            augmentations: 8,
            augmentation_shift: 0.4,
            capacity: 25,
            decay: 0.99,
            update_interval: 5,
            online_iterations: 2,
            init_iterations: 10,
            optimizer: OptimizerConfig {
                lambda: 1e-2,
                max_halvings: 10,
                ..OptimizerConfig::default()
            },
            sigma_tc_factor: 0.25,
            sigma_bb: 0.05,
            robust_threshold: 0.05,
            miss_threshold: 0.05,
            miss_score_threshold: 0.25,
            subcell: false,
            refine: RefConfig::default(),
            refine_confidence: RefConfig {
                step_length: 0.25,
                ..RefConfig::default()
            },
            box_samples: 64,
            box_annotations: 16,
            box_jitter: 0.15,
            box_distractor_rate: 0.5,
            box_training: SgdConfig {
                epochs: 120,
                ..SgdConfig::default()
            },
            measure_window: 0.5,
            max_scale_change: 1.05,
            seed: 0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if !(self.search_scale > 0.0 && self.kernel_scale > 0.0) {
            return domain_err("search and kernel scales must be positive");
        }
        if self.capacity <= self.augmentations {
            return domain_err(format!(
                "capacity {} must exceed the {} first-frame augmentations",
                self.capacity, self.augmentations
            ));
        }
        if self.update_interval == 0 {
            return domain_err("update interval must be at least 1");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return domain_err("weight decay must lie in (0, 1]");
        }
        if !(self.sigma_tc_factor > 0.0 && self.sigma_bb > 0.0) {
            return domain_err("label standard deviations must be positive");
        }
        if !(0.0..=1.0).contains(&self.box_distractor_rate) {
            return domain_err("box distractor rate must lie in [0, 1]");
        }
        if !(self.max_scale_change >= 1.0) {
            return domain_err("scale change limit must be at least 1");
        }
        if !(self.measure_window > 0.0) {
            return domain_err("measurement window must be positive");
        }
        if self.box_samples < 2 {
            return domain_err("box training needs at least two samples per annotation");
        }
        Ok(())
    }

    fn center_loss(&self) -> CenterLoss {
        match self.model {
            LossModel::Kl | LossModel::Nll => CenterLoss::CrossEntropy,
            LossModel::L2 => CenterLoss::L2,
            LossModel::RobustL2 => CenterLoss::RobustL2 {
                threshold: self.robust_threshold,
            },
        }
    }

    fn box_loss(&self) -> BoxLoss {
        match self.model {
            LossModel::Kl => BoxLoss::Kl { sigma: self.sigma_bb },
            LossModel::Nll => BoxLoss::Nll,
            LossModel::L2 => BoxLoss::L2,
            LossModel::RobustL2 => BoxLoss::RobustL2 {
                threshold: self.robust_threshold,
            },
        }
    }

    fn refine_config(&self) -> &RefConfig {
        if self.model.is_probabilistic() {
            &self.refine
        } else {
            &self.refine_confidence
        }
    }

    fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            loss: self.center_loss(),
            ..self.optimizer
        }
    }
}

fn odd(x: f64) -> usize {
    let n = x.round().max(1.0) as usize;
    if n % 2 == 0 {
        n + 1
    } else {
        n
    }
}

fn check_box(b: &[f64; 4]) -> Result<()> {
    if b.iter().any(|v| !v.is_finite()) || !(b[2] > 0.0 && b[3] > 0.0) {
        return domain_err(format!("box {b:?} must be finite with positive size"));
    }
    Ok(())
}

/// Center-model training target at region position `(row, col)`.
fn center_label(cfg: &TrackerConfig, side: usize, row: f64, col: f64, size: (f64, f64)) -> Result<Grid2D> {
    let sigma = center_label_sigma(size.0, size.1, cfg.sigma_tc_factor);
    match cfg.model {
        LossModel::Kl => normalized_label_grid(&GaussianLabel::new(vec![row, col], sigma)?, (side, side), 1.0),
        LossModel::Nll => {
            let (r, c) = nearest_cell((side, side), (row, col), 1.0)?;
            let mut g = Grid2D::zeros(side, side);
            g.set(r, c, 1.0);
            Ok(g)
        }
        LossModel::L2 | LossModel::RobustL2 => Ok(Grid2D::from_fn(side, side, |r, c| {
            (-((r as f64 - row).powi(2) + (c as f64 - col).powi(2)) / (2.0 * sigma * sigma)).exp()
        })),
    }
}

/// Unit channel signature of the target: the Gaussian-weighted mean feature
/// vector over the box.
fn estimate_signature(features: &FeatureMap, b: [f64; 4]) -> Vec<f64> {
    let [cx, cy, w, h] = b;
    let (sx, sy) = (w / 4.0, h / 4.0);
    let mut sig = vec![0.0; features.channels()];
    for r in 0..features.height() {
        let wy = (-(r as f64 - cy).powi(2) / (2.0 * sy * sy)).exp();
        if wy < 1e-6 {
            continue;
        }
        for c in 0..features.width() {
            let wt = wy * (-(c as f64 - cx).powi(2) / (2.0 * sx * sx)).exp();
            for (k, s) in sig.iter_mut().enumerate() {
                *s += wt * features.get(k, r, c);
            }
        }
    }
    let n = sig.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        sig.iter().map(|v| v / n).collect()
    } else {
        vec![1.0 / (sig.len() as f64).sqrt(); sig.len()]
    }
}

/// Measures the box of the blob near `guess` on the signature-projected map.
///
/// The size is the Gaussian template (std a quarter of the box side) with
/// the best normalized correlation against the projected patch; the center
/// comes from the first moments under a Gaussian window of std
/// `window * size` around the guess, corrected for the window pull.
/// Returns `None` when the patch carries no positive response.
pub fn measure_box(features: &FeatureMap, signature: &[f64], guess: [f64; 4], window: f64) -> Option<[f64; 4]> {
    let [gx, gy, gw, gh] = guess;
    let (h, w) = (features.height() as isize, features.width() as isize);
    let r0 = ((gy - 1.5 * gh).floor() as isize).clamp(0, h) as usize;
    let r1 = ((gy + 1.5 * gh).ceil() as isize + 1).clamp(0, h) as usize;
    let c0 = ((gx - 1.5 * gw).floor() as isize).clamp(0, w) as usize;
    let c1 = ((gx + 1.5 * gw).ceil() as isize + 1).clamp(0, w) as usize;
    if r1 <= r0 || c1 <= c0 {
        return None;
    }
    let (ph, pw) = (r1 - r0, c1 - c0);
    let patch: Vec<f64> = (r0..r1)
        .flat_map(|r| (c0..c1).map(move |c| (r, c)))
        .map(|(r, c)| signature.iter().enumerate().map(|(k, s)| s * features.get(k, r, c)).sum())
        .collect();
    let mean = patch.iter().sum::<f64>() / patch.len() as f64;
    let centered: Vec<f64> = patch.iter().map(|v| v - mean).collect();

    // windowed first moments, pulled towards the guess
    let (sx, sy) = (window * gw, window * gh);
    let (mut m, mut mx, mut my) = (0.0, 0.0, 0.0);
    for i in 0..ph {
        let y = (r0 + i) as f64;
        let wy = (-(y - gy).powi(2) / (2.0 * sy * sy)).exp();
        for j in 0..pw {
            let x = (c0 + j) as f64;
            let wt = patch[i * pw + j] * wy * (-(x - gx).powi(2) / (2.0 * sx * sx)).exp();
            m += wt;
            mx += wt * x;
            my += wt * y;
        }
    }
    if !(m > 0.0) {
        return None;
    }
    let (ex, ey) = (mx / m, my / m);

    let correlation = |cx: f64, cy: f64, bw: f64, bh: f64| -> f64 {
        let tx: Vec<f64> = (0..pw).map(|j| (-((c0 + j) as f64 - cx).powi(2) * 8.0 / (bw * bw)).exp()).collect();
        let ty: Vec<f64> = (0..ph).map(|i| (-((r0 + i) as f64 - cy).powi(2) * 8.0 / (bh * bh)).exp()).collect();
        let t_mean = tx.iter().sum::<f64>() * ty.iter().sum::<f64>() / (ph * pw) as f64;
        let (mut dot, mut tt) = (0.0, 0.0);
        for i in 0..ph {
            for j in 0..pw {
                let t = ty[i] * tx[j] - t_mean;
                dot += t * centered[i * pw + j];
                tt += t * t;
            }
        }
        if tt > 0.0 {
            dot / tt.sqrt()
        } else {
            f64::NEG_INFINITY
        }
    };
    // coarse-to-fine search over log-size factors, then a parabolic peak
    let best_size = |cx: f64, cy: f64| -> (f64, f64) {
        let (mut lw, mut lh) = (0.0_f64, 0.0_f64);
        let mut step = 0.05;
        for half in [10, 3, 3] {
            let mut best = (f64::NEG_INFINITY, lw, lh);
            for a in -half..=half {
                for b in -half..=half {
                    let (tw, th) = (lw + a as f64 * step, lh + b as f64 * step);
                    let v = correlation(cx, cy, gw * tw.exp(), gh * th.exp());
                    if v > best.0 {
                        best = (v, tw, th);
                    }
                }
            }
            (lw, lh) = (best.1, best.2);
            step /= 3.0;
        }
        let vertex = |f: &dyn Fn(f64) -> f64, x: f64| {
            let (a, b, c) = (f(x - step), f(x), f(x + step));
            let den = a - 2.0 * b + c;
            if den < 0.0 {
                x + 0.5 * step * (a - c) / den
            } else {
                x
            }
        };
        let lw2 = vertex(&|t| correlation(cx, cy, gw * t.exp(), gh * lh.exp()), lw);
        let lh2 = vertex(&|t| correlation(cx, cy, gw * lw.exp(), gh * t.exp()), lh);
        (gw * lw2.exp(), gh * lh2.exp())
    };
    let (bw, bh) = best_size(ex, ey);
    // blob variance b under a window of variance s2 gives mean (mu s2 + g b) / (s2 + b)
    let (bx, by) = ((bw / 4.0).powi(2), (bh / 4.0).powi(2));
    let cx = (ex * (bx + sx * sx) - gx * bx) / (sx * sx);
    let cy = (ey * (by + sy * sy) - gy * by) / (sy * sy);
    let (bw, bh) = best_size(cx, cy);
    let out = [cx, cy, bw, bh];
    out.iter().all(|v| v.is_finite()).then_some(out)
}

#[derive(Debug, Clone, PartialEq)]
struct MemorySample {
    sample: SupportSample,
    frame: usize,
    anchor: bool,
}

/// Result of one tracking step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub reported_box: [f64; 4],
    pub missing: bool,
    /// Density mass in the 3x3 neighbourhood of the density mode.
    pub peak_mass: f64,
    pub center_density: GridDensity,
    /// Image position of search-region cell `(0, 0)` as `(row, col)`.
    pub region_origin: (isize, isize),
    /// Box-scorer anchor in box-parameter space, absent when missing.
    pub anchor: Option<[f64; 4]>,
    /// Reference size used to encode the box.
    pub reference: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub model: TargetModel,
    pub scorer: AnyScorer,
    pub current_box: [f64; 4],
    pub missing: bool,
    support: Vec<MemorySample>,
    frame: usize,
    search_size: usize,
    signature: Vec<f64>,
    box_loss: f64,
    cfg: TrackerConfig,
}

impl TrackState {
    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn support_len(&self) -> usize {
        self.support.len()
    }

    pub fn anchor_count(&self) -> usize {
        self.support.iter().filter(|m| m.anchor).count()
    }

    /// Frame index of every support sample, oldest first.
    pub fn support_frames(&self) -> Vec<usize> {
        self.support.iter().map(|m| m.frame).collect()
    }

    pub fn search_size(&self) -> usize {
        self.search_size
    }

    pub fn frame_index(&self) -> usize {
        self.frame
    }

    /// Final training loss of the box scorer.
    pub fn box_training_loss(&self) -> f64 {
        self.box_loss
    }

    fn region_origin(&self, b: &[f64; 4]) -> (isize, isize) {
        let half = (self.search_size / 2) as isize;
        (b[1].round() as isize - half, b[0].round() as isize - half)
    }

    fn weighted_support(&self) -> Vec<SupportSample> {
        let raw: Vec<f64> = self
            .support
            .iter()
            .map(|m| self.cfg.decay.powi((self.frame - m.frame) as i32))
            .collect();
        let total: f64 = raw.iter().sum();
        self.support
            .iter()
            .zip(raw)
            .map(|(m, w)| SupportSample {
                weight: w / total,
                ..m.sample.clone()
            })
            .collect()
    }

    /// Center density of the current model on a search region around `b`.
    pub fn center_density(&self, features: &FeatureMap, b: &[f64; 4]) -> Result<(GridDensity, Grid2D, (isize, isize))> {
        let origin = self.region_origin(b);
        let region = features.crop(origin.0, origin.1, self.search_size, self.search_size);
        let scores = self.model.scores(&region)?;
        if scores.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                iteration: self.frame,
                message: "non-finite center scores".into(),
            });
        }
        Ok((normalize(&scores, 1.0)?, scores, origin))
    }

    /// Box score at `y` for the scorer anchored at `anchor`.
    pub fn box_score(&self, anchor: &[f64; 4], y: &[f64; 4]) -> f64 {
        self.scorer.score(&[0, 1, 2, 3].map(|d| y[d] - anchor[d]))
    }

    /// Box-scorer anchor for box `b` on `features`, encoded with `b`'s size
    /// as reference; falls back to `b` itself when nothing is measured.
    pub fn box_anchor(&self, features: &FeatureMap, b: [f64; 4]) -> Result<[f64; 4]> {
        check_box(&b)?;
        let measured = measure_box(features, &self.signature, b, self.cfg.measure_window)
            .filter(|m| m[2] > 0.0 && m[3] > 0.0)
            .unwrap_or(b);
        Ok(BoxParam::encode(measured, (b[2], b[3]))?.values())
    }

    /// Advances the tracker by one frame.
    ///
    /// On non-finite center scores the state is marked missing and a numeric
    /// error is returned; the caller may keep going with the next frame.
    pub fn step(&mut self, features: &FeatureMap) -> Result<StepOutput> {
        self.frame += 1;
        let prev = self.current_box;
        let (density, scores, origin) = match self.center_density(features, &prev) {
            Ok(v) => v,
            Err(e) => {
                self.missing = true;
                return Err(e);
            }
        };
        let peak_mass = density.peak_mass();
        let missing = if self.cfg.model.is_probabilistic() {
            peak_mass < self.cfg.miss_threshold
        } else {
            scores.max() < self.cfg.miss_score_threshold
        };
        let reference = (prev[2], prev[3]);
        if missing {
            self.missing = true;
            return Ok(StepOutput {
                reported_box: prev,
                missing: true,
                peak_mass,
                center_density: density,
                region_origin: origin,
                anchor: None,
                reference,
            });
        }
        let (row, col) = if self.cfg.subcell {
            expected_state(&density)
        } else {
            let (r, c) = argmax_state(&density);
            (r as f64, c as f64)
        };
        let guess = [origin.1 as f64 + col, origin.0 as f64 + row, prev[2], prev[3]];
        let measured = measure_box(features, &self.signature, guess, self.cfg.measure_window)
            .filter(|m| m[2] > 0.0 && m[3] > 0.0)
            .unwrap_or(guess);
        let y0 = BoxParam::encode(guess, reference)?;
        let anchor = BoxParam::encode(measured, reference)?.values();
        let shift = |y: &[f64; 4]| [0, 1, 2, 3].map(|d| y[d] - anchor[d]);
        let refined = refine_box(
            |y| self.scorer.score(&shift(y)),
            |y| self.scorer.grad_y(&shift(y)),
            &y0,
            self.cfg.refine_config(),
        )?;
        let decoded = refined.best.decode()?;
        let k = self.cfg.max_scale_change;
        let new_box = [
            decoded.cx,
            decoded.cy,
            decoded.w.clamp(prev[2] / k, prev[2] * k),
            decoded.h.clamp(prev[3] / k, prev[3] * k),
        ];
        self.current_box = new_box;
        self.missing = false;

        // memory update on the region the target was found in, unless the
        // refined box left that region
        let (row, col) = (new_box[1] - origin.0 as f64, new_box[0] - origin.1 as f64);
        let last = (self.search_size - 1) as f64;
        if (0.0..=last).contains(&row) && (0.0..=last).contains(&col) {
            let region = features.crop(origin.0, origin.1, self.search_size, self.search_size);
            let label = center_label(&self.cfg, self.search_size, row, col, (new_box[2], new_box[3]))?;
            self.support.push(MemorySample {
                sample: SupportSample::new(region, label, 1.0)?,
                frame: self.frame,
                anchor: false,
            });
            if self.support.len() > self.cfg.capacity {
                if let Some(i) = self.support.iter().position(|m| !m.anchor) {
                    self.support.remove(i);
                }
            }
        }
        if self.frame % self.cfg.update_interval == 0 {
            let support = self.weighted_support();
            let out = optimize_iterations(&self.model, &support, &self.cfg.optimizer_config(), self.cfg.online_iterations)?;
            self.model = out.model;
        }
        Ok(StepOutput {
            reported_box: new_box,
            missing: false,
            peak_mass,
            center_density: density,
            region_origin: origin,
            anchor: Some(anchor),
            reference,
        })
    }
}

/// First-frame support samples: the search region around the box plus
/// `cfg.augmentations` shifted copies, every other one mirrored.
fn first_frame_support(features: &FeatureMap, b: [f64; 4], side: usize, cfg: &TrackerConfig) -> Result<Vec<MemorySample>> {
    let [cx, cy, w, h] = b;
    let half = (side / 2) as isize;
    let (top, left) = (cy.round() as isize - half, cx.round() as isize - half);
    let magnitude = cfg.augmentation_shift * (w * h).sqrt();
    let mut out = Vec::with_capacity(cfg.augmentations + 1);
    for i in 0..=cfg.augmentations {
        let (dr, dc, flip) = if i == 0 {
            (0, 0, false)
        } else {
            let theta = 2.0 * std::f64::consts::PI * (i - 1) as f64 / cfg.augmentations as f64;
            ((magnitude * theta.sin()).round() as isize, (magnitude * theta.cos()).round() as isize, i % 2 == 0)
        };
        let mut region = features.crop(top + dr, left + dc, side, side);
        let row = cy - (top + dr) as f64;
        let mut col = cx - (left + dc) as f64;
        if flip {
            region = region.flip_horizontal();
            col = (side - 1) as f64 - col;
        }
        let label = center_label(cfg, side, row, col, (w, h))?;
        out.push(MemorySample {
            sample: SupportSample::new(region, label, 1.0)?,
            frame: 0,
            anchor: true,
        });
    }
    Ok(out)
}

/// Robust per-channel noise level of a feature map, from the median absolute value.
fn noise_level(features: &FeatureMap) -> f64 {
    let mut v: Vec<f64> = features.values().iter().map(|x| x.abs()).collect();
    if v.is_empty() {
        return 0.0;
    }
    let mid = v.len() / 2;
    *v.select_nth_unstable_by(mid, f64::total_cmp).1 / 0.6745
}

fn random_unit<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Whether the frame holds another blob whose matched-filter response on the
/// signature reaches half that of the target in `b`.
fn similar_object_present(features: &FeatureMap, signature: &[f64], b: [f64; 4]) -> bool {
    let (h, w) = (features.height(), features.width());
    let mut map = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            map[r * w + c] = signature.iter().enumerate().map(|(k, s)| s * features.get(k, r, c)).sum();
        }
    }
    let blur = |map: &[f64], sigma: f64, along_rows: bool| -> Vec<f64> {
        let radius = (3.0 * sigma).ceil() as isize;
        let taps: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let mut out = vec![0.0; map.len()];
        for r in 0..h as isize {
            for c in 0..w as isize {
                let mut acc = 0.0;
                for (t, d) in taps.iter().zip(-radius..=radius) {
                    let (rr, cc) = if along_rows { (r + d, c) } else { (r, c + d) };
                    if rr >= 0 && rr < h as isize && cc >= 0 && cc < w as isize {
                        acc += t * map[rr as usize * w + cc as usize];
                    }
                }
                out[r as usize * w + c as usize] = acc;
            }
        }
        out
    };
    let smooth = blur(&blur(&map, b[3] / 4.0, true), b[2] / 4.0, false);
    let at = |x: f64, y: f64| {
        let (r, c) = (y.round().clamp(0.0, (h - 1) as f64) as usize, x.round().clamp(0.0, (w - 1) as f64) as usize);
        smooth[r * w + c]
    };
    let target = at(b[0], b[1]);
    (0..h).any(|r| {
        (0..w).any(|c| {
            let outside = (c as f64 - b[0]).abs() > b[2] || (r as f64 - b[1]).abs() > b[3];
            outside && smooth[r * w + c] >= 0.5 * target
        })
    })
}

/// Box-training annotations on synthetic patches at the scale of `b`.
///
/// Each patch holds one target blob with a random signature and size, noise
/// at `noise` per channel and, with probability `distractor_rate`, a similar
/// blob close by. The anchor is the box measured from a jittered
/// guess, the target is the rendered box.
fn box_annotations<R: Rng + ?Sized>(
    channels: usize,
    noise: f64,
    distractor_rate: f64,
    b: [f64; 4],
    cfg: &TrackerConfig,
    rng: &mut R,
) -> Result<Vec<BoxAnnotation>> {
    let (w0, h0) = (b[2], b[3]);
    let side = odd(4.0 * w0.max(h0)).max(9);
    let mid = (side / 2) as f64;
    (0..cfg.box_annotations)
        .map(|_| {
            let mut map = FeatureMap::zeros(channels, side, side);
            let signature = random_unit(channels, rng);
            let truth = [
                mid + rng.random_range(-0.5..=0.5),
                mid + rng.random_range(-0.5..=0.5),
                w0 * rng.random_range(-0.2f64..=0.2).exp(),
                h0 * rng.random_range(-0.2f64..=0.2).exp(),
            ];
            crate::sim::render_blob(&mut map, truth, 1.0, &signature);
            if rng.random_bool(distractor_rate) {
                let other = random_unit(channels, rng);
                let mix: f64 = rng.random_range(0.5..=0.9);
                let sig: Vec<f64> = signature
                    .iter()
                    .zip(&other)
                    .map(|(s, o)| mix * s + (1.0 - mix * mix).sqrt() * o)
                    .collect();
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let dist = rng.random_range(0.8..=1.6);
                let db = [
                    truth[0] + dist * truth[2] * angle.cos(),
                    truth[1] + dist * truth[3] * angle.sin(),
                    w0 * rng.random_range(-0.2f64..=0.2).exp(),
                    h0 * rng.random_range(-0.2f64..=0.2).exp(),
                ];
                crate::sim::render_blob(&mut map, db, rng.random_range(0.5..=1.0), &sig);
            }
            if noise > 0.0 {
                for v in map.values_mut() {
                    *v += noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let j = cfg.box_jitter;
            let guess = [
                truth[0] + w0 * rng.random_range(-j..=j),
                truth[1] + h0 * rng.random_range(-j..=j),
                w0,
                h0,
            ];
            let reference = (guess[2], guess[3]);
            let measured = measure_box(&map, &signature, guess, cfg.measure_window)
                .filter(|m| m[2] > 0.0 && m[3] > 0.0)
                .unwrap_or(guess);
            Ok(BoxAnnotation {
                target: BoxParam::encode(truth, reference)?,
                anchor: BoxParam::encode(measured, reference)?.values(),
            })
        })
        .collect()
}

/// Initializes the tracker on the first frame.
pub fn track_init(features: &FeatureMap, init_box: [f64; 4], cfg: &TrackerConfig) -> Result<TrackState> {
    cfg.validate()?;
    check_box(&init_box)?;
    let scale = (init_box[2] * init_box[3]).sqrt();
    let search_size = odd(cfg.search_scale * scale).max(3);
    let kernel = odd(cfg.kernel_scale * scale).clamp(1, search_size);
    let signature = estimate_signature(features, init_box);
    let support = first_frame_support(features, init_box, search_size, cfg)?;
    let samples: Vec<SupportSample> = support
        .iter()
        .map(|m| SupportSample {
            weight: 1.0 / support.len() as f64,
            ..m.sample.clone()
        })
        .collect();
    let w0 = init_weights(&samples, (kernel, kernel))?;
    let model = optimize_iterations(&w0, &samples, &cfg.optimizer_config(), cfg.init_iterations)?.model;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let distractor_rate = if similar_object_present(features, &signature, init_box) {
        cfg.box_distractor_rate
    } else {
        0.0
    };
    let annotations = box_annotations(features.channels(), noise_level(features), distractor_rate, init_box, cfg, &mut rng)?;
    let start = QuadraticScorer::new([0.0; 4], [0.3; 4], 0.0)?;
    let proposal = MixtureProposal::box_default(vec![0.0; 4]);
    let (scorer, report) = train_box_scorer(
        start,
        &annotations,
        cfg.box_loss(),
        &proposal,
        cfg.box_samples,
        &cfg.box_training,
        &mut rng,
    )?;
    Ok(TrackState {
        model,
        scorer: AnyScorer::Quadratic(scorer),
        current_box: init_box,
        missing: false,
        support,
        frame: 0,
        search_size,
        signature,
        box_loss: report.final_loss,
        cfg: cfg.clone(),
    })
}

/// Overlap-precision curve and its area.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// `OP_T` for `T = 0.00, 0.01, ..., 1.00`.
    pub op: Vec<f64>,
    pub auc: f64,
}

impl Metrics {
    pub fn op_at(&self, percent: usize) -> f64 {
        self.op[percent]
    }
}

/// `OP_T` is the fraction of frames with IoU strictly above `T`.
pub fn metrics_from_ious(ious: &[f64]) -> Result<Metrics> {
    if ious.is_empty() {
        return domain_err("no frames to evaluate");
    }
    let n = ious.len() as f64;
    let op: Vec<f64> = (0..=100)
        .map(|k| {
            let t = k as f64 / 100.0;
            ious.iter().filter(|&&v| v > t).count() as f64 / n
        })
        .collect();
    let auc = op.iter().sum::<f64>() / op.len() as f64;
    Ok(Metrics { op, auc })
}

/// Scores reported boxes against the ground truth.
///
/// `reported` holds either one box per frame (frames without ground truth
/// are skipped) or one box per frame that has ground truth.
pub fn evaluate(sequence: &SyntheticSequence, reported: &[[f64; 4]]) -> Result<Metrics> {
    let gts: Vec<(usize, [f64; 4])> = sequence
        .frames
        .iter()
        .enumerate()
        .filter_map(|(i, f)| f.ground_truth.map(|g| (i, g)))
        .collect();
    let ious: Vec<f64> = if reported.len() == sequence.frames.len() {
        gts.iter().map(|(i, g)| box_iou(&reported[*i], g)).collect()
    } else if reported.len() == gts.len() {
        gts.iter().zip(reported).map(|((_, g), r)| box_iou(r, g)).collect()
    } else {
        return dim_err(format!(
            "{} reported boxes for {} frames ({} with ground truth)",
            reported.len(),
            sequence.frames.len(),
            gts.len()
        ));
    };
    metrics_from_ious(&ious)
}

pub fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    BBox::new(a[0], a[1], a[2], a[3]).iou(&BBox::new(b[0], b[1], b[2], b[3]))
}

/// Per-frame record of a tracked sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRun {
    pub boxes: Vec<[f64; 4]>,
    pub missing: Vec<bool>,
    pub peak_mass: Vec<f64>,
    pub ious: Vec<Option<f64>>,
    pub metrics: Metrics,
}

impl SequenceRun {
    /// CSV with columns frame, cx, cy, w, h, iou, missing, peak_mass.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("frame,cx,cy,w,h,iou,missing,peak_mass\n");
        for (i, b) in self.boxes.iter().enumerate() {
            let iou = self.ious[i].map(|v| format!("{v:?}")).unwrap_or_default();
            out.push_str(&format!(
                "{i},{:?},{:?},{:?},{:?},{iou},{},{:?}\n",
                b[0], b[1], b[2], b[3], self.missing[i] as u8, self.peak_mass[i]
            ));
        }
        out
    }
}

/// Tracks a whole sequence from the ground truth of its first frame.
pub fn run_sequence(sequence: &SyntheticSequence, cfg: &TrackerConfig) -> Result<SequenceRun> {
    run_sequence_with(sequence, cfg, |_, _, _| Ok(()))
}

/// [`run_sequence`] with a hook called after every frame with the frame
/// index, the state and the step output (absent for the first frame and for
/// frames skipped on a numeric error).
pub fn run_sequence_with(
    sequence: &SyntheticSequence,
    cfg: &TrackerConfig,
    mut hook: impl FnMut(usize, &TrackState, Option<&StepOutput>) -> Result<()>,
) -> Result<SequenceRun> {
    let first: &Frame = sequence.frames.first().ok_or_else(|| Error::Domain("empty sequence".into()))?;
    let init_box = first
        .ground_truth
        .ok_or_else(|| Error::Domain("first frame has no ground truth".into()))?;
    let mut state = track_init(&first.features, init_box, cfg)?;
    let (density, _, _) = state.center_density(&first.features, &init_box)?;
    let mut boxes = vec![init_box];
    let mut missing = vec![false];
    let mut peak_mass = vec![density.peak_mass()];
    hook(0, &state, None)?;
    for (t, frame) in sequence.frames.iter().enumerate().skip(1) {
        match state.step(&frame.features) {
            Ok(out) => {
                boxes.push(out.reported_box);
                missing.push(out.missing);
                peak_mass.push(out.peak_mass);
                hook(t, &state, Some(&out))?;
            }
            Err(Error::Numeric { .. }) => {
                boxes.push(state.current_box);
                missing.push(true);
                peak_mass.push(f64::NAN);
                hook(t, &state, None)?;
            }
            Err(e) => return Err(e),
        }
    }
    let ious: Vec<Option<f64>> = sequence
        .frames
        .iter()
        .zip(&boxes)
        .map(|(f, b)| f.ground_truth.map(|g| box_iou(b, &g)))
        .collect();
    let metrics = evaluate(sequence, &boxes)?;
    Ok(SequenceRun {
        boxes,
        missing,
        peak_mass,
        ious,
        metrics,
    })
}

/// Slices of `exp(score)` around box `b`: over centers `c_x +/- w`,
/// `c_y +/- h` at fixed size, and over sizes from `1/3` to `3` times the
/// current size at fixed center. Rows index `y` (or `h`), columns `x` (or `w`).
pub fn box_slices(score: impl Fn(&[f64; 4]) -> f64, b: [f64; 4], reference: (f64, f64), n: usize) -> Result<(Grid2D, Grid2D)> {
    if n < 2 {
        return domain_err("slices need at least two samples per axis");
    }
    check_box(&b)?;
    let [cx, cy, w, h] = b;
    let t = |i: usize| -1.0 + 2.0 * i as f64 / (n - 1) as f64;
    let eval = |bx: [f64; 4]| BoxParam::encode(bx, reference).map(|p| score(&p.values()).exp());
    let mut center = Vec::with_capacity(n * n);
    let mut size = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            center.push(eval([cx + w * t(c), cy + h * t(r), w, h])?);
            let l3 = 3f64.ln();
            size.push(eval([cx, cy, w * (l3 * t(c)).exp(), h * (l3 * t(r)).exp()])?);
        }
    }
    Ok((Grid2D::new(n, n, center)?, Grid2D::new(n, n, size)?))
}
