//! Synthetic tracking sequences: Gaussian blobs with channel signatures
//! moving over a noisy multi-channel feature map.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{domain_err, Result};
use crate::gridmath::FeatureMap;

/// Closed-form sinusoidal trajectory of a box.
#[derive(Debug, Clone, PartialEq)]
pub struct Motion {
    /// Mean center `(c_x, c_y)`.
    pub center: (f64, f64),
    pub amplitude: (f64, f64),
    /// Periods in frames; a non-positive period freezes that coordinate.
    pub period: (f64, f64),
    pub phase: (f64, f64),
    /// Mean size `(w, h)`.
    pub size: (f64, f64),
    /// Relative size oscillation: `size * (1 + a sin(2 pi t / p))`.
    pub size_amplitude: f64,
    pub size_period: f64,
}

fn wave(amplitude: f64, period: f64, phase: f64, t: f64) -> f64 {
    if period > 0.0 {
        amplitude * (2.0 * PI * t / period + phase).sin()
    } else {
        0.0
    }
}

impl Motion {
    pub fn fixed(center: (f64, f64), size: (f64, f64)) -> Self {
        Self {
            center,
            amplitude: (0.0, 0.0),
            period: (0.0, 0.0),
            phase: (0.0, 0.0),
            size,
            size_amplitude: 0.0,
            size_period: 0.0,
        }
    }

    /// Box `[c_x, c_y, w, h]` at frame `t`.
    pub fn state_at(&self, t: usize) -> [f64; 4] {
        let t = t as f64;
        let scale = 1.0 + wave(self.size_amplitude, self.size_period, 0.0, t);
        [
            self.center.0 + wave(self.amplitude.0, self.period.0, self.phase.0, t),
            self.center.1 + wave(self.amplitude.1, self.period.1, self.phase.1, t),
            self.size.0 * scale,
            self.size.1 * scale,
        ]
    }
}

/// Scenario descriptor; everything random is drawn from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub target: Motion,
    pub target_amplitude: f64,
    pub distractors: usize,
    /// Cosine similarity between distractor and target signatures.
    pub distractor_similarity: f64,
    pub distractor_amplitude: f64,
    /// Frame intervals `[start, end)` during which the target is occluded.
    pub occlusions: Vec<(usize, usize)>,
    /// Fraction of the target amplitude left visible while occluded.
    pub occlusion_level: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return domain_err("scenario needs at least one frame, cell and channel");
        }
        if !(self.target.size.0 > 0.0 && self.target.size.1 > 0.0) {
            return domain_err("target size must be positive");
        }
        if self.target.size_amplitude.abs() >= 1.0 {
            return domain_err("size oscillation must stay below 100%");
        }
        if !(-1.0..=1.0).contains(&self.distractor_similarity) {
            return domain_err("signature similarity must lie in [-1, 1]");
        }
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.occlusion_level) {
            return domain_err("noise must be non-negative and occlusion level in [0, 1]");
        }
        Ok(())
    }

    pub fn occluded(&self, t: usize) -> bool {
        self.occlusions.iter().any(|&(a, b)| (a..b).contains(&t))
    }

    /// Static, noiseless, single target.
    pub fn static_noiseless(frames: usize) -> Self {
        Self {
            name: "static".into(),
            frames,
            height: 64,
            width: 64,
            channels: 4,
            target: Motion::fixed((32.0, 32.0), (8.0, 8.0)),
            target_amplitude: 1.0,
            distractors: 0,
            distractor_similarity: 0.0,
            distractor_amplitude: 0.0,
            occlusions: vec![],
            occlusion_level: 0.0,
            noise: 0.0,
            seed: 0,
        }
    }

    /// Slowly drifting target that disappears completely for a while.
    pub fn full_occlusion(seed: u64) -> Self {
        Self {
            name: "occlusion".into(),
            frames: 80,
            noise: 0.05,
            occlusions: vec![(30, 45)],
            occlusion_level: 0.0,
            target: Motion {
                amplitude: (4.0, 3.0),
                period: (120.0, 90.0),
                ..Motion::fixed((32.0, 32.0), (8.0, 8.0))
            },
            seed,
            ..Self::static_noiseless(80)
        }
    }

    /// Moving, scaling target among similar-looking moving distractors.
    pub fn distractor(variant: usize, seed: u64) -> Self {
        let v = variant as f64;
        Self {
            name: format!("distractor-{variant}"),
            frames: 60,
            height: 72,
            width: 72,
            channels: 4,
            target: Motion {
                center: (36.0, 36.0),
                amplitude: (14.0 - 2.0 * v, 9.0 + 2.0 * v),
                period: (50.0 + 7.0 * v, 38.0 + 5.0 * v),
                phase: (0.4 * v, 1.1 + 0.3 * v),
                size: (8.0 + v, 8.0 - 0.5 * v),
                size_amplitude: 0.15,
                size_period: 45.0,
            },
            target_amplitude: 1.0,
            distractors: 2 + variant % 2,
            distractor_similarity: 0.8,
            distractor_amplitude: 1.0,
            occlusions: vec![(22 + 3 * variant, 27 + 3 * variant)],
            occlusion_level: 0.35,
            noise: 0.15,
            seed,
        }
    }
}

/// The fixed distractor suite: four scenario variants, each seeded from
/// `seed` and the variant index.
pub fn distractor_suite(seed: u64) -> Vec<Scenario> {
    (0..4)
        .map(|v| Scenario::distractor(v, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(v as u64)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub features: FeatureMap,
    /// `[c_x, c_y, w, h]`; absent while the target is fully occluded.
    pub ground_truth: Option<[f64; 4]>,
}

/// A rendered blob: trajectory, peak amplitude and channel signature.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub motion: Motion,
    pub amplitude: f64,
    pub signature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub scenario: Scenario,
    pub frames: Vec<Frame>,
    pub target: ObjectTrack,
    pub distractors: Vec<ObjectTrack>,
}

fn unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn similar_signature<R: Rng + ?Sized>(target: &[f64], similarity: f64, rng: &mut R) -> Vec<f64> {
    if target.len() == 1 {
        return vec![target[0] * similarity.signum()];
    }
    // random direction orthogonal to the target signature
    let ortho = loop {
        let u = unit_vector(target.len(), rng);
        let proj: f64 = u.iter().zip(target).map(|(a, b)| a * b).sum();
        let v: Vec<f64> = u.iter().zip(target).map(|(a, b)| a - proj * b).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            break v.into_iter().map(|x| x / n).collect::<Vec<_>>();
        }
    };
    let s = (1.0 - similarity * similarity).max(0.0).sqrt();
    target.iter().zip(&ortho).map(|(t, o)| similarity * t + s * o).collect()
}

/// Adds a separable Gaussian blob with standard deviation `size / 4`.
pub fn render_blob(map: &mut FeatureMap, b: [f64; 4], amplitude: f64, signature: &[f64]) {
    if amplitude == 0.0 {
        return;
    }
    let [cx, cy, w, h] = b;
    let (sx, sy) = (w / 4.0, h / 4.0);
    let (height, width) = (map.height(), map.width());
    let col_range = ((cx - 4.0 * sx).floor().max(0.0) as usize)..((cx + 4.0 * sx).ceil().max(0.0) as usize + 1).min(width);
    let row_range = ((cy - 4.0 * sy).floor().max(0.0) as usize)..((cy + 4.0 * sy).ceil().max(0.0) as usize + 1).min(height);
    let gx: Vec<f64> = col_range.clone().map(|c| (-(c as f64 - cx).powi(2) / (2.0 * sx * sx)).exp()).collect();
    for r in row_range {
        let gy = amplitude * (-(r as f64 - cy).powi(2) / (2.0 * sy * sy)).exp();
        for (k, &sig) in signature.iter().enumerate() {
            for (c, g) in col_range.clone().zip(&gx) {
                let v = map.get(k, r, c) + sig * gy * g;
                map.set(k, r, c, v);
            }
        }
    }
}

pub fn generate_sequence(scenario: &Scenario) -> Result<SyntheticSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    generate_sequence_with(scenario, &mut rng)
}

/// Renders `scenario` drawing all randomness from `rng`.
///
/// Cell `(row, col)` sits at position `(y, x) = (row, col)`.
pub fn generate_sequence_with<R: Rng + ?Sized>(scenario: &Scenario, rng: &mut R) -> Result<SyntheticSequence> {
    scenario.validate()?;
    let target = ObjectTrack {
        motion: scenario.target.clone(),
        amplitude: scenario.target_amplitude,
        signature: unit_vector(scenario.channels, rng),
    };
    let (hf, wf) = (scenario.height as f64, scenario.width as f64);
    let distractors: Vec<ObjectTrack> = (0..scenario.distractors)
        .map(|_| {
            let scale = rng.random_range(0.8..1.25);
            let motion = Motion {
                center: (rng.random_range(0.2 * wf..0.8 * wf), rng.random_range(0.2 * hf..0.8 * hf)),
                amplitude: (rng.random_range(0.1 * wf..0.25 * wf), rng.random_range(0.1 * hf..0.25 * hf)),
                period: (rng.random_range(30.0..80.0), rng.random_range(30.0..80.0)),
                phase: (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)),
                size: (scenario.target.size.0 * scale, scenario.target.size.1 * scale),
                size_amplitude: 0.0,
                size_period: 0.0,
            };
            ObjectTrack {
                motion,
                amplitude: scenario.distractor_amplitude,
                signature: similar_signature(&target.signature, scenario.distractor_similarity, rng),
            }
        })
        .collect();
    let mut frames = Vec::with_capacity(scenario.frames);
    for t in 0..scenario.frames {
        let mut map = FeatureMap::zeros(scenario.channels, scenario.height, scenario.width);
        for d in &distractors {
            render_blob(&mut map, d.motion.state_at(t), d.amplitude, &d.signature);
        }
        let occluded = scenario.occluded(t);
        let amplitude = if occluded {
            target.amplitude * scenario.occlusion_level
        } else {
            target.amplitude
        };
        let gt = target.motion.state_at(t);
        render_blob(&mut map, gt, amplitude, &target.signature);
        if scenario.noise > 0.0 {
            for v in map.values_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v += scenario.noise * n;
            }
        }
        frames.push(Frame {
            features: map,
            ground_truth: if occluded && scenario.occlusion_level == 0.0 {
                None
            } else {
                Some(gt)
            },
        });
    }
    Ok(SyntheticSequence {
        scenario: scenario.clone(),
        frames,
        target,
        distractors,
    })
}
