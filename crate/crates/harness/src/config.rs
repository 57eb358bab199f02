//! Run configuration: a TOML document, every key optional.
//!
//! ```toml
//! seed = 0              # master seed; repetition r uses seed + r
//! repetitions = 5
//! out = "probreg-out"
//! models = ["l2", "rl2", "nll", "kl"]
//!
//! [scenario]
//! kind = "distractor-suite"   # or "static", "full-occlusion", "distractor"
//! variant = 0                 # "distractor" only
//! frames = 60                 # overrides the scenario length
//! similarity = 0.8            # distractor signature similarity
//! distractor_amplitude = 1.0
//! noise = 0.15
//!
//! [tracker]
//! model = "kl"
//! sigma_tc = 0.25             # factor of sqrt(w h)
//! sigma_bb = 0.05
//! lambda = 0.01
//! init_iterations = 10
//! online_iterations = 2
//! update_interval = 5
//! capacity = 25
//! augmentations = 8
//! search_scale = 5.0
//! miss_threshold = 0.05
//! max_halvings = 10
//! refine_step = 0.01
//! refine_steps = 10
//!
//! [sweep]
//! parameter = "sigma_tc"      # or "sigma_bb"
//! values = [2.5e-5, 0.25, 2.5]
//!
//! [dump]
//! frames = [0, 10]
//! slice_samples = 41
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use probreg::sim::{distractor_suite, Scenario};
use probreg::tracker::{LossModel, TrackerConfig};
use serde::Deserialize;

/// Bad input from the command line or the config file.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub repetitions: usize,
    pub out: Option<PathBuf>,
    pub models: Vec<String>,
    pub scenario: ScenarioConfig,
    pub tracker: TrackerSettings,
    pub sweep: SweepConfig,
    pub dump: DumpConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            repetitions: 5,
            out: None,
            models: LossModel::ALL.iter().map(|m| m.name().to_string()).collect(),
            scenario: ScenarioConfig::default(),
            tracker: TrackerSettings::default(),
            sweep: SweepConfig::default(),
            dump: DumpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    #[default]
    DistractorSuite,
    Static,
    FullOcclusion,
    Distractor,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub variant: usize,
    pub frames: Option<usize>,
    pub similarity: Option<f64>,
    pub distractor_amplitude: Option<f64>,
    pub noise: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerSettings {
    pub model: Option<String>,
    pub sigma_tc: Option<f64>,
    pub sigma_bb: Option<f64>,
    pub lambda: Option<f64>,
    pub init_iterations: Option<usize>,
    pub online_iterations: Option<usize>,
    pub update_interval: Option<usize>,
    pub capacity: Option<usize>,
    pub augmentations: Option<usize>,
    pub search_scale: Option<f64>,
    pub miss_threshold: Option<f64>,
    pub max_halvings: Option<usize>,
    pub refine_step: Option<f64>,
    pub refine_steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    #[default]
    SigmaTc,
    SigmaBb,
}

impl SweepParameter {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParameter::SigmaTc => "sigma_tc",
            SweepParameter::SigmaBb => "sigma_bb",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub parameter: SweepParameter,
    /// Absolute values; defaults to `{1e-4 d, d, 10 d}` around the current value `d`.
    pub values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DumpConfig {
    pub frames: Vec<usize>,
    pub slice_samples: usize,
}

impl Default for DumpConfig {
    fn default() -> Self {
        Self {
            frames: vec![0],
            slice_samples: 41,
        }
    }
}

pub fn parse_model(name: &str) -> anyhow::Result<LossModel> {
    name.parse::<LossModel>().map_err(|e| usage(e.to_string()))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| usage(format!("invalid config: {e}")))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Range checks that do not need a full tracker configuration.
    pub fn check(&self) -> anyhow::Result<()> {
        if self.repetitions == 0 {
            return Err(usage("repetitions must be at least 1"));
        }
        if self.models.is_empty() {
            return Err(usage("models must name at least one loss model"));
        }
        self.loss_models()?;
        self.tracker_config()?;
        if self.scenario.frames == Some(0) {
            return Err(usage("scenario frames must be at least 1"));
        }
        if let Some(s) = self.scenario.similarity {
            if !(-1.0..=1.0).contains(&s) {
                return Err(usage(format!("similarity must lie in [-1, 1], got {s}")));
            }
        }
        if self.scenario.noise.is_some_and(|n| !(n >= 0.0)) {
            return Err(usage("noise must be non-negative"));
        }
        if self.dump.slice_samples < 2 {
            return Err(usage("slice_samples must be at least 2"));
        }
        self.sweep_values()?;
        Ok(())
    }

    pub fn loss_models(&self) -> anyhow::Result<Vec<LossModel>> {
        let mut out = Vec::with_capacity(self.models.len());
        for name in &self.models {
            let m = parse_model(name)?;
            if out.contains(&m) {
                return Err(usage(format!("model {name} listed twice")));
            }
            out.push(m);
        }
        out.sort();
        Ok(out)
    }

    /// Tracker configuration with the `[tracker]` overrides applied.
    pub fn tracker_config(&self) -> anyhow::Result<TrackerConfig> {
        let t = &self.tracker;
        let mut cfg = TrackerConfig::default();
        if let Some(m) = &t.model {
            cfg.model = parse_model(m)?;
        }
        if let Some(v) = t.sigma_tc {
            cfg.sigma_tc_factor = v;
        }
        if let Some(v) = t.sigma_bb {
            cfg.sigma_bb = v;
        }
        if let Some(v) = t.lambda {
            cfg.optimizer.lambda = v;
        }
        if let Some(v) = t.init_iterations {
            cfg.init_iterations = v;
        }
        if let Some(v) = t.online_iterations {
            cfg.online_iterations = v;
        }
        if let Some(v) = t.update_interval {
            cfg.update_interval = v;
        }
        if let Some(v) = t.capacity {
            cfg.capacity = v;
        }
        if let Some(v) = t.augmentations {
            cfg.augmentations = v;
        }
        if let Some(v) = t.search_scale {
            cfg.search_scale = v;
        }
        if let Some(v) = t.miss_threshold {
            cfg.miss_threshold = v;
        }
        if let Some(v) = t.max_halvings {
            cfg.optimizer.max_halvings = v;
        }
        if let Some(v) = t.refine_step {
            cfg.refine.step_length = v;
        }
        if let Some(v) = t.refine_steps {
            cfg.refine.steps = v;
            cfg.refine_confidence.steps = v;
        }
        cfg.seed = self.seed;
        cfg.validate().map_err(|e| usage(format!("invalid tracker settings: {e}")))?;
        Ok(cfg)
    }

    pub fn sweep_values(&self) -> anyhow::Result<Vec<f64>> {
        let values = match &self.sweep.values {
            Some(v) => v.clone(),
            None => {
                let cfg = self.tracker_config()?;
                let d = match self.sweep.parameter {
                    SweepParameter::SigmaTc => cfg.sigma_tc_factor,
                    SweepParameter::SigmaBb => cfg.sigma_bb,
                };
                vec![1e-4 * d, d, 10.0 * d]
            }
        };
        if values.is_empty() {
            return Err(usage("sweep values must not be empty"));
        }
        if let Some(v) = values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(usage(format!("sweep values must be positive, got {v}")));
        }
        Ok(values)
    }

    /// Scenarios of one repetition.
    pub fn scenarios(&self, seed: u64) -> Vec<Scenario> {
        let s = &self.scenario;
        let mut list = match s.kind {
            ScenarioKind::DistractorSuite => distractor_suite(seed),
            ScenarioKind::Static => vec![Scenario::static_noiseless(100)],
            ScenarioKind::FullOcclusion => vec![Scenario::full_occlusion(seed)],
            ScenarioKind::Distractor => vec![Scenario::distractor(s.variant, seed)],
        };
        for sc in &mut list {
            if let Some(f) = s.frames {
                sc.frames = f;
            }
            if let Some(v) = s.similarity {
                sc.distractor_similarity = v;
            }
            if let Some(v) = s.distractor_amplitude {
                sc.distractor_amplitude = v;
            }
            if let Some(v) = s.noise {
                sc.noise = v;
            }
        }
        list
    }

    /// Seed of repetition `r`.
    pub fn repetition_seed(&self, r: usize) -> u64 {
        self.seed.wrapping_add(r as u64)
    }
}
