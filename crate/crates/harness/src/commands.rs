use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use probreg::gridmath::{write_grid_dump, Grid2D};
use probreg::labels::{normalized_label_grid, GaussianLabel};
use probreg::losses::{kl_grid_loss, l2_loss, label_neg_entropy, nll_loss};
use probreg::sim::{generate_sequence, Scenario};
use probreg::tracker::{box_slices, run_sequence, run_sequence_with, LossModel, TrackerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{usage, RunConfig, SweepParameter};

/// Repetition-averaged metrics of one tracker configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub auc: f64,
    pub op50: f64,
    pub op75: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRow {
    pub model: LossModel,
    pub summary: Summary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub sigma: f64,
    pub auc: f64,
}

/// One tracked sequence of a run.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub repetition: usize,
    pub scenario_index: usize,
    pub scenario: Scenario,
    pub run: probreg::tracker::SequenceRun,
}

fn pool(jobs: Option<usize>) -> anyhow::Result<rayon::ThreadPool> {
    if jobs == Some(0) {
        return Err(usage("--jobs must be at least 1"));
    }
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        b = b.num_threads(n);
    }
    Ok(b.build()?)
}

/// Tracks every (tracker, repetition, scenario) cell and returns the runs in
/// that order, grouped per tracker.
fn run_cells(cfg: &RunConfig, trackers: &[TrackerConfig], jobs: Option<usize>) -> anyhow::Result<Vec<Vec<CellRun>>> {
    let mut cells = Vec::new();
    for (k, t) in trackers.iter().enumerate() {
        for r in 0..cfg.repetitions {
            let seed = cfg.repetition_seed(r);
            for (i, sc) in cfg.scenarios(seed).into_iter().enumerate() {
                let tracker = TrackerConfig { seed, ..t.clone() };
                cells.push((k, r, i, sc, tracker));
            }
        }
    }
    let mut runs: Vec<(usize, CellRun)> = pool(jobs)?.install(|| {
        cells
            .into_par_iter()
            .map(|(k, r, i, sc, tracker)| -> anyhow::Result<(usize, CellRun)> {
                let seq = generate_sequence(&sc).map_err(|e| usage(format!("invalid scenario: {e}")))?;
                let run = run_sequence(&seq, &tracker)
                    .with_context(|| format!("tracking {} (repetition {r}) with {}", sc.name, tracker.model))?;
                Ok((
                    k,
                    CellRun {
                        repetition: r,
                        scenario_index: i,
                        scenario: sc,
                        run,
                    },
                ))
            })
            .collect::<anyhow::Result<Vec<_>>>()
    })?;
    runs.sort_by_key(|(k, c)| (*k, c.repetition, c.scenario_index));
    let mut grouped: Vec<Vec<CellRun>> = (0..trackers.len()).map(|_| Vec::new()).collect();
    for (k, c) in runs {
        grouped[k].push(c);
    }
    Ok(grouped)
}

/// Mean over repetitions of the per-repetition mean over scenarios.
fn summarize(runs: &[CellRun], repetitions: usize) -> Summary {
    let mut acc = [0.0; 3];
    for r in 0..repetitions {
        let cells: Vec<&CellRun> = runs.iter().filter(|c| c.repetition == r).collect();
        let n = cells.len() as f64;
        for c in cells {
            let m = &c.run.metrics;
            acc[0] += m.auc / n;
            acc[1] += m.op_at(50) / n;
            acc[2] += m.op_at(75) / n;
        }
    }
    let reps = repetitions as f64;
    Summary {
        auc: acc[0] / reps,
        op50: acc[1] / reps,
        op75: acc[2] / reps,
    }
}

pub fn compare_losses(cfg: &RunConfig, jobs: Option<usize>) -> anyhow::Result<Vec<ModelRow>> {
    let models = cfg.loss_models()?;
    let base = cfg.tracker_config()?;
    let trackers: Vec<TrackerConfig> = models.iter().map(|&model| TrackerConfig { model, ..base.clone() }).collect();
    let grouped = run_cells(cfg, &trackers, jobs)?;
    Ok(models
        .into_iter()
        .zip(&grouped)
        .map(|(model, runs)| ModelRow {
            model,
            summary: summarize(runs, cfg.repetitions),
        })
        .collect())
}

pub fn compare_losses_csv(rows: &[ModelRow]) -> String {
    let mut out = String::from("model,auc,op50,op75\n");
    for r in rows {
        let s = r.summary;
        out.push_str(&format!("{},{:?},{:?},{:?}\n", r.model, s.auc, s.op50, s.op75));
    }
    out
}

pub fn sigma_sweep(cfg: &RunConfig, jobs: Option<usize>) -> anyhow::Result<Vec<SweepPoint>> {
    let values = cfg.sweep_values()?;
    let base = cfg.tracker_config()?;
    let mut trackers = Vec::with_capacity(values.len());
    for &v in &values {
        let mut t = base.clone();
        match cfg.sweep.parameter {
            SweepParameter::SigmaTc => t.sigma_tc_factor = v,
            SweepParameter::SigmaBb => t.sigma_bb = v,
        }
        t.validate().map_err(|e| usage(format!("invalid sweep value {v}: {e}")))?;
        trackers.push(t);
    }
    let grouped = run_cells(cfg, &trackers, jobs)?;
    Ok(values
        .into_iter()
        .zip(&grouped)
        .map(|(sigma, runs)| SweepPoint {
            sigma,
            auc: summarize(runs, cfg.repetitions).auc,
        })
        .collect())
}

pub fn sigma_sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("sigma,auc\n");
    for p in points {
        out.push_str(&format!("{:?},{:?}\n", p.sigma, p.auc));
    }
    out
}

/// Full tracking runs with the configured model; one trace per sequence.
pub fn track(cfg: &RunConfig, jobs: Option<usize>) -> anyhow::Result<Vec<CellRun>> {
    let t = cfg.tracker_config()?;
    Ok(run_cells(cfg, &[t], jobs)?.remove(0))
}

pub fn trace_file_name(c: &CellRun) -> String {
    format!("{:02}-{}-r{}.csv", c.scenario_index, c.scenario.name, c.repetition)
}

pub fn track_summary_csv(runs: &[CellRun]) -> String {
    let mut out = String::from("scenario,repetition,seed,auc,op50,op75,missing_frames\n");
    for c in runs {
        let m = &c.run.metrics;
        let missing = c.run.missing.iter().filter(|&&b| b).count();
        out.push_str(&format!(
            "{},{},{},{:?},{:?},{:?},{missing}\n",
            c.scenario.name,
            c.repetition,
            c.scenario.seed,
            m.auc,
            m.op_at(50),
            m.op_at(75)
        ));
    }
    out
}

/// Grids written for one frame by `dump-density`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDump {
    pub frame: usize,
    pub reported_box: [f64; 4],
    pub missing: bool,
    /// Image position `(row, col)` of center-density cell `(0, 0)`.
    pub region_origin: (isize, isize),
    pub center_density: Grid2D,
    pub box_center_slice: Grid2D,
    pub box_size_slice: Grid2D,
}

/// Tracks the first configured sequence and captures the requested frames.
pub fn dump_density(cfg: &RunConfig, frames: &[usize]) -> anyhow::Result<Vec<FrameDump>> {
    let tracker = cfg.tracker_config()?;
    let sc = cfg.scenarios(cfg.seed).remove(0);
    let seq = generate_sequence(&sc).map_err(|e| usage(format!("invalid scenario: {e}")))?;
    if frames.is_empty() {
        return Err(usage("no frames requested"));
    }
    if let Some(f) = frames.iter().find(|&&f| f >= seq.frames.len()) {
        return Err(usage(format!("frame {f} out of range; the sequence has {} frames", seq.frames.len())));
    }
    let n = cfg.dump.slice_samples;
    let mut dumps = Vec::new();
    run_sequence_with(&seq, &tracker, |t, state, out| {
        if !frames.contains(&t) {
            return Ok(());
        }
        let features = &seq.frames[t].features;
        let b = state.current_box;
        let (density, origin, anchor, reference) = match out {
            Some(o) => {
                let anchor = match o.anchor {
                    Some(a) => a,
                    None => state.box_anchor(features, b)?,
                };
                (o.center_density.clone(), o.region_origin, anchor, o.reference)
            }
            None => {
                let (d, _, origin) = state.center_density(features, &b)?;
                (d, origin, state.box_anchor(features, b)?, (b[2], b[3]))
            }
        };
        let (center, size) = box_slices(|y| state.box_score(&anchor, y), b, reference, n)?;
        dumps.push(FrameDump {
            frame: t,
            reported_box: b,
            missing: state.missing,
            region_origin: origin,
            center_density: density.grid().clone(),
            box_center_slice: center,
            box_size_slice: size,
        });
        Ok(())
    })?;
    dumps.sort_by_key(|d| d.frame);
    dumps.dedup_by_key(|d| d.frame);
    Ok(dumps)
}

pub fn write_dumps(dir: &Path, dumps: &[FrameDump]) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = String::from("frame,origin_row,origin_col,cx,cy,w,h,missing\n");
    for d in dumps {
        let t = d.frame;
        fs::write(dir.join(format!("frame{t:04}-center.txt")), write_grid_dump(&d.center_density))?;
        fs::write(dir.join(format!("frame{t:04}-box-center.txt")), write_grid_dump(&d.box_center_slice))?;
        fs::write(dir.join(format!("frame{t:04}-box-size.txt")), write_grid_dump(&d.box_size_slice))?;
        let b = d.reported_box;
        index.push_str(&format!(
            "{t},{},{},{:?},{:?},{:?},{:?},{}\n",
            d.region_origin.0, d.region_origin.1, b[0], b[1], b[2], b[3], d.missing as u8
        ));
    }
    fs::write(dir.join("index.csv"), index)?;
    Ok(())
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Outcome of one self-test check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn fd_check(f: impl Fn(&Grid2D) -> probreg::Result<f64>, s: &Grid2D, grad: &Grid2D) -> probreg::Result<f64> {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..s.len() {
        let (r, c) = (k / s.width(), k % s.width());
        let mut p = s.clone();
        p.set(r, c, s.get(r, c) + h);
        let mut m = s.clone();
        m.set(r, c, s.get(r, c) - h);
        let fd = (f(&p)? - f(&m)?) / (2.0 * h);
        worst = worst.max((fd - grad.get(r, c)).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}

/// Fast consistency checks of the losses and the tracker.
pub fn selftest(seed: u64) -> anyhow::Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let (hh, ww, area) = (7, 9, 0.5);
    let mut grad_err: f64 = 0.0;
    let mut identity_err: f64 = 0.0;
    let mut delta_err: f64 = 0.0;
    for _ in 0..20 {
        let s = Grid2D::from_fn(hh, ww, |_, _| rng.random_range(-2.0..2.0));
        let a = Grid2D::from_fn(hh, ww, |_, _| rng.random_range(0.0..1.0));
        let center = vec![rng.random_range(1.0..4.0), rng.random_range(1.0..5.0)];
        let label = normalized_label_grid(&GaussianLabel::new(center.clone(), 1.2)?, (hh, ww), area)?;
        let y = (center[0], center[1]);

        let kl = kl_grid_loss(&s, &label, area)?;
        grad_err = grad_err.max(fd_check(|x| kl_grid_loss(x, &label, area).map(|l| l.value), &s, &kl.grad)?);
        let nll = nll_loss(&s, y, area)?;
        grad_err = grad_err.max(fd_check(|x| nll_loss(x, y, area).map(|l| l.value), &s, &nll.grad)?);
        let l2 = l2_loss(&s, &a, area)?;
        grad_err = grad_err.max(fd_check(|x| l2_loss(x, &a, area).map(|l| l.value), &s, &l2.grad)?);

        let at_label = label.map(|p| p.max(1e-300).ln());
        let ent = label_neg_entropy(&label, area)?;
        identity_err = identity_err.max((kl_grid_loss(&at_label, &label, area)?.value + ent).abs());

        let (r, c) = (rng.random_range(0..hh), rng.random_range(0..ww));
        let spacing = area.sqrt();
        let mut onehot = Grid2D::zeros(hh, ww);
        onehot.set(r, c, 1.0);
        let yc = (r as f64 * spacing, c as f64 * spacing);
        delta_err = delta_err.max((kl_grid_loss(&s, &onehot, area)?.value - nll_loss(&s, yc, area)?.value).abs());
    }
    checks.push(Check {
        name: "loss gradients match finite differences",
        passed: grad_err < 1e-6,
        detail: format!("max relative error {grad_err:.2e}"),
    });
    checks.push(Check {
        name: "kl loss plus label entropy vanishes at the label",
        passed: identity_err < 1e-10,
        detail: format!("max deviation {identity_err:.2e}"),
    });
    checks.push(Check {
        name: "one-hot kl equals nll",
        passed: delta_err < 1e-12,
        detail: format!("max deviation {delta_err:.2e}"),
    });

    let seq = generate_sequence(&Scenario::static_noiseless(20))?;
    let run = run_sequence(&seq, &TrackerConfig::default())?;
    let min_iou = run.ious.iter().flatten().fold(f64::INFINITY, |a, &b| a.min(b));
    checks.push(Check {
        name: "static noiseless target tracked",
        passed: min_iou >= 0.99,
        detail: format!("min IoU {min_iou:.4} over {} frames", seq.frames.len()),
    });
    Ok(checks)
}
