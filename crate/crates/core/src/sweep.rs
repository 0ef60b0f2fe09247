//! Seeded random-target benchmark over attack budgets.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, TargetRect, TargetSpec};
use crate::codec::{Frame, LandmarkSet};
use crate::detector::{DetectorModel, Image};
use crate::error::{Error, Result};
use crate::metrics::{self, Cohort, EvalReport, RunMeta};

/// One attack budget evaluated by the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub adaptive: bool,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub attempts_per_image: usize,
    /// Iteration counts at which every cell is evaluated; the largest is the run length.
    pub iteration_grid: Vec<usize>,
    pub cells: Vec<SweepCell>,
    /// Step size, units and the like; `epsilon`, `adaptive` and `iterations` are overridden per cell.
    pub attack: AttackConfig,
    /// Defaults to the proportionally scaled standard rectangle.
    pub rect: Option<TargetRect>,
    pub spacing_mm: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let mut cells: Vec<SweepCell> = [1.0, 2.0, 4.0, 8.0]
            .into_iter()
            .map(|epsilon| SweepCell { adaptive: true, epsilon })
            .collect();
        cells.push(SweepCell {
            adaptive: false,
            epsilon: 8.0,
        });
        Self {
            attempts_per_image: 2,
            iteration_grid: vec![20, 50, 100, 300],
            cells,
            attack: AttackConfig::default(),
            rect: None,
            spacing_mm: metrics::ISBI_SPACING_MM,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attempts_per_image == 0 {
            return Err(Error::invalid("attempts per image must be positive"));
        }
        if self.iteration_grid.is_empty() || self.cells.is_empty() {
            return Err(Error::invalid("sweep needs at least one iteration count and one cell"));
        }
        for c in &self.cells {
            AttackConfig {
                epsilon: c.epsilon,
                ..self.attack.clone()
            }
            .validate()?;
        }
        if !(self.spacing_mm.is_finite() && self.spacing_mm > 0.0) {
            return Err(Error::invalid("pixel spacing must be positive"));
        }
        Ok(())
    }

    pub fn max_iterations(&self) -> usize {
        self.iteration_grid.iter().copied().max().unwrap_or(0)
    }

    pub fn cell_config(&self, cell: &SweepCell) -> AttackConfig {
        let step = self.iteration_grid.iter().fold(0, |g, &i| gcd(g, i));
        AttackConfig {
            epsilon: cell.epsilon,
            adaptive: cell.adaptive,
            iterations: self.max_iterations(),
            trace_every: step,
            ..self.attack.clone()
        }
    }
}

/// A benchmark image: preprocessed input plus resized-frame ground truth.
#[derive(Debug, Clone)]
pub struct EvalImage {
    pub image_id: String,
    pub image: Image,
    pub truth: LandmarkSet,
}

/// Reports of one cell, one per iteration-grid entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: SweepCell,
    pub by_iteration: Vec<(usize, EvalReport)>,
    /// Mean targeted error (mm) at every traced iteration, averaged over landmarks.
    pub curve: Vec<(usize, f64)>,
}

impl CellResult {
    pub fn at(&self, iteration: usize) -> Option<&EvalReport> {
        self.by_iteration.iter().find(|(i, _)| *i == iteration).map(|(_, r)| r)
    }

    pub fn last(&self) -> &EvalReport {
        &self.by_iteration.last().expect("non-empty grid").1
    }
}

/// Invariant bookkeeping across every attack of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepChecks {
    pub attacks: usize,
    /// Outputs outside the ε ball or the valid range.
    pub constraint_violations: usize,
    /// Runs whose final loss is below the initial loss.
    pub loss_decreased: usize,
    /// Largest `|mean(weights) − 1|` seen in any adaptive run.
    pub max_weight_mean_error: f64,
    pub parameters_unchanged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub clean: EvalReport,
    pub cells: Vec<CellResult>,
    pub specs: Vec<(String, TargetSpec)>,
    pub checks: SweepChecks,
}

/// Count pixels breaking the ε ball (with one ulp of slack) or the `[-1, 1]` range.
pub fn constraint_violations(original: &Image, adversarial: &Image, epsilon: f64) -> usize {
    let eps = epsilon as f32;
    original
        .data
        .iter()
        .zip(&adversarial.data)
        .filter(|(o, a)| {
            let bound = eps + f32::EPSILON * eps.max(o.abs()).max(1.0);
            (*a - *o).abs() > bound || !(-1.0..=1.0).contains(*a)
        })
        .count()
}

struct AttemptOutcome {
    /// Per cell: per grid iteration: (targeted errors, stationary errors) with landmark cohorts.
    cells: Vec<Vec<(Vec<f64>, Vec<Cohort>)>>,
    curves: Vec<Vec<(usize, f64)>>,
    checks: SweepChecks,
}

fn run_attempt(
    model: &DetectorModel,
    item: &EvalImage,
    spec: &TargetSpec,
    config: &SweepConfig,
    original: Frame,
) -> Result<AttemptOutcome> {
    let k = model.landmarks();
    let frame = item.truth.frame();
    let cohorts: Vec<Cohort> = (0..k)
        .map(|i| if spec.is_targeted(i) { Cohort::Targeted } else { Cohort::Stationary })
        .collect();
    // Reference per landmark: desired position if targeted, ground truth otherwise.
    let mut reference: Vec<_> = item.truth.points().to_vec();
    for t in &spec.targeted {
        reference[t.index] = t.position;
    }
    let reference = LandmarkSet::new(reference, frame)?;
    let mut checks = SweepChecks {
        parameters_unchanged: true,
        ..SweepChecks::default()
    };
    let mut cells = Vec::with_capacity(config.cells.len());
    let mut curves = Vec::with_capacity(config.cells.len());
    for cell in &config.cells {
        let cfg = config.cell_config(cell);
        let r = attack::run_attack(model, &item.image, spec, &cfg)?;
        checks.attacks += 1;
        checks.constraint_violations +=
            constraint_violations(&item.image, &r.adversarial, cfg.epsilon_normalized());
        if r.final_loss() < r.initial_loss() {
            checks.loss_decreased += 1;
        }
        if cell.adaptive {
            for m in &r.weight_means {
                checks.max_weight_mean_error = checks.max_weight_mean_error.max((m - 1.0).abs());
            }
        }
        let mut per_iter = Vec::with_capacity(config.iteration_grid.len());
        for &it in &config.iteration_grid {
            let tp = r
                .trace_at(it)
                .ok_or_else(|| Error::invalid(format!("iteration {it} missing from the attack trace")))?;
            let errors = metrics::radial_error(&tp.landmarks, &reference, config.spacing_mm, original)?;
            per_iter.push((errors, cohorts.clone()));
        }
        let mut curve = Vec::with_capacity(r.trace.len());
        for tp in &r.trace {
            let errors = metrics::radial_error(&tp.landmarks, &reference, config.spacing_mm, original)?;
            let targeted: Vec<f64> = spec.targeted.iter().map(|t| errors[t.index]).collect();
            curve.push((tp.iteration, targeted.iter().sum::<f64>() / targeted.len().max(1) as f64));
        }
        cells.push(per_iter);
        curves.push(curve);
    }
    Ok(AttemptOutcome { cells, curves, checks })
}

/// Run every cell of `config` on `attempts_per_image` random target specs per image.
///
/// Specs are drawn from `rng` sequentially (image-major) before any attack
/// runs, so results do not depend on scheduling. `original` is the frame
/// errors are measured in.
pub fn run_sweep<R: Rng + ?Sized>(
    model: &DetectorModel,
    images: &[EvalImage],
    config: &SweepConfig,
    original: Frame,
    rng: &mut R,
    meta: RunMeta,
) -> Result<SweepResult> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::invalid("no benchmark images"));
    }
    let digest = model.parameter_digest();
    let frame = Frame::resized(model.input.width, model.input.height);
    let rect = config.rect.unwrap_or_else(|| TargetRect::scaled_to(frame));
    let k = model.landmarks();

    let mut clean = EvalReport::new(RunMeta {
        label: format!("{} clean", meta.label),
        ..meta.clone()
    });
    for item in images {
        let pred = model.predict_landmarks(&item.image)?;
        let errors = metrics::radial_error(&pred, &item.truth, config.spacing_mm, original)?;
        clean.push_image(&item.image_id, 0, &errors, &vec![Cohort::Clean; k]);
    }

    let mut jobs = Vec::with_capacity(images.len() * config.attempts_per_image);
    for i in 0..images.len() {
        for a in 0..config.attempts_per_image {
            let spec = attack::random_target_spec(rng, k, &rect, frame)?;
            jobs.push((i, a, spec));
        }
    }
    let outcomes: Vec<AttemptOutcome> = jobs
        .par_iter()
        .map(|(i, _, spec)| run_attempt(model, &images[*i], spec, config, original))
        .collect::<Result<_>>()?;

    let mut checks = SweepChecks {
        parameters_unchanged: model.parameter_digest() == digest,
        ..SweepChecks::default()
    };
    let mut cells: Vec<CellResult> = config
        .cells
        .iter()
        .map(|cell| CellResult {
            cell: *cell,
            by_iteration: config
                .iteration_grid
                .iter()
                .map(|&it| {
                    let m = RunMeta {
                        label: meta.label.clone(),
                        epsilon: Some(cell.epsilon),
                        iterations: Some(it),
                        adaptive: Some(cell.adaptive),
                        seed: meta.seed,
                    };
                    (it, EvalReport::new(m))
                })
                .collect(),
            curve: Vec::new(),
        })
        .collect();
    let mut curve_sums: Vec<Vec<(usize, f64)>> = vec![Vec::new(); config.cells.len()];
    for ((i, a, _), out) in jobs.iter().zip(&outcomes) {
        checks.attacks += out.checks.attacks;
        checks.constraint_violations += out.checks.constraint_violations;
        checks.loss_decreased += out.checks.loss_decreased;
        checks.max_weight_mean_error = checks.max_weight_mean_error.max(out.checks.max_weight_mean_error);
        for (c, per_iter) in out.cells.iter().enumerate() {
            for (g, (errors, cohorts)) in per_iter.iter().enumerate() {
                cells[c].by_iteration[g].1.push_image(&images[*i].image_id, *a, errors, cohorts);
            }
            let sums = &mut curve_sums[c];
            if sums.is_empty() {
                sums.extend(out.curves[c].iter().map(|&(it, _)| (it, 0.0)));
            }
            for (s, (_, v)) in sums.iter_mut().zip(&out.curves[c]) {
                s.1 += v;
            }
        }
    }
    let n = jobs.len() as f64;
    for (cell, sums) in cells.iter_mut().zip(curve_sums) {
        cell.curve = sums.into_iter().map(|(it, s)| (it, s / n)).collect();
    }
    let specs = jobs
        .into_iter()
        .map(|(i, _, spec)| (images[i].image_id.clone(), spec))
        .collect();
    Ok(SweepResult {
        clean,
        cells,
        specs,
        checks,
    })
}
