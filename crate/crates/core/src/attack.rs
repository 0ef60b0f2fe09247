//! Targeted iterative sign-gradient attacks (plain and adaptively weighted).

use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, CodecConfig, Frame, LandmarkSet, MapStack, Point};
use crate::detector::{DetectorModel, Image, LossBreakdown};
use crate::error::{Error, Result};

/// One attacker-chosen destination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    /// Zero-based landmark index.
    pub index: usize,
    /// Desired position in the resized frame.
    pub position: Point,
}

/// Partition of the landmarks into targeted (moved) and stationary (pinned) sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    landmarks: usize,
    frame: Frame,
    /// Sorted by landmark index.
    pub targeted: Vec<Target>,
    /// Complement of the targeted indices, ascending.
    pub stationary: Vec<usize>,
}

impl TargetSpec {
    pub fn new(landmarks: usize, mut targeted: Vec<Target>, frame: Frame) -> Result<Self> {
        targeted.sort_by_key(|t| t.index);
        for w in targeted.windows(2) {
            if w[0].index == w[1].index {
                return Err(Error::invalid(format!("landmark {} targeted twice", w[0].index + 1)));
            }
        }
        for t in &targeted {
            if t.index >= landmarks {
                return Err(Error::invalid(format!(
                    "landmark index {} out of range 1..={landmarks}",
                    t.index + 1
                )));
            }
            if !frame.contains(&t.position) {
                return Err(Error::invalid(format!(
                    "desired position ({}, {}) of landmark {} outside the {}x{} frame",
                    t.position.x,
                    t.position.y,
                    t.index + 1,
                    frame.width,
                    frame.height
                )));
            }
        }
        let stationary = (0..landmarks)
            .filter(|i| targeted.binary_search_by_key(i, |t| t.index).is_err())
            .collect();
        Ok(Self {
            landmarks,
            frame,
            targeted,
            stationary,
        })
    }

    pub fn landmarks(&self) -> usize {
        self.landmarks
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn is_targeted(&self, index: usize) -> bool {
        self.targeted.binary_search_by_key(&index, |t| t.index).is_ok()
    }

    pub fn targeted_indices(&self) -> Vec<usize> {
        self.targeted.iter().map(|t| t.index).collect()
    }

    pub fn to_file(&self, image_id: &str) -> TargetFile {
        TargetFile {
            image_id: image_id.to_string(),
            targets: self
                .targeted
                .iter()
                .map(|t| TargetEntry {
                    index: t.index + 1,
                    x: t.position.x,
                    y: t.position.y,
                })
                .collect(),
        }
    }

    pub fn from_file(file: &TargetFile, landmarks: usize, frame: Frame) -> Result<Self> {
        let targeted = file
            .targets
            .iter()
            .map(|e| {
                if e.index == 0 {
                    return Err(Error::invalid("landmark indices in target files start at 1"));
                }
                Ok(Target {
                    index: e.index - 1,
                    position: Point::new(e.x, e.y),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(landmarks, targeted, frame)
    }
}

/// On-disk target description; `index` is one-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetFile {
    pub image_id: String,
    pub targets: Vec<TargetEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetEntry {
    pub index: usize,
    pub x: f64,
    pub y: f64,
}

impl TargetFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Scale in which an intensity quantity is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntensityUnit {
    /// 8-bit levels; `2/255` in network units.
    Levels,
    /// Network input units on `[-1, 1]`.
    Normalized,
}

impl IntensityUnit {
    pub fn to_normalized(self, v: f64) -> f64 {
        match self {
            IntensityUnit::Levels => v * 2.0 / 255.0,
            IntensityUnit::Normalized => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub epsilon_unit: IntensityUnit,
    pub eta: f64,
    pub eta_unit: IntensityUnit,
    pub iterations: usize,
    /// Reweight landmark losses by their share of the mean every iteration.
    pub adaptive: bool,
    /// Iterations between recorded trace points; 0 records only the endpoints.
    pub trace_every: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0,
            epsilon_unit: IntensityUnit::Levels,
            eta: 0.05,
            eta_unit: IntensityUnit::Normalized,
            iterations: 300,
            adaptive: false,
            trace_every: 10,
        }
    }
}

/// Step size of the desk preset in normalized units. At 0.05 a single step nearly
/// spans the ε=8 ball and the small desk model's gradient signs flip between steps.
pub const DESK_ETA: f64 = 0.005;

impl AttackConfig {
    /// Defaults for a model scale; only the step size differs.
    pub fn for_scale(scale: crate::detector::ModelScale) -> Self {
        match scale {
            crate::detector::ModelScale::Full => Self::default(),
            crate::detector::ModelScale::Desk => Self {
                eta: DESK_ETA,
                ..Self::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::invalid("eta must be positive"));
        }
        Ok(())
    }

    pub fn epsilon_normalized(&self) -> f64 {
        self.epsilon_unit.to_normalized(self.epsilon)
    }

    pub fn eta_normalized(&self) -> f64 {
        self.eta_unit.to_normalized(self.eta)
    }

    fn is_trace_point(&self, iteration: usize) -> bool {
        iteration == 0
            || iteration == self.iterations
            || (self.trace_every > 0 && iteration % self.trace_every == 0)
    }
}

/// Where each landmark's target channels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelSource {
    /// Encoded from the attacker's desired position.
    Desired,
    /// Copied from the clean-image prediction.
    CleanPrediction,
}

/// Attack target maps from an already computed clean prediction.
pub fn targets_from_clean(
    clean: &MapStack,
    spec: &TargetSpec,
    codec: &CodecConfig,
) -> Result<(MapStack, Vec<ChannelSource>)> {
    if clean.landmarks() != spec.landmarks {
        return Err(Error::shape(spec.landmarks, clean.landmarks()));
    }
    let map_frame = Frame::resized(clean.width(), clean.height());
    if (spec.frame.width, spec.frame.height) != (map_frame.width, map_frame.height) {
        return Err(Error::shape(
            format!("{}x{}", map_frame.width, map_frame.height),
            format!("{}x{}", spec.frame.width, spec.frame.height),
        ));
    }
    let mut maps = clean.clone();
    let mut sources = vec![ChannelSource::CleanPrediction; spec.landmarks];
    for t in &spec.targeted {
        codec::encode_into(&mut maps, t.index, t.position, codec);
        sources[t.index] = ChannelSource::Desired;
    }
    Ok((maps, sources))
}

/// Target maps for an attack on `image`: desired positions for targeted
/// landmarks, the frozen clean prediction for the rest.
pub fn build_adversarial_targets(
    model: &DetectorModel,
    image: &Image,
    spec: &TargetSpec,
    codec: &CodecConfig,
) -> Result<(MapStack, Vec<ChannelSource>)> {
    let clean = model.forward(image)?;
    targets_from_clean(&clean, spec, codec)
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One descent step: move against the gradient sign, project onto the
/// `epsilon` ball around `original`, then clamp to `[-1, 1]`.
pub fn fgsm_step(current: &Image, gradient: &Image, original: &Image, epsilon: f64, eta: f64) -> Result<Image> {
    let shape = |t: &Image| (t.channels, t.height, t.width);
    for other in [gradient, original] {
        if shape(other) != shape(current) {
            return Err(Error::shape(format!("{:?}", shape(current)), format!("{:?}", shape(other))));
        }
    }
    let (eps, eta) = (epsilon as f32, eta as f32);
    let data = current
        .data
        .iter()
        .zip(&gradient.data)
        .zip(&original.data)
        .map(|((&c, &g), &o)| (c - eta * sign(g)).clamp(o - eps, o + eps).clamp(-1.0, 1.0))
        .collect();
    Ok(Image::from_vec(current.channels, current.height, current.width, data))
}

/// Weights `L_j / mean(L)`; all ones when every loss is zero.
pub fn adaptive_weights(losses: &[f64]) -> Result<Vec<f64>> {
    if let Some(l) = losses.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::invalid(format!("landmark losses must be finite and non-negative, got {l}")));
    }
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    if losses.is_empty() || mean == 0.0 {
        return Ok(vec![1.0; losses.len()]);
    }
    Ok(losses.iter().map(|l| l / mean).collect())
}

/// Predictions and losses of one recorded iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    /// Number of update steps applied so far.
    pub iteration: usize,
    pub landmarks: LandmarkSet,
    /// Unweighted sum of the landmark losses.
    pub total_loss: f64,
    /// Distance of each targeted landmark to its desired position.
    pub targeted_errors: Vec<f64>,
    /// Distance of each stationary landmark to its clean prediction.
    pub stationary_errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub adversarial: Image,
    /// `adversarial − original`.
    pub perturbation: Image,
    pub clean_landmarks: LandmarkSet,
    pub final_landmarks: LandmarkSet,
    pub trace: Vec<TracePoint>,
    /// Unweighted total loss of every iterate, `iterations + 1` entries.
    pub losses: Vec<f64>,
    /// Mean of the weights used at each update step.
    pub weight_means: Vec<f64>,
    pub iterations: usize,
    pub wall_time: Duration,
}

impl AttackResult {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one evaluation")
    }

    pub fn trace_at(&self, iteration: usize) -> Option<&TracePoint> {
        self.trace.iter().find(|t| t.iteration == iteration)
    }

    pub fn max_abs_perturbation(&self) -> f32 {
        self.perturbation.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Serializable record of the run without image buffers.
    pub fn trace_record<'a>(&'a self, spec: &'a TargetSpec, config: &'a AttackConfig) -> TraceRecord<'a> {
        TraceRecord {
            config,
            targets: spec,
            clean_landmarks: &self.clean_landmarks,
            final_landmarks: &self.final_landmarks,
            iterations: self.iterations,
            wall_time_seconds: self.wall_time.as_secs_f64(),
            losses: &self.losses,
            weight_means: &self.weight_means,
            trace: &self.trace,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct TraceRecord<'a> {
    pub config: &'a AttackConfig,
    pub targets: &'a TargetSpec,
    pub clean_landmarks: &'a LandmarkSet,
    pub final_landmarks: &'a LandmarkSet,
    pub iterations: usize,
    pub wall_time_seconds: f64,
    pub losses: &'a [f64],
    pub weight_means: &'a [f64],
    pub trace: &'a [TracePoint],
}

fn trace_point(iteration: usize, landmarks: LandmarkSet, losses: &LossBreakdown, spec: &TargetSpec, clean: &LandmarkSet) -> TracePoint {
    let p = landmarks.points();
    TracePoint {
        iteration,
        total_loss: losses.total,
        targeted_errors: spec.targeted.iter().map(|t| p[t.index].distance(&t.position)).collect(),
        stationary_errors: spec.stationary.iter().map(|&s| p[s].distance(&clean.points()[s])).collect(),
        landmarks,
    }
}

fn check_finite(losses: &LossBreakdown, iteration: usize, trace_len: usize) -> Result<()> {
    if losses.total.is_finite() {
        return Ok(());
    }
    Err(Error::NonFinite {
        stage: format!("attack iteration {iteration}"),
        detail: format!(
            "total loss {}, per-landmark {:?}; {trace_len} trace points recorded before abort",
            losses.total, losses.per_landmark
        ),
    })
}

/// Run the iterative attack. Weights are recomputed from the current iterate's
/// losses each step when `config.adaptive`; otherwise every weight is 1.
pub fn run_attack(model: &DetectorModel, image: &Image, spec: &TargetSpec, config: &AttackConfig) -> Result<AttackResult> {
    run_attack_with(model, image, spec, config, |_| {})
}

/// [`run_attack`] with a callback invoked on every recorded trace point.
pub fn run_attack_with(
    model: &DetectorModel,
    image: &Image,
    spec: &TargetSpec,
    config: &AttackConfig,
    mut on_trace: impl FnMut(&TracePoint),
) -> Result<AttackResult> {
    config.validate()?;
    model.check_image(image)?;
    let started = Instant::now();
    let codec = &model.codec;
    let k = model.landmarks();
    let clean_maps = model.forward(image)?;
    let clean_landmarks = codec::decode(&clean_maps, codec);
    let (targets, _) = targets_from_clean(&clean_maps, spec, codec)?;
    drop(clean_maps);
    let (eps, eta) = (config.epsilon_normalized(), config.eta_normalized());

    let mut current = image.clone();
    let mut trace = Vec::new();
    let mut losses = Vec::with_capacity(config.iterations + 1);
    let mut weight_means = Vec::with_capacity(config.iterations);
    let mut record = |iteration: usize, raw_maps: MapStack, l: &LossBreakdown, trace: &mut Vec<TracePoint>| {
        let tp = trace_point(iteration, codec::decode(&raw_maps, codec), l, spec, &clean_landmarks);
        on_trace(&tp);
        trace.push(tp);
    };

    for it in 0..config.iterations {
        let step = model.input_gradient_with(&current, &targets, |l| {
            if config.adaptive {
                adaptive_weights(&l.per_landmark).unwrap_or_else(|_| vec![1.0; k])
            } else {
                vec![1.0; k]
            }
        })?;
        check_finite(&step.losses, it, trace.len())?;
        losses.push(step.losses.total);
        weight_means.push(step.weights.iter().sum::<f64>() / k as f64);
        if config.is_trace_point(it) {
            let maps = crate::detector::raw_to_maps(&step.output, k);
            record(it, maps, &step.losses, &mut trace);
        }
        current = fgsm_step(&current, &step.gradient, image, eps, eta)?;
    }

    let raw = model.forward_raw(&current)?;
    let final_losses = crate::detector::loss_from_logits(&raw, &targets, model.alpha)?;
    check_finite(&final_losses, config.iterations, trace.len())?;
    losses.push(final_losses.total);
    record(config.iterations, crate::detector::raw_to_maps(&raw, k), &final_losses, &mut trace);
    let final_landmarks = trace.last().expect("final point recorded").landmarks.clone();

    let perturbation = Image::from_vec(
        image.channels,
        image.height,
        image.width,
        current.data.iter().zip(&image.data).map(|(a, o)| a - o).collect(),
    );
    Ok(AttackResult {
        adversarial: current,
        perturbation,
        clean_landmarks,
        final_landmarks,
        trace,
        losses,
        weight_means,
        iterations: config.iterations,
        wall_time: started.elapsed(),
    })
}

/// Axis-aligned region desired positions are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetRect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl TargetRect {
    /// The rectangle used on 640×800 resized cephalograms.
    pub const ISBI: TargetRect = TargetRect {
        x_min: 100.0,
        x_max: 600.0,
        y_min: 250.0,
        y_max: 750.0,
    };

    /// Proportional copy of [`TargetRect::ISBI`] for another input size.
    pub fn scaled_to(frame: Frame) -> TargetRect {
        let (sx, sy) = (frame.width as f64 / 640.0, frame.height as f64 / 800.0);
        let r = Self::ISBI;
        TargetRect {
            x_min: r.x_min * sx,
            x_max: r.x_max * sx,
            y_min: r.y_min * sy,
            y_max: r.y_max * sy,
        }
    }

    pub fn validate(&self, frame: Frame) -> Result<()> {
        let ok = self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_min < self.x_max
            && self.y_min < self.y_max
            && self.x_max <= frame.width as f64
            && self.y_max <= frame.height as f64;
        if !ok {
            return Err(Error::invalid(format!(
                "target rectangle {self:?} is empty or exceeds the {}x{} frame",
                frame.width, frame.height
            )));
        }
        Ok(())
    }
}

/// Random attack: `N ~ U{1..K}` distinct landmarks, each sent to a uniform
/// point of `rect`.
pub fn random_target_spec<R: Rng + ?Sized>(rng: &mut R, landmarks: usize, rect: &TargetRect, frame: Frame) -> Result<TargetSpec> {
    rect.validate(frame)?;
    if landmarks == 0 {
        return Err(Error::invalid("at least one landmark is required"));
    }
    let n = rng.random_range(1..=landmarks);
    // The far border itself is outside the frame; keep draws strictly inside.
    let x_hi = rect.x_max.min(frame.width as f64 - 1e-9);
    let y_hi = rect.y_max.min(frame.height as f64 - 1e-9);
    let targeted = index::sample(rng, landmarks, n)
        .into_iter()
        .map(|index| Target {
            index,
            position: Point::new(rng.random_range(rect.x_min..x_hi), rng.random_range(rect.y_min..y_hi)),
        })
        .collect();
    TargetSpec::new(landmarks, targeted, frame)
}
