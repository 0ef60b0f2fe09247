//! Landmark ⇄ truncated Gaussian heatmap + coordinate offset maps.
//!
//! Every landmark owns three channels: a Gaussian heatmap and two offset maps
//! holding `(pixel − landmark) / σ`. All three are zero wherever the Gaussian
//! falls below the cut threshold, so the support of a ground-truth channel is
//! the disk of radius `σ·sqrt(−2 ln threshold)` around the landmark.
//!
//! Decoding is a majority vote: every pixel whose heatmap reaches the
//! threshold votes for `round(pixel − σ·offset)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    /// Column.
    pub x: f64,
    /// Row.
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameKind {
    Original,
    Resized,
}

/// Coordinate frame a landmark set is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub kind: FrameKind,
    pub width: usize,
    pub height: usize,
}

impl Frame {
    pub const fn original(width: usize, height: usize) -> Self {
        Self {
            kind: FrameKind::Original,
            width,
            height,
        }
    }

    pub const fn resized(width: usize, height: usize) -> Self {
        Self {
            kind: FrameKind::Resized,
            width,
            height,
        }
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x.is_finite()
            && p.y.is_finite()
            && p.x >= 0.0
            && p.y >= 0.0
            && p.x < self.width as f64
            && p.y < self.height as f64
    }

    /// Per-axis scale taking coordinates in `self` to coordinates in `to`.
    pub fn scale_to(&self, to: &Frame) -> (f64, f64) {
        (
            to.width as f64 / self.width as f64,
            to.height as f64 / self.height as f64,
        )
    }
}

/// `K` landmarks in a declared frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<Point>,
    frame: Frame,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>, frame: Frame) -> Result<Self> {
        if let Some((i, p)) = points.iter().enumerate().find(|(_, p)| !frame.contains(p)) {
            return Err(Error::invalid(format!(
                "landmark {} at ({}, {}) lies outside the {}x{} frame",
                i + 1,
                p.x,
                p.y,
                frame.width,
                frame.height
            )));
        }
        Ok(Self { points, frame })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Map every point into `to` by per-axis scaling. Points that land on the
    /// far border are pulled just inside it.
    pub fn rescale(&self, to: Frame) -> LandmarkSet {
        let (sx, sy) = self.frame.scale_to(&to);
        let max_x = to.width as f64 - 1e-9;
        let max_y = to.height as f64 - 1e-9;
        let points = self
            .points
            .iter()
            .map(|p| Point::new((p.x * sx).min(max_x), (p.y * sy).min(max_y)))
            .collect();
        LandmarkSet { points, frame: to }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Gaussian width in pixels.
    pub sigma: f64,
    /// Heatmap cut value; map values below it are zeroed.
    pub threshold: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            sigma: 40.0,
            threshold: 0.6,
        }
    }
}

impl CodecConfig {
    pub fn new(sigma: f64, threshold: f64) -> Result<Self> {
        let c = Self { sigma, threshold };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::invalid(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    /// Radius of the disk where the Gaussian stays at or above the threshold.
    pub fn mask_radius(&self) -> f64 {
        self.sigma * (-2.0 * self.threshold.ln()).sqrt()
    }
}

/// Heatmaps plus x/y offset maps for `K` landmarks.
///
/// Channel layout is `[heat_0..heat_K, offx_0..offx_K, offy_0..offy_K]`,
/// identical to the detector's output tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct MapStack {
    landmarks: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl MapStack {
    pub fn zeros(landmarks: usize, height: usize, width: usize) -> Self {
        Self {
            landmarks,
            height,
            width,
            data: vec![0.0; 3 * landmarks * height * width],
        }
    }

    pub fn from_vec(landmarks: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * landmarks * height * width {
            return Err(Error::shape(
                format!("{} values for {landmarks}x3x{height}x{width}", 3 * landmarks * height * width),
                data.len(),
            ));
        }
        Ok(Self {
            landmarks,
            height,
            width,
            data,
        })
    }

    pub fn landmarks(&self) -> usize {
        self.landmarks
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.landmarks, self.height, self.width)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn channel(&self, c: usize) -> &[f32] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn heatmap(&self, i: usize) -> &[f32] {
        self.channel(i)
    }

    pub fn offset_x(&self, i: usize) -> &[f32] {
        self.channel(self.landmarks + i)
    }

    pub fn offset_y(&self, i: usize) -> &[f32] {
        self.channel(2 * self.landmarks + i)
    }

    pub fn heatmap_mut(&mut self, i: usize) -> &mut [f32] {
        self.channel_mut(i)
    }

    pub fn offset_x_mut(&mut self, i: usize) -> &mut [f32] {
        let k = self.landmarks;
        self.channel_mut(k + i)
    }

    pub fn offset_y_mut(&mut self, i: usize) -> &mut [f32] {
        let k = self.landmarks;
        self.channel_mut(2 * k + i)
    }

    /// Overwrite the three channels of landmark `dst` with landmark `src` of `other`.
    pub fn copy_landmark(&mut self, dst: usize, other: &MapStack, src: usize) {
        assert_eq!((self.height, self.width), (other.height, other.width));
        self.heatmap_mut(dst).copy_from_slice(other.heatmap(src));
        self.offset_x_mut(dst).copy_from_slice(other.offset_x(src));
        self.offset_y_mut(dst).copy_from_slice(other.offset_y(src));
    }

    pub fn check_same_shape(&self, other: &MapStack) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }
}

/// Write landmark `point` into channel `i` of `maps`, clearing the channel first.
pub(crate) fn encode_into(maps: &mut MapStack, i: usize, point: Point, config: &CodecConfig) {
    let (h, w) = (maps.height, maps.width);
    let inv_two_var = 1.0 / (2.0 * config.sigma * config.sigma);
    let reach = config.mask_radius() + 1.0;
    let x0 = (point.x - reach).floor().max(0.0) as usize;
    let x1 = ((point.x + reach).ceil().max(0.0) as usize).min(w.saturating_sub(1));
    let y0 = (point.y - reach).floor().max(0.0) as usize;
    let y1 = ((point.y + reach).ceil().max(0.0) as usize).min(h.saturating_sub(1));

    maps.heatmap_mut(i).fill(0.0);
    maps.offset_x_mut(i).fill(0.0);
    maps.offset_y_mut(i).fill(0.0);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - point.x;
            let dy = y as f64 - point.y;
            let g = (-(dx * dx + dy * dy) * inv_two_var).exp();
            if g >= config.threshold {
                let j = y * w + x;
                maps.heatmap_mut(i)[j] = g as f32;
                maps.offset_x_mut(i)[j] = (dx / config.sigma) as f32;
                maps.offset_y_mut(i)[j] = (dy / config.sigma) as f32;
            }
        }
    }
}

/// Encode landmarks as a ground-truth map stack of spatial size `height×width`.
pub fn encode(
    landmarks: &LandmarkSet,
    height: usize,
    width: usize,
    config: &CodecConfig,
) -> Result<MapStack> {
    config.validate()?;
    let frame = Frame::resized(width, height);
    if let Some((i, p)) = landmarks
        .points()
        .iter()
        .enumerate()
        .find(|(_, p)| !frame.contains(p))
    {
        return Err(Error::invalid(format!(
            "landmark {} at ({}, {}) outside {width}x{height} map",
            i + 1,
            p.x,
            p.y
        )));
    }
    let mut maps = MapStack::zeros(landmarks.len(), height, width);
    for (i, p) in landmarks.points().iter().enumerate() {
        encode_into(&mut maps, i, *p, config);
    }
    Ok(maps)
}

/// Majority-vote decode of a single landmark channel.
///
/// Ties on vote count go to the larger summed heatmap over the voters, then
/// to the first position in row-major order. With no in-image votes the
/// channel's heatmap argmax is returned.
pub fn decode_channel(maps: &MapStack, i: usize, config: &CodecConfig) -> Point {
    let (h, w) = (maps.height, maps.width);
    let heat = maps.heatmap(i);
    let ox = maps.offset_x(i);
    let oy = maps.offset_y(i);
    let thr = config.threshold as f32;

    let mut votes = vec![0u32; h * w];
    let mut mass = vec![0f64; h * w];
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            let j = y * w + x;
            if heat[j] < thr {
                continue;
            }
            let vx = (x as f64 - config.sigma * ox[j] as f64).round();
            let vy = (y as f64 - config.sigma * oy[j] as f64).round();
            if vx < 0.0 || vy < 0.0 || vx >= w as f64 || vy >= h as f64 {
                continue;
            }
            let v = vy as usize * w + vx as usize;
            votes[v] += 1;
            mass[v] += heat[j] as f64;
            any = true;
        }
    }

    let best = if any {
        let mut best = 0;
        for j in 1..h * w {
            if votes[j] > votes[best] || (votes[j] == votes[best] && mass[j] > mass[best]) {
                best = j;
            }
        }
        best
    } else {
        let mut best = 0;
        for j in 1..h * w {
            if heat[j] > heat[best] {
                best = j;
            }
        }
        best
    };
    Point::new((best % w) as f64, (best / w) as f64)
}

/// Decode every landmark channel; the result lives in the map's (resized) frame.
pub fn decode(maps: &MapStack, config: &CodecConfig) -> LandmarkSet {
    let points = (0..maps.landmarks)
        .map(|i| decode_channel(maps, i, config))
        .collect();
    LandmarkSet {
        points,
        frame: Frame::resized(maps.width, maps.height),
    }
}
