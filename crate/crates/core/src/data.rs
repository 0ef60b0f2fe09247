//! Dataset ingestion, preprocessing, synthetic data and image export.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::TargetSpec;
use crate::codec::{Frame, LandmarkSet, Point};
use crate::detector::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test1,
    Test2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub image_id: String,
    /// Raw 8-bit grayscale image at original resolution.
    pub image: GrayImage,
    /// Ground truth in the original frame.
    pub landmarks: LandmarkSet,
    pub split: Split,
}

impl DatasetRecord {
    pub fn frame(&self) -> Frame {
        Frame::original(self.image.width() as usize, self.image.height() as usize)
    }
}

/// Network input geometry and intensity mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub width: usize,
    pub height: usize,
    /// Grayscale is replicated to this many channels.
    pub channels: usize,
}

impl PreprocessSpec {
    pub const ISBI: PreprocessSpec = PreprocessSpec {
        width: 640,
        height: 800,
        channels: 1,
    };

    pub const DESK: PreprocessSpec = PreprocessSpec {
        width: 128,
        height: 128,
        channels: 1,
    };

    pub fn frame(&self) -> Frame {
        Frame::resized(self.width, self.height)
    }
}

/// 8-bit level to network units: `v / 127.5 − 1`.
pub fn normalize(v: f32) -> f32 {
    v / 127.5 - 1.0
}

pub fn denormalize(v: f32) -> f32 {
    (v + 1.0) * 127.5
}

/// Normalized value back to the nearest 8-bit level.
pub fn to_level(v: f32) -> u8 {
    denormalize(v).round().clamp(0.0, 255.0) as u8
}

/// Bilinear resize plus normalization to `[-1, 1]`; landmarks are scaled per axis.
pub fn preprocess(record: &DatasetRecord, spec: &PreprocessSpec) -> (Image, LandmarkSet) {
    let image = preprocess_image(&record.image, spec);
    (image, record.landmarks.rescale(spec.frame()))
}

pub fn preprocess_image(gray: &GrayImage, spec: &PreprocessSpec) -> Image {
    let resized;
    let src = if (gray.width() as usize, gray.height() as usize) == (spec.width, spec.height) {
        gray
    } else {
        resized = image::imageops::resize(
            gray,
            spec.width as u32,
            spec.height as u32,
            image::imageops::FilterType::Triangle,
        );
        &resized
    };
    let plane: Vec<f32> = src.pixels().map(|p| normalize(p.0[0] as f32)).collect();
    let mut data = Vec::with_capacity(plane.len() * spec.channels);
    for _ in 0..spec.channels {
        data.extend_from_slice(&plane);
    }
    Image::from_vec(spec.channels, spec.height, spec.width, data)
}

/// First channel of a normalized image as 8-bit grayscale.
pub fn image_to_gray(image: &Image) -> GrayImage {
    let buf = image.channel(0).iter().map(|&v| to_level(v)).collect();
    GrayImage::from_raw(image.width as u32, image.height as u32, buf).expect("buffer matches size")
}

/// Layout of an ISBI-2015-style dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsbiLayout {
    /// Directories searched (in order) for `NNN.<ext>` image files.
    pub image_dirs: Vec<PathBuf>,
    pub image_ext: String,
    /// One annotation directory per annotator, each holding `NNN.txt`.
    pub annotation_dirs: Vec<PathBuf>,
    pub count: usize,
    pub train: usize,
    pub test1: usize,
    pub landmarks: usize,
    /// `(width, height)` every image must have, if set.
    pub expected_size: Option<(u32, u32)>,
}

impl Default for IsbiLayout {
    fn default() -> Self {
        Self {
            image_dirs: vec![
                "RawImage/TrainingData".into(),
                "RawImage/Test1Data".into(),
                "RawImage/Test2Data".into(),
            ],
            image_ext: "bmp".into(),
            annotation_dirs: vec!["AnnotationsByMD/400_senior".into(), "AnnotationsByMD/400_junior".into()],
            count: 400,
            train: 150,
            test1: 150,
            landmarks: 19,
            expected_size: Some((1935, 2400)),
        }
    }
}

impl IsbiLayout {
    pub fn split_of(&self, index: usize) -> Split {
        if index <= self.train {
            Split::Train
        } else if index <= self.train + self.test1 {
            Split::Test1
        } else {
            Split::Test2
        }
    }

    fn file_stem(index: usize) -> String {
        format!("{index:03}")
    }
}

/// Parse the first `k` "x,y" lines of an annotation file. Later lines are ignored.
pub fn parse_annotation(path: &Path, text: &str, k: usize) -> Result<Vec<Point>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {message}"),
    };
    let mut points = Vec::with_capacity(k);
    for (n, line) in text.lines().take(k).enumerate() {
        let mut parts = line.trim().split(',');
        let mut coord = |name: &str| -> Result<f64> {
            let raw = parts
                .next()
                .ok_or_else(|| parse_err(n + 1, format!("missing {name} in {line:?}")))?;
            raw.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(n + 1, format!("bad {name} value {raw:?}")))
        };
        let x = coord("x")?;
        let y = coord("y")?;
        points.push(Point::new(x, y));
    }
    if points.len() != k {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("expected {k} landmarks, found {}", points.len()),
        });
    }
    Ok(points)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_isbi_record(root: &Path, layout: &IsbiLayout, index: usize) -> Result<DatasetRecord> {
    let stem = IsbiLayout::file_stem(index);
    let file = format!("{stem}.{}", layout.image_ext);
    let image_path = layout
        .image_dirs
        .iter()
        .map(|d| root.join(d).join(&file))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::io(root.join(&file), std::io::ErrorKind::NotFound.into()))?;
    let image = image::open(&image_path)
        .map_err(|source| Error::Image {
            path: image_path.clone(),
            source,
        })?
        .into_luma8();
    if let Some((w, h)) = layout.expected_size {
        if image.dimensions() != (w, h) {
            return Err(Error::Parse {
                path: image_path,
                message: format!("expected {w}x{h} image, found {:?}", image.dimensions()),
            });
        }
    }

    let mut sums = vec![Point::new(0.0, 0.0); layout.landmarks];
    for dir in &layout.annotation_dirs {
        let path = root.join(dir).join(format!("{stem}.txt"));
        let pts = parse_annotation(&path, &read_text(&path)?, layout.landmarks)?;
        for (s, p) in sums.iter_mut().zip(pts) {
            s.x += p.x;
            s.y += p.y;
        }
    }
    let n = layout.annotation_dirs.len() as f64;
    let points = sums.into_iter().map(|p| Point::new(p.x / n, p.y / n)).collect();
    let frame = Frame::original(image.width() as usize, image.height() as usize);
    let landmarks = LandmarkSet::new(points, frame).map_err(|e| Error::Parse {
        path: root.join(&file),
        message: e.to_string(),
    })?;
    Ok(DatasetRecord {
        image_id: stem,
        image,
        landmarks,
        split: layout.split_of(index),
    })
}

/// Load every record of an ISBI-style directory, averaging the annotators.
pub fn load_isbi(root: &Path, layout: &IsbiLayout) -> Result<Vec<DatasetRecord>> {
    if layout.annotation_dirs.is_empty() {
        return Err(Error::invalid("at least one annotation directory is required"));
    }
    (1..=layout.count)
        .into_par_iter()
        .map(|i| load_isbi_record(root, layout, i))
        .collect()
}

/// Write records in the ISBI layout; every annotator file receives the same points.
pub fn export_isbi(records: &[DatasetRecord], root: &Path, layout: &IsbiLayout) -> Result<()> {
    let dirs: Vec<PathBuf> = layout
        .annotation_dirs
        .iter()
        .chain(&layout.image_dirs)
        .map(|d| root.join(d))
        .collect();
    for d in &dirs {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for r in records {
        let split_dir = match r.split {
            Split::Train => 0,
            Split::Test1 => 1,
            Split::Test2 => 2,
        };
        let img_dir = root.join(&layout.image_dirs[split_dir.min(layout.image_dirs.len() - 1)]);
        let path = img_dir.join(format!("{}.{}", r.image_id, layout.image_ext));
        r.image.save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
        let text: String = r
            .landmarks
            .points()
            .iter()
            .map(|p| format!("{},{}\n", p.x, p.y))
            .collect();
        for d in &layout.annotation_dirs {
            let path = root.join(d).join(format!("{}.txt", r.image_id));
            fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

/// Parameters of the synthetic landmark images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub landmarks: usize,
    /// The first `cluster_size` landmarks are placed as a tight group.
    pub cluster_size: usize,
    /// Distance between neighbouring cluster members.
    pub cluster_spacing: f64,
    /// Cluster members share one glyph and a fixed orientation, so only their
    /// arrangement tells them apart.
    #[serde(default)]
    pub shared_cluster_glyph: bool,
    /// Minimum distance between an isolated landmark and any other.
    pub isolated_spacing: f64,
    /// Glyph footprint radius.
    pub glyph_radius: f64,
    /// Minimum distance from a landmark to the image border.
    pub margin: f64,
    /// Glyph contrast in 8-bit levels.
    pub contrast: f64,
    /// Per-pixel Gaussian noise in 8-bit levels.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            landmarks: 8,
            cluster_size: 3,
            cluster_spacing: 13.0,
            shared_cluster_glyph: true,
            isolated_spacing: 26.0,
            glyph_radius: 5.0,
            margin: 12.0,
            contrast: 24.0,
            noise: 5.0,
        }
    }
}

/// Number of distinct glyphs available for synthetic landmarks.
pub const GLYPHS: usize = 16;

/// Signed distance from `(dx, dy)` to glyph `kind` of radius `r` (negative inside).
fn glyph_sdf(kind: usize, dx: f64, dy: f64, r: f64) -> f64 {
    let d = dx.hypot(dy);
    let bar = |a: f64, b: f64, half_w: f64, half_l: f64| (a.abs() - half_w).max(b.abs() - half_l);
    let (rx, ry) = ((dx + dy) * std::f64::consts::FRAC_1_SQRT_2, (dx - dy) * std::f64::consts::FRAC_1_SQRT_2);
    match kind / 2 {
        0 => d - 0.8 * r,
        1 => (d - 0.7 * r).abs() - 0.22 * r,
        2 => dx.abs().max(dy.abs()) - 0.7 * r,
        3 => bar(dx, dy, 0.22 * r, r).min(bar(dy, dx, 0.22 * r, r)),
        4 => bar(rx, ry, 0.22 * r, r).min(bar(ry, rx, 0.22 * r, r)),
        5 => bar(dx, dy, 0.9 * r, 0.3 * r),
        6 => (dx.abs() + dy.abs()) - 0.9 * r,
        _ => (d - 0.85 * r).max(-(d - 0.35 * r)).max(-dy),
    }
}

/// Glyph `kind` intensity at offset `(dx, dy)`, anti-aliased, in `[-1, 1]`.
fn glyph_value(kind: usize, dx: f64, dy: f64, r: f64) -> f64 {
    let coverage = (0.5 - glyph_sdf(kind, dx, dy, r)).clamp(0.0, 1.0);
    let polarity = if kind % 2 == 0 { 1.0 } else { -1.0 };
    polarity * coverage
}

fn place_landmarks<R: Rng + ?Sized>(rng: &mut R, cfg: &SynthConfig) -> Option<Vec<Point>> {
    let (w, h, m) = (cfg.width as f64, cfg.height as f64, cfg.margin);
    let uniform = |rng: &mut R, lo: f64, hi: f64| rng.random_range(lo..hi);
    'attempt: for _ in 0..200 {
        let mut pts: Vec<Point> = Vec::with_capacity(cfg.landmarks);
        if cfg.cluster_size > 0 {
            let circum = if cfg.cluster_size > 1 {
                cfg.cluster_spacing / (2.0 * (std::f64::consts::PI / cfg.cluster_size as f64).sin())
            } else {
                0.0
            };
            let lo = m + circum;
            if w - lo <= lo || h - lo <= lo {
                return None;
            }
            let cx = uniform(rng, lo, w - lo);
            let cy = uniform(rng, lo, h - lo);
            let phase = if cfg.shared_cluster_glyph {
                -std::f64::consts::FRAC_PI_2
            } else {
                uniform(rng, 0.0, std::f64::consts::TAU)
            };
            for j in 0..cfg.cluster_size {
                let a = phase + std::f64::consts::TAU * j as f64 / cfg.cluster_size as f64;
                pts.push(Point::new(cx + circum * a.cos(), cy + circum * a.sin()));
            }
        }
        while pts.len() < cfg.landmarks {
            let mut placed = false;
            for _ in 0..500 {
                let p = Point::new(uniform(rng, m, w - m), uniform(rng, m, h - m));
                if pts.iter().all(|q| q.distance(&p) >= cfg.isolated_spacing) {
                    pts.push(p);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'attempt;
            }
        }
        return Some(pts);
    }
    None
}

fn render<R: Rng + ?Sized>(rng: &mut R, cfg: &SynthConfig, pts: &[Point]) -> GrayImage {
    let base = rng.random_range(100.0..150.0);
    let gx = rng.random_range(-20.0..20.0) / cfg.width as f64;
    let gy = rng.random_range(-20.0..20.0) / cfg.height as f64;
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("finite noise");
    let reach = cfg.glyph_radius + 1.0;
    let mut img = GrayImage::new(cfg.width as u32, cfg.height as u32);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let (fx, fy) = (x as f64, y as f64);
            let mut v = base + gx * fx + gy * fy;
            for (k, p) in pts.iter().enumerate() {
                let (dx, dy) = (fx - p.x, fy - p.y);
                if dx.abs() <= reach && dy.abs() <= reach {
                    let kind = if cfg.shared_cluster_glyph && k < cfg.cluster_size { 0 } else { k % GLYPHS };
                    v += cfg.contrast * glyph_value(kind, dx, dy, cfg.glyph_radius);
                }
            }
            if cfg.noise > 0.0 {
                v += noise.sample(rng);
            }
            img.put_pixel(x as u32, y as u32, Luma([v.round().clamp(0.0, 255.0) as u8]));
        }
    }
    img
}

/// Generate `n_images` synthetic records with one distinct glyph per landmark.
///
/// Landmarks `0..cluster_size` form a tight group; the rest are kept at least
/// `isolated_spacing` apart from every other landmark.
pub fn synth_dataset<R: Rng + ?Sized>(rng: &mut R, n_images: usize, cfg: &SynthConfig) -> Result<Vec<DatasetRecord>> {
    if cfg.landmarks == 0 || cfg.landmarks > GLYPHS {
        return Err(Error::invalid(format!("synthetic data supports 1..={GLYPHS} landmarks")));
    }
    if cfg.cluster_size > cfg.landmarks {
        return Err(Error::invalid("cluster larger than the landmark count"));
    }
    if cfg.cluster_size > 1 && cfg.cluster_spacing < 2.0 * cfg.glyph_radius {
        return Err(Error::invalid("cluster spacing makes glyphs overlap"));
    }
    if cfg.isolated_spacing < 2.0 * cfg.glyph_radius {
        return Err(Error::invalid("isolated spacing makes glyphs overlap"));
    }
    let frame = Frame::original(cfg.width, cfg.height);
    (0..n_images)
        .map(|i| {
            let pts = place_landmarks(rng, cfg).ok_or_else(|| {
                Error::invalid(format!(
                    "cannot fit {} landmarks into {}x{} without overlap",
                    cfg.landmarks, cfg.width, cfg.height
                ))
            })?;
            let image = render(rng, cfg, &pts);
            Ok(DatasetRecord {
                image_id: format!("synth{i:04}"),
                image,
                landmarks: LandmarkSet::new(pts, frame)?,
                split: Split::Train,
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    image_id: String,
    file: String,
    split: Split,
    width: usize,
    height: usize,
    points: Vec<[f64; 2]>,
}

/// Persist records as PNG files plus a `landmarks.json` index.
pub fn save_dataset(records: &[DatasetRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = Vec::with_capacity(records.len());
    for r in records {
        let file = format!("{}.png", r.image_id);
        let path = dir.join(&file);
        r.image.save(&path).map_err(|source| Error::Image { path, source })?;
        index.push(IndexEntry {
            image_id: r.image_id.clone(),
            file,
            split: r.split,
            width: r.image.width() as usize,
            height: r.image.height() as usize,
            points: r.landmarks.points().iter().map(|p| [p.x, p.y]).collect(),
        });
    }
    let path = dir.join("landmarks.json");
    fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<DatasetRecord>> {
    let path = dir.join("landmarks.json");
    let index: Vec<IndexEntry> = serde_json::from_str(&read_text(&path)?)?;
    index
        .into_par_iter()
        .map(|e| {
            let path = dir.join(&e.file);
            let image = image::open(&path)
                .map_err(|source| Error::Image { path: path.clone(), source })?
                .into_luma8();
            let frame = Frame::original(e.width, e.height);
            let points = e.points.iter().map(|p| Point::new(p[0], p[1])).collect();
            Ok(DatasetRecord {
                image_id: e.image_id,
                image,
                landmarks: LandmarkSet::new(points, frame)?,
                split: e.split,
            })
        })
        .collect()
}

pub const RED: Rgb<u8> = Rgb([230, 40, 40]);
pub const GREEN: Rgb<u8> = Rgb([40, 210, 60]);
pub const BLUE: Rgb<u8> = Rgb([50, 90, 240]);
pub const YELLOW: Rgb<u8> = Rgb([240, 220, 40]);

fn draw_marker(img: &mut RgbImage, x0: u32, p: &Point, color: Rgb<u8>, panel_w: u32) {
    let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
    for dy in -2i64..=2 {
        for dx in -2i64..=2 {
            if dx * dx + dy * dy > 5 {
                continue;
            }
            let (x, y) = (cx + dx, cy + dy);
            if x >= 0 && y >= 0 && (x as u32) < panel_w && (y as u32) < img.height() {
                img.put_pixel(x0 + x as u32, y as u32, color);
            }
        }
    }
}

/// Perturbation panel value: `clamp(128 + magnification·Δ)` with `Δ` in 8-bit levels.
pub fn perturbation_level(original: f32, adversarial: f32, magnification: f32) -> u8 {
    let delta = (adversarial - original) * 127.5;
    (128.0 + magnification * delta).round().clamp(0.0, 255.0) as u8
}

/// Default amplification of the perturbation panel.
pub const DEFAULT_MAGNIFICATION: f32 = 8.0;

/// Three panels side by side: original with clean predictions (red), the
/// magnified perturbation around mid-gray, and the adversarial image with
/// targeted predictions in green, their desired positions in yellow and
/// stationary predictions in blue.
pub fn render_visualization(
    original: &Image,
    adversarial: &Image,
    before: &LandmarkSet,
    after: &LandmarkSet,
    spec: &TargetSpec,
    magnification: f32,
) -> Result<RgbImage> {
    if (original.channels, original.height, original.width)
        != (adversarial.channels, adversarial.height, adversarial.width)
    {
        return Err(Error::shape(
            format!("{}x{}", original.height, original.width),
            format!("{}x{}", adversarial.height, adversarial.width),
        ));
    }
    let (w, h) = (original.width as u32, original.height as u32);
    let mut out = RgbImage::new(3 * w, h);
    let gray = |v: u8| Rgb([v, v, v]);
    for y in 0..h {
        for x in 0..w {
            let j = (y * w + x) as usize;
            let (o, a) = (original.data[j], adversarial.data[j]);
            out.put_pixel(x, y, gray(to_level(o)));
            out.put_pixel(w + x, y, gray(perturbation_level(o, a, magnification)));
            out.put_pixel(2 * w + x, y, gray(to_level(a)));
        }
    }
    for p in before.points() {
        draw_marker(&mut out, 0, p, RED, w);
    }
    for t in &spec.targeted {
        draw_marker(&mut out, 2 * w, &before.points()[t.index], RED, w);
        draw_marker(&mut out, 2 * w, &t.position, YELLOW, w);
    }
    for (i, p) in after.points().iter().enumerate() {
        let color = if spec.is_targeted(i) { GREEN } else { BLUE };
        draw_marker(&mut out, 2 * w, p, color, w);
    }
    Ok(out)
}

pub fn export_visualization(
    path: &Path,
    original: &Image,
    adversarial: &Image,
    before: &LandmarkSet,
    after: &LandmarkSet,
    spec: &TargetSpec,
    magnification: f32,
) -> Result<()> {
    let img = render_visualization(original, adversarial, before, after, spec, magnification)?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::TargetSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize(0.0), -1.0);
        assert_eq!(normalize(255.0), 1.0);
        assert_eq!(normalize(127.5), 0.0);
        for v in 0..=255u8 {
            assert_eq!(to_level(normalize(v as f32)), v);
        }
    }

    #[test]
    fn corner_maps_to_corner() {
        let from = Frame::original(1935, 2400);
        let (sx, sy) = from.scale_to(&PreprocessSpec::ISBI.frame());
        assert_eq!((1935.0 * sx, 2400.0 * sy), (640.0, 800.0));
    }

    #[test]
    fn annotator_average() {
        let a = parse_annotation(Path::new("a.txt"), "100,200\n", 1).unwrap();
        let b = parse_annotation(Path::new("b.txt"), "102,198\nextra\n", 1).unwrap();
        assert_eq!(Point::new((a[0].x + b[0].x) / 2.0, (a[0].y + b[0].y) / 2.0), Point::new(101.0, 199.0));
    }

    #[test]
    fn annotation_errors_name_the_file() {
        let e = parse_annotation(Path::new("x/007.txt"), "1,2\n3\n", 2).unwrap_err();
        assert!(e.to_string().contains("x/007.txt") && e.to_string().contains("line 2"));
        let e = parse_annotation(Path::new("y.txt"), "1,2\n", 2).unwrap_err();
        assert!(e.to_string().contains("expected 2 landmarks"));
        assert!(parse_annotation(Path::new("z.txt"), "1,abc\n", 1).is_err());
    }

    #[test]
    fn preprocess_inverse_within_half_pixel() {
        let img = GrayImage::from_pixel(1935, 2400, Luma([90]));
        let pts = vec![Point::new(0.0, 0.0), Point::new(967.3, 1200.9), Point::new(1934.0, 2399.5)];
        let rec = DatasetRecord {
            image_id: "001".into(),
            image: img,
            landmarks: LandmarkSet::new(pts.clone(), Frame::original(1935, 2400)).unwrap(),
            split: Split::Train,
        };
        let spec = PreprocessSpec { channels: 3, ..PreprocessSpec::ISBI };
        let (x, lm) = preprocess(&rec, &spec);
        assert_eq!((x.channels, x.height, x.width), (3, 800, 640));
        assert!(x.data.iter().all(|&v| (v - normalize(90.0)).abs() < 1e-6));
        let back = lm.rescale(Frame::original(1935, 2400));
        for (p, q) in back.points().iter().zip(&pts) {
            assert!(p.distance(q) <= 0.5);
        }
    }

    #[test]
    fn synthetic_is_reproducible_and_well_placed() {
        let cfg = SynthConfig::default();
        let a = synth_dataset(&mut ChaCha8Rng::seed_from_u64(3), 5, &cfg).unwrap();
        let b = synth_dataset(&mut ChaCha8Rng::seed_from_u64(3), 5, &cfg).unwrap();
        assert_eq!(a, b);
        for r in &a {
            let p = r.landmarks.points();
            assert_eq!(p.len(), 8);
            for i in 0..8 {
                for j in 0..i {
                    let d = p[i].distance(&p[j]);
                    let min = if i < 3 && j < 3 { 12.99 } else { 26.0 };
                    assert!(d >= min, "{i},{j}: {d}");
                }
                assert!(p[i].x >= 12.0 && p[i].x <= 116.0 && p[i].y >= 12.0 && p[i].y <= 116.0);
            }
        }
    }

    #[test]
    fn glyph_centred_on_landmark() {
        // Noise-free rendering: the glyph's intensity-weighted centroid sits on the landmark.
        let cfg = SynthConfig { noise: 0.0, ..SynthConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rec = &synth_dataset(&mut rng, 1, &cfg).unwrap()[0];
        for kind in [0usize, 2, 4, 6] {
            let p = rec.landmarks.points()[kind];
            let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
            for dy in -6i32..=6 {
                for dx in -6i32..=6 {
                    let v = glyph_value(kind, dx as f64 + p.x.round() - p.x, dy as f64 + p.y.round() - p.y, 5.0);
                    sx += v * (p.x.round() + dx as f64);
                    sy += v * (p.y.round() + dy as f64);
                    sw += v;
                }
            }
            assert!((sx / sw - p.x).abs() < 0.5 && (sy / sw - p.y).abs() < 0.5, "glyph {kind}");
        }
    }

    #[test]
    fn shared_cluster_is_told_apart_by_arrangement_only() {
        let cfg = SynthConfig { noise: 0.0, ..SynthConfig::default() };
        let recs = synth_dataset(&mut ChaCha8Rng::seed_from_u64(13), 5, &cfg).unwrap();
        for rec in &recs {
            let p = rec.landmarks.points();
            assert!(p[0].y < p[1].y && p[0].y < p[2].y);
            assert!((p[1].y - p[2].y).abs() < 1e-9);
            let patch = |q: Point| -> Vec<i32> {
                let (cx, cy) = (q.x.round() as i32, q.y.round() as i32);
                let mut v = Vec::new();
                for dy in -3..=3 {
                    for dx in -3..=3 {
                        v.push(rec.image.get_pixel((cx + dx) as u32, (cy + dy) as u32).0[0] as i32);
                    }
                }
                v
            };
            let mean = |v: &[i32]| v.iter().sum::<i32>() as f64 / v.len() as f64;
            let background = mean(&patch(p[0])) - mean(&patch(p[1]));
            // same glyph; only the smooth background gradient differs
            assert!(background.abs() < 8.0, "{background}");
        }
        let free = SynthConfig { shared_cluster_glyph: false, ..cfg };
        let recs = synth_dataset(&mut ChaCha8Rng::seed_from_u64(13), 20, &free).unwrap();
        assert!(recs.iter().any(|r| r.landmarks.points()[0].y > r.landmarks.points()[1].y));
    }

    #[test]
    fn impossible_layout_is_rejected() {
        let cfg = SynthConfig {
            width: 40,
            height: 40,
            ..SynthConfig::default()
        };
        assert!(synth_dataset(&mut ChaCha8Rng::seed_from_u64(0), 1, &cfg).is_err());
        let cfg = SynthConfig { landmarks: 17, ..SynthConfig::default() };
        assert!(synth_dataset(&mut ChaCha8Rng::seed_from_u64(0), 1, &cfg).is_err());
        let cfg = SynthConfig { cluster_spacing: 4.0, ..SynthConfig::default() };
        assert!(synth_dataset(&mut ChaCha8Rng::seed_from_u64(0), 1, &cfg).is_err());
    }

    #[test]
    fn dataset_save_load_round_trip() {
        let recs = synth_dataset(&mut ChaCha8Rng::seed_from_u64(4), 3, &SynthConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&recs, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), recs);
    }

    #[test]
    fn isbi_export_import_round_trip_and_splits() {
        let layout = IsbiLayout {
            image_ext: "png".into(),
            expected_size: Some((6, 5)),
            landmarks: 2,
            ..IsbiLayout::default()
        };
        let records: Vec<DatasetRecord> = (1..=400)
            .map(|i| DatasetRecord {
                image_id: format!("{i:03}"),
                image: GrayImage::from_pixel(6, 5, Luma([(i % 256) as u8])),
                landmarks: LandmarkSet::new(
                    vec![Point::new(1.5, 2.0), Point::new((i % 5) as f64, 4.5)],
                    Frame::original(6, 5),
                )
                .unwrap(),
                split: layout.split_of(i),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        export_isbi(&records, dir.path(), &layout).unwrap();
        let loaded = load_isbi(dir.path(), &layout).unwrap();
        assert_eq!(loaded, records);
        let count = |s| loaded.iter().filter(|r| r.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Test1), count(Split::Test2)), (150, 150, 100));

        let missing = dir.path().join("AnnotationsByMD/400_junior/017.txt");
        std::fs::remove_file(&missing).unwrap();
        let err = load_isbi(dir.path(), &layout).unwrap_err();
        assert!(err.to_string().contains("017.txt"), "{err}");
    }

    #[test]
    fn zero_perturbation_panel_is_mid_gray() {
        let img = Image::from_vec(1, 4, 5, (0..20).map(|v| v as f32 / 20.0 - 0.5).collect());
        let lm = LandmarkSet::new(vec![Point::new(1.0, 1.0)], Frame::resized(5, 4)).unwrap();
        let spec = TargetSpec::new(1, vec![], Frame::resized(5, 4)).unwrap();
        let panel = render_visualization(&img, &img, &lm, &lm, &spec, DEFAULT_MAGNIFICATION).unwrap();
        assert_eq!(panel.dimensions(), (15, 4));
        for y in 0..4 {
            for x in 5..10 {
                assert_eq!(panel.get_pixel(x, y).0, [128, 128, 128]);
            }
        }
    }

    #[test]
    fn perturbation_panel_spot_values() {
        // Δ = +2 levels → 128 + 16; Δ = −20 levels → clamps at 0.
        let o = normalize(100.0);
        assert_eq!(perturbation_level(o, normalize(102.0), 8.0), 144);
        assert_eq!(perturbation_level(o, normalize(80.0), 8.0), 0);
        assert_eq!(perturbation_level(o, normalize(99.0), 8.0), 120);
    }
}
