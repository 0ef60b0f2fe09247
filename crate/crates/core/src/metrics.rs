//! Radial error, detection rates and the isolation analysis.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{Frame, FrameKind, LandmarkSet, Point};
use crate::error::{Error, Result};

/// Radii (mm) at which successful detection rates are reported.
pub const SDR_RADII: [f64; 4] = [2.0, 2.5, 3.0, 4.0];

/// Pixel spacing of the ISBI cephalograms in mm.
pub const ISBI_SPACING_MM: f64 = 0.1;

/// Per-landmark distance in mm. Resized-frame inputs are first mapped to
/// `original` by per-axis scaling.
pub fn radial_error(pred: &LandmarkSet, reference: &LandmarkSet, spacing_mm: f64, original: Frame) -> Result<Vec<f64>> {
    if pred.frame() != reference.frame() {
        return Err(Error::invalid(format!(
            "frame mismatch: {:?} vs {:?}",
            pred.frame(),
            reference.frame()
        )));
    }
    if pred.len() != reference.len() {
        return Err(Error::shape(reference.len(), pred.len()));
    }
    if !(spacing_mm.is_finite() && spacing_mm > 0.0) {
        return Err(Error::invalid("pixel spacing must be positive"));
    }
    let frame = pred.frame();
    let (sx, sy) = match frame.kind {
        FrameKind::Original => {
            if (frame.width, frame.height) != (original.width, original.height) {
                return Err(Error::invalid("original-frame landmarks do not match the original size"));
            }
            (1.0, 1.0)
        }
        FrameKind::Resized => frame.scale_to(&original),
    };
    let lift = |p: &Point| Point::new(p.x * sx, p.y * sy);
    Ok(pred
        .points()
        .iter()
        .zip(reference.points())
        .map(|(a, b)| lift(a).distance(&lift(b)) * spacing_mm)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sdr {
    pub radius_mm: f64,
    /// Percentage of errors `≤ radius_mm`.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mre: f64,
    pub medre: f64,
    pub sdr: Vec<Sdr>,
}

impl Aggregate {
    pub fn sdr_at(&self, radius_mm: f64) -> Option<f64> {
        self.sdr.iter().find(|s| s.radius_mm == radius_mm).map(|s| s.percent)
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// MRE, MedRE and SDR at [`SDR_RADII`].
pub fn aggregate(errors: &[f64]) -> Result<Aggregate> {
    if errors.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty error list"));
    }
    if let Some(e) = errors.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
        return Err(Error::invalid(format!("radial errors must be finite and non-negative, got {e}")));
    }
    let n = errors.len() as f64;
    let sdr = SDR_RADII
        .iter()
        .map(|&r| Sdr {
            radius_mm: r,
            percent: 100.0 * errors.iter().filter(|&&e| e <= r).count() as f64 / n,
        })
        .collect();
    Ok(Aggregate {
        count: errors.len(),
        mre: errors.iter().sum::<f64>() / n,
        medre: median(errors).expect("non-empty"),
        sdr,
    })
}

/// Number of nearest neighbours averaged by [`isolation_degree`].
pub const ISOLATION_NEIGHBOURS: usize = 5;

/// Per landmark, the mean over images of the mean distance to its five
/// nearest other landmarks.
pub fn isolation_degree(sets: &[LandmarkSet]) -> Result<Vec<f64>> {
    let first = sets.first().ok_or_else(|| Error::invalid("no landmark sets given"))?;
    let k = first.len();
    if k <= ISOLATION_NEIGHBOURS {
        return Err(Error::invalid(format!(
            "isolation needs at least {} landmarks, got {k}",
            ISOLATION_NEIGHBOURS + 1
        )));
    }
    let mut acc = vec![0.0; k];
    let mut dists = Vec::with_capacity(k - 1);
    for set in sets {
        if set.len() != k {
            return Err(Error::shape(k, set.len()));
        }
        let p = set.points();
        for i in 0..k {
            dists.clear();
            dists.extend((0..k).filter(|&j| j != i).map(|j| p[i].distance(&p[j])));
            dists.sort_by(f64::total_cmp);
            acc[i] += dists[..ISOLATION_NEIGHBOURS].iter().sum::<f64>() / ISOLATION_NEIGHBOURS as f64;
        }
    }
    Ok(acc.into_iter().map(|a| a / sets.len() as f64).collect())
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationRow {
    /// One-based landmark number.
    pub landmark: usize,
    pub isolation: f64,
    pub mre: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationAnalysis {
    /// `None` when undefined (zero variance).
    pub correlation: Option<f64>,
    pub rows: Vec<IsolationRow>,
}

/// Pair isolation with per-landmark MRE. Landmarks without an MRE are left out.
pub fn isolation_vs_error(isolation: &[f64], per_landmark_mre: &[Option<f64>]) -> Result<IsolationAnalysis> {
    if isolation.len() != per_landmark_mre.len() {
        return Err(Error::shape(isolation.len(), per_landmark_mre.len()));
    }
    let rows: Vec<IsolationRow> = isolation
        .iter()
        .zip(per_landmark_mre)
        .enumerate()
        .filter_map(|(i, (&iso, mre))| {
            mre.map(|mre| IsolationRow {
                landmark: i + 1,
                isolation: iso,
                mre,
            })
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.isolation).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mre).collect();
    Ok(IsolationAnalysis {
        correlation: pearson(&xs, &ys),
        rows,
    })
}

/// Which attempts contribute to a landmark's MRE in the isolation analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsolationCohort {
    /// Only attempts in which the landmark was targeted.
    #[default]
    TargetedOnly,
    /// Every attempt, whatever role the landmark played.
    AllAttempts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cohort {
    Clean,
    Targeted,
    Stationary,
}

/// One landmark of one evaluated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub image_id: String,
    pub attempt: usize,
    /// One-based landmark number.
    pub landmark: usize,
    pub cohort: Cohort,
    pub error_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMeta {
    pub label: String,
    pub epsilon: Option<f64>,
    pub iterations: Option<usize>,
    pub adaptive: Option<bool>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub meta: RunMeta,
    pub clean: Option<Aggregate>,
    pub targeted: Option<Aggregate>,
    pub stationary: Option<Aggregate>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: RunMeta,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn new(meta: RunMeta) -> Self {
        Self { meta, rows: Vec::new() }
    }

    /// Append one image's errors; `cohorts[i]` labels landmark `i`.
    pub fn push_image(&mut self, image_id: &str, attempt: usize, errors: &[f64], cohorts: &[Cohort]) {
        assert_eq!(errors.len(), cohorts.len());
        self.rows.extend(errors.iter().zip(cohorts).enumerate().map(|(i, (&e, &c))| EvalRow {
            image_id: image_id.to_string(),
            attempt,
            landmark: i + 1,
            cohort: c,
            error_mm: e,
        }));
    }

    pub fn errors(&self, cohort: Cohort) -> Vec<f64> {
        self.rows.iter().filter(|r| r.cohort == cohort).map(|r| r.error_mm).collect()
    }

    pub fn cohort(&self, cohort: Cohort) -> Option<Aggregate> {
        aggregate(&self.errors(cohort)).ok()
    }

    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            meta: self.meta.clone(),
            clean: self.cohort(Cohort::Clean),
            targeted: self.cohort(Cohort::Targeted),
            stationary: self.cohort(Cohort::Stationary),
        }
    }

    /// Mean error of each landmark over the selected rows; `None` if it never appears.
    pub fn per_landmark_mre(&self, landmarks: usize, cohort: IsolationCohort) -> Vec<Option<f64>> {
        let mut sum = vec![0.0; landmarks];
        let mut n = vec![0usize; landmarks];
        for r in &self.rows {
            let keep = match cohort {
                IsolationCohort::TargetedOnly => r.cohort == Cohort::Targeted,
                IsolationCohort::AllAttempts => r.cohort != Cohort::Clean,
            };
            if keep && (1..=landmarks).contains(&r.landmark) {
                sum[r.landmark - 1] += r.error_mm;
                n[r.landmark - 1] += 1;
            }
        }
        sum.iter().zip(&n).map(|(s, &c)| (c > 0).then(|| s / c as f64)).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, meta: RunMeta) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<EvalRow>, _>>()?;
        Ok(Self { meta, rows })
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.summary())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: &[(f64, f64)], frame: Frame) -> LandmarkSet {
        LandmarkSet::new(points.iter().map(|&(x, y)| Point::new(x, y)).collect(), frame).unwrap()
    }

    #[test]
    fn radial_error_examples() {
        let f = Frame::original(1935, 2400);
        let e = radial_error(&set(&[(13.0, 14.0)], f), &set(&[(10.0, 10.0)], f), 0.1, f).unwrap();
        assert!((e[0] - 0.5).abs() < 1e-12);
        let same = radial_error(&set(&[(5.0, 6.0)], f), &set(&[(5.0, 6.0)], f), 0.1, f).unwrap();
        assert_eq!(same, vec![0.0]);
    }

    #[test]
    fn resized_errors_match_original_frame() {
        let orig = Frame::original(1935, 2400);
        let small = Frame::resized(640, 800);
        let a = set(&[(100.0, 200.0), (3.5, 799.0)], small);
        let b = set(&[(110.0, 190.0), (0.0, 0.0)], small);
        let e = radial_error(&a, &b, 0.1, orig).unwrap();
        let (sx, sy) = (1935.0 / 640.0, 2400.0 / 800.0);
        let direct0 = (10.0f64 * sx).hypot(10.0 * sy) * 0.1;
        let direct1 = (3.5f64 * sx).hypot(799.0 * sy) * 0.1;
        assert!((e[0] - direct0).abs() < 1e-9 && (e[1] - direct1).abs() < 1e-9);
        let sym = radial_error(&b, &a, 0.1, orig).unwrap();
        assert_eq!(e, sym);
        assert!(radial_error(&a, &set(&[(1.0, 1.0), (1.0, 1.0)], orig), 0.1, orig).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let a = aggregate(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((a.mre, a.medre), (2.0, 2.0));
        let b = aggregate(&[1.0, 2.5, 3.9, 5.0]).unwrap();
        assert_eq!(b.sdr_at(4.0), Some(75.0));
        assert_eq!(b.sdr_at(2.0), Some(25.0));
        assert_eq!(b.sdr_at(2.5), Some(50.0));
        assert_eq!(b.medre, 3.2);
        assert!(aggregate(&[]).is_err());
        assert!(aggregate(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn isolation_collinear_example() {
        let f = Frame::original(100, 100);
        let s = set(&[(10.0, 5.0), (11.0, 5.0), (12.0, 5.0), (13.0, 5.0), (14.0, 5.0), (15.0, 5.0)], f);
        let iso = isolation_degree(&[s]).unwrap();
        assert_eq!(iso[0], 3.0);
        assert_eq!(iso[5], 3.0);
        // Second point: neighbours at 1,1,2,3,4.
        assert_eq!(iso[1], 2.2);
        let five = set(&[(1.0, 1.0); 5], f);
        assert!(isolation_degree(&[five]).is_err());
    }

    #[test]
    fn correlation_cases() {
        let iso = [1.0, 2.0, 3.0, 4.0];
        let a = isolation_vs_error(&iso, &[Some(4.0), Some(3.0), Some(2.0), Some(1.0)]).unwrap();
        assert!((a.correlation.unwrap() + 1.0).abs() < 1e-12);
        let c = isolation_vs_error(&[2.0; 4], &[Some(4.0), Some(3.0), Some(2.0), Some(1.0)]).unwrap();
        assert_eq!(c.correlation, None);
        let partial = isolation_vs_error(&iso, &[Some(1.0), None, Some(3.0), None]).unwrap();
        assert_eq!(partial.rows.len(), 2);
        assert!(isolation_vs_error(&iso, &[None]).is_err());
    }

    #[test]
    fn report_round_trip_and_cohorts() {
        let mut r = EvalReport::new(RunMeta {
            label: "t".into(),
            epsilon: Some(8.0),
            iterations: Some(300),
            adaptive: Some(true),
            seed: 1,
        });
        r.push_image("001", 0, &[1.0, 2.0, 3.0], &[Cohort::Targeted, Cohort::Stationary, Cohort::Targeted]);
        r.push_image("002", 1, &[0.5, 2.5, 1.0], &[Cohort::Stationary, Cohort::Targeted, Cohort::Stationary]);
        let s = r.summary();
        assert_eq!(s.targeted.unwrap().count, 3);
        assert_eq!(s.clean, None);
        assert_eq!(
            r.per_landmark_mre(3, IsolationCohort::TargetedOnly),
            vec![Some(1.0), Some(2.5), Some(3.0)]
        );
        assert_eq!(
            r.per_landmark_mre(3, IsolationCohort::AllAttempts),
            vec![Some(0.75), Some(2.25), Some(2.0)]
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        r.write_csv(&p).unwrap();
        assert_eq!(EvalReport::read_csv(&p, r.meta.clone()).unwrap(), r);
        r.write_summary(&dir.path().join("s.json")).unwrap();
    }

    mod props {
        use super::super::*;
        use crate::codec::{Frame, LandmarkSet, Point};
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn sdr_is_monotone_and_permutation_invariant(
                mut errors in prop::collection::vec(0.0f64..10.0, 1..60),
                seed in any::<u64>(),
            ) {
                let a = aggregate(&errors).unwrap();
                for w in a.sdr.windows(2) {
                    prop_assert!(w[0].percent <= w[1].percent);
                }
                prop_assert!(a.sdr.iter().all(|s| (0.0..=100.0).contains(&s.percent)));
                let n = errors.len();
                errors.rotate_left(seed as usize % n);
                errors.reverse();
                let b = aggregate(&errors).unwrap();
                prop_assert_eq!(a.medre, b.medre);
                prop_assert_eq!(a.sdr, b.sdr);
                prop_assert!((a.mre - b.mre).abs() < 1e-12);
            }

            #[test]
            fn isolation_translation_and_scale(
                pts in prop::collection::vec((0.0f64..50.0, 0.0f64..50.0), 6..12),
                tx in 0.0f64..40.0, ty in 0.0f64..40.0, c in 0.1f64..1.9,
            ) {
                let f = Frame::original(200, 200);
                let mk = |g: &dyn Fn(f64, f64) -> (f64, f64)| {
                    LandmarkSet::new(pts.iter().map(|&(x, y)| { let (a, b) = g(x, y); Point::new(a, b) }).collect(), f).unwrap()
                };
                let base = isolation_degree(&[mk(&|x, y| (x, y))]).unwrap();
                let moved = isolation_degree(&[mk(&|x, y| (x + tx, y + ty))]).unwrap();
                let scaled = isolation_degree(&[mk(&|x, y| (x * c, y * c))]).unwrap();
                for i in 0..base.len() {
                    prop_assert!((base[i] - moved[i]).abs() < 1e-9);
                    prop_assert!((base[i] * c - scaled[i]).abs() < 1e-9);
                }
            }

            #[test]
            fn radial_error_is_symmetric(ax in 0.0f64..640.0, ay in 0.0f64..800.0, bx in 0.0f64..640.0, by in 0.0f64..800.0) {
                let f = Frame::resized(640, 800);
                let o = Frame::original(1935, 2400);
                let a = LandmarkSet::new(vec![Point::new(ax, ay)], f).unwrap();
                let b = LandmarkSet::new(vec![Point::new(bx, by)], f).unwrap();
                prop_assert_eq!(radial_error(&a, &b, 0.1, o).unwrap(), radial_error(&b, &a, 0.1, o).unwrap());
            }
        }
    }
}
