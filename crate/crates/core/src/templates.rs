//! Crater templates and best-match scoring.
//!
//! Candidates are cut out of the source raster into fixed-size patches
//! scaled so the crater diameter maps to a common size (60x60 patches with
//! 40 px craters by default). Two templates are built from labelled
//! examples: the mean mean-subtracted appearance, and the mean horizontal
//! and vertical derivatives placed side by side. A candidate's score is the
//! best value of a similarity measure over a schedule of Gaussian smoothing
//! levels applied to its patch; smoothing stands in for crater degradation.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::GrayRaster;

/// Smoothing widths (pixels) of the default 16-level logarithmic schedule.
pub const DEFAULT_SCHEDULE: [f64; 16] =
    [0.10, 0.12, 0.14, 0.17, 0.21, 0.25, 0.30, 0.36, 0.43, 0.52, 0.62, 0.74, 0.89, 1.07, 1.28, 1.54];

pub const DEFAULT_PATCH_SIZE: usize = 60;
pub const DEFAULT_TARGET_DIAMETER: f64 = 40.0;
pub const DEFAULT_MIN_DIAMETER: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    True,
    False,
    Unknown,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::True => "true",
            Label::False => "false",
            Label::Unknown => "unknown",
        })
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "true" | "t" | "1" => Ok(Label::True),
            "false" | "f" | "0" => Ok(Label::False),
            "unknown" | "" | "?" => Ok(Label::Unknown),
            other => Err(Error::Parse(format!("unknown label {other:?}"))),
        }
    }
}

/// A candidate crater in raster pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub diameter_px: f64,
    pub label: Label,
    /// Identifier of the counter who made the mark-up, for repeatability data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counter: Option<String>,
}

impl Annotation {
    pub fn new(id: impl Into<String>, x: f64, y: f64, diameter_px: f64, label: Label) -> Self {
        Annotation { id: id.into(), x, y, diameter_px, label, counter: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Appearance,
    Derivative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Mse,
    Dp,
}

impl Measure {
    /// True when `a` is a better score than `b` under this measure.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Measure::Mse => a < b,
            Measure::Dp => a > b,
        }
    }
}

macro_rules! str_enum {
    ($t:ty, $($v:path => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($s => Ok($v),)+
                    other => Err(Error::Parse(format!("unknown {} {other:?}", stringify!($t)))),
                }
            }
        }
    };
}

str_enum!(TemplateKind, TemplateKind::Appearance => "appearance", TemplateKind::Derivative => "derivative");
str_enum!(Measure, Measure::Mse => "mse", Measure::Dp => "dp");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub kind: TemplateKind,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub n_examples: usize,
}

impl Template {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Side length of the square patches this template is matched against.
    pub fn patch_size(&self) -> usize {
        self.height
    }

    pub fn validate(&self) -> Result<()> {
        let expect_w = match self.kind {
            TemplateKind::Appearance => self.height,
            TemplateKind::Derivative => 2 * self.height,
        };
        if self.width != expect_w || self.values.len() != self.width * self.height {
            return Err(Error::SizeMismatch {
                expected: format!("{:?} template {}x{}", self.kind, expect_w, self.height),
                actual: format!("{}x{} with {} values", self.width, self.height, self.values.len()),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub annotation_id: String,
    pub label: Label,
    pub measure: Measure,
    pub template_kind: TemplateKind,
    pub best_score: f64,
    pub best_smoothing_sigma: f64,
}

/// What to do when a patch would reach outside the raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutOfBounds {
    #[default]
    Error,
    /// Fill the missing samples with the mean of the in-bounds ones.
    PadMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub out_size: usize,
    pub target_diameter: f64,
    pub min_diameter: f64,
    pub out_of_bounds: OutOfBounds,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            out_size: DEFAULT_PATCH_SIZE,
            target_diameter: DEFAULT_TARGET_DIAMETER,
            min_diameter: DEFAULT_MIN_DIAMETER,
            out_of_bounds: OutOfBounds::Error,
        }
    }
}

/// Resamples the neighbourhood of `ann` into an `out_size` square patch in
/// which the crater diameter spans `target_diameter` pixels. Patch pixel
/// `(i, j)` samples the raster at `centre + (i - out_size/2, j - out_size/2) * scale`
/// with `scale = diameter / target_diameter`, so an integer centre at unit
/// scale is a plain crop.
pub fn extract_patch(raster: &GrayRaster, ann: &Annotation, cfg: &PatchConfig) -> Result<GrayRaster> {
    if !(ann.diameter_px > 0.0) {
        return Err(Error::InvalidParameter(format!("annotation {} has diameter {}", ann.id, ann.diameter_px)));
    }
    if ann.diameter_px < cfg.min_diameter {
        return Err(Error::InvalidParameter(format!(
            "annotation {} diameter {} below minimum {}",
            ann.id, ann.diameter_px, cfg.min_diameter
        )));
    }
    if !(ann.x >= 0.0 && ann.y >= 0.0 && ann.x < raster.width() as f64 && ann.y < raster.height() as f64) {
        return Err(Error::OutOfBounds { id: ann.id.clone(), reason: "centre outside raster".into() });
    }
    let n = cfg.out_size;
    let scale = ann.diameter_px / cfg.target_diameter;
    let half = (n / 2) as f64;
    let mut values = Vec::with_capacity(n * n);
    let mut missing = Vec::new();
    for j in 0..n {
        let sy = ann.y + (j as f64 - half) * scale;
        for i in 0..n {
            let sx = ann.x + (i as f64 - half) * scale;
            match raster.sample_bilinear(sx, sy) {
                Some(v) => values.push(v),
                None => {
                    if cfg.out_of_bounds == OutOfBounds::Error {
                        return Err(Error::OutOfBounds {
                            id: ann.id.clone(),
                            reason: format!("patch sample ({sx:.2}, {sy:.2}) outside raster"),
                        });
                    }
                    missing.push(values.len());
                    values.push(0.0);
                }
            }
        }
    }
    if !missing.is_empty() {
        let present = values.len() - missing.len();
        if present == 0 {
            return Err(Error::OutOfBounds { id: ann.id.clone(), reason: "patch entirely outside raster".into() });
        }
        let mean = values.iter().sum::<f64>() / present as f64;
        for i in missing {
            values[i] = mean;
        }
    }
    GrayRaster::new(n, n, values)
}

fn subtract_mean(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    values.iter_mut().for_each(|v| *v -= m);
}

/// Horizontal and vertical derivative panels side by side (`2n x n`).
/// Central differences in the interior, one-sided at the edges.
pub fn derivative_panels(patch: &GrayRaster) -> Vec<f64> {
    let (w, h) = (patch.width(), patch.height());
    let mut out = vec![0.0; 2 * w * h];
    let d = |a: f64, b: f64, span: f64| (a - b) / span;
    for y in 0..h {
        for x in 0..w {
            let dx = if w < 2 {
                0.0
            } else if x == 0 {
                d(patch.get(1, y), patch.get(0, y), 1.0)
            } else if x == w - 1 {
                d(patch.get(w - 1, y), patch.get(w - 2, y), 1.0)
            } else {
                d(patch.get(x + 1, y), patch.get(x - 1, y), 2.0)
            };
            let dy = if h < 2 {
                0.0
            } else if y == 0 {
                d(patch.get(x, 1), patch.get(x, 0), 1.0)
            } else if y == h - 1 {
                d(patch.get(x, h - 1), patch.get(x, h - 2), 1.0)
            } else {
                d(patch.get(x, y + 1), patch.get(x, y - 1), 2.0)
            };
            out[y * 2 * w + x] = dx;
            out[y * 2 * w + w + x] = dy;
        }
    }
    out
}

fn check_same_size(patches: &[GrayRaster]) -> Result<usize> {
    let first = patches.first().ok_or_else(|| Error::Insufficient("no example patches".into()))?;
    let n = first.width();
    if first.height() != n {
        return Err(Error::SizeMismatch {
            expected: "square patches".into(),
            actual: format!("{}x{}", n, first.height()),
        });
    }
    for p in patches {
        if p.width() != n || p.height() != n {
            return Err(Error::SizeMismatch {
                expected: format!("{n}x{n}"),
                actual: format!("{}x{}", p.width(), p.height()),
            });
        }
    }
    Ok(n)
}

/// Per-pixel mean of the mean-subtracted example patches.
pub fn build_appearance_template(patches: &[GrayRaster]) -> Result<Template> {
    let n = check_same_size(patches)?;
    let mut acc = vec![0.0; n * n];
    for p in patches {
        let mut v = p.pixels().to_vec();
        subtract_mean(&mut v);
        acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
    }
    let k = patches.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    // clean up the rounding residue so the template mean is zero to ~1e-15
    subtract_mean(&mut acc);
    Ok(Template { kind: TemplateKind::Appearance, width: n, height: n, values: acc, n_examples: patches.len() })
}

/// Per-pixel mean of the example derivative panels.
pub fn build_derivative_template(patches: &[GrayRaster]) -> Result<Template> {
    let n = check_same_size(patches)?;
    let mut acc = vec![0.0; 2 * n * n];
    for p in patches {
        let d = derivative_panels(p);
        acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
    }
    let k = patches.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(Template { kind: TemplateKind::Derivative, width: 2 * n, height: n, values: acc, n_examples: patches.len() })
}

pub fn build_template(kind: TemplateKind, patches: &[GrayRaster]) -> Result<Template> {
    match kind {
        TemplateKind::Appearance => build_appearance_template(patches),
        TemplateKind::Derivative => build_derivative_template(patches),
    }
}

/// Smooths, mean-subtracts and (for derivative templates) differentiates a
/// patch so it can be compared with a template of `kind`.
pub fn prepare_patch(patch: &GrayRaster, sigma: f64, kind: TemplateKind) -> Vec<f64> {
    let mut smoothed = patch.gaussian_blur(sigma);
    subtract_mean(smoothed.pixels_mut());
    match kind {
        TemplateKind::Appearance => smoothed.into_pixels(),
        TemplateKind::Derivative => derivative_panels(&smoothed),
    }
}

fn check_len(template: &Template, patch: &[f64]) -> Result<()> {
    if template.values.len() != patch.len() {
        return Err(Error::SizeMismatch {
            expected: format!("{} values", template.values.len()),
            actual: format!("{} values", patch.len()),
        });
    }
    Ok(())
}

/// Mean squared residual between template and prepared patch.
pub fn score_mse(template: &Template, patch: &[f64]) -> Result<f64> {
    check_len(template, patch)?;
    let n = patch.len() as f64;
    Ok(template.values.iter().zip(patch).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// `sum(a_i b_i) / (n |a|)` with `a` the template.
pub fn score_dp(template: &Template, patch: &[f64]) -> Result<f64> {
    check_len(template, patch)?;
    let norm = template.norm();
    if !(norm > 0.0) {
        return Err(Error::Degenerate("template has zero norm".into()));
    }
    let n = patch.len() as f64;
    Ok(template.values.iter().zip(patch).map(|(a, b)| a * b).sum::<f64>() / (n * norm))
}

pub fn score(measure: Measure, template: &Template, patch: &[f64]) -> Result<f64> {
    match measure {
        Measure::Mse => score_mse(template, patch),
        Measure::Dp => score_dp(template, patch),
    }
}

fn check_schedule(schedule: &[f64]) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::InvalidParameter("smoothing schedule is empty".into()));
    }
    if let Some(s) = schedule.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::InvalidParameter(format!("bad smoothing sigma {s}")));
    }
    Ok(())
}

/// Best score of `template` under `measure` over the smoothing schedule.
/// Ties keep the earlier (smaller) sigma.
pub fn best_match(
    raster: &GrayRaster,
    ann: &Annotation,
    template: &Template,
    measure: Measure,
    schedule: &[f64],
    cfg: &PatchConfig,
) -> Result<MatchResult> {
    let mut r = best_matches(raster, ann, &[(template, measure)], schedule, cfg)?;
    Ok(r.remove(0))
}

/// [`best_match`] for several template/measure pairs, smoothing each patch
/// once per schedule level.
pub fn best_matches(
    raster: &GrayRaster,
    ann: &Annotation,
    pairs: &[(&Template, Measure)],
    schedule: &[f64],
    cfg: &PatchConfig,
) -> Result<Vec<MatchResult>> {
    check_schedule(schedule)?;
    for (t, _) in pairs {
        t.validate()?;
        if t.patch_size() != cfg.out_size {
            return Err(Error::SizeMismatch {
                expected: format!("templates for {0}x{0} patches", cfg.out_size),
                actual: format!("{}x{} template", t.width, t.height),
            });
        }
    }
    let patch = extract_patch(raster, ann, cfg)?;
    let mut best: Vec<Option<(f64, f64)>> = vec![None; pairs.len()];
    let need_deriv = pairs.iter().any(|(t, _)| t.kind == TemplateKind::Derivative);
    for &sigma in schedule {
        let mut smoothed = patch.gaussian_blur(sigma);
        subtract_mean(smoothed.pixels_mut());
        let deriv = need_deriv.then(|| derivative_panels(&smoothed));
        for (slot, (t, m)) in best.iter_mut().zip(pairs) {
            let prepared: &[f64] = match t.kind {
                TemplateKind::Appearance => smoothed.pixels(),
                TemplateKind::Derivative => deriv.as_deref().expect("computed above"),
            };
            let s = score(*m, t, prepared)?;
            match slot {
                Some((b, _)) if !m.better(s, *b) => {}
                _ => *slot = Some((s, sigma)),
            }
        }
    }
    Ok(best
        .into_iter()
        .zip(pairs)
        .map(|(b, (t, m))| {
            let (best_score, best_smoothing_sigma) = b.expect("schedule is non-empty");
            MatchResult {
                annotation_id: ann.id.clone(),
                label: ann.label,
                measure: *m,
                template_kind: t.kind,
                best_score,
                best_smoothing_sigma,
            }
        })
        .collect())
}

/// [`best_matches`] over many annotations in parallel, one result per
/// annotation in input order.
pub fn match_annotations(
    raster: &GrayRaster,
    anns: &[Annotation],
    pairs: &[(&Template, Measure)],
    schedule: &[f64],
    cfg: &PatchConfig,
) -> Vec<Result<Vec<MatchResult>>> {
    anns.par_iter().map(|a| best_matches(raster, a, pairs, schedule, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn textured(w: usize, h: usize, seed: u64) -> GrayRaster {
        let mut r = crate::rng::seeded(seed);
        let px = (0..w * h).map(|_| r.random_range(0.0..100.0)).collect();
        GrayRaster::new(w, h, px).unwrap()
    }

    fn tmpl(kind: TemplateKind, n: usize, values: Vec<f64>) -> Template {
        let width = if kind == TemplateKind::Appearance { n } else { 2 * n };
        Template { kind, width, height: n, values, n_examples: 1 }
    }

    #[test]
    fn default_schedule_shape() {
        assert_eq!(DEFAULT_SCHEDULE.len(), 16);
        assert_eq!(DEFAULT_SCHEDULE[0], 0.10);
        assert_eq!(DEFAULT_SCHEDULE[15], 1.54);
        assert!(DEFAULT_SCHEDULE.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn unit_scale_patch_is_a_crop() {
        let r = textured(100, 90, 1);
        let ann = Annotation::new("a", 50.0, 45.0, 40.0, Label::True);
        let p = extract_patch(&r, &ann, &PatchConfig::default()).unwrap();
        assert_eq!((p.width(), p.height()), (60, 60));
        for j in 0..60 {
            for i in 0..60 {
                assert_eq!(p.get(i, j), r.get(20 + i, 15 + j));
            }
        }
    }

    #[test]
    fn double_diameter_is_two_to_one_downscale() {
        let r = textured(200, 200, 2);
        let ann = Annotation::new("a", 100.0, 100.0, 80.0, Label::True);
        let p = extract_patch(&r, &ann, &PatchConfig::default()).unwrap();
        for j in 0..60 {
            for i in 0..60 {
                assert_eq!(p.get(i, j), r.get(40 + 2 * i, 40 + 2 * j));
            }
        }
    }

    #[test]
    fn out_of_bounds_patch() {
        let r = textured(70, 70, 3);
        let ann = Annotation::new("edge", 10.0, 35.0, 40.0, Label::True);
        assert!(matches!(extract_patch(&r, &ann, &PatchConfig::default()), Err(Error::OutOfBounds { .. })));
        let cfg = PatchConfig { out_of_bounds: OutOfBounds::PadMean, ..Default::default() };
        let p = extract_patch(&r, &ann, &cfg).unwrap();
        assert_eq!(p.width(), 60);
        let small = Annotation::new("small", 35.0, 35.0, 12.0, Label::True);
        assert!(extract_patch(&r, &small, &PatchConfig::default()).is_err());
    }

    #[test]
    fn appearance_template_of_one_patch_is_mean_subtracted() {
        let p = textured(8, 8, 4);
        let t = build_appearance_template(std::slice::from_ref(&p)).unwrap();
        let m = p.mean();
        for (a, b) in t.values.iter().zip(p.pixels()) {
            assert_abs_diff_eq!(*a, b - m, epsilon = 1e-12);
        }
        assert!(t.values.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn opposite_patches_cancel() {
        let p = textured(8, 8, 5);
        let neg = GrayRaster::new(8, 8, p.pixels().iter().map(|v| -v).collect()).unwrap();
        let t = build_appearance_template(&[p.clone(), neg.clone()]).unwrap();
        assert!(t.values.iter().all(|v| v.abs() < 1e-12));
        let d = build_derivative_template(&[p, neg]).unwrap();
        assert!(d.values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn template_errors() {
        assert!(build_appearance_template(&[]).is_err());
        assert!(build_derivative_template(&[GrayRaster::filled(4, 4, 0.0), GrayRaster::filled(5, 5, 0.0)]).is_err());
    }

    #[test]
    fn noisy_copies_average_to_sprite() {
        // Law of large numbers: per-pixel error of a 100-example mean has
        // standard deviation sigma/10.
        use rand_distr::{Distribution, Normal};
        let sprite = textured(60, 60, 6);
        let sigma = 5.0;
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut r = crate::rng::seeded(60);
        let copies: Vec<GrayRaster> = (0..100)
            .map(|_| {
                let px = sprite.pixels().iter().map(|v| v + noise.sample(&mut r)).collect();
                GrayRaster::new(60, 60, px).unwrap()
            })
            .collect();
        let t = build_appearance_template(&copies).unwrap();
        let m = sprite.mean();
        let dev: Vec<f64> = t.values.iter().zip(sprite.pixels()).map(|(a, b)| a - (b - m)).collect();
        let rms = (dev.iter().map(|d| d * d).sum::<f64>() / dev.len() as f64).sqrt();
        assert!((rms / (sigma / 10.0) - 1.0).abs() < 0.05, "rms {rms}");
        assert!(dev.iter().all(|d| d.abs() < 5.0 * sigma / 10.0));
    }

    #[test]
    fn derivative_of_constant_and_ramp() {
        let c = GrayRaster::filled(10, 10, 3.0);
        let t = build_derivative_template(&[c]).unwrap();
        assert_eq!((t.width, t.height), (20, 10));
        assert!(t.values.iter().all(|v| *v == 0.0));
        let s = 0.75;
        let ramp = GrayRaster::new(10, 10, (0..100).map(|i| s * (i % 10) as f64 + 4.0).collect()).unwrap();
        let t = build_derivative_template(&[ramp]).unwrap();
        for y in 0..10 {
            for x in 0..10 {
                assert_abs_diff_eq!(t.values[y * 20 + x], s, epsilon = 1e-12);
                assert_abs_diff_eq!(t.values[y * 20 + 10 + x], 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mse_examples() {
        let t = tmpl(TemplateKind::Appearance, 4, textured(4, 4, 7).into_pixels());
        assert_eq!(score_mse(&t, &t.values).unwrap(), 0.0);
        let z = tmpl(TemplateKind::Appearance, 4, vec![0.0; 16]);
        assert_abs_diff_eq!(score_mse(&z, &[3.0; 16]).unwrap(), 9.0, epsilon = 1e-12);
        let mut p = t.values.clone();
        p[5] += 1.0;
        assert_abs_diff_eq!(score_mse(&t, &p).unwrap(), 1.0 / 16.0, epsilon = 1e-12);
        assert!(score_mse(&t, &[0.0; 15]).is_err());
    }

    #[test]
    fn dp_examples() {
        let t = tmpl(TemplateKind::Appearance, 4, textured(4, 4, 8).into_pixels());
        let n = 16.0;
        assert_abs_diff_eq!(score_dp(&t, &t.values).unwrap(), t.norm() / n, epsilon = 1e-12);
        let neg: Vec<f64> = t.values.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(score_dp(&t, &neg).unwrap(), -t.norm() / n, epsilon = 1e-12);
        let a = tmpl(TemplateKind::Appearance, 2, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(score_dp(&a, &[0.0, 2.0, 3.0, 4.0]).unwrap(), 0.0);
        let z = tmpl(TemplateKind::Appearance, 2, vec![0.0; 4]);
        assert!(matches!(score_dp(&z, &[1.0; 4]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn singleton_schedule_is_direct_scoring() {
        let r = textured(100, 100, 9);
        let t = build_appearance_template(&[textured(60, 60, 10)]).unwrap();
        let ann = Annotation::new("a", 50.0, 50.0, 40.0, Label::Unknown);
        let cfg = PatchConfig::default();
        for m in [Measure::Mse, Measure::Dp] {
            let res = best_match(&r, &ann, &t, m, &[0.43], &cfg).unwrap();
            let patch = extract_patch(&r, &ann, &cfg).unwrap();
            let direct = score(m, &t, &prepare_patch(&patch, 0.43, TemplateKind::Appearance)).unwrap();
            assert_eq!(res.best_score, direct);
            assert_eq!(res.best_smoothing_sigma, 0.43);
        }
    }

    #[test]
    fn template_blurred_at_schedule_member_selects_it() {
        // Construct-and-verify: the template is the candidate's own patch
        // smoothed at 0.62, so smoothing the candidate by 0.62 reproduces it.
        let mut sprite = GrayRaster::filled(100, 100, 50.0);
        for y in 0..100 {
            for x in 0..100 {
                let d = (((x as f64 - 50.0).powi(2) + (y as f64 - 50.0).powi(2)).sqrt() - 20.0).abs();
                let v = 50.0 + 40.0 * (-d * d / 2.0).exp() * if x < 50 { 1.0 } else { -1.0 };
                sprite.set(x, y, v);
            }
        }
        let ann = Annotation::new("c", 50.0, 50.0, 40.0, Label::True);
        let cfg = PatchConfig::default();
        let patch = extract_patch(&sprite, &ann, &cfg).unwrap();
        for kind in [TemplateKind::Appearance, TemplateKind::Derivative] {
            let values = prepare_patch(&patch, 0.62, kind);
            let t = Template {
                kind,
                width: if kind == TemplateKind::Appearance { 60 } else { 120 },
                height: 60,
                values,
                n_examples: 1,
            };
            let res = best_match(&sprite, &ann, &t, Measure::Mse, &DEFAULT_SCHEDULE, &cfg).unwrap();
            assert_eq!(res.best_smoothing_sigma, 0.62, "{kind:?}");
            assert!(res.best_score < 1e-20);
        }
    }

    #[test]
    fn best_is_at_least_as_good_as_every_member() {
        let r = textured(120, 120, 11);
        let t = build_appearance_template(&[textured(60, 60, 12), textured(60, 60, 13)]).unwrap();
        let ann = Annotation::new("a", 60.0, 60.0, 44.0, Label::Unknown);
        let cfg = PatchConfig::default();
        let patch = extract_patch(&r, &ann, &cfg).unwrap();
        for m in [Measure::Mse, Measure::Dp] {
            let best = best_match(&r, &ann, &t, m, &DEFAULT_SCHEDULE, &cfg).unwrap();
            assert!(DEFAULT_SCHEDULE.contains(&best.best_smoothing_sigma));
            for s in DEFAULT_SCHEDULE {
                let v = score(m, &t, &prepare_patch(&patch, s, TemplateKind::Appearance)).unwrap();
                assert!(!m.better(v, best.best_score));
            }
        }
    }

    #[test]
    fn empty_schedule_rejected() {
        let r = textured(100, 100, 14);
        let t = build_appearance_template(&[textured(60, 60, 15)]).unwrap();
        let ann = Annotation::new("a", 50.0, 50.0, 40.0, Label::Unknown);
        assert!(best_match(&r, &ann, &t, Measure::Dp, &[], &PatchConfig::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn offset_invariance(offset in -500.0f64..500.0, seed in 0u64..1000, sigma in 0.0f64..2.0) {
            let p = textured(12, 12, seed);
            let q = GrayRaster::new(12, 12, p.pixels().iter().map(|v| v + offset).collect()).unwrap();
            for kind in [TemplateKind::Appearance, TemplateKind::Derivative] {
                let t = build_template(kind, &[textured(12, 12, seed + 1)]).unwrap();
                for m in [Measure::Mse, Measure::Dp] {
                    let a = score(m, &t, &prepare_patch(&p, sigma, kind)).unwrap();
                    let b = score(m, &t, &prepare_patch(&q, sigma, kind)).unwrap();
                    prop_assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()));
                }
            }
        }

        #[test]
        fn dp_scales_linearly(gamma in 0.01f64..50.0, seed in 0u64..1000) {
            let t = build_appearance_template(&[textured(10, 10, seed)]).unwrap();
            let p = prepare_patch(&textured(10, 10, seed + 7), 0.3, TemplateKind::Appearance);
            let scaled: Vec<f64> = p.iter().map(|v| v * gamma).collect();
            let a = score_dp(&t, &p).unwrap();
            let b = score_dp(&t, &scaled).unwrap();
            prop_assert!((b - gamma * a).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }
}
