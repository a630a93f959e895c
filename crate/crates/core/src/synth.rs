//! Synthetic crater scenes with known labels.
//!
//! True craters are Lambertian-shaded paraboloid bowls with a raised rim, lit
//! from `sun_azimuth` at a low elevation. False features are either a half
//! rim (a ridge following one side of a circle) or a bright boulder-like
//! albedo spot. Degradation blurs a feature's noiseless sprite with a
//! Gaussian of width proportional to `degradation * diameter`; i.i.d.
//! Gaussian noise is added last.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counting_model::{poisson_draw, CountingModelParams};
use crate::error::{Error, Result};
use crate::raster::GrayRaster;
use crate::rng;
use crate::templates::{Annotation, Label};

pub const SUN_ELEVATION_DEG: f64 = 30.0;
/// Degradation blur sigma per unit of `degradation * diameter`.
pub const DEGRADATION_BLUR: f64 = 0.25;
const DEPTH_RATIO: f64 = 0.2;
const RIM_RATIO: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneFeature {
    pub x: f64,
    pub y: f64,
    pub diameter_px: f64,
    pub degradation: f64,
    pub class: Label,
    /// Multiplier on the feature's intensity deviation from the background.
    #[serde(default = "unit")]
    pub contrast: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub sun_azimuth: f64,
    pub crater_list: Vec<SceneFeature>,
    pub noise_sigma: f64,
    pub background_level: f64,
}

impl SceneSpec {
    /// Features must keep a clear margin of one diameter from every edge
    /// (rim plus half a diameter).
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("scene must have non-zero size".into()));
        }
        for (name, v) in [
            ("sun_azimuth", self.sun_azimuth),
            ("noise_sigma", self.noise_sigma),
            ("background_level", self.background_level),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be finite")));
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidParameter("noise_sigma must be >= 0".into()));
        }
        for (i, f) in self.crater_list.iter().enumerate() {
            if !(f.diameter_px >= 4.0 && f.diameter_px.is_finite()) {
                return Err(Error::InvalidParameter(format!("feature {i}: diameter {} below 4 px", f.diameter_px)));
            }
            if !(0.0..=1.0).contains(&f.degradation) {
                return Err(Error::InvalidParameter(format!(
                    "feature {i}: degradation {} outside [0, 1]",
                    f.degradation
                )));
            }
            if !(f.contrast >= 0.0 && f.contrast.is_finite()) {
                return Err(Error::InvalidParameter(format!("feature {i}: contrast must be finite and >= 0")));
            }
            if f.class == Label::Unknown {
                return Err(Error::InvalidParameter(format!("feature {i}: class must be true or false")));
            }
            let m = f.diameter_px;
            if !(f.x >= m && f.y >= m && f.x + m <= self.width as f64 && f.y + m <= self.height as f64) {
                return Err(Error::OutOfBounds {
                    id: feature_id(i),
                    reason: format!("needs {m:.1} px clearance from the image edges"),
                });
            }
        }
        Ok(())
    }
}

pub fn feature_id(i: usize) -> String {
    format!("c{i:06}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Bowl,
    HalfRim { facing: f64 },
    Spot,
}

impl Shape {
    fn height(self, dx: f64, dy: f64, d: f64) -> f64 {
        let r = (dx * dx + dy * dy).sqrt();
        let rr = 0.5 * d;
        match self {
            Shape::Bowl => {
                let rho = r / rr;
                let rim = RIM_RATIO * d;
                if rho < 1.0 {
                    DEPTH_RATIO * d * (rho * rho - 1.0) + rim
                } else {
                    rim * (-((rho - 1.0) / 0.25).powi(2)).exp()
                }
            }
            Shape::HalfRim { facing } => {
                let phi = dy.atan2(dx);
                let side = 0.5 * (1.0 + (4.0 * (phi - facing).cos()).tanh());
                RIM_RATIO * d * (-((r - rr) / (0.12 * d)).powi(2)).exp() * side
            }
            Shape::Spot => 0.0,
        }
    }

    fn albedo(self, dx: f64, dy: f64, d: f64) -> f64 {
        match self {
            Shape::Spot => 0.6 * (-(dx * dx + dy * dy) / (2.0 * (0.2 * d).powi(2))).exp(),
            _ => 0.0,
        }
    }
}

/// Unit vector toward the sun in image coordinates (x right, y down, z up).
fn sun_vector(azimuth_deg: f64) -> [f64; 3] {
    let (az, el) = (azimuth_deg.to_radians(), SUN_ELEVATION_DEG.to_radians());
    [az.cos() * el.cos(), az.sin() * el.cos(), el.sin()]
}

struct Sprite {
    x0: usize,
    y0: usize,
    delta: GrayRaster,
}

fn render_sprite(
    f: &SceneFeature,
    shape: Shape,
    sun: [f64; 3],
    background: f64,
    width: usize,
    height: usize,
) -> Sprite {
    let d = f.diameter_px;
    let blur = DEGRADATION_BLUR * f.degradation * d;
    let half = (1.2 * d + 4.0 * blur + 2.0).ceil() as i64;
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let (x0, x1) = (clamp(f.x.round() as i64 - half, width), clamp(f.x.round() as i64 + half, width));
    let (y0, y1) = (clamp(f.y.round() as i64 - half, height), clamp(f.y.round() as i64 + half, height));
    let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
    let e = 0.25;
    let mut delta = GrayRaster::filled(w, h, 0.0);
    for j in 0..h {
        for i in 0..w {
            let dx = (x0 + i) as f64 - f.x;
            let dy = (y0 + j) as f64 - f.y;
            let hx = (shape.height(dx + e, dy, d) - shape.height(dx - e, dy, d)) / (2.0 * e);
            let hy = (shape.height(dx, dy + e, d) - shape.height(dx, dy - e, d)) / (2.0 * e);
            let norm = (1.0 + hx * hx + hy * hy).sqrt();
            let lit = ((-hx * sun[0] - hy * sun[1] + sun[2]) / norm).max(0.0) / sun[2];
            let v = f.contrast * background * (lit * (1.0 + shape.albedo(dx, dy, d)) - 1.0);
            delta.set(i, j, v);
        }
    }
    if blur > 0.0 {
        delta = delta.gaussian_blur(blur);
    }
    Sprite { x0, y0, delta }
}

/// Renders `spec`. The false-feature shape and any half-rim orientation are
/// drawn from `seed`, as is the pixel noise.
pub fn render_scene(spec: &SceneSpec, seed: u64) -> Result<(GrayRaster, Vec<Annotation>)> {
    spec.validate()?;
    let sun = sun_vector(spec.sun_azimuth);
    let shape_seed = rng::stream_seed(seed, "shapes");
    let sprites: Vec<Sprite> = spec
        .crater_list
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let shape = match f.class {
                Label::True => Shape::Bowl,
                _ => {
                    let mut r = rng::seeded(rng::sub_seed(shape_seed, i as u64));
                    if r.random_bool(0.5) {
                        Shape::HalfRim { facing: r.random_range(0.0..std::f64::consts::TAU) }
                    } else {
                        Shape::Spot
                    }
                }
            };
            render_sprite(f, shape, sun, spec.background_level, spec.width, spec.height)
        })
        .collect();

    let mut img = GrayRaster::filled(spec.width, spec.height, spec.background_level);
    for s in &sprites {
        for j in 0..s.delta.height() {
            for i in 0..s.delta.width() {
                let (x, y) = (s.x0 + i, s.y0 + j);
                img.set(x, y, img.get(x, y) + s.delta.get(i, j));
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut r = rng::seeded(rng::stream_seed(seed, "noise"));
        let n = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        img.pixels_mut().iter_mut().for_each(|p| *p += n.sample(&mut r));
    }
    let anns = spec
        .crater_list
        .iter()
        .enumerate()
        .map(|(i, f)| Annotation::new(feature_id(i), f.x, f.y, f.diameter_px, f.class))
        .collect();
    Ok((img, anns))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneGeometry {
    pub width: usize,
    pub height: usize,
    pub diameter_min: f64,
    pub diameter_max: f64,
    /// Degradation is drawn uniformly from `[0, max_degradation]`.
    pub max_degradation: f64,
    /// Contrast is drawn log-uniformly from `[contrast_min, contrast_max]`.
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub noise_sigma: f64,
    pub background_level: f64,
    pub sun_azimuth: f64,
}

impl Default for SceneGeometry {
    fn default() -> Self {
        SceneGeometry {
            width: 1024,
            height: 1024,
            diameter_min: 20.0,
            diameter_max: 40.0,
            max_degradation: 0.5,
            contrast_min: 1.0,
            contrast_max: 1.0,
            noise_sigma: 8.0,
            background_level: 128.0,
            sun_azimuth: 0.0,
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 2000;

/// Random scene: Poisson numbers of true and false features (rates from
/// `params`), log-uniform diameters, uniform non-overlapping positions.
pub fn random_scene(params: &CountingModelParams, geometry: &SceneGeometry, seed: u64) -> Result<SceneSpec> {
    params.validate()?;
    let g = geometry;
    if !(g.diameter_min >= 4.0 && g.diameter_max >= g.diameter_min && g.diameter_max.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "diameter range [{}, {}] must lie at or above 4 px",
            g.diameter_min, g.diameter_max
        )));
    }
    if !(0.0..=1.0).contains(&g.max_degradation) {
        return Err(Error::InvalidParameter("max_degradation must lie in [0, 1]".into()));
    }
    if !(g.contrast_min > 0.0 && g.contrast_max >= g.contrast_min && g.contrast_max.is_finite()) {
        return Err(Error::InvalidParameter("contrast range must satisfy 0 < min <= max".into()));
    }
    if (g.width as f64) < 2.0 * g.diameter_max || (g.height as f64) < 2.0 * g.diameter_max {
        return Err(Error::InvalidParameter(format!(
            "{}x{} scene cannot hold a {} px feature with edge clearance",
            g.width, g.height, g.diameter_max
        )));
    }
    let mut r = rng::seeded(seed);
    let n_true = poisson_draw(params.lambda_true, &mut r);
    let n_false = poisson_draw(params.lambda_false, &mut r);
    let mut classes: Vec<Label> = std::iter::repeat_n(Label::True, n_true as usize)
        .chain(std::iter::repeat_n(Label::False, n_false as usize))
        .collect();
    // Interleave classes so placement order carries no label information.
    for i in (1..classes.len()).rev() {
        classes.swap(i, r.random_range(0..=i));
    }
    let (lmin, lmax) = (g.diameter_min.ln(), g.diameter_max.ln());
    let mut placed: Vec<SceneFeature> = Vec::with_capacity(classes.len());
    for class in classes {
        let d = if lmax > lmin { r.random_range(lmin..lmax).exp() } else { g.diameter_min };
        let degradation = if g.max_degradation > 0.0 { r.random_range(0.0..=g.max_degradation) } else { 0.0 };
        let (cmin, cmax) = (g.contrast_min.ln(), g.contrast_max.ln());
        let contrast = if cmax > cmin { r.random_range(cmin..cmax).exp() } else { g.contrast_min };
        let mut ok = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let x = r.random_range(d..=g.width as f64 - d);
            let y = r.random_range(d..=g.height as f64 - d);
            let clear = placed.iter().all(|p| {
                let min = 0.6 * (p.diameter_px + d);
                (p.x - x).powi(2) + (p.y - y).powi(2) >= min * min
            });
            if clear {
                ok = Some((x, y));
                break;
            }
        }
        let (x, y) = ok.ok_or_else(|| {
            Error::InvalidParameter(format!(
                "could not place feature {} without overlap in a {}x{} scene; reduce the rates or enlarge the scene",
                placed.len(),
                g.width,
                g.height
            ))
        })?;
        placed.push(SceneFeature { x, y, diameter_px: d, degradation, class, contrast });
    }
    let spec = SceneSpec {
        width: g.width,
        height: g.height,
        sun_azimuth: g.sun_azimuth,
        crater_list: placed,
        noise_sigma: g.noise_sigma,
        background_level: g.background_level,
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::templates::{
        best_match, build_template, extract_patch, Measure, PatchConfig, TemplateKind, DEFAULT_SCHEDULE,
    };

    fn one(class: Label, degradation: f64) -> SceneSpec {
        SceneSpec {
            width: 128,
            height: 128,
            sun_azimuth: 0.0,
            crater_list: vec![SceneFeature { x: 64.0, y: 64.0, diameter_px: 30.0, degradation, class, contrast: 1.0 }],
            noise_sigma: 0.0,
            background_level: 100.0,
        }
    }

    #[test]
    fn empty_scene_is_constant() {
        let spec = SceneSpec { crater_list: vec![], ..one(Label::True, 0.0) };
        let (img, anns) = render_scene(&spec, 3).unwrap();
        assert!(anns.is_empty());
        assert!(img.pixels().iter().all(|&p| p == 100.0));
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut spec = one(Label::False, 0.3);
        spec.noise_sigma = 5.0;
        spec.crater_list.push(SceneFeature {
            x: 30.0,
            y: 30.0,
            diameter_px: 12.0,
            degradation: 0.0,
            class: Label::True,
            contrast: 2.0,
        });
        assert_eq!(render_scene(&spec, 9).unwrap(), render_scene(&spec, 9).unwrap());
        assert_ne!(render_scene(&spec, 9).unwrap().0, render_scene(&spec, 10).unwrap().0);
    }

    #[test]
    fn bowl_is_lit_on_far_wall_and_shadowed_on_near_wall() {
        let (img, _) = render_scene(&one(Label::True, 0.0), 0).unwrap();
        // sun toward +x: the inner wall at +x faces away, the wall at -x faces it
        let near = img.get(64 + 10, 64);
        let far = img.get(64 - 10, 64);
        assert!(far > 100.0 && near < 100.0, "far {far} near {near}");
        assert_ne!(img.get(64 + 15, 64), 100.0);
    }

    #[test]
    fn validation_rejects_bad_features() {
        let mut s = one(Label::True, 0.0);
        s.crater_list[0].x = 20.0;
        assert!(matches!(s.validate(), Err(Error::OutOfBounds { .. })));
        let mut s = one(Label::True, 1.5);
        assert!(s.validate().is_err());
        s.crater_list[0].degradation = 0.0;
        s.crater_list[0].diameter_px = 3.0;
        assert!(s.validate().is_err());
        assert!(one(Label::Unknown, 0.0).validate().is_err());
    }

    #[test]
    fn degradation_lowers_match_score() {
        let cfg = PatchConfig::default();
        let patches: Vec<GrayRaster> = (0..4)
            .map(|i| {
                let mut s = one(Label::True, 0.0);
                s.crater_list[0].diameter_px = 24.0 + 4.0 * i as f64;
                let (img, anns) = render_scene(&s, i).unwrap();
                extract_patch(&img, &anns[0], &cfg).unwrap()
            })
            .collect();
        let t = build_template(TemplateKind::Appearance, &patches).unwrap();
        let score = |deg| {
            let mut s = one(Label::True, deg);
            s.noise_sigma = 2.0;
            let (img, anns) = render_scene(&s, 77).unwrap();
            best_match(&img, &anns[0], &t, Measure::Dp, &DEFAULT_SCHEDULE, &cfg).unwrap().best_score
        };
        assert!(score(0.0) > score(0.9));
    }

    #[test]
    fn random_scene_examples() {
        let none = CountingModelParams { lambda_true: 0.0, lambda_false: 0.0, ..Default::default() };
        assert!(random_scene(&none, &SceneGeometry::default(), 1).unwrap().crater_list.is_empty());
        let p = CountingModelParams { lambda_true: 20.0, lambda_false: 5.0, ..Default::default() };
        let g = SceneGeometry::default();
        assert_eq!(random_scene(&p, &g, 4).unwrap(), random_scene(&p, &g, 4).unwrap());
        let s = random_scene(&p, &g, 4).unwrap();
        for f in &s.crater_list {
            assert!(f.diameter_px >= g.diameter_min && f.diameter_px <= g.diameter_max);
            assert!(f.degradation <= g.max_degradation);
        }
        let tiny = SceneGeometry { width: 30, height: 30, ..g };
        assert!(random_scene(&p, &tiny, 4).is_err());
        let crowded = CountingModelParams { lambda_true: 5000.0, ..p };
        assert!(random_scene(&crowded, &SceneGeometry { width: 200, height: 200, ..g }, 4).is_err());
    }

    #[test]
    fn mean_true_count_matches_rate() {
        let p = CountingModelParams { lambda_true: 50.0, lambda_false: 0.0, ..Default::default() };
        let g = SceneGeometry { width: 800, height: 800, ..SceneGeometry::default() };
        let n = 1000;
        let total: usize = (0..n).map(|i| random_scene(&p, &g, rng::sub_seed(12, i)).unwrap().crater_list.len()).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 50.0).abs() <= 3.0 * (50.0 / n as f64).sqrt(), "mean {mean}");
    }
}
