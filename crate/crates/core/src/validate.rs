//! Bootstrap validation of the corrected counts.
//!
//! A labelled pool of scored annotations is sampled in random rectangles
//! (uniform placement, with replacement). Each trial trains a model on a
//! fixed number of training rectangles, then estimates the true-class total
//! of test samples that hold `ratio` times as many rectangles. The reference
//! value for a test sample of `K` rectangles is its expected true count
//! `K * sum_a p_in(a)` over true annotations, where `p_in` is the exact
//! probability that one rectangle encloses the annotation. Pulls against the
//! realized true count are reported alongside.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counting_model::CountingModelParams;
use crate::error::{Error, Result};
use crate::io::{fmt_real, Table};
use crate::lpm::{self, FitConfig, TrainConfig};
use crate::raster::GrayRaster;
use crate::rng;
use crate::scores::{make_spec_from_training, AxisKey, HistogramSpec, ScoreHistogram, DEFAULT_MARGIN};
use crate::synth::{random_scene, render_scene, SceneGeometry};
use crate::templates::{
    build_template, extract_patch, match_annotations, Annotation, Label, MatchResult, Measure, PatchConfig, Template,
    TemplateKind, DEFAULT_SCHEDULE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationConfig {
    pub trials: usize,
    pub ratios: Vec<f64>,
    pub region_w: f64,
    pub region_h: f64,
    pub contamination_fraction: f64,
    pub seed: u64,
    /// Rectangles in each trial's training sample.
    pub training_rectangles: usize,
    /// Training rectangles are dealt round-robin into this many example
    /// histograms per class.
    pub training_groups: usize,
    pub bins_1d: usize,
    pub bins_2d: usize,
    pub margin: f64,
    pub train: TrainConfig,
    /// Representation names to run (`grey_dp`, `grey_mse+grad_dp`, ...);
    /// empty runs all ten.
    pub representations: Vec<String>,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            trials: 1000,
            ratios: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            region_w: 180.0,
            region_h: 180.0,
            contamination_fraction: 0.25,
            seed: 0,
            training_rectangles: 100,
            training_groups: 8,
            bins_1d: 32,
            bins_2d: 16,
            margin: DEFAULT_MARGIN,
            train: TrainConfig::default(),
            representations: Vec::new(),
        }
    }
}

impl ValidationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidParameter("trials must be >= 1".into()));
        }
        if self.ratios.is_empty() || self.ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidParameter("data ratios must be finite and > 0".into()));
        }
        if !(0.0..1.0).contains(&self.contamination_fraction) {
            return Err(Error::InvalidParameter("contamination_fraction must lie in [0, 1)".into()));
        }
        if !(self.region_w > 0.0 && self.region_h > 0.0) {
            return Err(Error::InvalidParameter("bootstrap rectangles must have non-zero area".into()));
        }
        if self.training_rectangles == 0 || self.training_groups == 0 {
            return Err(Error::InvalidParameter("need at least one training rectangle and group".into()));
        }
        Ok(())
    }
}

/// How much data [`bootstrap_regions`] collects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionTarget {
    /// Exactly this many rectangles.
    Rectangles(usize),
    /// Rectangles until at least this many annotations are enclosed in total.
    Annotations(usize),
}

/// Probability that a `w x h` rectangle placed uniformly inside a
/// `width x height` raster encloses the point `(x, y)`; the rectangle spans
/// `[x0, x0 + w) x [y0, y0 + h)`.
pub fn inclusion_probability(x: f64, y: f64, width: f64, height: f64, w: f64, h: f64) -> f64 {
    let axis = |p: f64, len: f64, side: f64| {
        if !(p >= 0.0 && p < len) {
            return 0.0;
        }
        let span = len - side;
        if span <= 0.0 {
            return 1.0;
        }
        let covered = p.min(span) - (p - side).max(0.0);
        (covered.max(0.0) / span).min(1.0)
    };
    axis(x, width, w) * axis(y, height, h)
}

/// Uniform rectangle placement with a grid index over the annotations.
pub struct RegionSampler {
    width: f64,
    height: f64,
    w: f64,
    h: f64,
    cell_w: f64,
    cell_h: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<(usize, f64, f64)>>,
}

impl RegionSampler {
    pub fn new(anns: &[Annotation], width: f64, height: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::InvalidParameter(format!("bootstrap rectangle {w}x{h} has zero area")));
        }
        if !(width > 0.0 && height > 0.0) {
            return Err(Error::InvalidParameter("raster has zero area".into()));
        }
        if w > width || h > height {
            return Err(Error::InvalidParameter(format!("rectangle {w}x{h} larger than the {width}x{height} raster")));
        }
        let nx = ((width / w).floor() as usize).max(1);
        let ny = ((height / h).floor() as usize).max(1);
        let (cell_w, cell_h) = (width / nx as f64, height / ny as f64);
        let mut cells = vec![Vec::new(); nx * ny];
        for (i, a) in anns.iter().enumerate() {
            if a.x >= 0.0 && a.y >= 0.0 && a.x < width && a.y < height {
                let cx = ((a.x / cell_w) as usize).min(nx - 1);
                let cy = ((a.y / cell_h) as usize).min(ny - 1);
                cells[cy * nx + cx].push((i, a.x, a.y));
            }
        }
        Ok(RegionSampler { width, height, w, h, cell_w, cell_h, nx, ny, cells })
    }

    /// Indices enclosed by one random rectangle, appended to `out`.
    pub fn sample_into<R: rand::Rng + ?Sized>(&self, r: &mut R, out: &mut Vec<usize>) {
        let x0 = if self.width > self.w { r.random_range(0.0..self.width - self.w) } else { 0.0 };
        let y0 = if self.height > self.h { r.random_range(0.0..self.height - self.h) } else { 0.0 };
        let (x1, y1) = (x0 + self.w, y0 + self.h);
        let cx0 = ((x0 / self.cell_w) as usize).min(self.nx - 1);
        let cx1 = ((x1 / self.cell_w) as usize).min(self.nx - 1);
        let cy0 = ((y0 / self.cell_h) as usize).min(self.ny - 1);
        let cy1 = ((y1 / self.cell_h) as usize).min(self.ny - 1);
        let start = out.len();
        for cy in cy0..=cy1 {
            for cx in cx0..=cx1 {
                for &(i, x, y) in &self.cells[cy * self.nx + cx] {
                    if x >= x0 && x < x1 && y >= y0 && y < y1 {
                        out.push(i);
                    }
                }
            }
        }
        out[start..].sort_unstable();
    }

    pub fn inclusion_probability(&self, a: &Annotation) -> f64 {
        inclusion_probability(a.x, a.y, self.width, self.height, self.w, self.h)
    }
}

/// Random rectangles sampled with replacement, each returned as the sorted
/// indices of the annotations it encloses.
pub fn bootstrap_regions(
    anns: &[Annotation],
    width: f64,
    height: f64,
    region_w: f64,
    region_h: f64,
    target: RegionTarget,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if anns.is_empty() {
        return Err(Error::Insufficient("no annotations to sample".into()));
    }
    let sampler = RegionSampler::new(anns, width, height, region_w, region_h)?;
    let mut r = rng::seeded(seed);
    let mut out = Vec::new();
    match target {
        RegionTarget::Rectangles(k) => {
            for _ in 0..k {
                let mut v = Vec::new();
                sampler.sample_into(&mut r, &mut v);
                out.push(v);
            }
        }
        RegionTarget::Annotations(n) => {
            let expected: f64 = anns.iter().map(|a| sampler.inclusion_probability(a)).sum();
            if n > 0 && expected <= 0.0 {
                return Err(Error::Insufficient("no annotation can fall inside a bootstrap rectangle".into()));
            }
            let mut total = 0;
            while total < n {
                let mut v = Vec::new();
                sampler.sample_into(&mut r, &mut v);
                total += v.len();
                out.push(v);
            }
        }
    }
    Ok(out)
}

/// Scored, labelled annotations that trials are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationPool {
    pub width: f64,
    pub height: f64,
    pub annotations: Vec<Annotation>,
    /// Best scores in [`AxisKey::all`] order.
    pub scores: Vec<[f64; 4]>,
}

impl ValidationPool {
    /// Pool from per-axis match results. Unknown labels are rejected.
    pub fn from_matches(width: f64, height: f64, anns: Vec<Annotation>, results: &[MatchResult]) -> Result<Self> {
        let keys = AxisKey::all();
        let mut by_id = std::collections::HashMap::new();
        for m in results {
            by_id.insert((m.annotation_id.as_str(), AxisKey::new(m.template_kind, m.measure)), m.best_score);
        }
        let mut scores = Vec::with_capacity(anns.len());
        for a in &anns {
            if a.label == Label::Unknown {
                return Err(Error::InvalidParameter(format!("annotation {} has no class label", a.id)));
            }
            let mut s = [0.0; 4];
            for (slot, k) in s.iter_mut().zip(keys) {
                *slot =
                    *by_id.get(&(a.id.as_str(), k)).ok_or_else(|| Error::MissingAxisScore(a.id.clone(), k.name()))?;
            }
            scores.push(s);
        }
        Ok(ValidationPool { width, height, annotations: anns, scores })
    }

    pub fn false_fraction(&self) -> f64 {
        let n = self.annotations.len().max(1) as f64;
        self.annotations.iter().filter(|a| a.label == Label::False).count() as f64 / n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub geometry: SceneGeometry,
    /// Expected number of annotations in the scene.
    pub annotations: f64,
    /// True craters rendered in a separate scene to build the templates.
    pub template_examples: f64,
    /// Accepted deviation of the realized false fraction from the target.
    pub contamination_tolerance: f64,
    pub max_scene_attempts: usize,
    /// Re-place the scored annotations uniformly and independently over the
    /// scene for bootstrap sampling. The renderer keeps features apart, which
    /// makes counts in a rectangle sub-Poisson; an independent layout restores
    /// Poisson counting statistics.
    pub poisson_layout: bool,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            geometry: SceneGeometry {
                width: 3000,
                height: 3000,
                contrast_min: 0.8,
                contrast_max: 3.0,
                ..SceneGeometry::default()
            },
            annotations: 2500.0,
            template_examples: 150.0,
            contamination_tolerance: 0.02,
            max_scene_attempts: 100,
            poisson_layout: true,
        }
    }
}

/// Templates learnt from a scene of true craters only.
pub fn synthetic_templates(geometry: &SceneGeometry, examples: f64, seed: u64) -> Result<(Template, Template)> {
    let params = CountingModelParams { lambda_true: examples, lambda_false: 0.0, ..Default::default() };
    let side = ((examples * 8.0 * geometry.diameter_max.powi(2)).sqrt().ceil() as usize)
        .max(4 * geometry.diameter_max as usize);
    let g = SceneGeometry { width: side, height: side, ..*geometry };
    let spec = random_scene(&params, &g, rng::stream_seed(seed, "template-scene"))?;
    let (img, anns) = render_scene(&spec, rng::stream_seed(seed, "template-render"))?;
    let cfg = PatchConfig::default();
    let patches = anns.iter().map(|a| extract_patch(&img, a, &cfg)).collect::<Result<Vec<_>>>()?;
    Ok((build_template(TemplateKind::Appearance, &patches)?, build_template(TemplateKind::Derivative, &patches)?))
}

/// Best scores on every axis for every annotation.
pub fn score_annotations(
    img: &GrayRaster,
    anns: &[Annotation],
    appearance: &Template,
    derivative: &Template,
) -> Result<Vec<MatchResult>> {
    let cfg = PatchConfig::default();
    let pairs: Vec<(&Template, Measure)> = AxisKey::all()
        .iter()
        .map(|k| (if k.template_kind == TemplateKind::Appearance { appearance } else { derivative }, k.measure))
        .collect();
    let per: Vec<Vec<MatchResult>> =
        match_annotations(img, anns, &pairs, &DEFAULT_SCHEDULE, &cfg).into_iter().collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Renders a labelled scene whose false fraction is within tolerance of
/// `contamination`, scores it, and returns the pool. Scenes are redrawn
/// (with successive sub-seeds) until the contamination matches.
pub fn build_pool(cfg: &PoolConfig, contamination: f64, seed: u64) -> Result<ValidationPool> {
    let (appearance, derivative) = synthetic_templates(&cfg.geometry, cfg.template_examples, seed)?;
    let params = CountingModelParams {
        lambda_true: cfg.annotations * (1.0 - contamination),
        lambda_false: cfg.annotations * contamination,
        ..Default::default()
    };
    let scene_root = rng::stream_seed(seed, "pool-scene");
    for attempt in 0..cfg.max_scene_attempts.max(1) {
        let s = rng::sub_seed(scene_root, attempt as u64);
        let spec = random_scene(&params, &cfg.geometry, s)?;
        let n = spec.crater_list.len();
        let n_false = spec.crater_list.iter().filter(|f| f.class == Label::False).count();
        if n == 0 || (n_false as f64 / n as f64 - contamination).abs() > cfg.contamination_tolerance {
            continue;
        }
        let (img, mut anns) = render_scene(&spec, s)?;
        let results = score_annotations(&img, &anns, &appearance, &derivative)?;
        log::info!("validation pool: {n} annotations, {n_false} false, scene attempt {attempt}");
        if cfg.poisson_layout {
            let mut r = rng::seeded(rng::stream_seed(s, "layout"));
            for a in &mut anns {
                a.x = r.random_range(0.0..img.width() as f64);
                a.y = r.random_range(0.0..img.height() as f64);
            }
        }
        return ValidationPool::from_matches(img.width() as f64, img.height() as f64, anns, &results);
    }
    Err(Error::Insufficient(format!(
        "no scene within {} of contamination {contamination} after {} attempts",
        cfg.contamination_tolerance, cfg.max_scene_attempts
    )))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Representation {
    pub name: String,
    /// Indices into [`AxisKey::all`].
    pub axes: Vec<usize>,
}

impl Representation {
    pub fn is_all(&self, m: Measure) -> bool {
        let keys = AxisKey::all();
        self.axes.iter().all(|&i| keys[i].measure == m)
    }
}

/// The four single-axis and six two-axis representations.
pub fn representations() -> Vec<Representation> {
    let keys = AxisKey::all();
    let mut out: Vec<Representation> = (0..4).map(|i| Representation { name: keys[i].name(), axes: vec![i] }).collect();
    for i in 0..4 {
        for j in i + 1..4 {
            out.push(Representation { name: format!("{}+{}", keys[i].name(), keys[j].name()), axes: vec![i, j] });
        }
    }
    out
}

fn spec_for(pool: &ValidationPool, rep: &Representation, cfg: &ValidationConfig) -> Result<HistogramSpec> {
    let keys = AxisKey::all();
    let cols: Vec<Vec<f64>> = rep.axes.iter().map(|&i| pool.scores.iter().map(|s| s[i]).collect()).collect();
    let axes: Vec<(AxisKey, &[f64])> = rep.axes.iter().zip(&cols).map(|(&i, c)| (keys[i], c.as_slice())).collect();
    let bins = if rep.axes.len() == 1 { cfg.bins_1d } else { cfg.bins_2d };
    make_spec_from_training(&axes, &vec![bins; rep.axes.len()], cfg.margin)
}

/// One fitted test sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialPoint {
    pub estimate: f64,
    pub sigma: f64,
    /// Expected true count of the sample.
    pub expected: f64,
    /// True annotations actually enclosed (with multiplicity).
    pub realized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub representation: usize,
    pub ratio: usize,
    pub outcome: std::result::Result<TrialPoint, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub representation: String,
    pub dims: usize,
    pub ratio: f64,
    pub trials: usize,
    /// Trials whose training or fit returned an error.
    pub failed: usize,
    /// Trials with zero predicted error (no true-class quantity fitted);
    /// their pull is undefined.
    pub zero_sigma: usize,
    pub pull_mean: f64,
    pub pull_std: f64,
    pub realized_pull_mean: f64,
    pub realized_pull_std: f64,
    /// `100 * mean(sigma) / mean(estimate)`.
    pub predicted_percent_error: f64,
    /// `mean(sigma) / sqrt(mean(expected))`.
    pub sigma_over_poisson: f64,
    pub mean_estimate: f64,
    pub mean_expected: f64,
    pub mean_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub config: ValidationConfig,
    pub pool_size: usize,
    pub pool_false_fraction: f64,
    pub rows: Vec<ValidationRow>,
    pub records: Vec<TrialRecord>,
}

fn class_histogram(
    spec: &HistogramSpec,
    bins: &[Option<usize>],
    items: impl Iterator<Item = (usize, u64)>,
) -> ScoreHistogram {
    let mut h = ScoreHistogram::empty(spec);
    for (a, n) in items {
        match bins[a] {
            Some(b) => h.counts[b] += n,
            None => h.overflow_count += n,
        }
    }
    h
}

struct Prepared {
    spec: HistogramSpec,
    bins: Vec<Option<usize>>,
}

fn run_trial(
    pool: &ValidationPool,
    sampler: &RegionSampler,
    prepared: &[Prepared],
    cfg: &ValidationConfig,
    expected_true_per_rect: f64,
    trial: usize,
) -> Vec<TrialRecord> {
    let seed = rng::sub_seed(cfg.seed, trial as u64);
    let is_true: Vec<bool> = pool.annotations.iter().map(|a| a.label == Label::True).collect();

    let mut r = rng::seeded(rng::stream_seed(seed, "train"));
    let groups = cfg.training_groups;
    let mut group_members: Vec<Vec<usize>> = vec![Vec::new(); groups];
    for i in 0..cfg.training_rectangles {
        sampler.sample_into(&mut r, &mut group_members[i % groups]);
    }

    let tests: Vec<(Vec<u64>, f64)> = cfg
        .ratios
        .iter()
        .enumerate()
        .map(|(ri, ratio)| {
            let k = ((ratio * cfg.training_rectangles as f64).round() as usize).max(1);
            let mut r = rng::seeded(rng::stream_seed(seed, &format!("test{ri}")));
            let mut mult = vec![0u64; pool.annotations.len()];
            let mut buf = Vec::new();
            for _ in 0..k {
                buf.clear();
                sampler.sample_into(&mut r, &mut buf);
                buf.iter().for_each(|&a| mult[a] += 1);
            }
            (mult, k as f64 * expected_true_per_rect)
        })
        .collect();

    let mut out = Vec::new();
    for (ri, p) in prepared.iter().enumerate() {
        let hists = |want: bool| -> Vec<ScoreHistogram> {
            group_members
                .iter()
                .map(|g| class_histogram(&p.spec, &p.bins, g.iter().filter(|&&a| is_true[a] == want).map(|&a| (a, 1))))
                .filter(|h| h.total() > 0)
                .collect()
        };
        let train_cfg = TrainConfig { seed: rng::sub_seed(seed, 1000 + ri as u64), ..cfg.train };
        let model = lpm::train(&hists(true), &hists(false), &train_cfg);
        for (ti, (mult, expected)) in tests.iter().enumerate() {
            let outcome = model.as_ref().map_err(|e| e.to_string()).and_then(|model| {
                let h = class_histogram(
                    &p.spec,
                    &p.bins,
                    mult.iter().enumerate().filter(|(_, &n)| n > 0).map(|(a, &n)| (a, n)),
                );
                let realized: u64 = mult.iter().zip(&is_true).filter(|(_, &t)| t).map(|(n, _)| n).sum();
                let est = lpm::correct(model, &h, &FitConfig::default()).map_err(|e| e.to_string())?;
                let t = model.class_index(Label::True).expect("trained models have a true class");
                Ok(TrialPoint {
                    estimate: est.class_totals[t],
                    sigma: est.class_sigma(t),
                    expected: *expected,
                    realized: realized as f64,
                })
            });
            out.push(TrialRecord { trial, representation: ri, ratio: ti, outcome });
        }
    }
    out
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { f64::NAN };
    (m, s)
}

/// Runs `cfg.trials` bootstrap trials over every selected representation and
/// data ratio. Trials run in parallel; each draws from its own seed
/// `rng::sub_seed(cfg.seed, trial)`, so results do not depend on scheduling.
pub fn run_validation(pool: &ValidationPool, cfg: &ValidationConfig) -> Result<ValidationReport> {
    cfg.validate()?;
    if pool.annotations.is_empty() {
        return Err(Error::Insufficient("empty validation pool".into()));
    }
    if (pool.false_fraction() - cfg.contamination_fraction).abs() > 0.02 {
        log::warn!(
            "pool false fraction {:.3} differs from the configured contamination {:.3}",
            pool.false_fraction(),
            cfg.contamination_fraction
        );
    }
    let reps: Vec<Representation> = representations()
        .into_iter()
        .filter(|r| cfg.representations.is_empty() || cfg.representations.contains(&r.name))
        .collect();
    if reps.is_empty() {
        return Err(Error::InvalidParameter(format!("no representation matches {:?}", cfg.representations)));
    }
    let sampler = RegionSampler::new(&pool.annotations, pool.width, pool.height, cfg.region_w, cfg.region_h)?;
    let expected_true_per_rect: f64 =
        pool.annotations.iter().filter(|a| a.label == Label::True).map(|a| sampler.inclusion_probability(a)).sum();
    let prepared = reps
        .iter()
        .map(|rep| {
            let spec = spec_for(pool, rep, cfg)?;
            let bins =
                pool.scores.iter().map(|s| spec.bin_of(&rep.axes.iter().map(|&i| s[i]).collect::<Vec<_>>())).collect();
            Ok(Prepared { spec, bins })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records: Vec<TrialRecord> = (0..cfg.trials)
        .into_par_iter()
        .flat_map_iter(|t| run_trial(pool, &sampler, &prepared, cfg, expected_true_per_rect, t))
        .collect();
    records.sort_by_key(|r| (r.representation, r.ratio, r.trial));

    let mut rows = Vec::new();
    for (ri, rep) in reps.iter().enumerate() {
        for (ti, &ratio) in cfg.ratios.iter().enumerate() {
            let ok: Vec<TrialPoint> = records
                .iter()
                .filter(|r| r.representation == ri && r.ratio == ti)
                .filter_map(|r| r.outcome.as_ref().ok().copied())
                .collect();
            let failed = cfg.trials - ok.len();
            let pts: Vec<TrialPoint> = ok.into_iter().filter(|p| p.sigma > 0.0).collect();
            let zero_sigma = cfg.trials - failed - pts.len();
            let pulls: Vec<f64> = pts.iter().map(|p| (p.estimate - p.expected) / p.sigma).collect();
            let realized: Vec<f64> = pts.iter().map(|p| (p.estimate - p.realized) / p.sigma).collect();
            let (pull_mean, pull_std) = mean_std(&pulls);
            let (realized_pull_mean, realized_pull_std) = mean_std(&realized);
            let avg = |f: fn(&TrialPoint) -> f64| mean_std(&pts.iter().map(f).collect::<Vec<_>>()).0;
            let (mean_estimate, mean_expected, mean_sigma) =
                (avg(|p| p.estimate), avg(|p| p.expected), avg(|p| p.sigma));
            rows.push(ValidationRow {
                representation: rep.name.clone(),
                dims: rep.axes.len(),
                ratio,
                trials: cfg.trials,
                failed,
                zero_sigma,
                pull_mean,
                pull_std,
                realized_pull_mean,
                realized_pull_std,
                predicted_percent_error: 100.0 * mean_sigma / mean_estimate,
                sigma_over_poisson: mean_sigma / mean_expected.sqrt(),
                mean_estimate,
                mean_expected,
                mean_sigma,
            });
        }
    }
    Ok(ValidationReport {
        config: cfg.clone(),
        pool_size: pool.annotations.len(),
        pool_false_fraction: pool.false_fraction(),
        rows,
        records,
    })
}

impl ValidationReport {
    /// Pull statistics and predicted accuracy per representation and ratio.
    pub fn summary_table(&self) -> Table {
        let mut t = Table::new(&[
            "representation",
            "dims",
            "data_ratio",
            "trials",
            "failed",
            "zero_sigma",
            "pull_mean",
            "pull_std",
            "realized_pull_mean",
            "realized_pull_std",
            "predicted_percent_error",
            "sigma_over_poisson",
            "mean_estimate",
            "mean_expected",
            "mean_sigma",
        ]);
        for r in &self.rows {
            t.push(vec![
                r.representation.clone(),
                r.dims.to_string(),
                fmt_real(r.ratio),
                r.trials.to_string(),
                r.failed.to_string(),
                r.zero_sigma.to_string(),
                fmt_real(r.pull_mean),
                fmt_real(r.pull_std),
                fmt_real(r.realized_pull_mean),
                fmt_real(r.realized_pull_std),
                fmt_real(r.predicted_percent_error),
                fmt_real(r.sigma_over_poisson),
                fmt_real(r.mean_estimate),
                fmt_real(r.mean_expected),
                fmt_real(r.mean_sigma),
            ]);
        }
        t
    }

    /// Every trial's estimate, or the reason it failed.
    pub fn trials_table(&self) -> Table {
        let names: Vec<String> = self.rows.iter().map(|r| r.representation.clone()).collect();
        let n_ratios = self.config.ratios.len();
        let mut t = Table::new(&[
            "representation",
            "data_ratio",
            "trial",
            "estimate",
            "sigma",
            "expected",
            "realized",
            "error",
        ]);
        for rec in &self.records {
            let name = &names[rec.representation * n_ratios];
            let mut row = vec![name.clone(), fmt_real(self.config.ratios[rec.ratio]), rec.trial.to_string()];
            match &rec.outcome {
                Ok(p) => {
                    row.extend([
                        fmt_real(p.estimate),
                        fmt_real(p.sigma),
                        fmt_real(p.expected),
                        fmt_real(p.realized),
                        String::new(),
                    ]);
                }
                Err(e) => row.extend([String::new(), String::new(), String::new(), String::new(), e.clone()]),
            }
            t.push(row);
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, step: f64) -> Vec<Annotation> {
        let mut v = Vec::new();
        for j in 0..n {
            for i in 0..n {
                let label = if (i + j) % 4 == 0 { Label::False } else { Label::True };
                v.push(Annotation::new(
                    format!("a{i}_{j}"),
                    (i as f64 + 0.5) * step,
                    (j as f64 + 0.5) * step,
                    20.0,
                    label,
                ));
            }
        }
        v
    }

    #[test]
    fn whole_raster_rectangle_returns_everything() {
        let anns = grid(10, 10.0);
        let r = bootstrap_regions(&anns, 100.0, 100.0, 100.0, 100.0, RegionTarget::Rectangles(1), 1).unwrap();
        assert_eq!(r, vec![(0..100).collect::<Vec<_>>()]);
    }

    #[test]
    fn bad_rectangles_are_errors() {
        let anns = grid(3, 10.0);
        assert!(bootstrap_regions(&anns, 30.0, 30.0, 0.0, 10.0, RegionTarget::Rectangles(1), 1).is_err());
        assert!(bootstrap_regions(&anns, 30.0, 30.0, 40.0, 10.0, RegionTarget::Rectangles(1), 1).is_err());
        assert!(bootstrap_regions(&[], 30.0, 30.0, 10.0, 10.0, RegionTarget::Rectangles(1), 1).is_err());
        let outside = vec![Annotation::new("o", 50.0, 50.0, 20.0, Label::True)];
        assert!(bootstrap_regions(&outside, 30.0, 30.0, 10.0, 10.0, RegionTarget::Annotations(5), 1).is_err());
    }

    #[test]
    fn regions_are_deterministic_and_reach_target() {
        let anns = grid(20, 10.0);
        let a = bootstrap_regions(&anns, 200.0, 200.0, 30.0, 30.0, RegionTarget::Annotations(500), 3).unwrap();
        assert_eq!(a, bootstrap_regions(&anns, 200.0, 200.0, 30.0, 30.0, RegionTarget::Annotations(500), 3).unwrap());
        assert!(a.iter().map(Vec::len).sum::<usize>() >= 500);
    }

    #[test]
    fn subset_size_matches_area_fraction() {
        // interior points: inclusion probability is exactly the area fraction
        let mut r = rng::seeded(11);
        let anns: Vec<Annotation> = (0..400)
            .map(|i| {
                use rand::Rng;
                Annotation::new(
                    format!("p{i}"),
                    r.random_range(0.0..1000.0),
                    r.random_range(0.0..1000.0),
                    20.0,
                    Label::True,
                )
            })
            .collect();
        let (w, h) = (100.0, 50.0);
        let exact: f64 = anns.iter().map(|a| inclusion_probability(a.x, a.y, 1000.0, 1000.0, w, h)).sum();
        let naive = 400.0 * w * h / 1e6;
        assert!((exact - naive).abs() / naive < 0.15);
        let n = 20_000;
        let regions = bootstrap_regions(&anns, 1000.0, 1000.0, w, h, RegionTarget::Rectangles(n), 5).unwrap();
        let sizes: Vec<f64> = regions.iter().map(|r| r.len() as f64).collect();
        let (m, s) = mean_std(&sizes);
        assert!((m - exact).abs() <= 4.0 * s / (n as f64).sqrt(), "mean {m} exact {exact}");
    }

    #[test]
    fn inclusion_probability_oracle() {
        // brute force over a fine grid of rectangle origins
        let (width, height, w, h) = (50.0, 40.0, 12.0, 9.0);
        for (x, y) in [(3.0, 4.0), (25.0, 20.0), (49.5, 39.0), (11.99, 0.0)] {
            let steps = 800;
            let mut hit = 0usize;
            for i in 0..steps {
                for j in 0..steps {
                    let x0 = (i as f64 + 0.5) / steps as f64 * (width - w);
                    let y0 = (j as f64 + 0.5) / steps as f64 * (height - h);
                    if x >= x0 && x < x0 + w && y >= y0 && y < y0 + h {
                        hit += 1;
                    }
                }
            }
            let bf = hit as f64 / (steps * steps) as f64;
            assert!((inclusion_probability(x, y, width, height, w, h) - bf).abs() < 5e-3, "({x},{y})");
        }
        assert_eq!(inclusion_probability(-1.0, 5.0, 50.0, 40.0, 12.0, 9.0), 0.0);
        assert_eq!(inclusion_probability(5.0, 5.0, 50.0, 40.0, 50.0, 40.0), 1.0);
    }

    #[test]
    fn ten_representations() {
        let r = representations();
        assert_eq!(r.len(), 10);
        assert_eq!(r.iter().filter(|r| r.axes.len() == 1).count(), 4);
        let names: std::collections::BTreeSet<_> = r.iter().map(|r| r.name.clone()).collect();
        assert_eq!(names.len(), 10);
    }

    #[test]
    fn config_validation() {
        assert!(ValidationConfig::default().validate().is_ok());
        assert!(ValidationConfig { trials: 0, ..Default::default() }.validate().is_err());
        assert!(ValidationConfig { ratios: vec![1.0, 0.0], ..Default::default() }.validate().is_err());
        assert!(ValidationConfig { contamination_fraction: 1.0, ..Default::default() }.validate().is_err());
        assert!(ValidationConfig { region_w: 0.0, ..Default::default() }.validate().is_err());
    }
}
