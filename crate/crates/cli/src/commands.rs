use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use crater_lpm::calibrate::{
    apply_correction, band_of, calibrate_regions, check_edges, reference_counts, BandCount, CalibrationRegion,
    CalibrationReport,
};
use crater_lpm::counting_model::{excess_error_ratio, simulate_regions};
use crater_lpm::io::{self, fmt_real, Table};
use crater_lpm::lpm::{correct, train, FitConfig, LpmModel, QuantityEstimate, TrainConfig};
use crater_lpm::rng::stream_seed;
use crater_lpm::scores::{
    join_scores, make_spec_from_training, HistogramSpec, ScoreHistogram, DEFAULT_BINS_1D, DEFAULT_BINS_2D,
    OVERFLOW_WARN_FRACTION,
};
use crater_lpm::synth::{random_scene, render_scene, SceneSpec};
use crater_lpm::templates::{
    build_template, extract_patch, match_annotations, Label, MatchResult, OutOfBounds, PatchConfig, Template,
    DEFAULT_SCHEDULE,
};
use crater_lpm::validate::{build_pool, run_validation, PoolConfig, ValidationConfig, ValidationPool};
use crater_lpm::{Annotation, GrayRaster};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::args::*;

pub fn run(cli: &Cli) -> Result<()> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Synth(a) => synth(a, out, cli.seed),
        Command::Simulate(a) => simulate(a, out, cli.seed),
        Command::Template(a) => template(a, out),
        Command::Match(a) => match_cmd(a, out),
        Command::Hist(a) => hist(a, out),
        Command::Train(a) => train_cmd(a, out, cli.seed),
        Command::Correct(a) => correct_cmd(a, out),
        Command::Calibrate(a) => calibrate(a, out),
        Command::Validate(a) => validate(a, out, cli.seed),
    }
}

fn wrote(path: &Path) {
    info!("wrote {}", path.display());
}

fn write_table(t: &Table, path: PathBuf) -> Result<()> {
    t.write(&path).with_context(|| format!("writing {}", path.display()))?;
    wrote(&path);
    Ok(())
}

fn write_json<T: Serialize>(v: &T, path: PathBuf) -> Result<()> {
    io::write_json(&path, v).with_context(|| format!("writing {}", path.display()))?;
    wrote(&path);
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    io::read_json(path).with_context(|| format!("reading {}", path.display()))
}

fn read_raster(path: &Path) -> Result<GrayRaster> {
    GrayRaster::read_pgm(path).with_context(|| format!("reading {}", path.display()))
}

fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    io::read_annotations(path).with_context(|| format!("reading {}", path.display()))
}

fn read_matches(paths: &[PathBuf]) -> Result<Vec<MatchResult>> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(io::read_matches(p).with_context(|| format!("reading {}", p.display()))?);
    }
    Ok(all)
}

fn patch_config(pad_mean: bool) -> PatchConfig {
    PatchConfig {
        out_of_bounds: if pad_mean { OutOfBounds::PadMean } else { OutOfBounds::Error },
        ..Default::default()
    }
}

fn synth(a: &SynthArgs, out: &Path, seed: u64) -> Result<()> {
    let spec: SceneSpec = match &a.scene {
        Some(p) => read_json(p)?,
        None => {
            let params = crater_lpm::counting_model::CountingModelParams {
                lambda_true: a.lambda_true,
                lambda_false: a.lambda_false,
                ..Default::default()
            };
            random_scene(&params, &a.geometry(), stream_seed(seed, "scene"))?
        }
    };
    let (img, anns) = render_scene(&spec, stream_seed(seed, "render"))?;
    let pgm = out.join("scene.pgm");
    img.write_pgm(&pgm, a.bit_depth)?;
    wrote(&pgm);
    write_table(&io::annotations_table(&anns), out.join("annotations.csv"))?;
    write_json(&spec, out.join("scene.json"))?;
    info!("{} features ({} false)", anns.len(), anns.iter().filter(|x| x.label == Label::False).count());
    Ok(())
}

#[derive(Serialize)]
struct SimulateSummary {
    params: crater_lpm::counting_model::CountingModelParams,
    regions: usize,
    seed: u64,
    expected_detected: f64,
    mean_detected: f64,
    excess_error_ratio: f64,
}

fn simulate(a: &SimulateArgs, out: &Path, seed: u64) -> Result<()> {
    let params = a.params();
    let draws = simulate_regions(&params, a.regions, seed)?;
    let mut t = Table::new(&["n_true", "n_false", "p_true", "p_false", "n_detected"]);
    for d in &draws {
        t.push(vec![
            d.n_true.to_string(),
            d.n_false.to_string(),
            fmt_real(d.p_true),
            fmt_real(d.p_false),
            d.n_detected.to_string(),
        ]);
    }
    write_table(&t, out.join("simulate.csv"))?;
    let ratio = if draws.len() >= 2 { excess_error_ratio(&draws).unwrap_or(f64::NAN) } else { f64::NAN };
    let summary = SimulateSummary {
        params,
        regions: a.regions,
        seed,
        expected_detected: params.expected_detected(),
        mean_detected: draws.iter().map(|d| d.n_detected as f64).sum::<f64>() / draws.len() as f64,
        excess_error_ratio: ratio,
    };
    info!("excess error ratio {ratio:.4}");
    write_json(&summary, out.join("simulate_summary.json"))
}

fn template(a: &TemplateArgs, out: &Path) -> Result<()> {
    let img = read_raster(&a.image)?;
    let anns = read_annotations(&a.annotations)?;
    let cfg = patch_config(a.pad_mean);
    let mut patches = Vec::new();
    for ann in anns.iter().filter(|x| x.label == Label::True) {
        match extract_patch(&img, ann, &cfg) {
            Ok(p) => patches.push(p),
            Err(e) => warn!("skipping {}: {e}", ann.id),
        }
    }
    ensure!(!patches.is_empty(), "no usable true-labelled annotations in {}", a.annotations.display());
    info!("building templates from {} examples", patches.len());
    for kind in &a.kind {
        let t = build_template(*kind, &patches)?;
        write_json(&t, out.join(format!("template_{kind}.json")))?;
    }
    Ok(())
}

fn match_cmd(a: &MatchArgs, out: &Path) -> Result<()> {
    let img = read_raster(&a.image)?;
    let anns = read_annotations(&a.annotations)?;
    let mut templates: Vec<Template> = Vec::new();
    for p in &a.template {
        let t: Template = read_json(p)?;
        t.validate().with_context(|| format!("template {}", p.display()))?;
        if a.template_kind.is_none_or(|k| k == t.kind) {
            templates.push(t);
        }
    }
    ensure!(!templates.is_empty(), "no template of the requested kind");
    let pairs: Vec<_> = templates.iter().flat_map(|t| a.measure.iter().map(move |m| (t, *m))).collect();
    let schedule = if a.schedule.is_empty() { DEFAULT_SCHEDULE.to_vec() } else { a.schedule.clone() };
    ensure!(schedule.iter().all(|s| s.is_finite() && *s >= 0.0), "smoothing widths must be finite and >= 0");
    let cfg = patch_config(a.pad_mean);
    let mut results = Vec::new();
    let mut skipped = Table::new(&["id", "reason"]);
    for (ann, r) in anns.iter().zip(match_annotations(&img, &anns, &pairs, &schedule, &cfg)) {
        match r {
            Ok(m) => results.extend(m),
            Err(
                e @ (crater_lpm::Error::InvalidParameter(_)
                | crater_lpm::Error::Domain(_)
                | crater_lpm::Error::OutOfBounds { .. }),
            ) => {
                warn!("skipping {}: {e}", ann.id);
                skipped.push(vec![ann.id.clone(), e.to_string()]);
            }
            Err(e) => return Err(e.into()),
        }
    }
    info!("scored {} of {} annotations", anns.len() - skipped.rows.len(), anns.len());
    write_table(&io::matches_table(&results), out.join("matches.csv"))?;
    write_table(&skipped, out.join("skipped.csv"))
}

fn derive_spec(a: &HistArgs, results: &[MatchResult]) -> Result<HistogramSpec> {
    let n = a.axes.len();
    let bins = match a.bins.len() {
        0 => vec![if n == 1 { DEFAULT_BINS_1D } else { DEFAULT_BINS_2D }; n],
        1 => vec![a.bins[0]; n],
        k if k == n => a.bins.clone(),
        k => bail!("--bins has {k} values for {n} axes"),
    };
    let values: Vec<Vec<f64>> = a
        .axes
        .iter()
        .map(|k| {
            results
                .iter()
                .filter(|m| m.template_kind == k.template_kind && m.measure == k.measure)
                .map(|m| m.best_score)
                .collect()
        })
        .collect();
    let axes: Vec<_> = a.axes.iter().zip(&values).map(|(k, v)| (*k, v.as_slice())).collect();
    Ok(make_spec_from_training(&axes, &bins, a.margin)?)
}

fn hist(a: &HistArgs, out: &Path) -> Result<()> {
    ensure!(a.groups >= 1, "--groups must be at least 1");
    let label: Option<Label> = match a.label.as_str() {
        "all" => None,
        s => Some(s.parse()?),
    };
    let results = read_matches(&a.matches)?;
    let spec = match &a.spec {
        Some(p) => read_json(p)?,
        None => derive_spec(a, &results)?,
    };
    let labels: BTreeMap<&str, Label> = results.iter().map(|m| (m.annotation_id.as_str(), m.label)).collect();
    let joined = join_scores(&spec, &results)?;
    let mut hists = vec![ScoreHistogram::empty(&spec); a.groups];
    let kept = joined.iter().filter(|(id, _)| label.is_none_or(|l| labels[id.as_str()] == l));
    for (i, (_, values)) in kept.enumerate() {
        hists[i % a.groups].add(values);
    }
    for h in &hists {
        if h.overflow_fraction() > OVERFLOW_WARN_FRACTION {
            warn!("{:.1}% of entries fall outside the histogram range", 100.0 * h.overflow_fraction());
        }
    }
    info!("{} entries in {} histogram(s) over {}", hists.iter().map(|h| h.total()).sum::<u64>(), a.groups, spec.name());
    write_json(&hists, out.join("histograms.json"))?;
    write_json(&spec, out.join("spec.json"))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(ScoreHistogram),
    Many(Vec<ScoreHistogram>),
}

fn read_histograms(paths: &[PathBuf]) -> Result<Vec<ScoreHistogram>> {
    let mut all = Vec::new();
    for p in paths {
        match read_json::<OneOrMany>(p)? {
            OneOrMany::One(h) => all.push(h),
            OneOrMany::Many(v) => all.extend(v),
        }
    }
    Ok(all)
}

fn train_cmd(a: &TrainArgs, out: &Path, seed: u64) -> Result<()> {
    let t = read_histograms(&a.true_hist)?;
    let f = read_histograms(&a.false_hist)?;
    let cfg = TrainConfig {
        chi2_target: a.chi2_target,
        max_components: a.max_components,
        fixed_components: a.components,
        restarts: a.restarts,
        max_iterations: a.max_iterations,
        seed,
        ..Default::default()
    };
    let model = train(&t, &f, &cfg)?;
    for c in &model.classes {
        info!("class {}: {} component(s)", c.label, c.components.len());
    }
    write_json(&model, out.join("model.json"))
}

#[derive(Serialize)]
struct ClassTotal {
    label: Label,
    count: f64,
    sigma: f64,
    sigma_data: f64,
    sigma_model: f64,
}

#[derive(Serialize)]
struct Correction {
    entries: u64,
    overflow: u64,
    classes: Vec<ClassTotal>,
    class_covariance: Vec<Vec<f64>>,
    quantities: Vec<f64>,
}

impl Correction {
    fn new(model: &LpmModel, hist: &ScoreHistogram, est: &QuantityEstimate) -> Self {
        let sd = |m: &Vec<Vec<f64>>, i: usize| m[i][i].max(0.0).sqrt();
        Correction {
            entries: hist.total(),
            overflow: hist.overflow_count,
            classes: model
                .classes
                .iter()
                .enumerate()
                .map(|(i, c)| ClassTotal {
                    label: c.label,
                    count: est.class_totals[i],
                    sigma: est.class_sigma(i),
                    sigma_data: sd(&est.class_covariance_data, i),
                    sigma_model: sd(&est.class_covariance_model, i),
                })
                .collect(),
            class_covariance: est.class_covariance.clone(),
            quantities: est.q.clone(),
        }
    }

    fn true_total(&self) -> (f64, f64) {
        self.classes.iter().find(|c| c.label == Label::True).map(|c| (c.count, c.sigma)).unwrap_or((0.0, 0.0))
    }
}

#[derive(Serialize)]
struct BandCorrection {
    lo: f64,
    hi: f64,
    correction: Option<Correction>,
}

#[derive(Serialize)]
struct CorrectReport {
    total: Correction,
    bands: Vec<BandCorrection>,
    unbanded: u64,
}

fn sfd_table(rows: impl IntoIterator<Item = (f64, f64, f64, f64)>) -> Table {
    let mut t = Table::new(&["band_lo", "band_hi", "count", "sigma"]);
    for (lo, hi, c, s) in rows {
        t.push(vec![fmt_real(lo), fmt_real(hi), fmt_real(c), fmt_real(s)]);
    }
    t
}

fn correct_cmd(a: &CorrectArgs, out: &Path) -> Result<()> {
    let model: LpmModel = read_json(&a.model)?;
    model.validate()?;
    let fit = FitConfig { max_iterations: a.max_iterations, ..Default::default() };
    let estimate =
        |h: &ScoreHistogram| -> Result<Correction> { Ok(Correction::new(&model, h, &correct(&model, h, &fit)?)) };

    let (hist, joined) = match &a.hist {
        Some(p) => (read_json::<ScoreHistogram>(p)?, None),
        None => {
            let results = read_matches(&a.matches)?;
            let joined = join_scores(&model.spec, &results)?;
            let mut h = ScoreHistogram::empty(&model.spec);
            joined.values().for_each(|v| h.add(v));
            (h, Some(joined))
        }
    };
    let total = estimate(&hist)?;
    let (t, s) = total.true_total();
    info!("true total {t:.3} +- {s:.3} from {} entries", hist.total());

    let mut report = CorrectReport { total, bands: Vec::new(), unbanded: 0 };
    if let (Some(ann_path), Some(joined)) = (&a.annotations, joined) {
        let edges = &a.band_edges;
        check_edges(edges)?;
        let diam: BTreeMap<String, f64> =
            read_annotations(ann_path)?.into_iter().map(|x| (x.id, x.diameter_px)).collect();
        let mut band_hists = vec![ScoreHistogram::empty(&model.spec); edges.len() - 1];
        for (id, v) in &joined {
            let d = *diam.get(id).with_context(|| format!("matched id {id} missing from {}", ann_path.display()))?;
            match band_of(edges, d) {
                Some(b) => band_hists[b].add(v),
                None => report.unbanded += 1,
            }
        }
        if report.unbanded > 0 {
            warn!("{} annotation(s) fall outside the band edges", report.unbanded);
        }
        for (b, h) in band_hists.iter().enumerate() {
            let correction = if h.total() == 0 {
                None
            } else {
                Some(estimate(h).with_context(|| format!("band [{}, {})", edges[b], edges[b + 1]))?)
            };
            report.bands.push(BandCorrection { lo: edges[b], hi: edges[b + 1], correction });
        }
        let rows: Vec<(f64, f64, f64, f64)> = report
            .bands
            .iter()
            .map(|b| {
                let (c, s) = b.correction.as_ref().map(Correction::true_total).unwrap_or((0.0, 0.0));
                (b.lo, b.hi, c, s)
            })
            .collect();
        write_table(&sfd_table(rows.iter().copied()), out.join("sfd.csv"))?;
        if let Some(cp) = &a.calibration {
            let cal: CalibrationReport = read_json(cp)?;
            ensure!(cal.edges == *edges, "calibration {} uses different band edges", cp.display());
            let calibrated = rows.iter().enumerate().map(|(b, &(lo, hi, c, s))| {
                let sf = cal.per_band[b].as_ref().unwrap_or(&cal.overall);
                let (cc, var) = apply_correction(c, s * s, sf);
                (lo, hi, cc, var.sqrt())
            });
            write_table(&sfd_table(calibrated), out.join("sfd_calibrated.csv"))?;
        }
    }
    write_json(&report, out.join("correct.json"))
}

fn read_sfd(path: &Path, edges: &[f64]) -> Result<Vec<BandCount>> {
    let mut rd = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, rec) in rd.deserialize::<(f64, f64, f64, f64)>().enumerate() {
        let (lo, hi, count, sigma) = rec.with_context(|| format!("parsing {}", path.display()))?;
        ensure!(
            i + 1 < edges.len() && lo == edges[i] && hi == edges[i + 1],
            "{}: band {i} [{lo}, {hi}) does not match --band-edges",
            path.display()
        );
        out.push(BandCount { count, variance: sigma * sigma });
    }
    ensure!(out.len() + 1 == edges.len(), "{}: expected {} bands", path.display(), edges.len() - 1);
    Ok(out)
}

#[derive(Serialize)]
struct RegionSummary {
    measured: PathBuf,
    reference: PathBuf,
    success_probability: f64,
}

#[derive(Serialize)]
struct CalibrationOutput<'a> {
    #[serde(flatten)]
    report: &'a CalibrationReport,
    regions: Vec<RegionSummary>,
}

fn calibrate(a: &CalibrateArgs, out: &Path) -> Result<()> {
    ensure!(a.measured.len() == a.reference.len(), "--measured and --reference must be given the same number of times");
    let edges = &a.band_edges;
    check_edges(edges)?;
    let mut regions = Vec::new();
    let mut summaries = Vec::new();
    for (m, r) in a.measured.iter().zip(&a.reference) {
        let measured = read_sfd(m, edges)?;
        let (reference, p) = reference_counts(&read_annotations(r)?, edges)?;
        regions.push(CalibrationRegion { measured, reference });
        summaries.push(RegionSummary { measured: m.clone(), reference: r.clone(), success_probability: p });
    }
    let report = calibrate_regions(&regions, edges)?;
    info!(
        "chi2/dof uncorrected {:.3}, overall {:.3}, per band {:.3}",
        report.chi2_uncorrected, report.chi2_overall, report.chi2_per_band
    );
    for (i, reg) in regions.iter().enumerate() {
        let rows = reg.measured.iter().enumerate().map(|(b, m)| {
            let sf = report.per_band[b].as_ref().unwrap_or(&report.overall);
            let (c, var) = apply_correction(m.count, m.variance, sf);
            (edges[b], edges[b + 1], c, var.sqrt())
        });
        write_table(&sfd_table(rows), out.join(format!("sfd_calibrated_{i}.csv")))?;
    }
    write_json(&CalibrationOutput { report: &report, regions: summaries }, out.join("calibration.json"))
}

#[derive(Serialize)]
struct ValidationOutput<'a> {
    config: &'a ValidationConfig,
    pool: Option<PoolConfig>,
    pool_size: usize,
    pool_false_fraction: f64,
    rows: &'a [crater_lpm::validate::ValidationRow],
}

fn validate(a: &ValidateArgs, out: &Path, seed: u64) -> Result<()> {
    let cfg = ValidationConfig {
        trials: a.trials,
        ratios: a.ratios.clone(),
        region_w: a.region_width,
        region_h: a.region_height,
        contamination_fraction: a.contamination,
        seed,
        training_rectangles: a.training_rectangles,
        training_groups: a.training_groups,
        bins_1d: a.bins_1d,
        bins_2d: a.bins_2d,
        margin: a.margin,
        train: TrainConfig {
            chi2_target: a.chi2_target,
            max_components: a.max_components,
            fixed_components: a.components,
            restarts: a.restarts,
            seed,
            ..Default::default()
        },
        representations: a.representations.clone(),
    };
    cfg.validate()?;
    let (pool, pool_cfg) = if a.matches.is_empty() {
        let mut pc = PoolConfig::default();
        pc.geometry.width = a.pool_size;
        pc.geometry.height = a.pool_size;
        pc.annotations = a.pool_annotations;
        pc.template_examples = a.template_examples;
        pc.contamination_tolerance = a.contamination_tolerance;
        pc.poisson_layout = !a.keep_layout;
        info!("building synthetic pool");
        (build_pool(&pc, a.contamination, stream_seed(seed, "pool"))?, Some(pc))
    } else {
        let anns = read_annotations(a.annotations.as_ref().expect("required with --matches"))?;
        let results = read_matches(&a.matches)?;
        let pool =
            ValidationPool::from_matches(a.width.expect("required"), a.height.expect("required"), anns, &results)?;
        (pool, None)
    };
    info!("pool: {} annotations, false fraction {:.4}", pool.annotations.len(), pool.false_fraction());
    let report = run_validation(&pool, &cfg)?;
    for r in &report.rows {
        info!(
            "{:<18} ratio {:>7}: pull std {:.3}, predicted error {:.3}%",
            r.representation, r.ratio, r.pull_std, r.predicted_percent_error
        );
    }
    write_table(&report.summary_table(), out.join("validation_summary.csv"))?;
    write_table(&report.trials_table(), out.join("validation_trials.csv"))?;
    write_json(
        &ValidationOutput {
            config: &report.config,
            pool: pool_cfg,
            pool_size: report.pool_size,
            pool_false_fraction: report.pool_false_fraction,
            rows: &report.rows,
        },
        out.join("validation.json"),
    )
}
