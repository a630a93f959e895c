//! Per-class component learning with chi-square driven model selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ChiSquareStep, ClassModel, Component, LpmModel, PROBABILITY_FLOOR};
use crate::error::{Error, Result};
use crate::rng;
use crate::scores::ScoreHistogram;
use crate::templates::Label;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Add components while chi-square per degree of freedom exceeds this.
    pub chi2_target: f64,
    pub max_components: usize,
    /// Skip selection and use exactly this many components per class.
    pub fixed_components: Option<usize>,
    /// Random restarts per component count; the best likelihood wins.
    pub restarts: usize,
    pub rel_tol: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            chi2_target: 1.2,
            max_components: 10,
            fixed_components: None,
            restarts: 5,
            rel_tol: 1e-10,
            max_iterations: 10_000,
            seed: 0,
        }
    }
}

/// Trains the "true" and "false" classes independently on their example
/// histograms. All histograms must share one spec.
pub fn train(true_hists: &[ScoreHistogram], false_hists: &[ScoreHistogram], cfg: &TrainConfig) -> Result<LpmModel> {
    let spec = true_hists
        .first()
        .or(false_hists.first())
        .map(|h| h.spec.clone())
        .ok_or_else(|| Error::Insufficient("no training histograms".into()))?;
    spec.validate()?;
    if true_hists.is_empty() || false_hists.is_empty() {
        return Err(Error::Insufficient("need at least one training histogram per class".into()));
    }
    if true_hists.iter().chain(false_hists).any(|h| h.spec != spec) {
        return Err(Error::SpecMismatch);
    }
    let as_counts = |hs: &[ScoreHistogram]| hs.iter().map(|h| h.counts.clone()).collect::<Vec<_>>();
    let t = train_class(Label::True, &as_counts(true_hists), cfg, rng::stream_seed(cfg.seed, "true"))?;
    let f = train_class(Label::False, &as_counts(false_hists), cfg, rng::stream_seed(cfg.seed, "false"))?;
    let model = LpmModel { spec, classes: vec![t, f] };
    model.validate()?;
    Ok(model)
}

/// Joint EM state for one class: shared PMFs, per-histogram quantities.
struct JointFit {
    /// `pmf[k][x]`, unfloored.
    pmf: Vec<Vec<f64>>,
    /// `q[h][k]`.
    q: Vec<Vec<f64>>,
    /// Responsibility-weighted training counts `T[k][x]`.
    counts: Vec<Vec<f64>>,
    objective: f64,
}

fn joint_objective(hists: &[Vec<f64>], bins: &[usize], pmf: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for (h, qh) in hists.iter().zip(q) {
        for &x in bins {
            if h[x] > 0.0 {
                let f: f64 = pmf.iter().zip(qh).map(|(p, qk)| p[x] * qk).sum();
                s += h[x] * f.max(f64::MIN_POSITIVE).ln();
            }
        }
        s -= qh.iter().sum::<f64>();
    }
    s
}

fn joint_em(hists: &[Vec<f64>], bins: &[usize], mut pmf: Vec<Vec<f64>>, cfg: &TrainConfig) -> JointFit {
    let k = pmf.len();
    let n_bins = hists[0].len();
    let mut q: Vec<Vec<f64>> = hists.iter().map(|h| vec![h.iter().sum::<f64>() / k as f64; k]).collect();
    let mut prev = f64::NEG_INFINITY;
    let mut stable = 0;
    let mut counts = vec![vec![0.0; n_bins]; k];
    for _ in 0..cfg.max_iterations {
        counts.iter_mut().for_each(|c| c.iter_mut().for_each(|v| *v = 0.0));
        let mut new_q = vec![vec![0.0; k]; hists.len()];
        for (hi, h) in hists.iter().enumerate() {
            for &x in bins {
                if h[x] == 0.0 {
                    continue;
                }
                let f: f64 = pmf.iter().zip(&q[hi]).map(|(p, qk)| p[x] * qk).sum();
                if f <= 0.0 {
                    continue;
                }
                for kk in 0..k {
                    let r = h[x] * pmf[kk][x] * q[hi][kk] / f;
                    new_q[hi][kk] += r;
                    counts[kk][x] += r;
                }
            }
        }
        for kk in 0..k {
            let n: f64 = counts[kk].iter().sum();
            if n > 0.0 {
                for x in 0..n_bins {
                    pmf[kk][x] = counts[kk][x] / n;
                }
            }
        }
        q = new_q;
        let obj = joint_objective(hists, bins, &pmf, &q);
        if (obj - prev).abs() <= cfg.rel_tol * prev.abs().max(1.0) {
            stable += 1;
            if stable >= 3 {
                prev = obj;
                break;
            }
        } else {
            stable = 0;
        }
        prev = obj;
    }
    JointFit { pmf, q, counts, objective: prev }
}

fn chi_square(hists: &[Vec<f64>], bins: &[usize], fit: &JointFit) -> f64 {
    let mut chi2 = 0.0;
    for (h, qh) in hists.iter().zip(&fit.q) {
        for &x in bins {
            let pred: f64 = fit.pmf.iter().zip(qh).map(|(p, qk)| p[x] * qk).sum();
            if pred > 0.0 {
                chi2 += (h[x] - pred).powi(2) / pred;
            } else if h[x] > 0.0 {
                return f64::INFINITY;
            }
        }
    }
    chi2
}

/// Degrees of freedom left after fitting `k` components to `m` histograms
/// over `occupied` bins: each PMF has `occupied - 1` free values and every
/// histogram has `k` quantities.
pub fn degrees_of_freedom(occupied: usize, m: usize, k: usize) -> i64 {
    (occupied * m) as i64 - (k * occupied.saturating_sub(1)) as i64 - (k * m) as i64
}

fn fit_components(
    hists: &[Vec<f64>],
    bins: &[usize],
    pooled: &[f64],
    k: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> JointFit {
    let total: f64 = pooled.iter().sum();
    if k == 1 {
        let pmf = vec![pooled.iter().map(|v| v / total).collect::<Vec<_>>()];
        let q = hists.iter().map(|h| vec![h.iter().sum::<f64>()]).collect();
        let fit = JointFit { pmf, q, counts: vec![pooled.to_vec()], objective: 0.0 };
        let objective = joint_objective(hists, bins, &fit.pmf, &fit.q);
        return JointFit { objective, ..fit };
    }
    let mut r = rng::seeded(seed);
    let mut best: Option<JointFit> = None;
    for _ in 0..cfg.restarts.max(1) {
        let pmf: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let mut p: Vec<f64> = pooled.iter().map(|v| v * (1.0 + 0.5 * r.random_range(-1.0..1.0))).collect();
                let s: f64 = p.iter().sum();
                p.iter_mut().for_each(|v| *v /= s);
                p
            })
            .collect();
        let fit = joint_em(hists, bins, pmf, cfg);
        if best.as_ref().is_none_or(|b| fit.objective > b.objective) {
            best = Some(fit);
        }
    }
    best.expect("at least one restart")
}

fn floored(pmf: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = pmf.iter().map(|v| v.max(PROBABILITY_FLOOR)).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// Learns one class's components from its example histograms.
pub fn train_class(label: Label, hists: &[Vec<u64>], cfg: &TrainConfig, seed: u64) -> Result<ClassModel> {
    let hists_f: Vec<Vec<f64>> =
        hists.iter().filter(|h| h.iter().any(|&c| c > 0)).map(|h| h.iter().map(|&c| c as f64).collect()).collect();
    if hists_f.is_empty() {
        return Err(Error::Insufficient(format!("class {label} has no training entries")));
    }
    let n_bins = hists_f[0].len();
    if hists_f.iter().any(|h| h.len() != n_bins) {
        return Err(Error::SizeMismatch { expected: format!("{n_bins} bins"), actual: "ragged histograms".into() });
    }
    let mut pooled = vec![0.0; n_bins];
    for h in &hists_f {
        pooled.iter_mut().zip(h).for_each(|(p, v)| *p += v);
    }
    let bins: Vec<usize> = (0..n_bins).filter(|&x| pooled[x] > 0.0).collect();
    let m = hists_f.len();
    let occupied = bins.len();

    let (k_min, k_max) = match cfg.fixed_components {
        Some(k) => {
            if k == 0 {
                return Err(Error::InvalidParameter("fixed component count must be >= 1".into()));
            }
            if k > 1 && degrees_of_freedom(occupied, m, k) <= 0 {
                return Err(Error::Insufficient(format!(
                    "class {label}: {occupied} occupied bins in {m} histograms cannot support {k} components"
                )));
            }
            (k, k)
        }
        None => (1, cfg.max_components.max(1)),
    };

    let mut trace = Vec::new();
    let mut chosen = None;
    for k in k_min..=k_max {
        let fit = fit_components(&hists_f, &bins, &pooled, k, cfg, rng::sub_seed(seed, k as u64));
        let dof = degrees_of_freedom(occupied, m, k);
        let chi2 = chi_square(&hists_f, &bins, &fit);
        let per_dof = if dof > 0 { chi2 / dof as f64 } else { f64::NAN };
        trace.push(ChiSquareStep { components: k, chi2, dof, chi2_per_dof: per_dof });
        chosen = Some(fit);
        let next_dof = degrees_of_freedom(occupied, m, k + 1);
        if cfg.fixed_components.is_some() || !(per_dof > cfg.chi2_target) || next_dof <= 0 {
            if per_dof > cfg.chi2_target && cfg.fixed_components.is_none() && k < k_max {
                log::warn!(
                    "class {label}: chi2/dof {per_dof:.3} with {k} components, too few degrees of freedom to add more"
                );
            }
            break;
        }
    }
    let fit = chosen.expect("at least one component count tried");
    let components = fit
        .pmf
        .iter()
        .zip(fit.counts)
        .filter(|(_, c)| c.iter().sum::<f64>() > 0.0)
        .map(|(p, c)| Component { pmf: floored(p), training_counts: c })
        .collect();
    Ok(ClassModel { label, components, training_histograms: hists.to_vec(), chi2_trace: trace, seed })
}
