//! Extended maximum likelihood fit of component quantities.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::LpmModel;
use crate::error::{Error, Result};
use crate::scores::{ScoreHistogram, OVERFLOW_WARN_FRACTION};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Convergence when the relative change of `ln L` stays below this...
    pub rel_tol: f64,
    /// ...for this many consecutive iterations.
    pub stable_iterations: usize,
    pub max_iterations: usize,
    /// Finish with safeguarded Newton steps on the positive components.
    pub polish: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { rel_tol: 1e-10, stable_iterations: 3, max_iterations: 10_000, polish: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub q: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// `ln L` before every update, then the final value.
    pub trace: Vec<f64>,
}

/// Histogram restricted to its occupied bins, with the PMF values of every
/// component at those bins.
pub(super) struct Occupied {
    pub bins: Vec<usize>,
    pub counts: Vec<f64>,
    /// `pmf[k][i]` = `P(bins[i] | k)`.
    pub pmf: Vec<Vec<f64>>,
}

impl Occupied {
    pub fn new(pmfs: &[&[f64]], hist: &[f64]) -> Self {
        let bins: Vec<usize> = (0..hist.len()).filter(|&x| hist[x] > 0.0).collect();
        let counts = bins.iter().map(|&x| hist[x]).collect();
        let pmf = pmfs.iter().map(|p| bins.iter().map(|&x| p[x]).collect()).collect();
        Occupied { bins, counts, pmf }
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn density(&self, q: &[f64]) -> Vec<f64> {
        let mut f = vec![0.0; self.bins.len()];
        for (pk, &qk) in self.pmf.iter().zip(q) {
            if qk != 0.0 {
                f.iter_mut().zip(pk).for_each(|(fi, p)| *fi += p * qk);
            }
        }
        f
    }

    pub fn objective(&self, q: &[f64]) -> Result<f64> {
        let f = self.density(q);
        let mut bad = Vec::new();
        let mut s = 0.0;
        for ((&h, &fi), &x) in self.counts.iter().zip(&f).zip(&self.bins) {
            if fi > 0.0 {
                s += h * fi.ln();
            } else {
                bad.push(x);
            }
        }
        if !bad.is_empty() {
            return Err(Error::SupportViolation { bins: bad });
        }
        Ok(s - q.iter().sum::<f64>())
    }

    /// One multiplicative EM update. Returns `ln L` at the input `q`.
    fn em_step(&self, q: &[f64], next: &mut [f64]) -> Result<f64> {
        let f = self.density(q);
        let mut s = 0.0;
        let mut bad = Vec::new();
        let w: Vec<f64> = self
            .counts
            .iter()
            .zip(&f)
            .zip(&self.bins)
            .map(|((&h, &fi), &x)| {
                if fi > 0.0 {
                    s += h * fi.ln();
                    h / fi
                } else {
                    bad.push(x);
                    0.0
                }
            })
            .collect();
        if !bad.is_empty() {
            return Err(Error::SupportViolation { bins: bad });
        }
        for ((nk, pk), &qk) in next.iter_mut().zip(&self.pmf).zip(q) {
            *nk = if qk == 0.0 { 0.0 } else { qk * pk.iter().zip(&w).map(|(p, wi)| p * wi).sum::<f64>() };
        }
        Ok(s - q.iter().sum::<f64>())
    }

    /// Gradient `sum_X H_X P(X|k) / f_X - 1` and curvature
    /// `sum_X H_X P(X|k) P(X|l) / f_X^2` over the components in `active`.
    pub fn gradient_curvature(&self, q: &[f64], active: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
        let f = self.density(q);
        let a = active.len();
        let mut g = DVector::from_element(a, -1.0);
        let mut m = DMatrix::zeros(a, a);
        for i in 0..self.bins.len() {
            let h = self.counts[i];
            let fi = f[i];
            for (ia, &k) in active.iter().enumerate() {
                let pk = self.pmf[k][i];
                if pk == 0.0 {
                    continue;
                }
                g[ia] += h * pk / fi;
                let hk = h * pk / (fi * fi);
                for (ib, &l) in active.iter().enumerate().skip(ia) {
                    m[(ia, ib)] += hk * self.pmf[l][i];
                }
            }
        }
        for ia in 0..a {
            for ib in 0..ia {
                m[(ia, ib)] = m[(ib, ia)];
            }
        }
        (g, m)
    }
}

/// Pseudo-inverse of a symmetric positive semi-definite matrix, and an
/// orthonormal basis of its (numerical) null space.
pub(super) fn psd_pinv(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<DVector<f64>>) {
    let n = m.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), Vec::new());
    }
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let thresh = max * 1e-11;
    let mut pinv = DMatrix::zeros(n, n);
    let mut null = Vec::new();
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(i).into_owned();
        if ev > thresh && ev > 0.0 {
            pinv += &v * v.transpose() / ev;
        } else {
            null.push(v);
        }
    }
    (pinv, null)
}

/// `ln L = sum_X H_X ln(sum_k P(X|k) q_k) - sum_k q_k`.
pub fn eml_log_likelihood(pmfs: &[&[f64]], q: &[f64], hist: &[f64]) -> Result<f64> {
    check_shapes(pmfs, q, hist)?;
    if q.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidParameter("quantities must be >= 0".into()));
    }
    Occupied::new(pmfs, hist).objective(q)
}

fn check_shapes(pmfs: &[&[f64]], q: &[f64], hist: &[f64]) -> Result<()> {
    if pmfs.len() != q.len() {
        return Err(Error::SizeMismatch {
            expected: format!("{} quantities", pmfs.len()),
            actual: format!("{}", q.len()),
        });
    }
    if let Some(p) = pmfs.iter().find(|p| p.len() != hist.len()) {
        return Err(Error::SizeMismatch {
            expected: format!("{} bins", hist.len()),
            actual: format!("PMF of {}", p.len()),
        });
    }
    Ok(())
}

/// Fits the quantities of `model`'s components to `hist`.
pub fn fit_quantities(
    model: &LpmModel,
    hist: &ScoreHistogram,
    init: Option<&[f64]>,
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    model.check_histogram(hist)?;
    if hist.overflow_fraction() > OVERFLOW_WARN_FRACTION {
        log::warn!(
            "{:.2}% of entries fall outside the model's histogram range; they are not fitted",
            100.0 * hist.overflow_fraction()
        );
    }
    fit_raw(&model.pmfs(), &hist.as_f64(), init, cfg)
}

/// [`fit_quantities`] on bare PMFs and bin counts.
pub fn fit_raw(pmfs: &[&[f64]], hist: &[f64], init: Option<&[f64]>, cfg: &FitConfig) -> Result<FitOutcome> {
    let k = pmfs.len();
    if k == 0 {
        return Err(Error::InvalidParameter("model has no components".into()));
    }
    let occ = Occupied::new(pmfs, hist);
    let total = occ.total();
    let mut q: Vec<f64> = match init {
        Some(v) => {
            check_shapes(pmfs, v, hist)?;
            if v.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                return Err(Error::InvalidParameter("initial quantities must be finite and >= 0".into()));
            }
            v.to_vec()
        }
        None => vec![total / k as f64; k],
    };
    if total == 0.0 {
        return Ok(FitOutcome { q: vec![0.0; k], objective: 0.0, iterations: 0, trace: vec![0.0] });
    }
    if q.iter().all(|&v| v == 0.0) {
        q = vec![total / k as f64; k];
    }

    let mut next = vec![0.0; k];
    let mut trace = Vec::new();
    let mut stable = 0;
    let mut iterations = 0;
    loop {
        if iterations == cfg.max_iterations {
            let last_objective = trace.last().copied().unwrap_or(f64::NAN);
            return Err(Error::NotConverged { iterations, last_objective, last_q: q, trace });
        }
        let obj = occ.em_step(&q, &mut next)?;
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if (obj - prev).abs() <= cfg.rel_tol * prev.abs().max(1.0) {
                stable += 1;
            } else {
                stable = 0;
            }
        }
        trace.push(obj);
        std::mem::swap(&mut q, &mut next);
        iterations += 1;
        if stable >= cfg.stable_iterations {
            break;
        }
        if cfg.polish && iterations % ACCELERATE_EVERY == 0 {
            let mut trial = q.clone();
            let current = occ.objective(&q)?;
            let mut scratch = Vec::new();
            if newton_polish(&occ, &mut trial, current, &mut scratch)? > current {
                q = trial;
                stable = 0;
            }
        }
    }
    let mut objective = occ.objective(&q)?;
    if cfg.polish {
        objective = newton_polish(&occ, &mut q, objective, &mut trace)?;
    }
    trace.push(objective);
    Ok(FitOutcome { q, objective, iterations, trace })
}

/// EM iterations between Newton acceleration attempts.
const ACCELERATE_EVERY: usize = 50;

/// Threshold below which a quantity is treated as sitting on the `q = 0`
/// boundary.
pub(super) fn active_set(q: &[f64]) -> Vec<usize> {
    let scale = q.iter().sum::<f64>().max(1.0);
    (0..q.len()).filter(|&k| q[k] > 1e-10 * scale).collect()
}

fn newton_polish(occ: &Occupied, q: &mut [f64], mut objective: f64, trace: &mut Vec<f64>) -> Result<f64> {
    for _ in 0..60 {
        let active = active_set(q);
        if active.is_empty() {
            break;
        }
        let (g, m) = occ.gradient_curvature(q, &active);
        let stationary = active.iter().enumerate().all(|(ia, &k)| g[ia].abs() * q[k].max(1.0) < 1e-10);
        if stationary {
            break;
        }
        let (pinv, _) = psd_pinv(&m);
        let step = pinv * &g;
        let mut t: f64 = 1.0;
        for (ia, &k) in active.iter().enumerate() {
            if step[ia] < 0.0 {
                t = t.min(0.5 * q[k] / -step[ia]);
            }
        }
        let mut accepted = false;
        for _ in 0..30 {
            let mut trial = q.to_vec();
            for (ia, &k) in active.iter().enumerate() {
                trial[k] = (q[k] + t * step[ia]).max(0.0);
            }
            if let Ok(v) = occ.objective(&trial) {
                if v >= objective {
                    let improved = v > objective;
                    q.copy_from_slice(&trial);
                    objective = v;
                    trace.push(objective);
                    accepted = improved;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(objective)
}
