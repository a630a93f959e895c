//! Error propagation at a fitted EM fixed point.
//!
//! At an interior maximum the gradient `g_k(Q, H, P) = sum_X H_X P(X|k)/f_X - 1`
//! vanishes, so by the implicit function theorem
//! `dQ/dz = M^+ dg/dz` with `M = sum_X H_X P_X P_X^T / f_X^2`, the negative
//! curvature of `ln L`, restricted to the components with `Q_k > 0`
//! (components pinned at zero have zero derivatives). Two perturbation
//! sources are propagated:
//!
//! * the data bins, `dg/dH_X = P_X / f_X` with `var(H_X) = H_X`, giving `C_data`;
//! * the training counts attributed to each component, through
//!   `P(Y|k) = T_{Yk} / N_k`, with `var(T_{Xk}) = T_{Xk}`, giving `C_model`.
//!
//! Only class totals need to be identifiable: if components of one class
//! are collinear the pseudo-inverse still gives the class covariance, and
//! an error is raised only when a null direction of `M` mixes classes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::fit::{active_set, fit_quantities, psd_pinv, FitConfig, Occupied};
use super::LpmModel;
use crate::error::{Error, Result};
use crate::scores::ScoreHistogram;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityEstimate {
    /// Quantity of every component, in model order.
    pub q: Vec<f64>,
    /// Sum of `q` within each class, in model class order.
    pub class_totals: Vec<f64>,
    /// `C_data + C_model` over components.
    pub covariance: Vec<Vec<f64>>,
    /// Class-total covariance (sums of component blocks).
    pub class_covariance: Vec<Vec<f64>>,
    pub class_covariance_data: Vec<Vec<f64>>,
    pub class_covariance_model: Vec<Vec<f64>>,
}

impl QuantityEstimate {
    pub fn class_sigma(&self, class: usize) -> f64 {
        self.class_covariance[class][class].max(0.0).sqrt()
    }
}

/// Derivatives `dQ/dH_X` for every bin (rows: bins, columns: components).
pub fn quantity_derivatives(model: &LpmModel, hist: &ScoreHistogram, q: &[f64]) -> Result<Vec<Vec<f64>>> {
    model.check_histogram(hist)?;
    let pmfs = model.pmfs();
    let h = hist.as_f64();
    let lin = Linearization::new(&pmfs, &h, q, &model.component_classes(), model.classes.len())?;
    Ok((0..h.len()).map(|x| lin.data_derivative(&pmfs, x)).collect())
}

/// Derivatives `dQ/dT_{Xk}` for component `k` (rows: bins).
pub fn quantity_training_derivatives(
    model: &LpmModel,
    hist: &ScoreHistogram,
    q: &[f64],
    k: usize,
) -> Result<Vec<Vec<f64>>> {
    model.check_histogram(hist)?;
    let pmfs = model.pmfs();
    let h = hist.as_f64();
    let lin = Linearization::new(&pmfs, &h, q, &model.component_classes(), model.classes.len())?;
    let comp = model.components().nth(k).ok_or_else(|| Error::InvalidParameter(format!("no component {k}")))?;
    if comp.training_counts.is_empty() {
        return Ok(vec![vec![0.0; q.len()]; h.len()]);
    }
    let n_k: f64 = comp.training_counts.iter().sum();
    let b = lin.model_terms(&pmfs, &h, k);
    Ok((0..h.len()).map(|x| lin.model_derivative(&pmfs, &h, &b, k, x, n_k)).collect())
}

struct Linearization {
    k: usize,
    active: Vec<usize>,
    /// `M^+` over the active set.
    pinv: DMatrix<f64>,
    /// Model density at every bin.
    f: Vec<f64>,
    q: Vec<f64>,
}

impl Linearization {
    fn new(pmfs: &[&[f64]], h: &[f64], q: &[f64], classes: &[usize], n_classes: usize) -> Result<Self> {
        let k = pmfs.len();
        if q.len() != k {
            return Err(Error::SizeMismatch { expected: format!("{k} quantities"), actual: q.len().to_string() });
        }
        let occ = Occupied::new(pmfs, h);
        let active = active_set(q);
        let (_, m) = occ.gradient_curvature(q, &active);
        let (pinv, null) = psd_pinv(&m);
        for v in &null {
            for c in 0..n_classes {
                let proj: f64 =
                    active.iter().enumerate().filter(|(_, &kk)| classes[kk] == c).map(|(ia, _)| v[ia]).sum();
                if proj.abs() > 1e-6 {
                    return Err(Error::SingularCurvature(format!(
                        "class {c} total is not identifiable from this histogram"
                    )));
                }
            }
        }
        let f = (0..h.len()).map(|x| pmfs.iter().zip(q).map(|(p, qk)| p[x] * qk).sum()).collect();
        Ok(Linearization { k, active, pinv, f, q: q.to_vec() })
    }

    fn expand(&self, v: &DVector<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        for (ia, &kk) in self.active.iter().enumerate() {
            out[kk] = v[ia];
        }
        out
    }

    fn data_derivative(&self, pmfs: &[&[f64]], x: usize) -> Vec<f64> {
        if self.f[x] <= 0.0 {
            return vec![0.0; self.k];
        }
        let dg = DVector::from_iterator(self.active.len(), self.active.iter().map(|&kk| pmfs[kk][x] / self.f[x]));
        self.expand(&(&self.pinv * dg))
    }

    /// Per-component pieces of `dg_l/dP(Y|k)` summed against `P(.|k)`:
    /// `b_l = sum_Y dg_l/dP(Y|k) P(Y|k)`.
    fn model_terms(&self, pmfs: &[&[f64]], h: &[f64], k: usize) -> DVector<f64> {
        let mut b = DVector::zeros(self.active.len());
        for (y, &hy) in h.iter().enumerate() {
            if hy == 0.0 || self.f[y] <= 0.0 {
                continue;
            }
            let pyk = pmfs[k][y];
            if pyk == 0.0 {
                continue;
            }
            for (ia, &l) in self.active.iter().enumerate() {
                b[ia] += self.dg_dp(pmfs, hy, y, l, k) * pyk;
            }
        }
        b
    }

    #[inline]
    fn dg_dp(&self, pmfs: &[&[f64]], hy: f64, y: usize, l: usize, k: usize) -> f64 {
        let fy = self.f[y];
        let own = if l == k { hy / fy } else { 0.0 };
        own - hy * pmfs[l][y] * self.q[k] / (fy * fy)
    }

    /// `dQ/dT_{xk}` using `dP(Y|k)/dT_{xk} = (delta_{xY} - P(Y|k)) / N_k`.
    fn model_derivative(&self, pmfs: &[&[f64]], h: &[f64], b: &DVector<f64>, k: usize, x: usize, n_k: f64) -> Vec<f64> {
        let dg = DVector::from_iterator(
            self.active.len(),
            self.active.iter().enumerate().map(|(ia, &l)| {
                let a = if h[x] == 0.0 || self.f[x] <= 0.0 { 0.0 } else { self.dg_dp(pmfs, h[x], x, l, k) };
                (a - b[ia]) / n_k
            }),
        );
        self.expand(&(&self.pinv * dg))
    }
}

/// Adds `C_data` and `C_model` at the converged quantities `q_fit`.
pub fn propagate_errors(model: &LpmModel, hist: &ScoreHistogram, q_fit: &[f64]) -> Result<QuantityEstimate> {
    model.check_histogram(hist)?;
    let pmfs = model.pmfs();
    let h = hist.as_f64();
    let classes = model.component_classes();
    let n_classes = model.classes.len();
    let lin = Linearization::new(&pmfs, &h, q_fit, &classes, n_classes)?;
    let k = pmfs.len();

    let mut c_data = DMatrix::<f64>::zeros(k, k);
    for (x, &hx) in h.iter().enumerate() {
        if hx == 0.0 {
            continue;
        }
        let d = DVector::from_vec(lin.data_derivative(&pmfs, x));
        c_data += hx * &d * d.transpose();
    }

    let mut c_model = DMatrix::<f64>::zeros(k, k);
    for (kk, comp) in model.components().enumerate() {
        if comp.training_counts.is_empty() || !lin.active.contains(&kk) {
            continue;
        }
        let n_k: f64 = comp.training_counts.iter().sum();
        if n_k <= 0.0 {
            continue;
        }
        let b = lin.model_terms(&pmfs, &h, kk);
        for (x, &t) in comp.training_counts.iter().enumerate() {
            if t <= 0.0 {
                continue;
            }
            let d = DVector::from_vec(lin.model_derivative(&pmfs, &h, &b, kk, x, n_k));
            c_model += t * &d * d.transpose();
        }
    }

    let symmetrize = |m: &DMatrix<f64>| (m + m.transpose()) * 0.5;
    let c_data = symmetrize(&c_data);
    let c_model = symmetrize(&c_model);
    let cov = &c_data + &c_model;

    let class_block = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; n_classes]; n_classes];
        for i in 0..k {
            for j in 0..k {
                out[classes[i]][classes[j]] += m[(i, j)];
            }
        }
        out
    };
    let mut class_totals = vec![0.0; n_classes];
    for (i, &qi) in q_fit.iter().enumerate() {
        class_totals[classes[i]] += qi;
    }
    Ok(QuantityEstimate {
        q: q_fit.to_vec(),
        class_totals,
        covariance: (0..k).map(|i| (0..k).map(|j| cov[(i, j)]).collect()).collect(),
        class_covariance: class_block(&cov),
        class_covariance_data: class_block(&c_data),
        class_covariance_model: class_block(&c_model),
    })
}

/// Fit followed by error propagation.
pub fn correct(model: &LpmModel, hist: &ScoreHistogram, cfg: &FitConfig) -> Result<QuantityEstimate> {
    let fit = fit_quantities(model, hist, None, cfg)?;
    propagate_errors(model, hist, &fit.q)
}
