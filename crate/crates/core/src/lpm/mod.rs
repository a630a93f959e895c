//! Linear Poisson models of score histograms.
//!
//! A histogram `H` is modelled as `H = P Q + e_H`: the columns of `P` are
//! per-component PMFs over the histogram bins, `Q` the non-negative amount
//! of each component, and `e_H` independent Poisson noise. Each class
//! ("true" craters, "false" contamination) owns one or more components
//! learnt from labelled example histograms ([`train()`]). A new histogram is
//! decomposed by maximising the extended likelihood
//! `ln L = sum_X H_X ln(sum_k P(X|k) Q_k) - sum_k Q_k` with EM
//! ([`fit_quantities`]), and the quantity covariance
//! `C_Q = C_data + C_model` is obtained by linear error propagation at the
//! fitted point ([`propagate_errors`]).

mod errors;
mod fit;
mod train;

pub use errors::{correct, propagate_errors, quantity_derivatives, quantity_training_derivatives, QuantityEstimate};
pub use fit::{eml_log_likelihood, fit_quantities, fit_raw, FitConfig, FitOutcome};
pub use train::{train, train_class, TrainConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scores::{HistogramSpec, ScoreHistogram};
use crate::templates::Label;

/// Probability floor applied to trained PMFs before renormalization.
pub const PROBABILITY_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub pmf: Vec<f64>,
    /// Training entries attributed to this component (EM responsibilities
    /// summed over the class's example histograms). Empty for components
    /// that were not learnt from data; they then add nothing to `C_model`.
    #[serde(default)]
    pub training_counts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareStep {
    pub components: usize,
    pub chi2: f64,
    pub dof: i64,
    pub chi2_per_dof: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassModel {
    pub label: Label,
    pub components: Vec<Component>,
    /// Example histograms the class was trained on.
    #[serde(default)]
    pub training_histograms: Vec<Vec<u64>>,
    #[serde(default)]
    pub chi2_trace: Vec<ChiSquareStep>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpmModel {
    pub spec: HistogramSpec,
    pub classes: Vec<ClassModel>,
}

impl LpmModel {
    /// Model from known PMFs, e.g. analytic shapes in tests. Floors are not
    /// applied and there is no training sample behind the components.
    pub fn from_pmfs(spec: HistogramSpec, true_pmfs: Vec<Vec<f64>>, false_pmfs: Vec<Vec<f64>>) -> Result<Self> {
        let mk = |label, pmfs: Vec<Vec<f64>>| ClassModel {
            label,
            components: pmfs.into_iter().map(|pmf| Component { pmf, training_counts: Vec::new() }).collect(),
            training_histograms: Vec::new(),
            chi2_trace: Vec::new(),
            seed: 0,
        };
        let m = LpmModel { spec, classes: vec![mk(Label::True, true_pmfs), mk(Label::False, false_pmfs)] };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let bins = self.spec.n_bins();
        for c in &self.classes {
            if c.components.is_empty() {
                return Err(Error::InvalidParameter(format!("class {} has no components", c.label)));
            }
            for comp in &c.components {
                if comp.pmf.len() != bins {
                    return Err(Error::SizeMismatch {
                        expected: format!("{bins} bins"),
                        actual: format!("PMF with {} entries", comp.pmf.len()),
                    });
                }
                if comp.pmf.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                    return Err(Error::InvalidParameter("PMF entries must be finite and >= 0".into()));
                }
                let s: f64 = comp.pmf.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidParameter(format!("PMF sums to {s}, not 1")));
                }
                if !comp.training_counts.is_empty() && comp.training_counts.len() != bins {
                    return Err(Error::SizeMismatch {
                        expected: format!("{bins} bins"),
                        actual: format!("training counts with {} entries", comp.training_counts.len()),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn n_components(&self) -> usize {
        self.classes.iter().map(|c| c.components.len()).sum()
    }

    /// Component PMFs in class order.
    pub fn pmfs(&self) -> Vec<&[f64]> {
        self.classes.iter().flat_map(|c| c.components.iter().map(|k| k.pmf.as_slice())).collect()
    }

    pub fn components(&self) -> impl Iterator<Item = &Component> {
        self.classes.iter().flat_map(|c| c.components.iter())
    }

    /// Class index of every component, in [`pmfs`](Self::pmfs) order.
    pub fn component_classes(&self) -> Vec<usize> {
        self.classes.iter().enumerate().flat_map(|(i, c)| std::iter::repeat_n(i, c.components.len())).collect()
    }

    pub fn class_index(&self, label: Label) -> Option<usize> {
        self.classes.iter().position(|c| c.label == label)
    }

    pub fn check_histogram(&self, hist: &ScoreHistogram) -> Result<()> {
        if hist.spec != self.spec || hist.counts.len() != self.spec.n_bins() {
            return Err(Error::SpecMismatch);
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: LpmModel = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }
}
