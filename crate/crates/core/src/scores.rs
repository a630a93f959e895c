//! 1D and 2D histograms of best match scores.
//!
//! Bins are half-open `[lo, hi)` except the last bin of each axis, which is
//! closed so that a score equal to `range_hi` is counted. Scores outside the
//! range go to `overflow_count`. Two histograms with the same spec merge by
//! adding counts, which is the same as accumulating the concatenated inputs.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::templates::{MatchResult, Measure, TemplateKind};

pub const DEFAULT_BINS_1D: usize = 64;
pub const DEFAULT_BINS_2D: usize = 32;
pub const DEFAULT_MARGIN: f64 = 0.05;
/// Fraction of out-of-range entries above which correction warns about drift.
pub const OVERFLOW_WARN_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AxisKey {
    pub measure: Measure,
    pub template_kind: TemplateKind,
}

impl AxisKey {
    pub fn new(template_kind: TemplateKind, measure: Measure) -> Self {
        AxisKey { measure, template_kind }
    }

    /// Short name such as `grey_mse` or `grad_dp`.
    pub fn name(&self) -> String {
        let t = match self.template_kind {
            TemplateKind::Appearance => "grey",
            TemplateKind::Derivative => "grad",
        };
        format!("{t}_{}", self.measure)
    }

    /// The four template/measure combinations.
    pub fn all() -> [AxisKey; 4] {
        [
            AxisKey::new(TemplateKind::Appearance, Measure::Mse),
            AxisKey::new(TemplateKind::Derivative, Measure::Mse),
            AxisKey::new(TemplateKind::Appearance, Measure::Dp),
            AxisKey::new(TemplateKind::Derivative, Measure::Dp),
        ]
    }
}

impl std::str::FromStr for AxisKey {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AxisKey::all()
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Parse(format!("unknown axis {s:?}; expected grey_mse, grad_mse, grey_dp or grad_dp")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub measure: Measure,
    pub template_kind: TemplateKind,
    pub bin_count: usize,
    pub range_lo: f64,
    pub range_hi: f64,
}

impl Axis {
    pub fn key(&self) -> AxisKey {
        AxisKey { measure: self.measure, template_kind: self.template_kind }
    }

    fn edge(&self, i: usize) -> f64 {
        if i == self.bin_count {
            return self.range_hi;
        }
        self.range_lo + (self.range_hi - self.range_lo) * i as f64 / self.bin_count as f64
    }

    /// Bin index of `v`, `None` when out of range or not finite.
    pub fn bin_of(&self, v: f64) -> Option<usize> {
        if !(v >= self.range_lo && v <= self.range_hi) {
            return None;
        }
        let n = self.bin_count;
        let mut i = (((v - self.range_lo) / (self.range_hi - self.range_lo)) * n as f64).floor() as usize;
        i = i.min(n - 1);
        // settle rounding at the edges: bins are [edge(i), edge(i+1))
        while i + 1 < n && v >= self.edge(i + 1) {
            i += 1;
        }
        while i > 0 && v < self.edge(i) {
            i -= 1;
        }
        Some(i)
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        0.5 * (self.edge(i) + self.edge(i + 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub axes: Vec<Axis>,
}

impl HistogramSpec {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        let spec = HistogramSpec { axes };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.axes.len()) {
            return Err(Error::InvalidParameter(format!("histograms have 1 or 2 axes, got {}", self.axes.len())));
        }
        for a in &self.axes {
            if a.bin_count < 2 {
                return Err(Error::InvalidParameter(format!("axis {} needs >= 2 bins", a.key().name())));
            }
            if !(a.range_lo.is_finite() && a.range_hi.is_finite() && a.range_lo < a.range_hi) {
                return Err(Error::InvalidParameter(format!(
                    "axis {} has bad range [{}, {}]",
                    a.key().name(),
                    a.range_lo,
                    a.range_hi
                )));
            }
        }
        if self.axes.len() == 2 && self.axes[0].key() == self.axes[1].key() {
            return Err(Error::InvalidParameter("2D histogram axes must differ".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn n_bins(&self) -> usize {
        self.axes.iter().map(|a| a.bin_count).product()
    }

    pub fn keys(&self) -> Vec<AxisKey> {
        self.axes.iter().map(|a| a.key()).collect()
    }

    /// Representation name, e.g. `grey_dp` or `grey_mse+grad_dp`.
    pub fn name(&self) -> String {
        self.keys().iter().map(|k| k.name()).collect::<Vec<_>>().join("+")
    }

    /// Flattened row-major bin (first axis is the row index).
    pub fn bin_of(&self, values: &[f64]) -> Option<usize> {
        debug_assert_eq!(values.len(), self.axes.len());
        let mut idx = 0;
        for (a, &v) in self.axes.iter().zip(values) {
            idx = idx * a.bin_count + a.bin_of(v)?;
        }
        Some(idx)
    }
}

/// Range `[min - margin*span, max + margin*span]` of the pooled training
/// scores of each axis.
pub fn make_spec_from_training(axes: &[(AxisKey, &[f64])], bin_counts: &[usize], margin: f64) -> Result<HistogramSpec> {
    if axes.len() != bin_counts.len() {
        return Err(Error::InvalidParameter("one bin count per axis required".into()));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::InvalidParameter(format!("margin must be >= 0, got {margin}")));
    }
    let mut out = Vec::with_capacity(axes.len());
    for ((key, scores), &bins) in axes.iter().zip(bin_counts) {
        let finite = scores.iter().copied().filter(|v| v.is_finite());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if !(lo < hi) {
            return Err(Error::Degenerate(format!("axis {} needs at least 2 distinct scores", key.name())));
        }
        let span = hi - lo;
        out.push(Axis {
            measure: key.measure,
            template_kind: key.template_kind,
            bin_count: bins,
            range_lo: lo - margin * span,
            range_hi: hi + margin * span,
        });
    }
    HistogramSpec::new(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub spec: HistogramSpec,
    pub counts: Vec<u64>,
    pub overflow_count: u64,
}

impl ScoreHistogram {
    pub fn empty(spec: &HistogramSpec) -> Self {
        ScoreHistogram { spec: spec.clone(), counts: vec![0; spec.n_bins()], overflow_count: 0 }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one entry with per-axis `values`.
    pub fn add(&mut self, values: &[f64]) {
        self.add_n(values, 1);
    }

    pub fn add_n(&mut self, values: &[f64], n: u64) {
        match self.spec.bin_of(values) {
            Some(i) => self.counts[i] += n,
            None => self.overflow_count += n,
        }
    }

    pub fn merge(&mut self, other: &ScoreHistogram) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::SpecMismatch);
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.overflow_count += other.overflow_count;
        Ok(())
    }

    pub fn overflow_fraction(&self) -> f64 {
        let all = self.total() + self.overflow_count;
        if all == 0 {
            0.0
        } else {
            self.overflow_count as f64 / all as f64
        }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }
}

/// Joins per-axis match results by annotation id. Returns the ids in sorted
/// order with one score per spec axis; an id that lacks any axis is an error.
pub fn join_scores(spec: &HistogramSpec, results: &[MatchResult]) -> Result<BTreeMap<String, Vec<f64>>> {
    let keys = spec.keys();
    let mut by_id: HashMap<&str, Vec<Option<f64>>> = HashMap::new();
    for r in results {
        let key = AxisKey { measure: r.measure, template_kind: r.template_kind };
        if let Some(pos) = keys.iter().position(|k| *k == key) {
            by_id.entry(r.annotation_id.as_str()).or_insert_with(|| vec![None; keys.len()])[pos] = Some(r.best_score);
        }
    }
    let mut out = BTreeMap::new();
    for (id, vals) in by_id {
        let mut row = Vec::with_capacity(vals.len());
        for (v, k) in vals.into_iter().zip(&keys) {
            row.push(v.ok_or_else(|| Error::MissingAxisScore(id.to_string(), k.name()))?);
        }
        out.insert(id.to_string(), row);
    }
    Ok(out)
}

/// One histogram entry per annotation, joined across the spec's axes.
pub fn accumulate(spec: &HistogramSpec, results: &[MatchResult]) -> Result<ScoreHistogram> {
    spec.validate()?;
    let joined = join_scores(spec, results)?;
    let mut h = ScoreHistogram::empty(spec);
    for row in joined.values() {
        h.add(row);
    }
    Ok(h)
}
