//! False-negative calibration against a reference ("ground truth") count.
//!
//! Reference counts come from diligent counters whose own repeatability is
//! measured from two independent mark-ups of the same area: the per-counter
//! detection probability `P` follows from the numbers of craters marked by
//! one or by both counters, and a reference count `u` carries the Binomial
//! variance `u (P - P^2)`. Contamination-corrected counts `m0` in the same
//! area give scale factors `s = u / m0` (overall or per diameter band) that
//! are applied to other counts as `c = m s`, with first-order variances.
//! A chi-square per degree of freedom compares corrected and reference counts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::templates::Annotation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepeatabilityData {
    /// Craters marked by exactly one of the two counters.
    pub n_single: u64,
    /// Craters marked by both counters.
    pub n_double: u64,
}

impl RepeatabilityData {
    pub fn total(&self) -> u64 {
        self.n_single + self.n_double
    }
}

/// Per-counter success probability matching the observed single/double
/// mark-up frequencies. A crater enters the set when at least one counter
/// marks it, so `n_double / total = P^2 / (1 - (1 - P)^2)`, which solves to
/// `P = 2 n_double / (n_single + 2 n_double)`. Returns 0 (with a warning)
/// when no crater was marked twice.
pub fn binomial_success_prob(rep: &RepeatabilityData) -> Result<f64> {
    if rep.total() == 0 {
        return Err(Error::Insufficient("repeatability data has no craters".into()));
    }
    if rep.n_double == 0 {
        log::warn!("no crater was marked by both counters; success probability is at the P = 0 boundary");
    }
    Ok(2.0 * rep.n_double as f64 / (rep.n_single as f64 + 2.0 * rep.n_double as f64))
}

/// Binomial variance `u (P - P^2)` of a reference count `u`.
pub fn ground_truth_variance(u: f64, p: f64) -> f64 {
    u * (p - p * p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Band {
    Overall,
    Diameter { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFactor {
    pub band: Band,
    pub s: f64,
    pub var_s: f64,
}

/// `s = u / m0`, `var_s = var_u / m0^2 + u^2 var_m0 / m0^4`.
pub fn scaling_factor(band: Band, u: f64, var_u: f64, m0: f64, var_m0: f64) -> Result<ScalingFactor> {
    if !(m0 > 0.0) {
        return Err(Error::Degenerate(format!("corrected count m0 = {m0}; band cannot be calibrated")));
    }
    if var_u < 0.0 || var_m0 < 0.0 {
        return Err(Error::InvalidParameter("variances must be >= 0".into()));
    }
    let m2 = m0 * m0;
    Ok(ScalingFactor { band, s: u / m0, var_s: var_u / m2 + u * u * var_m0 / (m2 * m2) })
}

/// `c = m s`, `var_c = s^2 var_m + m^2 var_s`.
pub fn apply_correction(m: f64, var_m: f64, sf: &ScalingFactor) -> (f64, f64) {
    (m * sf.s, sf.s * sf.s * var_m + m * m * sf.var_s)
}

/// `(1/d) sum_i (c_i - u_i)^2 / (var_c_i + var_u_i)`.
pub fn chi2_per_dof(corrected: &[(f64, f64)], truth: &[(f64, f64)], d: usize) -> Result<f64> {
    if corrected.len() != truth.len() {
        return Err(Error::SizeMismatch {
            expected: format!("{} reference counts", corrected.len()),
            actual: truth.len().to_string(),
        });
    }
    if corrected.is_empty() {
        return Err(Error::Insufficient("no counts to compare".into()));
    }
    if d == 0 {
        return Err(Error::InvalidParameter("degrees of freedom must be >= 1".into()));
    }
    let mut sum = 0.0;
    for (i, ((c, vc), (u, vu))) in corrected.iter().zip(truth).enumerate() {
        let v = vc + vu;
        if !(v > 0.0) {
            return Err(Error::Degenerate(format!("zero combined variance in term {i}")));
        }
        sum += (c - u).powi(2) / v;
    }
    Ok(sum / d as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandCount {
    pub count: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SfdBin {
    pub lo: f64,
    pub hi: f64,
    pub count: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sfd {
    pub bins: Vec<SfdBin>,
    /// Cumulative bins share entries, so their errors are correlated.
    pub cumulative: bool,
    pub underflow: f64,
    pub overflow: f64,
}

/// A contribution to a size-frequency distribution: `count` craters (possibly
/// fractional after correction) of the given diameter, with variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SfdEntry {
    pub diameter: f64,
    pub count: f64,
    pub variance: f64,
}

pub fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 {
        return Err(Error::InvalidParameter("need at least two band edges".into()));
    }
    if edges.windows(2).any(|w| !(w[0] < w[1])) || edges.iter().any(|e| !e.is_finite()) {
        return Err(Error::InvalidParameter("band edges must be finite and strictly increasing".into()));
    }
    Ok(())
}

/// Band index of a diameter for half-open bands `[e_i, e_{i+1})`, the last closed.
pub fn band_of(edges: &[f64], d: f64) -> Option<usize> {
    let n = edges.len() - 1;
    if !(d >= edges[0] && d <= edges[n]) {
        return None;
    }
    Some(edges.partition_point(|&e| e <= d).saturating_sub(1).min(n - 1))
}

/// `n` geometric band edges spanning `[lo, hi]`.
pub fn geometric_edges(lo: f64, hi: f64, n_bands: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo) || n_bands == 0 {
        return Err(Error::InvalidParameter(format!("cannot build {n_bands} geometric bands over [{lo}, {hi}]")));
    }
    let r = (hi / lo).powf(1.0 / n_bands as f64);
    let mut e: Vec<f64> = (0..=n_bands).map(|i| lo * r.powi(i as i32)).collect();
    e[n_bands] = hi;
    Ok(e)
}

/// Differential SFD over `edges`; entries outside every band are tallied in
/// `underflow`/`overflow`.
pub fn assemble_sfd(entries: &[SfdEntry], edges: &[f64]) -> Result<Sfd> {
    check_edges(edges)?;
    let mut bins: Vec<SfdBin> =
        edges.windows(2).map(|w| SfdBin { lo: w[0], hi: w[1], count: 0.0, variance: 0.0 }).collect();
    let (mut under, mut over) = (0.0, 0.0);
    for e in entries {
        match band_of(edges, e.diameter) {
            Some(i) => {
                bins[i].count += e.count;
                bins[i].variance += e.variance;
            }
            None if e.diameter < edges[0] => under += e.count,
            None => over += e.count,
        }
    }
    Ok(Sfd { bins, cumulative: false, underflow: under, overflow: over })
}

impl Sfd {
    /// Cumulative form: bin `j` holds every differential bin at or above `j`.
    /// Variances are summed as if independent and the result is flagged.
    pub fn cumulative(&self) -> Sfd {
        let mut bins = self.bins.clone();
        let mut acc = (0.0, 0.0);
        for b in bins.iter_mut().rev() {
            acc.0 += b.count;
            acc.1 += b.variance;
            b.count = acc.0;
            b.variance = acc.1;
            b.hi = self.bins.last().map(|l| l.hi).unwrap_or(b.hi);
        }
        Sfd { bins, cumulative: true, ..self.clone() }
    }
}

/// Repeatability of a two-counter reference data set. Annotations that share
/// an `id` are the same crater marked by different counters.
pub fn repeatability_from_marks(marks: &[Annotation]) -> Result<RepeatabilityData> {
    let groups = group_marks(marks)?;
    let mut rep = RepeatabilityData { n_single: 0, n_double: 0 };
    for counters in groups.values().map(|(c, _)| c) {
        match counters.len() {
            1 => rep.n_single += 1,
            _ => rep.n_double += 1,
        }
    }
    Ok(rep)
}

fn group_marks(marks: &[Annotation]) -> Result<BTreeMap<&str, (Vec<&str>, f64)>> {
    let mut groups: BTreeMap<&str, (Vec<&str>, f64)> = BTreeMap::new();
    for a in marks {
        let counter = a
            .counter
            .as_deref()
            .ok_or_else(|| Error::Parse(format!("reference annotation {} has no counter column", a.id)))?;
        let g = groups.entry(a.id.as_str()).or_insert_with(|| (Vec::new(), 0.0));
        if !g.0.contains(&counter) {
            g.0.push(counter);
        }
        g.1 += a.diameter_px;
    }
    let mut n_counters: BTreeMap<&str, usize> = BTreeMap::new();
    for a in marks {
        *n_counters.entry(a.id.as_str()).or_default() += 1;
    }
    for (id, g) in groups.iter_mut() {
        g.1 /= n_counters[id] as f64;
    }
    if groups.values().any(|g| g.0.len() > 2) {
        return Err(Error::InvalidParameter("repeatability data must come from exactly two counters".into()));
    }
    Ok(groups)
}

/// Reference counts per diameter band: `u` is the number of distinct
/// craters found by either counter (diameter averaged over mark-ups), with
/// variance `u (P - P^2)` from the set's overall success probability.
pub fn reference_counts(marks: &[Annotation], edges: &[f64]) -> Result<(Vec<BandCount>, f64)> {
    check_edges(edges)?;
    let p = binomial_success_prob(&repeatability_from_marks(marks)?)?;
    let mut counts = vec![0.0; edges.len() - 1];
    for (_, d) in group_marks(marks)?.values() {
        if let Some(i) = band_of(edges, *d) {
            counts[i] += 1.0;
        }
    }
    Ok((counts.into_iter().map(|u| BandCount { count: u, variance: ground_truth_variance(u, p) }).collect(), p))
}

/// Measured (contamination-corrected) and reference counts per band for one
/// calibration region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRegion {
    pub measured: Vec<BandCount>,
    pub reference: Vec<BandCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub edges: Vec<f64>,
    pub overall: ScalingFactor,
    /// `None` for bands with no measured craters.
    pub per_band: Vec<Option<ScalingFactor>>,
    pub chi2_uncorrected: f64,
    pub chi2_overall: f64,
    pub chi2_per_band: f64,
    pub dof_uncorrected: usize,
    pub dof_overall: usize,
    pub dof_per_band: usize,
}

fn sum_counts<'a>(it: impl Iterator<Item = &'a BandCount>) -> BandCount {
    it.fold(BandCount { count: 0.0, variance: 0.0 }, |a, b| BandCount {
        count: a.count + b.count,
        variance: a.variance + b.variance,
    })
}

/// Derives overall and per-band factors from all regions together, applies
/// them back to every region, and reports the three chi-square per degree of
/// freedom values (raw, overall-scaled, band-scaled). Degrees of freedom are
/// compared bins minus fitted factors.
pub fn calibrate_regions(regions: &[CalibrationRegion], edges: &[f64]) -> Result<CalibrationReport> {
    check_edges(edges)?;
    let n_bands = edges.len() - 1;
    if regions.is_empty() {
        return Err(Error::Insufficient("no calibration regions".into()));
    }
    if regions.iter().any(|r| r.measured.len() != n_bands || r.reference.len() != n_bands) {
        return Err(Error::SizeMismatch { expected: format!("{n_bands} bands per region"), actual: "other".into() });
    }
    let all_m = sum_counts(regions.iter().flat_map(|r| r.measured.iter()));
    let all_u = sum_counts(regions.iter().flat_map(|r| r.reference.iter()));
    let overall = scaling_factor(Band::Overall, all_u.count, all_u.variance, all_m.count, all_m.variance)?;
    let per_band: Vec<Option<ScalingFactor>> = (0..n_bands)
        .map(|b| {
            let m = sum_counts(regions.iter().map(|r| &r.measured[b]));
            let u = sum_counts(regions.iter().map(|r| &r.reference[b]));
            let band = Band::Diameter { lo: edges[b], hi: edges[b + 1] };
            scaling_factor(band, u.count, u.variance, m.count, m.variance).ok()
        })
        .collect();

    let mut raw = Vec::new();
    let mut truth = Vec::new();
    let mut by_overall = Vec::new();
    let mut banded = Vec::new();
    let mut banded_truth = Vec::new();
    for r in regions {
        for b in 0..n_bands {
            let (m, u) = (r.measured[b], r.reference[b]);
            raw.push((m.count, m.variance));
            truth.push((u.count, u.variance));
            by_overall.push(apply_correction(m.count, m.variance, &overall));
            if let Some(sf) = &per_band[b] {
                banded.push(apply_correction(m.count, m.variance, sf));
                banded_truth.push((u.count, u.variance));
            }
        }
    }
    let n_factors = per_band.iter().filter(|f| f.is_some()).count();
    let dof_uncorrected = raw.len();
    let dof_overall = raw.len().saturating_sub(1).max(1);
    let dof_per_band = banded.len().saturating_sub(n_factors).max(1);
    Ok(CalibrationReport {
        edges: edges.to_vec(),
        overall,
        chi2_uncorrected: chi2_per_dof(&raw, &truth, dof_uncorrected)?,
        chi2_overall: chi2_per_dof(&by_overall, &truth, dof_overall)?,
        chi2_per_band: chi2_per_dof(&banded, &banded_truth, dof_per_band)?,
        per_band,
        dof_uncorrected,
        dof_overall,
        dof_per_band,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::templates::Label;
    use approx::assert_abs_diff_eq;

    #[test]
    fn success_probability_examples() {
        let p = |s, d| binomial_success_prob(&RepeatabilityData { n_single: s, n_double: d }).unwrap();
        assert_eq!(p(0, 40), 1.0);
        assert_eq!(p(17, 0), 0.0);
        assert!(binomial_success_prob(&RepeatabilityData { n_single: 0, n_double: 0 }).is_err());
        // brute-force grid oracle on the frequency-matching relation
        let (s, d) = (50u64, 50u64);
        let target = d as f64 / (s + d) as f64;
        let best = (1..=1_000_000)
            .map(|i| i as f64 / 1_000_000.0)
            .min_by(|a, b| {
                let f = |p: f64| (p * p / (1.0 - (1.0 - p).powi(2)) - target).abs();
                f(*a).total_cmp(&f(*b))
            })
            .unwrap();
        assert_abs_diff_eq!(best, 2.0 / 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(p(s, d), best, epsilon = 1e-6);
        assert_abs_diff_eq!(p(s, d), 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn variance_examples() {
        assert_eq!(ground_truth_variance(100.0, 1.0), 0.0);
        assert_eq!(ground_truth_variance(100.0, 0.5), 25.0);
        assert_eq!(ground_truth_variance(100.0, 0.0), 0.0);
    }

    #[test]
    fn scaling_and_correction_examples() {
        let sf = scaling_factor(Band::Overall, 50.0, 0.0, 50.0, 0.0).unwrap();
        assert_eq!((sf.s, sf.var_s), (1.0, 0.0));
        let sf = scaling_factor(Band::Overall, 100.0, 100.0, 80.0, 25.0).unwrap();
        assert_eq!(sf.s, 1.25);
        assert_eq!(sf.var_s, 0.021728515625);
        let (c, vc) = apply_correction(80.0, 25.0, &sf);
        assert_eq!(c, 100.0);
        assert_eq!(vc, 178.125);
        let (c, vc) = apply_correction(0.0, 9.0, &sf);
        assert_eq!((c, vc), (0.0, 1.5625 * 9.0));
        let unit = ScalingFactor { band: Band::Overall, s: 1.0, var_s: 0.0 };
        assert_eq!(apply_correction(12.5, 3.0, &unit), (12.5, 3.0));
        assert!(scaling_factor(Band::Overall, 1.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn scaling_variance_matches_monte_carlo() {
        use rand_distr::{Distribution, Normal};
        let (u, su, m0, sm) = (400.0, 8.0, 300.0, 6.0);
        let sf = scaling_factor(Band::Overall, u, su * su, m0, sm * sm).unwrap();
        let mut r = crate::rng::seeded(99);
        let nu = Normal::new(u, su).unwrap();
        let nm = Normal::new(m0, sm).unwrap();
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| nu.sample(&mut r) / nm.sample(&mut r)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!((var / sf.var_s - 1.0).abs() < 0.05, "mc {var} formula {}", sf.var_s);
    }

    #[test]
    fn chi2_examples_and_symmetry() {
        assert_eq!(chi2_per_dof(&[(5.0, 1.0), (7.0, 2.0)], &[(5.0, 1.0), (7.0, 1.0)], 2).unwrap(), 0.0);
        assert_eq!(chi2_per_dof(&[(13.0, 4.0)], &[(10.0, 5.0)], 1).unwrap(), 1.0);
        let a = [(3.0, 1.0), (9.0, 2.5), (4.0, 0.5)];
        let b = [(5.0, 2.0), (6.0, 1.0), (4.5, 0.0)];
        assert_eq!(chi2_per_dof(&a, &b, 2).unwrap(), chi2_per_dof(&b, &a, 2).unwrap());
        assert!(chi2_per_dof(&[(1.0, 0.0)], &[(2.0, 0.0)], 1).is_err());
        assert!(chi2_per_dof(&[], &[], 1).is_err());
        assert!(chi2_per_dof(&a, &b, 0).is_err());
    }

    #[test]
    fn self_application_returns_reference() {
        for (u, m0) in [(100.0, 80.0), (37.0, 41.5), (1234.0, 999.25), (3.0, 7.0)] {
            let sf = scaling_factor(Band::Overall, u, 4.0, m0, 3.0).unwrap();
            let (c, _) = apply_correction(m0, 3.0, &sf);
            assert!((c - u).abs() <= 4.0 * f64::EPSILON * u, "{c} vs {u}");
        }
    }

    #[test]
    fn sfd_examples() {
        let edges = [20.0, 40.0];
        let entries: Vec<SfdEntry> =
            [22.0, 25.0, 39.0].iter().map(|&d| SfdEntry { diameter: d, count: 1.0, variance: 1.0 }).collect();
        let sfd = assemble_sfd(&entries, &edges).unwrap();
        assert_eq!(sfd.bins.len(), 1);
        assert_eq!(sfd.bins[0].count, 3.0);
        let empty = assemble_sfd(&[], &[20.0, 28.0, 40.0]).unwrap();
        assert!(empty.bins.iter().all(|b| b.count == 0.0 && b.variance == 0.0));
        let edges = [20.0, 28.0, 40.0, 56.0];
        let entries: Vec<SfdEntry> = [10.0, 21.0, 29.0, 30.0, 55.0, 56.0, 90.0]
            .iter()
            .map(|&d| SfdEntry { diameter: d, count: 1.5, variance: 0.5 })
            .collect();
        let sfd = assemble_sfd(&entries, &edges).unwrap();
        assert_eq!(sfd.bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![1.5, 3.0, 3.0]);
        assert_eq!((sfd.underflow, sfd.overflow), (1.5, 1.5));
        let cum = sfd.cumulative();
        assert!(cum.cumulative);
        for j in 0..3 {
            let tail: f64 = sfd.bins[j..].iter().map(|b| b.count).sum();
            assert_eq!(cum.bins[j].count, tail);
        }
        assert!(assemble_sfd(&[], &[3.0, 3.0]).is_err());
    }

    #[test]
    fn reference_counts_from_two_counters() {
        let mk = |id: &str, d: f64, c: &str| Annotation {
            counter: Some(c.into()),
            ..Annotation::new(id, 0.0, 0.0, d, Label::True)
        };
        let marks = vec![
            mk("a", 22.0, "s1"),
            mk("a", 24.0, "s2"),
            mk("b", 30.0, "s1"),
            mk("c", 50.0, "s2"),
            mk("d", 52.0, "s1"),
            mk("d", 50.0, "s2"),
        ];
        let rep = repeatability_from_marks(&marks).unwrap();
        assert_eq!(rep, RepeatabilityData { n_single: 2, n_double: 2 });
        let (counts, p) = reference_counts(&marks, &[20.0, 40.0, 60.0]).unwrap();
        assert_abs_diff_eq!(p, 4.0 / 6.0, epsilon = 1e-15);
        assert_eq!(counts[0].count, 2.0);
        assert_eq!(counts[1].count, 2.0);
        assert_abs_diff_eq!(counts[0].variance, 2.0 * (p - p * p), epsilon = 1e-15);
        let mut bad = marks.clone();
        bad[0].counter = None;
        assert!(repeatability_from_marks(&bad).is_err());
    }

    #[test]
    fn band_lookup() {
        let e = [20.0, 28.0, 40.0];
        assert_eq!(band_of(&e, 20.0), Some(0));
        assert_eq!(band_of(&e, 28.0), Some(1));
        assert_eq!(band_of(&e, 40.0), Some(1));
        assert_eq!(band_of(&e, 19.9), None);
        let g = geometric_edges(20.0, 80.0, 4).unwrap();
        assert_eq!(g.len(), 5);
        assert_abs_diff_eq!(g[2], 40.0, epsilon = 1e-12);
    }

    #[test]
    fn calibrate_regions_self_consistent() {
        let bc = |count: f64, variance: f64| BandCount { count, variance };
        let regions = vec![
            CalibrationRegion {
                measured: vec![bc(40.0, 50.0), bc(30.0, 30.0)],
                reference: vec![bc(80.0, 10.0), bc(33.0, 5.0)],
            },
            CalibrationRegion {
                measured: vec![bc(50.0, 60.0), bc(20.0, 25.0)],
                reference: vec![bc(95.0, 12.0), bc(25.0, 4.0)],
            },
        ];
        let rep = calibrate_regions(&regions, &[20.0, 40.0, 80.0]).unwrap();
        assert_abs_diff_eq!(rep.overall.s, 233.0 / 140.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.per_band[0].unwrap().s, 175.0 / 90.0, epsilon = 1e-12);
        assert_eq!((rep.dof_uncorrected, rep.dof_overall, rep.dof_per_band), (4, 3, 2));
    }
}
