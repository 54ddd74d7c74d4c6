//! Marchenko-Pastur law, BBP outlier locations and spiked sample covariances.
//!
//! Convention: eigenvalues of `(1/N) T X Xᵀ Tᵀ` with `X` an `M x N` matrix of
//! independent standard normal entries and `α = M / N`.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseSymmetric;

/// Simpson panels used for the MP distribution function.
const CDF_PANELS: usize = 2000;

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("aspect ratio must be positive, got {alpha}")))
    }
}

/// Edges `((1 - √α)², (1 + √α)²)` of the continuous part.
pub fn mp_edges(alpha: f64) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    let s = alpha.sqrt();
    Ok(((1.0 - s).powi(2), (1.0 + s).powi(2)))
}

/// Point mass at zero, `max(0, 1 - 1/α)`.
pub fn mp_zero_mass(alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok((1.0 - 1.0 / alpha).max(0.0))
}

/// Density of the continuous part, integrating to `min(1, 1/α)`.
pub fn mp_density(x: f64, alpha: f64) -> f64 {
    let Ok((l, r)) = mp_edges(alpha) else {
        return 0.0;
    };
    if x <= l || x >= r || x <= 0.0 {
        return 0.0;
    }
    ((r - x) * (x - l)).sqrt() / (2.0 * PI * alpha * x)
}

/// Mass of the continuous part on `[l, x]` after `x = mid + half sin θ`,
/// which removes the square-root singularities at both edges.
fn mp_mass_below(x: f64, alpha: f64) -> f64 {
    let (l, r) = mp_edges(alpha).unwrap();
    if x <= l {
        return 0.0;
    }
    let x = x.min(r);
    let (mid, half) = (0.5 * (l + r), 0.5 * (r - l));
    let upper = ((x - mid) / half).clamp(-1.0, 1.0).asin();
    let lower = -0.5 * PI;
    let f = |theta: f64| {
        let s = theta.sin();
        let u = 1.0 + s;
        let denom = l + half * u;
        let ratio = if denom == 0.0 { 1.0 / half } else { u / denom };
        half * half * (1.0 - s) * ratio / (2.0 * PI * alpha)
    };
    let h = (upper - lower) / CDF_PANELS as f64;
    let mut acc = f(lower) + f(upper);
    for i in 1..CDF_PANELS {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lower + i as f64 * h);
    }
    acc * h / 3.0
}

/// Distribution function of the continuous part, normalized to reach 1 at the right edge.
pub fn mp_cdf(x: f64, alpha: f64) -> f64 {
    mp_mass_below(x, alpha) / alpha.recip().min(1.0)
}

/// Median of the normalized continuous part, by bisection.
pub fn mp_median(alpha: f64) -> Result<f64> {
    let (mut lo, mut hi) = mp_edges(alpha)?;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if mp_cdf(mid, alpha) < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum BbpPrediction {
    /// Sub-critical spike: the largest eigenvalue sticks to the bulk edge.
    BulkEdge(f64),
    Outlier(f64),
}

impl BbpPrediction {
    pub fn value(self) -> f64 {
        match self {
            BbpPrediction::BulkEdge(v) | BbpPrediction::Outlier(v) => v,
        }
    }
}

/// Location of the sample eigenvalue produced by population spike `ell`.
pub fn bbp_outlier_location(ell: f64, alpha: f64) -> Result<BbpPrediction> {
    check_alpha(alpha)?;
    if !(ell >= 1.0 && ell.is_finite()) {
        return Err(Error::InvalidArgument(format!("spike must be at least 1, got {ell}")));
    }
    let c = 1.0 + alpha.sqrt();
    Ok(if ell <= c {
        BbpPrediction::BulkEdge(c * c)
    } else {
        BbpPrediction::Outlier(ell * (1.0 + alpha / (ell - 1.0)))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikedModel {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    /// Leading population eigenvalues; the rest are 1.
    #[serde(default)]
    pub spikes: Vec<f64>,
}

impl SpikedModel {
    pub fn new(m: usize, n: usize, spikes: Vec<f64>) -> Result<Self> {
        let model = SpikedModel { m, n, spikes };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::InvalidArgument("M and N must be positive".into()));
        }
        if self.spikes.len() > self.m {
            return Err(Error::InvalidArgument("more spikes than dimensions".into()));
        }
        if self.spikes.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("spikes must be positive".into()));
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.m as f64 / self.n as f64
    }
}

/// `(1/N) T X Xᵀ Tᵀ` with `T = Σ^{1/2}` diagonal.
pub fn sample_spiked_covariance(model: &SpikedModel, seed: u64) -> Result<DenseSymmetric> {
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = Array2::from_shape_simple_fn((model.m, model.n), || StandardNormal.sample(&mut rng));
    for (i, &ell) in model.spikes.iter().enumerate() {
        let mut row = y.row_mut(i);
        row *= ell.sqrt();
    }
    let mut g = Array2::zeros((model.m, model.m));
    general_mat_mul(1.0 / model.n as f64, &y, &y.t(), 0.0, &mut g);
    DenseSymmetric::from_square(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmtOptions {
    /// Zero threshold relative to the largest eigenvalue.
    pub tau_rel: f64,
    /// Bulk margin in unscaled units; `None` uses `4 N^(-2/3) (1 + √α)^(4/3)`.
    pub margin: Option<f64>,
    /// Population variance multiplying the whole law.
    pub scale: f64,
}

impl Default for RmtOptions {
    fn default() -> Self {
        RmtOptions {
            tau_rel: 1e-8,
            margin: None,
            scale: 1.0,
        }
    }
}

pub fn default_margin(n: usize, alpha: f64) -> f64 {
    4.0 * (n as f64).powf(-2.0 / 3.0) * (1.0 + alpha.sqrt()).powf(4.0 / 3.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeMatch {
    pub spike: f64,
    pub prediction: BbpPrediction,
    /// Detected right outlier paired with a super-critical prediction.
    pub detected: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmtCheckReport {
    pub alpha: f64,
    pub scale: f64,
    pub edges: (f64, f64),
    pub zero_tolerance: f64,
    pub bulk_margin: f64,
    pub zero_count: usize,
    pub bulk_count: usize,
    /// Descending.
    pub right_outliers: Vec<f64>,
    /// Ascending; includes any eigenvalue below `-τ`.
    pub left_outliers: Vec<f64>,
    /// Kolmogorov-Smirnov distance of the bulk against the MP law; `None` with an empty bulk.
    pub ks_distance: Option<f64>,
    pub spikes: Vec<SpikeMatch>,
}

impl RmtCheckReport {
    pub fn outlier_count(&self) -> usize {
        self.right_outliers.len() + self.left_outliers.len()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), self)?;
        Ok(())
    }
}

/// KS distance between a sample (any order) and the normalized MP law.
pub fn ks_distance(sample: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if sample.is_empty() {
        return Err(Error::InvalidArgument("empty sample".into()));
    }
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    Ok(s.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = mp_cdf(x, alpha);
        d.max((f - i as f64 / n).abs()).max((f - (i + 1) as f64 / n).abs())
    }))
}

/// Classifies eigenvalues into zeros, bulk and outliers against the MP law
/// for `model`, and pairs right outliers with BBP predictions.
pub fn spectrum_vs_theory(eigenvalues: &[f64], model: &SpikedModel, opts: &RmtOptions) -> Result<RmtCheckReport> {
    model.validate()?;
    if eigenvalues.is_empty() || eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("eigenvalues must be finite and nonempty".into()));
    }
    if !(opts.scale > 0.0) {
        return Err(Error::InvalidArgument("scale must be positive".into()));
    }
    let alpha = model.alpha();
    let (l, r) = mp_edges(alpha)?;
    let margin = opts.margin.unwrap_or_else(|| default_margin(model.n, alpha));
    let max = eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tau = opts.tau_rel * max.abs();
    let (lo, hi) = ((l - margin) * opts.scale, (r + margin) * opts.scale);
    let mut zero_count = 0;
    let mut bulk = Vec::new();
    let mut right = Vec::new();
    let mut left = Vec::new();
    for &v in eigenvalues {
        if v.abs() <= tau {
            zero_count += 1;
        } else if v > hi {
            right.push(v);
        } else if v >= lo && v > 0.0 {
            bulk.push(v / opts.scale);
        } else {
            left.push(v);
        }
    }
    right.sort_by(|a, b| b.total_cmp(a));
    left.sort_by(f64::total_cmp);
    let mut predictions: Vec<SpikeMatch> = model
        .spikes
        .iter()
        .map(|&spike| {
            Ok(SpikeMatch {
                spike,
                prediction: bbp_outlier_location(spike.max(1.0), alpha)?,
                detected: None,
            })
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..predictions.len())
        .filter(|&i| matches!(predictions[i].prediction, BbpPrediction::Outlier(_)))
        .collect();
    order.sort_by(|&a, &b| predictions[b].prediction.value().total_cmp(&predictions[a].prediction.value()));
    for (&i, &v) in order.iter().zip(&right) {
        predictions[i].detected = Some(v);
    }
    Ok(RmtCheckReport {
        alpha,
        scale: opts.scale,
        edges: (l * opts.scale, r * opts.scale),
        zero_tolerance: tau,
        bulk_margin: margin * opts.scale,
        zero_count,
        bulk_count: bulk.len(),
        right_outliers: right,
        left_outliers: left,
        ks_distance: if bulk.is_empty() { None } else { Some(ks_distance(&bulk, alpha)?) },
        spikes: predictions,
    })
}

/// Population variance matching the median of the nonzero eigenvalues to the MP median.
pub fn estimate_scale(eigenvalues: &[f64], alpha: f64, tau_rel: f64) -> Result<f64> {
    let max = eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut nonzero: Vec<f64> = eigenvalues.iter().copied().filter(|v| v.abs() > tau_rel * max.abs()).collect();
    if nonzero.is_empty() {
        return Err(Error::InvalidArgument("no nonzero eigenvalues".into()));
    }
    nonzero.sort_by(f64::total_cmp);
    let k = nonzero.len();
    let median = if k % 2 == 1 {
        nonzero[k / 2]
    } else {
        0.5 * (nonzero[k / 2 - 1] + nonzero[k / 2])
    };
    Ok(median / mp_median(alpha)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub density: f64,
}

/// Equal-width histogram over `[lo, hi]` normalized to unit area over the whole sample.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Vec<HistogramBin>> {
    if bins == 0 || !(hi > lo) || values.is_empty() {
        return Err(Error::InvalidArgument("histogram needs bins, a range and values".into()));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        if v >= lo && v <= hi {
            counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
        }
    }
    Ok(counts
        .iter()
        .enumerate()
        .map(|(i, &c)| HistogramBin {
            bin_left: lo + i as f64 * width,
            bin_right: lo + (i + 1) as f64 * width,
            density: c as f64 / (values.len() as f64 * width),
        })
        .collect())
}

pub fn write_histogram_csv(bins: &[HistogramBin], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "bin_left,bin_right,density")?;
    for b in bins {
        writeln!(w, "{},{},{}", b.bin_left, b.bin_right, b.density)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::eigenvalues;
    use proptest::prelude::*;

    /// Midpoint rule after `x = u²`, which tames the `1/√x` behaviour at zero.
    fn density_integral_oracle(lo: f64, hi: f64, alpha: f64) -> f64 {
        let (a, b) = (lo.sqrt(), hi.sqrt());
        let n = 400_000;
        let h = (b - a) / n as f64;
        (0..n)
            .map(|i| {
                let u = a + (i as f64 + 0.5) * h;
                mp_density(u * u, alpha) * 2.0 * u
            })
            .sum::<f64>()
            * h
    }

    #[test]
    fn edge_examples() {
        assert_eq!(mp_edges(1.0).unwrap(), (0.0, 4.0));
        assert_eq!(mp_edges(0.25).unwrap(), (0.25, 2.25));
        assert_eq!(mp_edges(4.0).unwrap(), (1.0, 9.0));
        assert_eq!(mp_zero_mass(4.0).unwrap(), 0.75);
        assert_eq!(mp_zero_mass(0.5).unwrap(), 0.0);
        assert!(mp_edges(0.0).is_err());
        assert!(mp_edges(-1.0).is_err());
    }

    #[test]
    fn density_examples() {
        assert_eq!(mp_density(5.0, 1.0), 0.0);
        assert_eq!(mp_density(-1.0, 0.5), 0.0);
        assert!((mp_density(2.0, 1.0) - 1.0 / (2.0 * PI)).abs() < 1e-15);
    }

    #[test]
    fn density_mass_matches_quadrature_oracle() {
        for alpha in [0.1f64, 0.5, 1.0, 2.0, 4.0] {
            let (l, r) = mp_edges(alpha).unwrap();
            let expected = alpha.recip().min(1.0);
            assert!((mp_mass_below(r, alpha) - expected).abs() <= 1e-6, "alpha {alpha}");
            assert!((density_integral_oracle(l, r, alpha) - expected).abs() <= 1e-6, "alpha {alpha}");
            let x = l + 0.3 * (r - l);
            let partial = density_integral_oracle(l, x, alpha);
            assert!((mp_mass_below(x, alpha) - partial).abs() <= 1e-6, "alpha {alpha}");
        }
    }

    #[test]
    fn bbp_examples() {
        assert_eq!(bbp_outlier_location(4.0, 1.0).unwrap(), BbpPrediction::Outlier(16.0 / 3.0));
        assert_eq!(bbp_outlier_location(1.5, 1.0).unwrap(), BbpPrediction::BulkEdge(4.0));
        assert_eq!(bbp_outlier_location(2.0, 1.0).unwrap(), BbpPrediction::BulkEdge(4.0));
        assert!(bbp_outlier_location(0.5, 1.0).is_err());
    }

    #[test]
    fn bbp_is_continuous_at_the_threshold() {
        for alpha in [0.1f64, 0.7, 1.0, 3.0] {
            let c = 1.0 + alpha.sqrt();
            let just_above = bbp_outlier_location(c * (1.0 + 1e-12), alpha).unwrap();
            assert!(matches!(just_above, BbpPrediction::Outlier(_)));
            assert!((just_above.value() - c * c).abs() <= 1e-9);
        }
    }

    #[test]
    fn median_splits_the_mass() {
        let m = mp_median(0.5).unwrap();
        assert!((mp_cdf(m, 0.5) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn wide_sample_has_exact_zero_block() {
        let model = SpikedModel::new(800, 400, vec![]).unwrap();
        let ev = eigenvalues(&sample_spiked_covariance(&model, 1).unwrap()).unwrap();
        let report = spectrum_vs_theory(&ev, &model, &RmtOptions::default()).unwrap();
        assert_eq!(report.zero_count, 400);
    }

    #[test]
    fn square_sample_top_eigenvalue_near_edge() {
        let model = SpikedModel::new(300, 300, vec![]).unwrap();
        let ev = eigenvalues(&sample_spiked_covariance(&model, 2).unwrap()).unwrap();
        assert!((ev.last().unwrap() - 4.0).abs() < 0.25);
    }

    #[test]
    fn spiked_sample_shows_one_outlier() {
        let model = SpikedModel::new(300, 600, vec![5.0]).unwrap();
        let ev = eigenvalues(&sample_spiked_covariance(&model, 3).unwrap()).unwrap();
        let report = spectrum_vs_theory(&ev, &model, &RmtOptions::default()).unwrap();
        assert_eq!(report.right_outliers.len(), 1);
        assert_eq!(report.left_outliers.len(), 0);
        let predicted = report.spikes[0].prediction.value();
        assert!((report.spikes[0].detected.unwrap() / predicted - 1.0).abs() < 0.1);
    }

    #[test]
    fn scaled_spectra_are_classified_after_rescaling() {
        let model = SpikedModel::new(200, 400, vec![]).unwrap();
        let ev: Vec<f64> = eigenvalues(&sample_spiked_covariance(&model, 4).unwrap())
            .unwrap()
            .iter()
            .map(|v| 0.01 * v)
            .collect();
        let scale = estimate_scale(&ev, model.alpha(), 1e-8).unwrap();
        assert!((scale / 0.01 - 1.0).abs() < 0.05);
        let opts = RmtOptions { scale, ..RmtOptions::default() };
        let report = spectrum_vs_theory(&ev, &model, &opts).unwrap();
        assert_eq!(report.outlier_count(), 0);
        assert!(report.ks_distance.unwrap() < 0.1);
    }

    #[test]
    fn histogram_integrates_to_one() {
        let values: Vec<f64> = (0..1000).map(|i| i as f64 / 999.0).collect();
        let bins = histogram(&values, 20, 0.0, 1.0).unwrap();
        let area: f64 = bins.iter().map(|b| b.density * (b.bin_right - b.bin_left)).sum();
        assert!((area - 1.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn samples_are_psd_with_bounded_rank(m in 2usize..40, n in 2usize..40, seed in 0u64..1000) {
            let model = SpikedModel::new(m, n, vec![3.0]).unwrap();
            let ev = eigenvalues(&sample_spiked_covariance(&model, seed).unwrap()).unwrap();
            let max = *ev.last().unwrap();
            prop_assert!(ev[0] >= -1e-10 * max);
            let rank = ev.iter().filter(|v| v.abs() > 1e-8 * max).count();
            prop_assert!(rank <= m.min(n));
            let report = spectrum_vs_theory(&ev, &model, &RmtOptions::default()).unwrap();
            prop_assert_eq!(report.zero_count + report.bulk_count + report.outlier_count(), m);
        }

        #[test]
        fn cdf_is_monotone(alpha in 0.05f64..5.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (l, r) = mp_edges(alpha).unwrap();
            let (x, y) = (l + a.min(b) * (r - l), l + a.max(b) * (r - l));
            prop_assert!(mp_cdf(x, alpha) <= mp_cdf(y, alpha) + 1e-12);
            prop_assert!((mp_cdf(r, alpha) - 1.0).abs() <= 1e-6);
        }
    }
}
