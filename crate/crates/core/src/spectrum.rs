//! Symmetric eigendecomposition, outlier counting and negative-tail statistics.
//!
//! The three outlier counters look at the top `W = min(100, #positive)`
//! eigenvalues. Ties are broken toward the largest index, which reports the
//! fewest outliers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseSymmetric;

pub const MAX_WINDOW: usize = 100;
pub const RATIO_FLOOR: f64 = 1e-10;
pub const NEAR_ZERO_REL: f64 = 1e-8;
const TIE_REL: f64 = 1e-9;

/// Ascending eigenvalues, and the orthonormal eigenvectors as columns when requested.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Option<Array2<f64>>,
}

pub fn eig_sym(a: &DenseSymmetric, want_vectors: bool) -> Result<Eigen> {
    let view = a.view();
    if view.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix entries"));
    }
    let n = a.order();
    if n == 0 {
        return Ok(Eigen {
            values: Vec::new(),
            vectors: want_vectors.then(|| Array2::zeros((0, 0))),
        });
    }
    let m = faer::Mat::<f64>::from_fn(n, n, |i, j| view[[i, j]]);
    if want_vectors {
        let evd = m.self_adjoint_eigen(faer::Side::Lower).map_err(|_| Error::Convergence)?;
        let s = evd.S().column_vector();
        let u = evd.U();
        Ok(Eigen {
            values: (0..n).map(|i| s[i]).collect(),
            vectors: Some(Array2::from_shape_fn((n, n), |(i, j)| u[(i, j)])),
        })
    } else {
        let values = m.self_adjoint_eigenvalues(faer::Side::Lower).map_err(|_| Error::Convergence)?;
        Ok(Eigen { values, vectors: None })
    }
}

pub fn eigenvalues(a: &DenseSymmetric) -> Result<Vec<f64>> {
    Ok(eig_sym(a, false)?.values)
}

fn descending_top(values: &[f64], keep: impl Fn(f64) -> bool) -> Vec<f64> {
    let mut top: Vec<f64> = values.iter().copied().filter(|&v| keep(v)).collect();
    top.sort_by(|a, b| b.total_cmp(a));
    top.truncate(MAX_WINDOW);
    top
}

/// Index of the largest score, preferring the last among near-ties.
fn last_argmax(scores: &[f64]) -> usize {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = TIE_REL * best.abs();
    scores.iter().rposition(|&s| s >= best - tol).unwrap()
}

/// Counts the eigenvalues above the largest consecutive gap among the top positive ones.
pub fn count_outliers_gap(eigenvalues: &[f64]) -> Result<usize> {
    let top = descending_top(eigenvalues, |v| v > 0.0);
    if top.len() < 2 {
        return Err(Error::InvalidArgument("gap counter needs at least 2 positive eigenvalues".into()));
    }
    // ascending order within the window; gap i lies between asc[i] and asc[i + 1]
    let asc: Vec<f64> = top.iter().rev().copied().collect();
    let gaps: Vec<f64> = asc.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(asc.len() - 1 - last_argmax(&gaps))
}

/// Counts the eigenvalues above the largest consecutive ratio among those
/// exceeding `1e-10 * max`.
pub fn count_outliers_ratio(eigenvalues: &[f64]) -> Result<usize> {
    let max = eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let floor = RATIO_FLOOR * max;
    let top = descending_top(eigenvalues, |v| v > 0.0 && v > floor);
    if top.len() < 2 {
        return Err(Error::InvalidArgument(
            "ratio counter needs at least 2 eigenvalues above the floor".into(),
        ));
    }
    let asc: Vec<f64> = top.iter().rev().copied().collect();
    let ratios: Vec<f64> = asc.windows(2).map(|w| w[1] / w[0]).collect();
    Ok(asc.len() - 1 - last_argmax(&ratios))
}

/// Counts eigenvalues strictly above `cutoff`, or above the scree-plot elbow
/// when no cutoff is given. Returns the count and the cutoff used.
pub fn count_outliers_elbow(eigenvalues: &[f64], cutoff: Option<f64>) -> Result<(usize, f64)> {
    if eigenvalues.is_empty() {
        return Err(Error::InvalidArgument("empty spectrum".into()));
    }
    let above = |c: f64| eigenvalues.iter().filter(|&&v| v > c).count();
    if let Some(c) = cutoff {
        return Ok((above(c), c));
    }
    let positive = eigenvalues.iter().filter(|&&v| v > 0.0).count();
    let scree = if positive >= 2 {
        descending_top(eigenvalues, |v| v > 0.0)
    } else {
        descending_top(eigenvalues, |_| true)
    };
    let last = scree.len() - 1;
    let (y0, y1) = (scree[0], scree[last]);
    // unnormalized distance to the chord; the chord length is common to all points
    let dist: Vec<f64> = scree
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if last == 0 {
                0.0
            } else {
                ((y1 - y0) * i as f64 - last as f64 * (y - y0)).abs()
            }
        })
        .collect();
    let elbow = scree[last_argmax(&dist)];
    Ok((above(elbow), elbow))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedValue {
    pub rank: usize,
    pub value: f64,
    pub percent_rank: f64,
}

/// Percent rank of the `i`-th ascending value: `100 i / (M - 1)`.
pub fn percent_rank(i: usize, m: usize) -> f64 {
    if m <= 1 {
        0.0
    } else {
        100.0 * i as f64 / (m - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeTail {
    pub negative_count: usize,
    pub negative_fraction: f64,
    pub table: Vec<RankedValue>,
}

/// Negative eigenvalues of an ascending spectrum with their percent ranks.
pub fn negative_tail(eigenvalues: &[f64]) -> Result<NegativeTail> {
    if eigenvalues.is_empty() {
        return Err(Error::InvalidArgument("empty spectrum".into()));
    }
    let m = eigenvalues.len();
    let mut sorted = eigenvalues.to_vec();
    sorted.sort_by(f64::total_cmp);
    let table: Vec<RankedValue> = sorted
        .iter()
        .enumerate()
        .take_while(|(_, &v)| v < 0.0)
        .map(|(i, &v)| RankedValue {
            rank: i,
            value: v,
            percent_rank: percent_rank(i, m),
        })
        .collect();
    Ok(NegativeTail {
        negative_count: table.len(),
        negative_fraction: table.len() as f64 / m as f64,
        table,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub eigenvalues: Vec<f64>,
    /// `None` when fewer than two eigenvalues are positive.
    pub outlier_count_gap: Option<usize>,
    pub outlier_count_ratio: Option<usize>,
    pub outlier_count_elbow: usize,
    pub elbow_cutoff: f64,
    pub negative_count: usize,
    pub negative_fraction: f64,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub near_zero_count: usize,
    pub near_zero_tolerance: f64,
}

impl SpectrumReport {
    /// Builds a report from any eigenvalue sequence; near-zero means
    /// `|λ| <= 1e-8 * max|λ|`.
    pub fn from_eigenvalues(eigenvalues: Vec<f64>, elbow_cutoff: Option<f64>) -> Result<Self> {
        if eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("eigenvalues"));
        }
        let mut eigenvalues = eigenvalues;
        eigenvalues.sort_by(f64::total_cmp);
        let (outlier_count_elbow, elbow_cutoff) = count_outliers_elbow(&eigenvalues, elbow_cutoff)?;
        let tail = negative_tail(&eigenvalues)?;
        let scale = eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = NEAR_ZERO_REL * scale;
        Ok(SpectrumReport {
            outlier_count_gap: count_outliers_gap(&eigenvalues).ok(),
            outlier_count_ratio: count_outliers_ratio(&eigenvalues).ok(),
            outlier_count_elbow,
            elbow_cutoff,
            negative_count: tail.negative_count,
            negative_fraction: tail.negative_fraction,
            min_eigenvalue: eigenvalues[0],
            max_eigenvalue: *eigenvalues.last().unwrap(),
            near_zero_count: eigenvalues.iter().filter(|v| v.abs() <= tol).count(),
            near_zero_tolerance: tol,
            eigenvalues,
        })
    }

    pub fn of_matrix(a: &DenseSymmetric, elbow_cutoff: Option<f64>) -> Result<Self> {
        Self::from_eigenvalues(eigenvalues(a)?, elbow_cutoff)
    }

    pub fn order(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// Writes `rank,value,percent_rank` rows in ascending order.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_eigenvalue_csv(&self.eigenvalues, path)
    }
}

pub fn write_eigenvalue_csv(ascending: &[f64], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "rank,value,percent_rank")?;
    let m = ascending.len();
    for (i, v) in ascending.iter().enumerate() {
        writeln!(w, "{i},{v:e},{}", percent_rank(i, m))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Cyclic Jacobi rotations until the off-diagonal mass vanishes.
    fn jacobi_eigenvalues(a: &Array2<f64>) -> Vec<f64> {
        let n = a.nrows();
        let mut a = a.clone();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[[i, j]] * a[[i, j]])
                .sum();
            if off < 1e-26 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[[p, q]].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[[k, p]], a[[k, q]]);
                        a[[k, p]] = c * akp - s * akq;
                        a[[k, q]] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                        a[[p, k]] = c * apk - s * aqk;
                        a[[q, k]] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut d: Vec<f64> = (0..n).map(|i| a[[i, i]]).collect();
        d.sort_by(f64::total_cmp);
        d
    }

    fn random_symmetric(n: usize, seed: u64) -> DenseSymmetric {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        DenseSymmetric::from_square(raw).unwrap()
    }

    #[test]
    fn diagonal_and_identity() {
        let d = DenseSymmetric::from_diagonal(&[3.0, 1.0, 2.0]);
        assert_eq!(eigenvalues(&d).unwrap(), vec![1.0, 2.0, 3.0]);
        let i = DenseSymmetric::identity(5);
        for v in eigenvalues(&i).unwrap() {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn matches_jacobi_oracle() {
        let a = random_symmetric(50, 7);
        let ours = eigenvalues(&a).unwrap();
        let oracle = jacobi_eigenvalues(a.as_array());
        let worst = ours.iter().zip(&oracle).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-9, "max deviation {worst}");
    }

    #[test]
    fn eigenvectors_satisfy_residual_bound() {
        let a = random_symmetric(40, 3);
        let e = eig_sym(&a, true).unwrap();
        let u = e.vectors.unwrap();
        let norm = a.frobenius_sq().sqrt();
        for (j, &lambda) in e.values.iter().enumerate() {
            let v = u.column(j);
            let r = a.as_array().dot(&v) - &v * lambda;
            let rn = r.dot(&r).sqrt();
            assert!(rn <= 1e-8 * norm * v.dot(&v).sqrt());
        }
        let gram = u.t().dot(&u);
        for i in 0..40 {
            for j in 0..40 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - target).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gap_examples() {
        assert_eq!(count_outliers_gap(&[0.0, 0.01, 0.02, 0.03, 5.0, 5.5]).unwrap(), 2);
        assert_eq!(count_outliers_gap(&[1.0, 2.0, 3.0, 100.0]).unwrap(), 1);
        assert!(count_outliers_gap(&[-1.0, 0.0, 2.0]).is_err());
    }

    #[test]
    fn gap_window_ignores_values_below_top_hundred() {
        // a huge gap far below the top 100 positive values must not be seen
        let mut v: Vec<f64> = (0..150).map(|i| 1000.0 + i as f64).collect();
        v.push(1e-6);
        v.push(5000.0);
        assert_eq!(count_outliers_gap(&v).unwrap(), 1);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(count_outliers_ratio(&[0.001, 0.002, 1.0, 3.0]).unwrap(), 2);
        let geometric: Vec<f64> = (0..20).map(|i| 1.7f64.powi(i)).collect();
        assert_eq!(count_outliers_ratio(&geometric).unwrap(), 1);
        assert!(count_outliers_ratio(&[1e-20, 1.0]).is_err());
    }

    #[test]
    fn elbow_examples() {
        let mut v: Vec<f64> = (0..50).map(|i| 5e-5 * i as f64).collect();
        v.extend((0..10).map(|i| 0.01 + i as f64));
        assert_eq!(count_outliers_elbow(&v, Some(0.003)).unwrap(), (10, 0.003));

        let (count, cutoff) = count_outliers_elbow(&[2.0; 7], None).unwrap();
        assert_eq!((count, cutoff), (0, 2.0));

        let (count, cutoff) = count_outliers_elbow(&[10.0, 9.0, 0.1, 0.09, 0.08], None).unwrap();
        assert_eq!(count, 2);
        assert_eq!(cutoff, 0.1);
    }

    #[test]
    fn elbow_agrees_with_normalized_distance_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(3..30);
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..10.0f64).powi(3)).collect();
            v.sort_by(|a, b| b.total_cmp(a));
            let last = (n - 1) as f64;
            let (x0, y0, x1, y1) = (0.0, v[0], last, v[n - 1]);
            let len = ((x1 - x0) * (x1 - x0) + (y1 - y0) * (y1 - y0)).sqrt();
            let dist: Vec<f64> = v
                .iter()
                .enumerate()
                .map(|(i, &y)| ((y1 - y0) * i as f64 - (x1 - x0) * (y - y0)).abs() / len)
                .collect();
            let best = dist.iter().copied().fold(0.0, f64::max);
            let idx = dist.iter().rposition(|&d| d >= best * (1.0 - 1e-9)).unwrap();
            let expected = v.iter().filter(|&&x| x > v[idx]).count();
            assert_eq!(count_outliers_elbow(&v, None).unwrap().0, expected);
        }
    }

    #[test]
    fn negative_tail_examples() {
        let psd = negative_tail(&[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(psd.negative_count, 0);
        assert!(psd.table.is_empty());
        let t = negative_tail(&[-2.0, -1.0, 1.0, 2.0]).unwrap();
        assert_eq!(t.negative_fraction, 0.5);
        assert_eq!(t.table[1].percent_rank, 100.0 / 3.0);
    }

    #[test]
    fn report_fields() {
        let r = SpectrumReport::from_eigenvalues(vec![5.0, -1.0, 0.0, 1e-12, 0.5], None).unwrap();
        assert_eq!(r.eigenvalues, vec![-1.0, 0.0, 1e-12, 0.5, 5.0]);
        assert_eq!(r.negative_count, 1);
        assert_eq!(r.near_zero_count, 2);
        assert_eq!(r.min_eigenvalue, -1.0);
        assert_eq!(r.max_eigenvalue, 5.0);
        assert_eq!(r.outlier_count_gap, Some(1));
    }

    proptest! {
        #[test]
        fn counters_are_scale_invariant(
            values in proptest::collection::vec(1e-3f64..1e3, 3..60),
            c in 1e-3f64..1e3,
        ) {
            let scaled: Vec<f64> = values.iter().map(|v| v * c).collect();
            prop_assert_eq!(count_outliers_gap(&values).unwrap(), count_outliers_gap(&scaled).unwrap());
            prop_assert_eq!(count_outliers_ratio(&values).unwrap(), count_outliers_ratio(&scaled).unwrap());
            prop_assert_eq!(
                count_outliers_elbow(&values, None).unwrap().0,
                count_outliers_elbow(&scaled, None).unwrap().0
            );
        }

        #[test]
        fn eigenvalues_reproduce_trace_and_frobenius(n in 1usize..25, seed in 0u64..1000) {
            let a = random_symmetric(n, seed);
            let ev = eigenvalues(&a).unwrap();
            prop_assert!(ev.windows(2).all(|w| w[0] <= w[1]));
            let sum: f64 = ev.iter().sum();
            let sq: f64 = ev.iter().map(|v| v * v).sum();
            let scale = a.frobenius_sq().sqrt().max(1.0);
            prop_assert!((sum - a.trace()).abs() <= 1e-8 * scale);
            prop_assert!((sq - a.frobenius_sq()).abs() <= 1e-8 * a.frobenius_sq().max(1.0));
        }

        #[test]
        fn report_invariants(values in proptest::collection::vec(-10.0f64..10.0, 1..80)) {
            let r = SpectrumReport::from_eigenvalues(values.clone(), None).unwrap();
            let m = values.len();
            prop_assert!(r.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(r.outlier_count_elbow <= m);
            prop_assert!(r.outlier_count_gap.unwrap_or(0) <= m);
            prop_assert!(r.outlier_count_ratio.unwrap_or(0) <= m);
            prop_assert_eq!(r.negative_fraction, r.negative_count as f64 / m as f64);
        }
    }
}
