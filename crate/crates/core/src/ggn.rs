//! Gauss-Newton decomposition of the Hessian, `H = G + R`.
//!
//! `G = (1/N) Σ J_iᵀ ℓ''_i J_i` is accumulated as `AᵀA` where the rows of `A`
//! are square-root factors of each example's output curvature applied to its
//! output Jacobian, so `G` is positive semidefinite by construction.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, DEFAULT_DENSE_CAP};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::matrix::DenseSymmetric;
use crate::model::{self, LossKind, NetworkSpec, ParamVector};
use crate::spectrum;

/// Default relative tolerance for near-zero eigenvalues of `G`.
pub const DEFAULT_TAU_REL: f64 = 1e-8;

/// Rows of the factor `A` contributed per accumulation chunk.
const CHUNK_ROWS: usize = 2048;

/// Gauss-Newton matrix of the mean batch loss.
pub fn ggn_matrix(spec: &NetworkSpec, params: &ParamVector, batch: &Batch) -> Result<DenseSymmetric> {
    ggn_matrix_capped(spec, params, batch, DEFAULT_DENSE_CAP)
}

pub fn ggn_matrix_capped(spec: &NetworkSpec, params: &ParamVector, batch: &Batch, cap: usize) -> Result<DenseSymmetric> {
    let m = spec.count_params();
    if m > cap {
        return Err(Error::CapExceeded { order: m, cap });
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    params.check(spec)?;
    model::check_labels(spec, batch)?;
    let n = batch.len();
    let k = spec.output_dim();
    let per_chunk = (CHUNK_ROWS / k).max(1);
    let mut g = Array2::<f64>::zeros((m, m));
    for start in (0..n).step_by(per_chunk) {
        let end = (start + per_chunk).min(n);
        let inputs = batch.inputs.slice(s![start..end, ..]);
        let mut a = autodiff::output_jacobian_rows(spec, params, inputs)?;
        let logits = model::logits(spec, params.values(), inputs);
        for (local, z) in logits.axis_iter(Axis(0)).enumerate() {
            let mut rows = a.slice_mut(s![local * k..(local + 1) * k, ..]);
            match spec.loss_kind {
                LossKind::Mse => {}
                LossKind::LogisticNll => {
                    let s = model::sigmoid(z[0]);
                    rows *= (s * (1.0 - s)).sqrt();
                }
                LossKind::SoftmaxNll => {
                    let mut p = vec![0.0; k];
                    model::softmax_into(z, &mut p);
                    // diag(p) - p pᵀ = Σ_c p_c (e_c - p)(e_c - p)ᵀ
                    let mean = rows.t().dot(&ndarray::ArrayView1::from(&p[..]));
                    for (c, mut row) in rows.axis_iter_mut(Axis(0)).enumerate() {
                        row -= &mean;
                        row *= p[c].sqrt();
                    }
                }
            }
        }
        general_mat_mul(1.0 / n as f64, &a.t(), &a, 1.0, &mut g);
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Gauss-Newton matrix"));
    }
    DenseSymmetric::from_square(g)
}

/// `R = H - G`.
pub fn residual_matrix(h: &DenseSymmetric, g: &DenseSymmetric) -> Result<DenseSymmetric> {
    h.sub(g)
}

/// The three matrices of one decomposition.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub h: DenseSymmetric,
    pub g: DenseSymmetric,
    pub r: DenseSymmetric,
}

pub fn decompose(spec: &NetworkSpec, params: &ParamVector, batch: &Batch, cap: usize) -> Result<Decomposition> {
    let h = autodiff::full_hessian_capped(spec, params, batch, cap)?;
    let g = ggn_matrix_capped(spec, params, batch, cap)?;
    let r = residual_matrix(&h, &g)?;
    Ok(Decomposition { h, g, r })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub eig_h: Vec<f64>,
    pub eig_g: Vec<f64>,
    pub eig_r: Vec<f64>,
    /// Most negative eigenvalue of `G`.
    pub psd_defect_g: f64,
    /// `max|H - (G + R)|`.
    pub reconstruction_error: f64,
    pub zero_count_g: usize,
    pub zero_tolerance: f64,
    /// `min(M, N k)`.
    pub rank_bound: usize,
    /// Spectral norm ratio `‖R‖₂ / ‖G‖₂`.
    pub residual_ratio: f64,
}

impl DecompositionReport {
    pub fn new(d: &Decomposition, n: usize, k: usize, tau_rel: f64) -> Result<Self> {
        let eig_h = spectrum::eigenvalues(&d.h)?;
        let eig_g = spectrum::eigenvalues(&d.g)?;
        let eig_r = spectrum::eigenvalues(&d.r)?;
        let recon = d
            .h
            .view()
            .iter()
            .zip(d.g.view().iter().zip(d.r.view().iter()))
            .map(|(h, (g, r))| (h - (g + r)).abs())
            .fold(0.0f64, f64::max);
        let g_max = eig_g.last().copied().unwrap_or(0.0);
        let tol = tau_rel * g_max.max(0.0);
        let spectral = |e: &[f64]| e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let g_norm = spectral(&eig_g);
        Ok(DecompositionReport {
            psd_defect_g: eig_g.first().copied().unwrap_or(0.0),
            reconstruction_error: recon,
            zero_count_g: eig_g.iter().filter(|v| v.abs() <= tol).count(),
            zero_tolerance: tol,
            rank_bound: d.h.order().min(n * k),
            residual_ratio: if g_norm > 0.0 { spectral(&eig_r) / g_norm } else { f64::INFINITY },
            eig_h,
            eig_g,
            eig_r,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), self)?;
        Ok(())
    }
}

pub fn decomposition_report(spec: &NetworkSpec, params: &ParamVector, batch: &Batch) -> Result<DecompositionReport> {
    let d = decompose(spec, params, batch, DEFAULT_DENSE_CAP)?;
    DecompositionReport::new(&d, batch.len(), spec.output_dim(), DEFAULT_TAU_REL)
}
