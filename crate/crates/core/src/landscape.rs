//! Loss along the straight line between two parameter vectors.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, NetworkSpec, ParamVector};

pub const DEFAULT_EPS_REL: f64 = 0.05;

/// 51 uniform points on `[0, 1]`.
pub fn default_grid() -> Vec<f64> {
    (0..=50).map(|i| i as f64 / 50.0).collect()
}

/// 101 uniform points on `[-0.5, 1.5]`.
pub fn extended_grid() -> Vec<f64> {
    (0..=100).map(|i| (i as f64 - 25.0) / 50.0).collect()
}

fn check_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.iter().any(|t| !t.is_finite()) || t_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("grid must be finite and strictly increasing".into()));
    }
    if !t_grid.contains(&0.0) || !t_grid.contains(&1.0) {
        return Err(Error::InvalidArgument("grid must contain 0 and 1".into()));
    }
    Ok(())
}

/// `(1 - t) a + t b`.
pub fn interpolate(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationProfile {
    pub t_grid: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub train_acc: Option<Vec<f64>>,
    pub test_loss: Option<Vec<f64>>,
    pub test_acc: Option<Vec<f64>>,
    /// Labels of the `t = 0` and `t = 1` endpoints.
    pub endpoints: (String, String),
}

impl InterpolationProfile {
    pub fn from_losses(t_grid: Vec<f64>, train_loss: Vec<f64>) -> Result<Self> {
        check_grid(&t_grid)?;
        if t_grid.len() != train_loss.len() {
            return Err(Error::DimensionMismatch {
                expected: t_grid.len(),
                actual: train_loss.len(),
                context: "profile length",
            });
        }
        Ok(InterpolationProfile {
            t_grid,
            train_loss,
            train_acc: None,
            test_loss: None,
            test_acc: None,
            endpoints: ("a".into(), "b".into()),
        })
    }

    pub fn with_endpoints(mut self, a: impl Into<String>, b: impl Into<String>) -> Self {
        self.endpoints = (a.into(), b.into());
        self
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let at = |v: &Option<Vec<f64>>, i: usize| v.as_ref().map(|v| v[i].to_string()).unwrap_or_default();
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "t,train_loss,train_acc,test_loss,test_acc")?;
        for (i, t) in self.t_grid.iter().enumerate() {
            writeln!(
                w,
                "{t},{},{},{},{}",
                self.train_loss[i],
                at(&self.train_acc, i),
                at(&self.test_loss, i),
                at(&self.test_acc, i)
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluates an arbitrary objective along the segment from `a` to `b`.
pub fn line_eval_with<F>(a: &[f64], b: &[f64], t_grid: &[f64], f: F) -> Result<InterpolationProfile>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
            context: "endpoint length",
        });
    }
    check_grid(t_grid)?;
    let losses = t_grid.par_iter().map(|&t| f(&interpolate(a, b, t))).collect();
    InterpolationProfile::from_losses(t_grid.to_vec(), losses)
}

pub fn line_eval(
    spec: &NetworkSpec,
    a: &ParamVector,
    b: &ParamVector,
    t_grid: &[f64],
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<InterpolationProfile> {
    a.check(spec)?;
    b.check(spec)?;
    check_grid(t_grid)?;
    let rows: Vec<(f64, Option<f64>, Option<(f64, Option<f64>)>)> = t_grid
        .par_iter()
        .map(|&t| {
            let p = ParamVector::new(spec, interpolate(a.values(), b.values(), t))?;
            let eval = |ds: &Dataset| -> Result<(f64, Option<f64>)> {
                let loss = model::loss(spec, &p, &ds.batch())?;
                let acc = ds.classes().map(|_| model::accuracy(spec, &p, ds)).transpose()?;
                Ok((loss, acc))
            };
            let (loss, acc) = eval(train)?;
            Ok((loss, acc, test.map(eval).transpose()?))
        })
        .collect::<Result<_>>()?;
    let mut profile = InterpolationProfile::from_losses(t_grid.to_vec(), rows.iter().map(|r| r.0).collect())?;
    profile.train_acc = rows.iter().map(|r| r.1).collect();
    if test.is_some() {
        profile.test_loss = Some(rows.iter().map(|r| r.2.unwrap().0).collect());
        profile.test_acc = rows.iter().map(|r| r.2.unwrap().1).collect();
    }
    Ok(profile)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierMetrics {
    /// Largest interior loss minus the larger endpoint loss.
    pub barrier_height: f64,
    pub has_barrier: bool,
    pub argmax_t: f64,
    pub max_endpoint_loss: f64,
}

/// Barrier over the interior `0 < t < 1`; a barrier exists when the height
/// exceeds `eps_rel * (1 + max endpoint loss)`.
pub fn barrier_metrics(profile: &InterpolationProfile, eps_rel: f64) -> Result<BarrierMetrics> {
    let at = |target: f64| {
        profile
            .t_grid
            .iter()
            .position(|&t| t == target)
            .map(|i| profile.train_loss[i])
            .ok_or_else(|| Error::InvalidArgument(format!("profile lacks t = {target}")))
    };
    let end = at(0.0)?.max(at(1.0)?);
    let (argmax_t, interior) = profile
        .t_grid
        .iter()
        .zip(&profile.train_loss)
        .filter(|(t, _)| **t > 0.0 && **t < 1.0)
        .fold(None, |best: Option<(f64, f64)>, (&t, &l)| match best {
            Some((_, bl)) if bl >= l => best,
            _ => Some((t, l)),
        })
        .ok_or_else(|| Error::InvalidArgument("profile has no interior points".into()))?;
    let barrier_height = interior - end;
    Ok(BarrierMetrics {
        barrier_height,
        has_barrier: barrier_height > eps_rel * (1.0 + end),
        argmax_t,
        max_endpoint_loss: end,
    })
}
