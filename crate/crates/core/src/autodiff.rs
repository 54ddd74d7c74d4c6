//! Reverse-mode gradients, exact Hessian-vector products and dense Hessians.
//!
//! Hessian-vector products use the R-operator: a forward-mode sweep of the
//! directional derivative through the forward pass, followed by the
//! directional derivative of the backward pass. A [`Linearization`] caches
//! the forward and backward passes at one point so that many products
//! (one per basis vector when assembling the full Hessian) share them.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::data::{Batch, LabelsRef};
use crate::error::{Error, Result};
use crate::matrix::DenseSymmetric;
use crate::model::{self, Activation, LayerSlot, LossKind, NetworkSpec, ParamSite, ParamVector};

/// Default upper bound on M for dense Hessian assembly.
pub const DEFAULT_DENSE_CAP: usize = 8000;

/// Relative asymmetry above which an assembled Hessian is rejected.
pub const HARD_SYMMETRY_LIMIT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
    /// Digest of the batch shape and labels the gradient was taken on.
    pub batch_id: u64,
}

impl GradientVector {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn batch_digest(batch: &Batch) -> u64 {
    let mut h = Sha256::new();
    h.update((batch.inputs.nrows() as u64).to_le_bytes());
    h.update((batch.inputs.ncols() as u64).to_le_bytes());
    match batch.labels {
        LabelsRef::Classes(c) => c.iter().for_each(|&y| h.update((y as u64).to_le_bytes())),
        LabelsRef::Values(v) => v.iter().for_each(|y| h.update(y.to_le_bytes())),
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Cached forward pass: pre-activations, hidden outputs and activation derivatives.
struct Forward<'a> {
    layout: Vec<LayerSlot>,
    params: &'a [f64],
    inputs: ArrayView2<'a, f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
    d1: Vec<Array2<f64>>,
    d2: Vec<Array2<f64>>,
}

impl<'a> Forward<'a> {
    fn new(spec: &NetworkSpec, params: &'a [f64], inputs: ArrayView2<'a, f64>, second_order: bool) -> Self {
        let layout = spec.layout();
        let act = spec.activation;
        let depth = layout.len();
        let mut fwd = Forward {
            layout,
            params,
            inputs,
            pre: Vec::with_capacity(depth),
            post: Vec::with_capacity(depth - 1),
            d1: Vec::with_capacity(depth - 1),
            d2: Vec::new(),
        };
        for l in 0..depth {
            let slot = fwd.layout[l];
            let mut z = fwd.input_of(l).dot(&slot.weights(params).t());
            if let Some(b) = slot.bias(params) {
                z += &b;
            }
            if l + 1 < depth {
                fwd.d1.push(z.mapv(|v| act.derivative(v)));
                if second_order && act != Activation::Relu {
                    fwd.d2.push(z.mapv(|v| act.second_derivative(v)));
                }
                fwd.post.push(z.mapv(|v| act.apply(v)));
            }
            fwd.pre.push(z);
        }
        fwd
    }

    fn depth(&self) -> usize {
        self.layout.len()
    }

    /// Input to weight layer `l`.
    fn input_of(&self, l: usize) -> ArrayView2<'_, f64> {
        if l == 0 {
            self.inputs.view()
        } else {
            self.post[l - 1].view()
        }
    }

    fn logits(&self) -> &Array2<f64> {
        self.pre.last().unwrap()
    }
}

/// Per-example Hessian of the loss with respect to the pre-head outputs.
enum OutputCurvature {
    Identity,
    Softmax(Array2<f64>),
    Logistic(Array1<f64>),
}

impl OutputCurvature {
    /// Applies each example's output Hessian to the matching row of `r`, scaled by `scale`.
    fn apply(&self, r: &Array2<f64>, scale: f64) -> Array2<f64> {
        match self {
            OutputCurvature::Identity => r * scale,
            OutputCurvature::Logistic(c) => {
                let mut out = r.clone();
                Zip::from(out.rows_mut()).and(c).for_each(|mut row, &c| row *= c * scale);
                out
            }
            OutputCurvature::Softmax(p) => {
                let mut out = Array2::zeros(r.dim());
                Zip::from(out.rows_mut())
                    .and(r.rows())
                    .and(p.rows())
                    .for_each(|mut o, r, p| {
                        let pr = p.dot(&r);
                        Zip::from(&mut o).and(&p).and(&r).for_each(|o, &p, &r| *o = scale * p * (r - pr));
                    });
                out
            }
        }
    }
}

/// Direction of a Hessian-vector product.
#[derive(Debug, Clone, Copy)]
pub enum Direction<'v> {
    Dense(&'v [f64]),
    /// The `j`-th standard basis vector.
    Basis(usize),
}

/// Forward and backward passes of the mean loss at one point, ready for
/// gradient and Hessian-vector product queries.
pub struct Linearization<'a> {
    fwd: Forward<'a>,
    activation: Activation,
    delta: Vec<Array2<f64>>,
    upstream: Vec<Array2<f64>>,
    curvature: OutputCurvature,
    n: usize,
    m: usize,
    loss: f64,
}

impl<'a> Linearization<'a> {
    pub fn new<'b: 'a>(spec: &NetworkSpec, params: &'a ParamVector, batch: &Batch<'b>) -> Result<Self> {
        Self::build(spec, params, batch, true)
    }

    fn build<'b: 'a>(
        spec: &NetworkSpec,
        params: &'a ParamVector,
        batch: &Batch<'b>,
        second_order: bool,
    ) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        params.check(spec)?;
        if batch.inputs.ncols() != spec.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.input_dim(),
                actual: batch.inputs.ncols(),
                context: "input dimension",
            });
        }
        model::check_labels(spec, batch)?;
        let fwd = Forward::new(spec, params.values(), batch.inputs, second_order);
        let n = batch.len();
        let (loss, out_delta, curvature) = output_terms(spec.loss_kind, fwd.logits(), batch, n);
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let depth = fwd.depth();
        let mut delta = vec![Array2::zeros((0, 0)); depth];
        let mut upstream = vec![Array2::zeros((0, 0)); depth - 1];
        delta[depth - 1] = out_delta;
        for l in (1..depth).rev() {
            let g = delta[l].dot(&fwd.layout[l].weights(fwd.params));
            delta[l - 1] = &g * &fwd.d1[l - 1];
            upstream[l - 1] = g;
        }
        Ok(Linearization {
            fwd,
            activation: spec.activation,
            delta,
            upstream,
            curvature,
            n,
            m: spec.count_params(),
            loss,
        })
    }

    pub fn loss(&self) -> f64 {
        self.loss
    }

    pub fn order(&self) -> usize {
        self.m
    }

    pub fn gradient(&self) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.m];
        for (l, slot) in self.fwd.layout.iter().enumerate() {
            let mut gw = weight_block(&mut out, slot);
            general_mat_mul(1.0, &self.delta[l].t(), &self.fwd.input_of(l), 0.0, &mut gw);
            if let Some(b) = slot.bias {
                let gb = self.delta[l].sum_axis(Axis(0));
                out[b..b + slot.fan_out].copy_from_slice(gb.as_slice().unwrap());
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        Ok(out)
    }

    /// Writes `H d` into `out`.
    pub fn hvp_into(&self, dir: Direction, out: &mut [f64]) {
        assert_eq!(out.len(), self.m, "output length must equal M");
        out.iter_mut().for_each(|v| *v = 0.0);
        let fwd = &self.fwd;
        let depth = fwd.depth();
        let basis = match dir {
            Direction::Basis(j) => Some(locate(&fwd.layout, j)),
            Direction::Dense(v) => {
                assert_eq!(v.len(), self.m, "direction length must equal M");
                None
            }
        };

        // forward sweep of R{z_l} and R{h_l}
        let mut rz: Vec<Option<Array2<f64>>> = Vec::with_capacity(depth);
        let mut rh: Vec<Option<Array2<f64>>> = Vec::with_capacity(depth - 1);
        for l in 0..depth {
            let slot = fwd.layout[l];
            let mut acc: Option<Array2<f64>> = if l > 0 {
                rh[l - 1]
                    .as_ref()
                    .map(|r: &Array2<f64>| r.dot(&slot.weights(fwd.params).t()))
            } else {
                None
            };
            match dir {
                Direction::Dense(v) => {
                    let vw = slot.weights(v);
                    if vw.iter().any(|&x| x != 0.0) {
                        let t = fwd.input_of(l).dot(&vw.t());
                        acc = Some(match acc {
                            Some(a) => a + t,
                            None => t,
                        });
                    }
                    if let Some(vb) = slot.bias(v) {
                        if vb.iter().any(|&x| x != 0.0) {
                            let a = acc.get_or_insert_with(|| Array2::zeros((self.n, slot.fan_out)));
                            *a += &vb;
                        }
                    }
                }
                Direction::Basis(_) => {
                    let (layer, site) = basis.unwrap();
                    if layer == l {
                        let a = acc.get_or_insert_with(|| Array2::zeros((self.n, slot.fan_out)));
                        match site {
                            ParamSite::Weight { row, col } => {
                                let mut target = a.column_mut(row);
                                target += &fwd.input_of(l).column(col);
                            }
                            ParamSite::Bias { row } => a.column_mut(row).map_inplace(|x| *x += 1.0),
                        }
                    }
                }
            }
            if l + 1 < depth {
                rh.push(acc.as_ref().map(|a| a * &fwd.d1[l]));
            }
            rz.push(acc);
        }

        // backward sweep of R{delta_l}
        let mut rdelta = rz[depth - 1]
            .as_ref()
            .map(|r| self.curvature.apply(r, 1.0 / self.n as f64));
        for l in (0..depth).rev() {
            let slot = fwd.layout[l];
            {
                let mut gw = weight_block(out, &slot);
                if let Some(rd) = &rdelta {
                    general_mat_mul(1.0, &rd.t(), &fwd.input_of(l), 0.0, &mut gw);
                }
                if l > 0 {
                    if let Some(rhp) = &rh[l - 1] {
                        general_mat_mul(1.0, &self.delta[l].t(), rhp, 1.0, &mut gw);
                    }
                }
            }
            if let (Some(b), Some(rd)) = (slot.bias, &rdelta) {
                let gb = rd.sum_axis(Axis(0));
                out[b..b + slot.fan_out].copy_from_slice(gb.as_slice().unwrap());
            }
            if l == 0 {
                break;
            }
            let mut rg = rdelta.as_ref().map(|rd| rd.dot(&slot.weights(fwd.params)));
            match dir {
                Direction::Dense(v) => {
                    let vw = slot.weights(v);
                    if vw.iter().any(|&x| x != 0.0) {
                        let t = self.delta[l].dot(&vw);
                        rg = Some(match rg {
                            Some(a) => a + t,
                            None => t,
                        });
                    }
                }
                Direction::Basis(_) => {
                    if let (layer, ParamSite::Weight { row, col }) = basis.unwrap() {
                        if layer == l {
                            let a = rg.get_or_insert_with(|| Array2::zeros((self.n, slot.fan_in)));
                            let mut target = a.column_mut(col);
                            target += &self.delta[l].column(row);
                        }
                    }
                }
            }
            let mut next = rg.map(|g| g * &fwd.d1[l - 1]);
            if self.activation != Activation::Relu {
                if let Some(rzp) = &rz[l - 1] {
                    let mut t = rzp * &fwd.d2[l - 1];
                    t *= &self.upstream[l - 1];
                    next = Some(match next {
                        Some(a) => a + t,
                        None => t,
                    });
                }
            }
            rdelta = next;
        }
    }

    pub fn hvp(&self, dir: Direction) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        self.hvp_into(dir, &mut out);
        out
    }

    /// Assembles the Hessian one basis direction at a time.
    ///
    /// Each product is written to its own row and is independent of every
    /// other, so the result is identical for any number of worker threads.
    pub fn full_hessian(&self) -> Result<DenseSymmetric> {
        let m = self.m;
        let mut raw = Array2::<f64>::zeros((m, m));
        raw.as_slice_mut()
            .unwrap()
            .par_chunks_mut(m)
            .enumerate()
            .for_each(|(j, row)| self.hvp_into(Direction::Basis(j), row));
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Hessian"));
        }
        let h = DenseSymmetric::from_square(raw)?;
        if h.asymmetry() > HARD_SYMMETRY_LIMIT * (1.0 + h.max_abs()) {
            return Err(Error::SymmetryDefect {
                defect: h.asymmetry(),
            });
        }
        Ok(h)
    }
}

fn weight_block<'o>(out: &'o mut [f64], slot: &LayerSlot) -> ArrayViewMut2<'o, f64> {
    ArrayViewMut2::from_shape(
        (slot.fan_out, slot.fan_in),
        &mut out[slot.weight..slot.weight + slot.weight_len()],
    )
    .unwrap()
}

fn locate(layout: &[LayerSlot], j: usize) -> (usize, ParamSite) {
    layout
        .iter()
        .enumerate()
        .find_map(|(l, s)| s.locate(j).map(|site| (l, site)))
        .unwrap_or_else(|| panic!("basis index {j} out of range"))
}

/// Mean loss, `dL/dz` at the output layer and the per-example output curvature.
fn output_terms(kind: LossKind, logits: &Array2<f64>, batch: &Batch, n: usize) -> (f64, Array2<f64>, OutputCurvature) {
    let scale = 1.0 / n as f64;
    let k = logits.ncols();
    let mut delta = Array2::zeros(logits.dim());
    let mut total = 0.0;
    match kind {
        LossKind::Mse => {
            for i in 0..n {
                let z = logits.row(i);
                let t = batch.target(i);
                total += model::example_loss(kind, z, t);
                for j in 0..k {
                    let y = match t {
                        model::Target::Class(c) => f64::from(u8::from(c == j)),
                        model::Target::Values(v) => v[j],
                    };
                    delta[[i, j]] = (z[j] - y) * scale;
                }
            }
            (total * scale, delta, OutputCurvature::Identity)
        }
        LossKind::SoftmaxNll => {
            let mut probs = Array2::zeros(logits.dim());
            for i in 0..n {
                let z = logits.row(i);
                let t = batch.target(i);
                total += model::example_loss(kind, z, t);
                let mut p = probs.row_mut(i);
                model::softmax_into(z, p.as_slice_mut().unwrap());
                for j in 0..k {
                    let y = match t {
                        model::Target::Class(c) => f64::from(u8::from(c == j)),
                        model::Target::Values(v) => v[j],
                    };
                    delta[[i, j]] = (p[j] - y) * scale;
                }
            }
            (total * scale, delta, OutputCurvature::Softmax(probs))
        }
        LossKind::LogisticNll => {
            let mut curv = Array1::zeros(n);
            for i in 0..n {
                let z = logits.row(i);
                let t = batch.target(i);
                total += model::example_loss(kind, z, t);
                let s = model::sigmoid(z[0]);
                let y = match t {
                    model::Target::Class(c) => c as f64,
                    model::Target::Values(v) => v[0],
                };
                delta[[i, 0]] = (s - y) * scale;
                curv[i] = s * (1.0 - s);
            }
            (total * scale, delta, OutputCurvature::Logistic(curv))
        }
    }
}

/// Gradient of the mean batch loss.
pub fn gradient(spec: &NetworkSpec, params: &ParamVector, batch: &Batch) -> Result<GradientVector> {
    let lin = Linearization::build(spec, params, batch, false)?;
    Ok(GradientVector {
        values: lin.gradient()?,
        batch_id: batch_digest(batch),
    })
}

/// Mean batch loss together with its gradient.
pub fn loss_and_gradient(spec: &NetworkSpec, params: &ParamVector, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let lin = Linearization::build(spec, params, batch, false)?;
    Ok((lin.loss(), lin.gradient()?))
}

/// Exact `H v` for the mean batch loss.
pub fn hvp(spec: &NetworkSpec, params: &ParamVector, batch: &Batch, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != spec.count_params() {
        return Err(Error::DimensionMismatch {
            expected: spec.count_params(),
            actual: v.len(),
            context: "direction length",
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("direction"));
    }
    let lin = Linearization::new(spec, params, batch)?;
    let out = lin.hvp(Direction::Dense(v));
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("Hessian-vector product"));
    }
    Ok(out)
}

/// Dense Hessian of the mean batch loss, refusing orders above `cap`.
pub fn full_hessian_capped(spec: &NetworkSpec, params: &ParamVector, batch: &Batch, cap: usize) -> Result<DenseSymmetric> {
    let m = spec.count_params();
    if m > cap {
        return Err(Error::CapExceeded { order: m, cap });
    }
    Linearization::new(spec, params, batch)?.full_hessian()
}

pub fn full_hessian(spec: &NetworkSpec, params: &ParamVector, batch: &Batch) -> Result<DenseSymmetric> {
    full_hessian_capped(spec, params, batch, DEFAULT_DENSE_CAP)
}

/// Gradients of every pre-head output on every example, one row per
/// (example, output) pair: row `i * k + c` is the gradient of output `c`
/// on example `i`.
pub fn output_jacobian_rows(spec: &NetworkSpec, params: &ParamVector, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
    params.check(spec)?;
    if inputs.ncols() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim(),
            actual: inputs.ncols(),
            context: "input dimension",
        });
    }
    if inputs.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let fwd = Forward::new(spec, params.values(), inputs, false);
    let n = inputs.nrows();
    let k = spec.output_dim();
    let depth = fwd.depth();
    let mut rows = Array2::zeros((n * k, spec.count_params()));
    for c in 0..k {
        let mut delta = Array2::zeros((n, k));
        delta.column_mut(c).fill(1.0);
        for l in (0..depth).rev() {
            let slot = fwd.layout[l];
            let input = fwd.input_of(l);
            for i in 0..n {
                let mut row = rows.row_mut(i * k + c);
                let d = delta.row(i);
                let x = input.row(i);
                for r in 0..slot.fan_out {
                    let dr = d[r];
                    if dr == 0.0 {
                        continue;
                    }
                    let base = slot.weight + r * slot.fan_in;
                    for s in 0..slot.fan_in {
                        row[base + s] = dr * x[s];
                    }
                }
                if let Some(b) = slot.bias {
                    for r in 0..slot.fan_out {
                        row[b + r] = d[r];
                    }
                }
            }
            if l > 0 {
                delta = delta.dot(&slot.weights(fwd.params)) * &fwd.d1[l - 1];
            }
        }
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("output Jacobian"));
    }
    Ok(rows)
}

/// `M x (N k)` matrix whose column `(i, c)` (index `i * k + c`) is the
/// gradient of pre-head output `c` on example `i`.
pub fn per_example_output_grads(spec: &NetworkSpec, params: &ParamVector, batch: &Batch) -> Result<Array2<f64>> {
    Ok(output_jacobian_rows(spec, params, batch.inputs)?.reversed_axes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Labels};
    use crate::model::{Activation, LossKind};
    use crate::testutil::{random_dataset, random_params};
    use ndarray::array;
    use proptest::prelude::*;

    fn smooth_specs() -> Vec<NetworkSpec> {
        vec![
            NetworkSpec::new(&[3, 4, 2], Activation::Tanh, LossKind::Mse).unwrap(),
            NetworkSpec::new(&[3, 5, 4, 3], Activation::Tanh, LossKind::SoftmaxNll).unwrap(),
            NetworkSpec::new(&[4, 3, 1], Activation::Sigmoid, LossKind::LogisticNll).unwrap(),
            NetworkSpec::new(&[2, 3, 3, 2], Activation::Sigmoid, LossKind::SoftmaxNll)
                .unwrap()
                .without_biases(),
        ]
    }

    fn shifted(p: &ParamVector, spec: &NetworkSpec, v: &[f64], eps: f64) -> ParamVector {
        let values = p.values().iter().zip(v).map(|(a, b)| a + eps * b).collect();
        ParamVector::new(spec, values).unwrap()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        diff / scale.max(1e-12)
    }

    #[test]
    fn single_weight_gradient() {
        let spec = NetworkSpec::new(&[1, 1], Activation::Tanh, LossKind::Mse).unwrap().without_biases();
        let ds = Dataset::custom(array![[1.0]], Labels::Values(array![[1.0]]), 1).unwrap();
        let g = gradient(&spec, &ParamVector::zeros(&spec), &ds.batch()).unwrap();
        assert_eq!(g.values, vec![-1.0]);
    }

    #[test]
    fn gradient_vanishes_at_exact_fit() {
        let spec = NetworkSpec::new(&[2, 1], Activation::Tanh, LossKind::Mse).unwrap();
        let x = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let y = x.dot(&array![[2.0], [-1.0]]) + 0.5;
        let ds = Dataset::custom(x, Labels::Values(y), 1).unwrap();
        let p = ParamVector::new(&spec, vec![2.0, -1.0, 0.5]).unwrap();
        let g = gradient(&spec, &p, &ds.batch()).unwrap();
        assert!(g.values.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn gradient_matches_central_differences() {
        for (s, spec) in smooth_specs().iter().enumerate() {
            let ds = random_dataset(spec, 7, s as u64);
            let p = random_params(spec, 1.0, 10 + s as u64);
            let g = gradient(spec, &p, &ds.batch()).unwrap().values;
            let eps = 1e-5;
            let fd: Vec<f64> = (0..spec.count_params())
                .map(|j| {
                    let mut e = vec![0.0; spec.count_params()];
                    e[j] = 1.0;
                    let up = model::loss(spec, &shifted(&p, spec, &e, eps), &ds.batch()).unwrap();
                    let dn = model::loss(spec, &shifted(&p, spec, &e, -eps), &ds.batch()).unwrap();
                    (up - dn) / (2.0 * eps)
                })
                .collect();
            assert!(rel_err(&g, &fd) <= 1e-4, "spec {s}: {}", rel_err(&g, &fd));
        }
    }

    #[test]
    fn gradient_of_mean_is_mean_of_gradients() {
        let spec = &smooth_specs()[1];
        let ds = random_dataset(spec, 9, 4);
        let p = random_params(spec, 1.0, 5);
        let full = gradient(spec, &p, &ds.batch()).unwrap().values;
        let mut mean = vec![0.0; full.len()];
        for i in 0..ds.len() {
            let gi = gradient(spec, &p, &ds.batch().slice(i, i + 1)).unwrap().values;
            mean.iter_mut().zip(&gi).for_each(|(m, g)| *m += g / ds.len() as f64);
        }
        assert!(full.iter().zip(&mean).all(|(a, b)| (a - b).abs() <= 1e-12));
    }

    #[test]
    fn linear_model_output_gradient_is_the_input() {
        let spec = NetworkSpec::new(&[3, 1], Activation::Tanh, LossKind::Mse).unwrap();
        let ds = random_dataset(&spec, 4, 1);
        let p = random_params(&spec, 1.0, 2);
        let j = per_example_output_grads(&spec, &p, &ds.batch()).unwrap();
        assert_eq!(j.dim(), (4, 4));
        for i in 0..4 {
            for c in 0..3 {
                assert_eq!(j[[c, i]], ds.inputs[[i, c]]);
            }
            assert_eq!(j[[3, i]], 1.0);
        }
    }

    #[test]
    fn zero_input_touches_only_first_layer_biases() {
        let spec = NetworkSpec::new(&[3, 2], Activation::Tanh, LossKind::SoftmaxNll).unwrap();
        let p = random_params(&spec, 1.0, 3);
        let ds = Dataset::custom(Array2::zeros((1, 3)), Labels::Classes(vec![0]), 2).unwrap();
        let j = per_example_output_grads(&spec, &p, &ds.batch()).unwrap();
        for c in 0..2 {
            let col = j.column(c);
            assert!(col.iter().take(6).all(|&v| v == 0.0));
            for r in 0..2 {
                assert_eq!(col[6 + r], f64::from(u8::from(r == c)));
            }
        }
    }

    #[test]
    fn output_gradients_match_finite_differences() {
        let spec = NetworkSpec::new(&[3, 4, 3], Activation::Tanh, LossKind::SoftmaxNll).unwrap();
        let ds = random_dataset(&spec, 3, 8);
        let p = random_params(&spec, 1.0, 9);
        let j = per_example_output_grads(&spec, &p, &ds.batch()).unwrap();
        let m = spec.count_params();
        let eps = 1e-5;
        for col in 0..9 {
            let (i, c) = (col / 3, col % 3);
            let x = ds.inputs.slice(ndarray::s![i..i + 1, ..]);
            let fd: Vec<f64> = (0..m)
                .map(|q| {
                    let mut e = vec![0.0; m];
                    e[q] = 1.0;
                    let up = model::logits(&spec, shifted(&p, &spec, &e, eps).values(), x)[[0, c]];
                    let dn = model::logits(&spec, shifted(&p, &spec, &e, -eps).values(), x)[[0, c]];
                    (up - dn) / (2.0 * eps)
                })
                .collect();
            assert!(rel_err(&j.column(col).to_vec(), &fd) <= 1e-4);
        }
    }

    #[test]
    fn hvp_of_zero_is_zero() {
        let spec = &smooth_specs()[0];
        let ds = random_dataset(spec, 5, 1);
        let p = random_params(spec, 1.0, 1);
        let out = hvp(spec, &p, &ds.batch(), &vec![0.0; spec.count_params()]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hvp_matches_gradient_differences_on_twenty_pairs() {
        let specs = smooth_specs();
        for trial in 0..20u64 {
            let spec = &specs[trial as usize % specs.len()];
            let ds = random_dataset(spec, 6, 100 + trial);
            let p = random_params(spec, 1.0, 200 + trial);
            let v = random_params(spec, 1.0, 300 + trial).into_values();
            let hv = hvp(spec, &p, &ds.batch(), &v).unwrap();
            let eps = 1e-5;
            let gp = gradient(spec, &shifted(&p, spec, &v, eps), &ds.batch()).unwrap().values;
            let gm = gradient(spec, &shifted(&p, spec, &v, -eps), &ds.batch()).unwrap().values;
            let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
            assert!(rel_err(&hv, &fd) <= 1e-4, "trial {trial}: {}", rel_err(&hv, &fd));
        }
    }

    #[test]
    fn linear_regression_hessian_is_input_gram() {
        let spec = NetworkSpec::new(&[3, 1], Activation::Tanh, LossKind::Mse).unwrap();
        let ds = random_dataset(&spec, 11, 2);
        let p = random_params(&spec, 1.0, 3);
        let h = full_hessian(&spec, &p, &ds.batch()).unwrap();
        let mut aug = Array2::ones((11, 4));
        aug.slice_mut(ndarray::s![.., ..3]).assign(&ds.inputs);
        let oracle = aug.t().dot(&aug) / 11.0;
        for i in 0..4 {
            for j in 0..4 {
                assert!((h.get(i, j) - oracle[[i, j]]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn inactive_relu_neuron_has_zero_hessian() {
        let spec = NetworkSpec::new(&[2, 1, 1], Activation::Relu, LossKind::Mse).unwrap();
        let p = ParamVector::new(&spec, vec![1.0, 1.0, -10.0, 0.7, 0.2]).unwrap();
        let x = array![[0.5, 1.0], [-1.0, 2.0], [3.0, 1.0]];
        let ds = Dataset::custom(x, Labels::Values(array![[1.0], [0.0], [2.0]]), 1).unwrap();
        let h = full_hessian(&spec, &p, &ds.batch()).unwrap();
        // only the output bias sees curvature
        for i in 0..5 {
            for j in 0..5 {
                let expected = if i == 4 && j == 4 { 1.0 } else { 0.0 };
                assert_eq!(h.get(i, j), expected);
            }
        }
    }

    #[test]
    fn tanh_hessian_is_nearly_symmetric_before_averaging() {
        let spec = NetworkSpec::new(&[4, 6, 5, 3], Activation::Tanh, LossKind::SoftmaxNll).unwrap();
        let ds = random_dataset(&spec, 20, 6);
        let p = random_params(&spec, 1.0, 7);
        let h = full_hessian(&spec, &p, &ds.batch()).unwrap();
        assert!(h.asymmetry() <= 1e-8 * (1.0 + h.max_abs()));
    }

    #[test]
    fn dense_hessian_agrees_with_products() {
        let mut specs = smooth_specs();
        specs.push(NetworkSpec::new(&[3, 5, 4, 2], Activation::Relu, LossKind::SoftmaxNll).unwrap());
        for (s, spec) in specs.iter().enumerate() {
            let ds = random_dataset(spec, 8, 40 + s as u64);
            let p = random_params(spec, 1.0, 50 + s as u64);
            let h = full_hessian(spec, &p, &ds.batch()).unwrap();
            for t in 0..3 {
                let v = random_params(spec, 1.0, 60 + t).into_values();
                let hv = hvp(spec, &p, &ds.batch(), &v).unwrap();
                assert!(rel_err(&h.matvec(&v), &hv) <= 1e-9);
            }
        }
    }

    #[test]
    fn assembly_is_identical_across_thread_counts() {
        let spec = NetworkSpec::new(&[4, 6, 3], Activation::Sigmoid, LossKind::SoftmaxNll).unwrap();
        let ds = random_dataset(&spec, 15, 3);
        let p = random_params(&spec, 1.0, 4);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| full_hessian(&spec, &p, &ds.batch()).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert!(a.view().iter().zip(b.view().iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn cap_is_enforced() {
        let spec = NetworkSpec::new(&[3, 4, 2], Activation::Tanh, LossKind::Mse).unwrap();
        let ds = random_dataset(&spec, 2, 0);
        let p = random_params(&spec, 1.0, 0);
        let err = full_hessian_capped(&spec, &p, &ds.batch(), 10).unwrap_err();
        assert!(matches!(err, Error::CapExceeded { order: 26, cap: 10 }));
    }

    proptest! {
        #[test]
        fn hvp_is_linear(seed in 0u64..500, a in -3.0f64..3.0) {
            let spec = NetworkSpec::new(&[3, 4, 3], Activation::Tanh, LossKind::SoftmaxNll).unwrap();
            let ds = random_dataset(&spec, 5, seed);
            let p = random_params(&spec, 1.0, seed + 1);
            let v1 = random_params(&spec, 1.0, seed + 2).into_values();
            let v2 = random_params(&spec, 1.0, seed + 3).into_values();
            let combo: Vec<f64> = v1.iter().zip(&v2).map(|(x, y)| a * x + y).collect();
            let h1 = hvp(&spec, &p, &ds.batch(), &v1).unwrap();
            let h2 = hvp(&spec, &p, &ds.batch(), &v2).unwrap();
            let hc = hvp(&spec, &p, &ds.batch(), &combo).unwrap();
            let expected: Vec<f64> = h1.iter().zip(&h2).map(|(x, y)| a * x + y).collect();
            prop_assert!(rel_err(&hc, &expected) <= 1e-10);
        }

        #[test]
        fn basis_products_match_dense_products(seed in 0u64..500) {
            let spec = NetworkSpec::new(&[2, 3, 3, 2], Activation::Sigmoid, LossKind::Mse).unwrap();
            let ds = random_dataset(&spec, 4, seed);
            let p = random_params(&spec, 1.0, seed + 7);
            let lin = Linearization::new(&spec, &p, &ds.batch()).unwrap();
            for j in 0..spec.count_params() {
                let mut e = vec![0.0; spec.count_params()];
                e[j] = 1.0;
                let dense = lin.hvp(Direction::Dense(&e));
                let basis = lin.hvp(Direction::Basis(j));
                prop_assert!(rel_err(&basis, &dense) <= 1e-12);
            }
        }
    }
}
