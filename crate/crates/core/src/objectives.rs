//! Self-supervised objectives with closed-form gradients.
//!
//! All losses work in `f64` on row-major embedding matrices and return both a
//! [`LossReport`] and the gradient with respect to every differentiable
//! operand, so the training loop can backpropagate through the network.

use crate::config::{ObjectiveParams, SslMethod};
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("row {0} has zero norm")]
    ZeroNorm(usize),
    #[error("operand shapes {0:?} and {1:?} differ")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("non-finite embedding entry")]
    NonFinite,
    #[error("no objective for method '{0}' with the given operands")]
    UnknownMethod(String),
}

/// `2n x d` embeddings where rows `2i` and `2i + 1` are the two views of
/// sample `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    values: Array2<f64>,
}

impl EmbeddingBatch {
    pub fn new(values: Array2<f64>) -> Result<Self, ObjectiveError> {
        let (n, d) = values.dim();
        if n % 2 != 0 {
            return Err(ObjectiveError::DegenerateBatch(format!(
                "paired batch needs an even row count, got {n}"
            )));
        }
        if d < 2 {
            return Err(ObjectiveError::DegenerateBatch(format!(
                "embedding dim must be >= 2, got {d}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ObjectiveError::NonFinite);
        }
        Ok(Self { values })
    }

    /// Interleaves two `n x d` view matrices into `[a0, b0, a1, b1, ...]`.
    pub fn interleave(a: &Array2<f64>, b: &Array2<f64>) -> Result<Self, ObjectiveError> {
        if a.dim() != b.dim() {
            return Err(ObjectiveError::ShapeMismatch(a.dim(), b.dim()));
        }
        let (n, d) = a.dim();
        let mut out = Array2::zeros((2 * n, d));
        for i in 0..n {
            out.row_mut(2 * i).assign(&a.row(i));
            out.row_mut(2 * i + 1).assign(&b.row(i));
        }
        Self::new(out)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub method: SslMethod,
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

fn report(method: SslMethod, total: f64, components: &[(&str, f64)]) -> LossReport {
    LossReport {
        method,
        total,
        components: components.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

fn row_norms(z: &Array2<f64>) -> Result<Array1<f64>, ObjectiveError> {
    let norms = z.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(ObjectiveError::ZeroNorm(i));
    }
    Ok(norms)
}

/// Backprop through row-wise L2 normalization `u = z / |z|`.
fn normalize_backward(u: &Array2<f64>, norms: &Array1<f64>, du: &Array2<f64>) -> Array2<f64> {
    let mut dz = du.clone();
    for i in 0..u.nrows() {
        let proj = u.row(i).dot(&du.row(i));
        let mut row = dz.row_mut(i);
        row.scaled_add(-proj, &u.row(i));
        row.mapv_inplace(|v| v / norms[i]);
    }
    dz
}

/// Normalized-temperature cross-entropy over an interleaved pair batch.
///
/// Each row is an anchor; its positive is its pair partner and the remaining
/// `2n - 2` rows are negatives. Self-similarity is excluded from the
/// denominator. The total is the mean of `-log p(positive)` over all rows.
/// Returns the gradient with respect to the raw (unnormalized) rows.
pub fn ntxent_loss(batch: &EmbeddingBatch, temperature: f64) -> Result<(LossReport, Array2<f64>), ObjectiveError> {
    let z = batch.values();
    let rows = z.nrows();
    if rows < 4 {
        return Err(ObjectiveError::DegenerateBatch(format!(
            "NT-Xent needs at least 4 rows (one negative), got {rows}"
        )));
    }
    if !(temperature > 0.0) {
        return Err(ObjectiveError::DegenerateBatch(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let norms = row_norms(z)?;
    let u = z / &norms.view().insert_axis(Axis(1));
    let sim = u.dot(&u.t()) / temperature;

    let mut total = 0.0;
    // dL/dsim, accumulated per anchor row.
    let mut dsim = Array2::<f64>::zeros((rows, rows));
    for i in 0..rows {
        let pos = i ^ 1;
        let max = (0..rows)
            .filter(|&k| k != i)
            .map(|k| sim[[i, k]])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..rows).filter(|&k| k != i).map(|k| (sim[[i, k]] - max).exp()).sum();
        let log_denom = max + denom.ln();
        total += log_denom - sim[[i, pos]];
        for k in 0..rows {
            if k == i {
                continue;
            }
            let p = (sim[[i, k]] - log_denom).exp();
            dsim[[i, k]] = (p - if k == pos { 1.0 } else { 0.0 }) / rows as f64;
        }
    }
    total /= rows as f64;

    // sim = U U^T / t, so dU = (dS + dS^T) U / t.
    let sym = &dsim + &dsim.t();
    let du = sym.dot(&u) / temperature;
    let dz = normalize_backward(&u, &norms, &du);
    Ok((report(SslMethod::Simclr, total, &[("ntxent", total)]), dz))
}

/// Mean over rows of `|p/|p| - z/|z||^2 = 2 - 2 cos(p, z)`.
///
/// `targets` are constants: the returned gradient is with respect to
/// `predictions` only.
pub fn byol_loss(
    predictions: &Array2<f64>,
    targets: &Array2<f64>,
) -> Result<(LossReport, Array2<f64>), ObjectiveError> {
    if predictions.dim() != targets.dim() {
        return Err(ObjectiveError::ShapeMismatch(predictions.dim(), targets.dim()));
    }
    let n = predictions.nrows();
    if n == 0 {
        return Err(ObjectiveError::DegenerateBatch("empty batch".into()));
    }
    if predictions.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
        return Err(ObjectiveError::NonFinite);
    }
    let pn = row_norms(predictions)?;
    let tn = row_norms(targets)?;
    let pu = predictions / &pn.view().insert_axis(Axis(1));
    let tu = targets / &tn.view().insert_axis(Axis(1));
    let mut total = 0.0;
    for i in 0..n {
        total += 2.0 - 2.0 * pu.row(i).dot(&tu.row(i));
    }
    total /= n as f64;
    let du = tu.mapv(|v| -2.0 * v / n as f64);
    let dp = normalize_backward(&pu, &pn, &du);
    Ok((report(SslMethod::Byol, total, &[("byol", total)]), dp))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VicregParams {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    pub gamma: f64,
    pub eps: f64,
}

impl From<&ObjectiveParams> for VicregParams {
    fn from(o: &ObjectiveParams) -> Self {
        Self {
            lambda: o.vicreg_lambda,
            mu: o.vicreg_mu,
            nu: o.vicreg_nu,
            gamma: o.vicreg_gamma,
            eps: o.variance_eps,
        }
    }
}

impl Default for VicregParams {
    fn default() -> Self {
        (&ObjectiveParams::default()).into()
    }
}

/// Variance hinge and covariance penalty of one branch, with gradients.
/// Returns `(variance, covariance, d_variance, d_covariance)`.
fn vicreg_branch(z: &Array2<f64>, gamma: f64, eps: f64) -> (f64, f64, Array2<f64>, Array2<f64>) {
    let (n, d) = z.dim();
    let mean = z.mean_axis(Axis(0)).expect("n >= 2");
    let zc = z - &mean.view().insert_axis(Axis(0));
    let denom = (n - 1) as f64;

    let var = zc.map_axis(Axis(0), |c| c.dot(&c) / denom);
    let std = var.mapv(|v| (v + eps).sqrt());
    let variance = std.iter().map(|&s| (gamma - s).max(0.0)).sum::<f64>() / d as f64;
    // d variance / d zc[:, j] = -(1/d) * [gamma > std_j] * zc[:, j] / ((n-1) std_j)
    let mut dvar = Array2::<f64>::zeros((n, d));
    for j in 0..d {
        if gamma - std[j] > 0.0 {
            let coef = -1.0 / (d as f64 * denom * std[j]);
            dvar.column_mut(j).assign(&zc.column(j).mapv(|v| coef * v));
        }
    }

    let cov = zc.t().dot(&zc) / denom;
    let mut covariance = 0.0;
    let mut g = Array2::<f64>::zeros((d, d));
    for a in 0..d {
        for b in 0..d {
            if a != b {
                covariance += cov[[a, b]] * cov[[a, b]];
                g[[a, b]] = 2.0 * cov[[a, b]] / d as f64;
            }
        }
    }
    covariance /= d as f64;
    let dcov_c = zc.dot(&(&g + &g.t())) / denom;

    // Mean removal: subtract the column mean of each gradient.
    let center = |m: Array2<f64>| {
        let mu = m.mean_axis(Axis(0)).expect("n >= 2");
        m - &mu.insert_axis(Axis(0))
    };
    (variance, covariance, center(dvar), center(dcov_c))
}

/// Invariance + variance + covariance regularized loss.
///
/// * invariance: mean squared error between `z1` and `z2` over all entries
/// * variance: per branch, mean over dims of `max(0, gamma - sqrt(var + eps))`
///   with the unbiased variance; averaged over the two branches
/// * covariance: per branch, sum of squared off-diagonal covariance entries
///   divided by `d`; averaged over the two branches
///
/// Returns gradients with respect to `z1` and `z2`.
pub fn vicreg_loss(
    z1: &Array2<f64>,
    z2: &Array2<f64>,
    params: &VicregParams,
) -> Result<(LossReport, Array2<f64>, Array2<f64>), ObjectiveError> {
    if z1.dim() != z2.dim() {
        return Err(ObjectiveError::ShapeMismatch(z1.dim(), z2.dim()));
    }
    let (n, d) = z1.dim();
    if n < 2 {
        return Err(ObjectiveError::DegenerateBatch(format!(
            "VICReg needs at least 2 rows, got {n}"
        )));
    }
    if z1.iter().chain(z2.iter()).any(|v| !v.is_finite()) {
        return Err(ObjectiveError::NonFinite);
    }
    let diff = z1 - z2;
    let invariance = diff.iter().map(|v| v * v).sum::<f64>() / (n * d) as f64;
    let dinv = diff.mapv(|v| 2.0 * v / (n * d) as f64);

    let (v1, c1, dv1, dc1) = vicreg_branch(z1, params.gamma, params.eps);
    let (v2, c2, dv2, dc2) = vicreg_branch(z2, params.gamma, params.eps);
    let variance = 0.5 * (v1 + v2);
    let covariance = 0.5 * (c1 + c2);
    let total = params.lambda * invariance + params.mu * variance + params.nu * covariance;

    let g1 = &dinv * params.lambda + &dv1 * (0.5 * params.mu) + &dc1 * (0.5 * params.nu);
    let g2 = &dinv * (-params.lambda) + &dv2 * (0.5 * params.mu) + &dc2 * (0.5 * params.nu);
    Ok((
        report(
            SslMethod::Vicreg,
            total,
            &[
                ("invariance", invariance),
                ("variance", variance),
                ("covariance", covariance),
            ],
        ),
        g1,
        g2,
    ))
}

/// Method-specific embeddings for one pretraining batch.
#[derive(Clone, Debug)]
pub enum SslOperands {
    /// Projected embeddings of both views, each `n x d`.
    Contrastive { z1: Array2<f64>, z2: Array2<f64> },
    /// Online predictions and target projections for both views.
    Predictive {
        online1: Array2<f64>,
        online2: Array2<f64>,
        target1: Array2<f64>,
        target2: Array2<f64>,
    },
}

/// Gradient of the batch loss with respect to the differentiable operands:
/// `z1`/`z2` for contrastive and regularized methods, `online1`/`online2` for
/// the predictive method.
#[derive(Clone, Debug)]
pub struct SslGrads {
    pub d1: Array2<f64>,
    pub d2: Array2<f64>,
}

/// Dispatches the batch objective for `method`.
///
/// * simclr: NT-Xent over the interleaved `[z1_0, z2_0, z1_1, ...]` batch
/// * byol: `0.5 * (byol(online1, target2) + byol(online2, target1))`
/// * vicreg: [`vicreg_loss`] on `(z1, z2)`
pub fn ssl_batch_loss(
    method: SslMethod,
    operands: &SslOperands,
    params: &ObjectiveParams,
) -> Result<(LossReport, SslGrads), ObjectiveError> {
    match (method, operands) {
        (SslMethod::Simclr, SslOperands::Contrastive { z1, z2 }) => {
            let batch = EmbeddingBatch::interleave(z1, z2)?;
            let (rep, g) = ntxent_loss(&batch, params.temperature)?;
            let n = z1.nrows();
            let mut d1 = Array2::zeros(z1.dim());
            let mut d2 = Array2::zeros(z2.dim());
            for i in 0..n {
                d1.row_mut(i).assign(&g.row(2 * i));
                d2.row_mut(i).assign(&g.row(2 * i + 1));
            }
            Ok((rep, SslGrads { d1, d2 }))
        }
        (SslMethod::Vicreg, SslOperands::Contrastive { z1, z2 }) => {
            let (rep, d1, d2) = vicreg_loss(z1, z2, &params.into())?;
            Ok((rep, SslGrads { d1, d2 }))
        }
        (
            SslMethod::Byol,
            SslOperands::Predictive {
                online1,
                online2,
                target1,
                target2,
            },
        ) => {
            let (a, ga) = byol_loss(online1, target2)?;
            let (b, gb) = byol_loss(online2, target1)?;
            let total = 0.5 * (a.total + b.total);
            Ok((
                report(SslMethod::Byol, total, &[("byol_12", a.total), ("byol_21", b.total)]),
                SslGrads {
                    d1: ga * 0.5,
                    d2: gb * 0.5,
                },
            ))
        }
        (m, _) => Err(ObjectiveError::UnknownMethod(m.as_str().to_string())),
    }
}
