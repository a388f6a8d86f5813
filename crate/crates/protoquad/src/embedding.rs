//! Gradient embeddings of a binary logistic model.
//!
//! Each example is mapped to the gradient of its Bernoulli log-likelihood at
//! the fitted parameters. Those rows are the feature map every kernel in this
//! crate is built on; the module also estimates the (ridged) information
//! matrix that turns plain dot products into metric-weighted ones.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm_inf, Cholesky, Matrix};
use crate::num::Real;

/// Labeled binary dataset. Labels are {0, 1}; features are dense.
#[derive(Debug, Clone)]
pub struct Dataset<R> {
    features: Matrix<R>,
    labels: Vec<u8>,
    ids: Vec<String>,
}

impl<R: Real> Dataset<R> {
    pub fn new(features: Matrix<R>, labels: Vec<u8>, ids: Vec<String>) -> Result<Self> {
        let n = features.nrows();
        let d = features.ncols();
        if n == 0 || d == 0 {
            return Err(Error::invalid(format!(
                "dataset must have at least one row and one feature (got {n} x {d})"
            )));
        }
        if labels.len() != n {
            return Err(Error::dims(format!(
                "{} labels for {} rows",
                labels.len(),
                n
            )));
        }
        if ids.len() != n {
            return Err(Error::dims(format!("{} ids for {} rows", ids.len(), n)));
        }
        if !features.all_finite() {
            return Err(Error::invalid("features contain NaN or infinite entries"));
        }
        if let Some(i) = labels.iter().position(|&y| y > 1) {
            return Err(Error::invalid(format!(
                "label at row {i} is {}; labels must be 0 or 1",
                labels[i]
            )));
        }
        Ok(Dataset {
            features,
            labels,
            ids,
        })
    }

    /// Convenience constructor with row-number ids.
    pub fn from_parts(features: Matrix<R>, labels: Vec<u8>) -> Result<Self> {
        let ids = (0..features.nrows()).map(|i| i.to_string()).collect();
        Dataset::new(features, labels, ids)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Matrix<R> {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn set_label(&mut self, row: usize, label: u8) {
        assert!(label <= 1, "labels must be 0 or 1");
        self.labels[row] = label;
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset<R> {
        let features =
            Matrix::from_fn(rows.len(), self.dim(), |i, j| self.features.get(rows[i], j));
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        let ids = rows.iter().map(|&r| self.ids[r].clone()).collect();
        Dataset {
            features,
            labels,
            ids,
        }
    }

    /// Concatenate two datasets with the same feature dimension.
    pub fn concat(&self, other: &Dataset<R>) -> Result<Dataset<R>> {
        if self.dim() != other.dim() {
            return Err(Error::dims(format!(
                "cannot concat dims {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        let n = self.len() + other.len();
        let features = Matrix::from_fn(n, self.dim(), |i, j| {
            if i < self.len() {
                self.features.get(i, j)
            } else {
                other.features.get(i - self.len(), j)
            }
        });
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        Dataset::new(features, labels, ids)
    }
}

/// Fitted parameter vector; length is `d`, or `d + 1` when the trailing
/// coordinate is an intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector<R> {
    values: Vec<R>,
}

impl<R: Real> ParamVector<R> {
    pub fn new(values: Vec<R>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameter vector has non-finite entries"));
        }
        Ok(ParamVector { values })
    }

    pub fn zeros(p: usize) -> Self {
        ParamVector {
            values: vec![R::zero(); p],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[R] {
        &self.values
    }
}

/// Per-example log-likelihood gradients; row `i` is the embedding of
/// example `i`.
#[derive(Debug, Clone)]
pub struct GradientMatrix<R> {
    rows: Matrix<R>,
}

impl<R: Real> GradientMatrix<R> {
    pub fn new(rows: Matrix<R>) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(Error::invalid("gradient matrix must be nonempty"));
        }
        if !rows.all_finite() {
            return Err(Error::invalid("gradient matrix has non-finite entries"));
        }
        Ok(GradientMatrix { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn param_dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, i: usize) -> &[R] {
        self.rows.row(i)
    }

    pub fn matrix(&self) -> &Matrix<R> {
        &self.rows
    }

    pub fn subset_rows(&self, rows: &[usize]) -> GradientMatrix<R> {
        GradientMatrix {
            rows: Matrix::from_fn(rows.len(), self.param_dim(), |i, j| {
                self.rows.get(rows[i], j)
            }),
        }
    }
}

/// How kernel evaluations apply the information matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricMode {
    /// Metric-weighted inner products through the estimated information
    /// matrix.
    Full,
    /// Identity metric: plain dot products of gradient rows.
    Practical,
}

impl std::fmt::Display for MetricMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricMode::Full => write!(f, "full"),
            MetricMode::Practical => write!(f, "practical"),
        }
    }
}

/// Estimated information matrix with a relative ridge, factored once.
#[derive(Debug, Clone)]
pub struct FisherMetric<R> {
    info: Matrix<R>,
    ridge: R,
    mode: MetricMode,
    chol: Option<Cholesky<R>>,
}

impl<R: Real> FisherMetric<R> {
    /// Identity metric of the given parameter dimension.
    pub fn practical(param_dim: usize) -> Self {
        FisherMetric {
            info: Matrix::identity(param_dim),
            ridge: R::zero(),
            mode: MetricMode::Practical,
            chol: None,
        }
    }

    pub fn info(&self) -> &Matrix<R> {
        &self.info
    }

    pub fn ridge(&self) -> R {
        self.ridge
    }

    pub fn mode(&self) -> MetricMode {
        self.mode
    }

    pub fn param_dim(&self) -> usize {
        self.info.nrows()
    }

    /// Half-solve `L w = f` against the factored metric. With the practical
    /// metric this is the identity, so kernel values reduce to dot products.
    pub fn whiten(&self, f: &[R]) -> Vec<R> {
        match (&self.mode, &self.chol) {
            (MetricMode::Practical, _) => f.to_vec(),
            (MetricMode::Full, Some(chol)) => chol.forward(f),
            (MetricMode::Full, None) => unreachable!("full metric is always factored"),
        }
    }

    /// Full solve `info * u = f`.
    pub fn solve(&self, f: &[R]) -> Vec<R> {
        match (&self.mode, &self.chol) {
            (MetricMode::Practical, _) => f.to_vec(),
            (MetricMode::Full, Some(chol)) => chol.solve(f),
            (MetricMode::Full, None) => unreachable!("full metric is always factored"),
        }
    }
}

/// Empirical information matrix (mean outer product of gradient rows) plus a
/// relative ridge `ridge_coeff * trace/p * I`, factored for later solves.
pub fn estimate_fisher_info<R: Real>(
    grads: &GradientMatrix<R>,
    ridge_coeff: R,
) -> Result<FisherMetric<R>> {
    if ridge_coeff < R::zero() {
        return Err(Error::invalid("ridge coefficient must be nonnegative"));
    }
    let n = grads.len();
    let p = grads.param_dim();
    let mut base = Matrix::zeros(p, p);
    for i in 0..n {
        let f = grads.row(i);
        for a in 0..p {
            if f[a] == R::zero() {
                continue;
            }
            for b in a..p {
                let v = base.get(a, b) + f[a] * f[b];
                base.set(a, b, v);
            }
        }
    }
    let inv_n = R::one() / R::of(n as f64);
    for a in 0..p {
        for b in a..p {
            let v = base.get(a, b) * inv_n;
            base.set(a, b, v);
            base.set(b, a, v);
        }
    }
    let scale = base.trace() / R::of(p as f64);
    let info = base.plus_scaled_identity(ridge_coeff * scale);
    let chol = Cholesky::factor(&info).map_err(|e| {
        Error::SingularMetric(format!(
            "information matrix is not positive definite ({e}); \
             increase the ridge or check the gradients"
        ))
    })?;
    Ok(FisherMetric {
        info,
        ridge: ridge_coeff,
        mode: MetricMode::Full,
        chol: Some(chol),
    })
}

#[inline]
fn sigmoid<R: Real>(m: R) -> R {
    if m >= R::zero() {
        R::one() / (R::one() + (-m).exp())
    } else {
        let e = m.exp();
        e / (R::one() + e)
    }
}

#[inline]
fn softplus<R: Real>(m: R) -> R {
    m.max(R::zero()) + (-m.abs()).exp().ln_1p()
}

fn margin<R: Real>(params: &[R], x: &[R], intercept: bool) -> R {
    let d = x.len();
    let mut m = dot(&params[..d], x);
    if intercept {
        m = m + params[d];
    }
    m
}

fn check_param_dim<R: Real>(params: &ParamVector<R>, data: &Dataset<R>) -> Result<bool> {
    let p = params.len();
    let d = data.dim();
    if p == d {
        Ok(false)
    } else if p == d + 1 {
        Ok(true)
    } else {
        Err(Error::dims(format!(
            "parameter length {p} does not match feature dim {d} (or {} with intercept)",
            d + 1
        )))
    }
}

/// Per-example Bernoulli log-likelihood gradients `(y - sigma) * x` at the
/// given parameters, with the intercept coordinate appended when the
/// parameter length says one is present. Rows are independent and computed
/// in parallel.
pub fn per_example_gradients<R: Real>(
    params: &ParamVector<R>,
    data: &Dataset<R>,
) -> Result<GradientMatrix<R>> {
    let intercept = check_param_dim(params, data)?;
    let d = data.dim();
    let p = params.len();
    let rows: Vec<Vec<R>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let x = data.features().row(i);
            let y = R::of(data.labels()[i] as f64);
            let resid = y - sigmoid(margin(params.values(), x, intercept));
            let mut g = Vec::with_capacity(p);
            for &xi in x.iter().take(d) {
                g.push(resid * xi);
            }
            if intercept {
                g.push(resid);
            }
            g
        })
        .collect();
    GradientMatrix::new(Matrix::from_rows(&rows))
}

/// Predicted probabilities `sigma(theta . x)`.
pub fn predict_proba<R: Real>(params: &ParamVector<R>, data: &Dataset<R>) -> Result<Vec<R>> {
    let intercept = check_param_dim(params, data)?;
    Ok((0..data.len())
        .map(|i| sigmoid(margin(params.values(), data.features().row(i), intercept)))
        .collect())
}

/// Mean per-example log-likelihood on the dataset.
pub fn mean_log_likelihood<R: Real>(params: &ParamVector<R>, data: &Dataset<R>) -> Result<R> {
    let intercept = check_param_dim(params, data)?;
    let n = data.len();
    let mut total = R::zero();
    for i in 0..n {
        let m = margin(params.values(), data.features().row(i), intercept);
        let y = R::of(data.labels()[i] as f64);
        total = total + y * m - softplus(m);
    }
    Ok(total / R::of(n as f64))
}

/// Classification accuracy at the 0.5 threshold.
pub fn accuracy<R: Real>(params: &ParamVector<R>, data: &Dataset<R>) -> Result<f64> {
    let proba = predict_proba(params, data)?;
    let correct = proba
        .iter()
        .zip(data.labels())
        .filter(|(&p, &y)| (p >= R::of(0.5)) == (y == 1))
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Trainer settings for the built-in logistic model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig<R> {
    /// L2 penalty on the weights (the intercept is never penalized).
    pub l2: R,
    /// Convergence threshold on the infinity norm of the objective gradient.
    pub tol: R,
    pub max_iter: usize,
    pub intercept: bool,
}

impl<R: Real> Default for TrainConfig<R> {
    fn default() -> Self {
        TrainConfig {
            l2: R::of(1e-4),
            tol: R::of(1e-8),
            max_iter: 200,
            intercept: true,
        }
    }
}

/// Fit result. `converged` is false when `max_iter` ran out before the
/// gradient tolerance was met.
#[derive(Debug, Clone)]
pub struct TrainOutcome<R> {
    pub params: ParamVector<R>,
    pub converged: bool,
    pub iterations: usize,
    pub grad_inf_norm: R,
    pub loss: R,
}

struct Objective<'a, R> {
    data: &'a Dataset<R>,
    weights: Option<&'a [R]>,
    cfg: &'a TrainConfig<R>,
}

impl<'a, R: Real> Objective<'a, R> {
    fn weight_total(&self) -> R {
        match self.weights {
            Some(w) => w.iter().copied().sum(),
            None => R::of(self.data.len() as f64),
        }
    }

    fn weight(&self, i: usize) -> R {
        match self.weights {
            Some(w) => w[i],
            None => R::one(),
        }
    }

    fn p(&self) -> usize {
        self.data.dim() + usize::from(self.cfg.intercept)
    }

    /// Weighted mean NLL plus the L2 term.
    fn loss(&self, theta: &[R]) -> R {
        let total = self.weight_total();
        let mut nll = R::zero();
        for i in 0..self.data.len() {
            let m = margin(theta, self.data.features().row(i), self.cfg.intercept);
            let y = R::of(self.data.labels()[i] as f64);
            nll = nll + self.weight(i) * (softplus(m) - y * m);
        }
        let mut penalty = R::zero();
        for &w in &theta[..self.data.dim()] {
            penalty = penalty + w * w;
        }
        nll / total + self.cfg.l2 * penalty / R::of(2.0)
    }

    fn grad(&self, theta: &[R]) -> Vec<R> {
        let total = self.weight_total();
        let p = self.p();
        let d = self.data.dim();
        let mut g = vec![R::zero(); p];
        for i in 0..self.data.len() {
            let x = self.data.features().row(i);
            let m = margin(theta, x, self.cfg.intercept);
            let y = R::of(self.data.labels()[i] as f64);
            let r = self.weight(i) * (sigmoid(m) - y);
            for j in 0..d {
                g[j] = g[j] + r * x[j];
            }
            if self.cfg.intercept {
                g[d] = g[d] + r;
            }
        }
        for gj in g.iter_mut() {
            *gj = *gj / total;
        }
        for j in 0..d {
            g[j] = g[j] + self.cfg.l2 * theta[j];
        }
        g
    }

    fn hessian(&self, theta: &[R]) -> Matrix<R> {
        let total = self.weight_total();
        let p = self.p();
        let d = self.data.dim();
        let mut h = Matrix::zeros(p, p);
        let mut xt = vec![R::zero(); p];
        for i in 0..self.data.len() {
            let x = self.data.features().row(i);
            let m = margin(theta, x, self.cfg.intercept);
            let s = sigmoid(m);
            let w = self.weight(i) * s * (R::one() - s);
            if w == R::zero() {
                continue;
            }
            xt[..d].copy_from_slice(x);
            if self.cfg.intercept {
                xt[d] = R::one();
            }
            for a in 0..p {
                let wa = w * xt[a];
                if wa == R::zero() {
                    continue;
                }
                for b in a..p {
                    let v = h.get(a, b) + wa * xt[b];
                    h.set(a, b, v);
                }
            }
        }
        for a in 0..p {
            for b in a..p {
                let v = h.get(a, b) / total;
                h.set(a, b, v);
                h.set(b, a, v);
            }
        }
        for j in 0..d {
            h.set(j, j, h.get(j, j) + self.cfg.l2);
        }
        h
    }
}

fn train_inner<R: Real>(
    data: &Dataset<R>,
    weights: Option<&[R]>,
    cfg: &TrainConfig<R>,
) -> Result<TrainOutcome<R>> {
    if cfg.l2 < R::zero() {
        return Err(Error::invalid("l2 penalty must be nonnegative"));
    }
    if !(cfg.tol > R::zero()) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let ones = data.labels().iter().filter(|&&y| y == 1).count();
    if ones == 0 || ones == data.len() {
        return Err(Error::DegenerateLabels(data.len()));
    }
    if let Some(w) = weights {
        if w.len() != data.len() {
            return Err(Error::dims("weight vector length != dataset size"));
        }
        if w.iter().any(|v| !v.is_finite() || *v < R::zero()) {
            return Err(Error::invalid("example weights must be finite and >= 0"));
        }
        if !(w.iter().copied().sum::<R>() > R::zero()) {
            return Err(Error::invalid("example weights sum to zero"));
        }
    }

    let obj = Objective { data, weights, cfg };
    let p = obj.p();
    let mut theta = vec![R::zero(); p];
    let mut loss = obj.loss(&theta);
    let mut grad = obj.grad(&theta);
    let mut iterations = 0;
    let mut converged = norm_inf(&grad) <= cfg.tol;

    while !converged && iterations < cfg.max_iter {
        iterations += 1;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: iterations,
                detail: "objective value overflowed".into(),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration: iterations,
                detail: "objective gradient overflowed".into(),
            });
        }
        let hess = obj.hessian(&theta);
        if !hess.all_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: iterations,
                detail: "hessian overflowed".into(),
            });
        }
        // Newton direction, with a diagonal bump when the (possibly
        // unregularized) hessian is numerically semidefinite.
        let mut jitter = R::zero();
        let direction = loop {
            let candidate = if jitter == R::zero() {
                hess.clone()
            } else {
                hess.plus_scaled_identity(jitter)
            };
            match Cholesky::factor(&candidate) {
                Ok(chol) => break chol.solve(&grad),
                Err(_) => {
                    let floor = (hess.trace() / R::of(p as f64)).abs().max(R::one());
                    jitter = if jitter == R::zero() {
                        floor * R::of(1e-10)
                    } else {
                        jitter * R::of(10.0)
                    };
                    if jitter > floor * R::of(1e6) {
                        return Err(Error::NonFiniteLoss {
                            iteration: iterations,
                            detail: "hessian could not be factored even with damping".into(),
                        });
                    }
                }
            }
        };
        let descent = dot(&grad, &direction);
        let mut step = R::one();
        let armijo = R::of(1e-4);
        let mut accepted = false;
        while step >= R::of(1e-14) {
            let trial: Vec<R> = theta
                .iter()
                .zip(&direction)
                .map(|(&t, &d)| t - step * d)
                .collect();
            let trial_loss = obj.loss(&trial);
            if trial_loss.is_finite() && trial_loss <= loss - armijo * step * descent {
                theta = trial;
                loss = trial_loss;
                accepted = true;
                break;
            }
            step = step / R::of(2.0);
        }
        grad = obj.grad(&theta);
        converged = norm_inf(&grad) <= cfg.tol;
        if !accepted {
            // No step gave sufficient decrease; we are at numerical optimum.
            break;
        }
    }

    Ok(TrainOutcome {
        params: ParamVector::new(theta)?,
        converged,
        iterations,
        grad_inf_norm: norm_inf(&grad),
        loss,
    })
}

/// Fit the logistic model by damped Newton iterations with a backtracking
/// line search. Deterministic: no randomness is involved.
pub fn train_logistic<R: Real>(data: &Dataset<R>, cfg: &TrainConfig<R>) -> Result<TrainOutcome<R>> {
    train_inner(data, None, cfg)
}

/// Fit with nonnegative per-example weights (normalized internally).
pub fn train_logistic_weighted<R: Real>(
    data: &Dataset<R>,
    weights: &[R],
    cfg: &TrainConfig<R>,
) -> Result<TrainOutcome<R>> {
    train_inner(data, Some(weights), cfg)
}
