//! Metric-weighted kernels over gradient embeddings.
//!
//! The oracle whitens every embedding once through the factored metric, after
//! which any kernel value is a dot product of whitened rows. Evaluations are
//! counted; the counts are what the scaling comparisons between selection
//! variants are measured on.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::embedding::{FisherMetric, GradientMatrix, MetricMode};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::num::Real;

/// Which side of the train/test split an index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelPoint {
    Train(usize),
    Test(usize),
}

/// Kernel evaluations over a fixed train/test pair of embedding sets.
#[derive(Debug)]
pub struct KernelOracle<R> {
    whitened_train: Matrix<R>,
    whitened_test: Matrix<R>,
    mode: MetricMode,
    evals: AtomicU64,
    cache: Option<Matrix<R>>,
}

impl<R: Real> KernelOracle<R> {
    /// Whiten both embedding sets against the metric. The factored metric is
    /// applied by triangular solves; no inverse is ever formed.
    pub fn new(
        train: &GradientMatrix<R>,
        test: &GradientMatrix<R>,
        metric: &FisherMetric<R>,
    ) -> Result<Self> {
        let p = train.param_dim();
        if test.param_dim() != p {
            return Err(Error::dims(format!(
                "train embeddings have dim {p}, test embeddings have dim {}",
                test.param_dim()
            )));
        }
        if metric.param_dim() != p {
            return Err(Error::dims(format!(
                "metric dim {} does not match embedding dim {p}",
                metric.param_dim()
            )));
        }
        let whiten_all = |g: &GradientMatrix<R>| -> Result<Matrix<R>> {
            let mut rows = Vec::with_capacity(g.len());
            for i in 0..g.len() {
                let w = metric.whiten(g.row(i));
                if w.iter().any(|v| !v.is_finite()) {
                    return Err(Error::SingularMetric(format!(
                        "metric solve produced non-finite values for row {i}"
                    )));
                }
                rows.push(w);
            }
            Ok(Matrix::from_rows(&rows))
        };
        Ok(KernelOracle {
            whitened_train: whiten_all(train)?,
            whitened_test: whiten_all(test)?,
            mode: metric.mode(),
            evals: AtomicU64::new(0),
            cache: None,
        })
    }

    pub fn train_len(&self) -> usize {
        self.whitened_train.nrows()
    }

    pub fn test_len(&self) -> usize {
        self.whitened_test.nrows()
    }

    pub fn mode(&self) -> MetricMode {
        self.mode
    }

    pub fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    #[inline]
    fn bump(&self) {
        self.evals.fetch_add(1, Ordering::Relaxed);
    }

    pub fn train_train(&self, i: usize, j: usize) -> R {
        self.bump();
        if let Some(cache) = &self.cache {
            return cache.get(i, j);
        }
        dot(self.whitened_train.row(i), self.whitened_train.row(j))
    }

    pub fn train_test(&self, i: usize, j: usize) -> R {
        self.bump();
        dot(self.whitened_train.row(i), self.whitened_test.row(j))
    }

    pub fn test_test(&self, j: usize, l: usize) -> R {
        self.bump();
        dot(self.whitened_test.row(j), self.whitened_test.row(l))
    }

    /// Kernel value between training point `i` and a train- or test-side
    /// point `j`.
    pub fn kernel_value(&self, i: usize, j: KernelPoint) -> Result<R> {
        if i >= self.train_len() {
            return Err(Error::invalid(format!("train index {i} out of range")));
        }
        match j {
            KernelPoint::Train(t) if t < self.train_len() => Ok(self.train_train(i, t)),
            KernelPoint::Test(t) if t < self.test_len() => Ok(self.train_test(i, t)),
            _ => Err(Error::invalid("kernel index out of range")),
        }
    }

    /// Materialize the train x train matrix. Single-writer: needs `&mut`.
    pub fn build_cache(&mut self) {
        if self.cache.is_some() {
            return;
        }
        let t = self.train_len();
        let cache = Matrix::from_fn(t, t, |i, j| {
            dot(self.whitened_train.row(i), self.whitened_train.row(j))
        });
        self.cache = Some(cache);
    }

    pub fn cached_matrix(&self) -> Option<&Matrix<R>> {
        self.cache.as_ref()
    }

    /// Mean kernel value of every training point against the test set, plus
    /// the test-side self term. Costs `t*n + n^2` evaluations.
    pub fn affinity_vector(&self) -> Result<AffinityVector<R>> {
        let t = self.train_len();
        let n = self.test_len();
        if n == 0 {
            return Err(Error::invalid("affinity vector needs a nonempty test set"));
        }
        let inv_n = R::one() / R::of(n as f64);
        let z = (0..t)
            .map(|i| {
                let mut s = R::zero();
                for j in 0..n {
                    s = s + self.train_test(i, j);
                }
                s * inv_n
            })
            .collect();
        let mut self_term = R::zero();
        for j in 0..n {
            for l in 0..n {
                self_term = self_term + self.test_test(j, l);
            }
        }
        self_term = self_term * inv_n * inv_n;
        AffinityVector::new(z, self_term)
    }

    /// Distance between a training embedding and a test embedding in the
    /// metric-induced inner-product space.
    pub fn rkhs_distance(&self, i: usize, j: usize) -> Result<R> {
        if i >= self.train_len() || j >= self.test_len() {
            return Err(Error::invalid("rkhs_distance index out of range"));
        }
        let sq = self.train_train(i, i) - R::of(2.0) * self.train_test(i, j) + self.test_test(j, j);
        Ok(sq.max(R::zero()).sqrt())
    }
}

/// Per-training-point affinity against the test distribution.
#[derive(Debug, Clone)]
pub struct AffinityVector<R> {
    z: Vec<R>,
    test_self_term: R,
}

impl<R: Real> AffinityVector<R> {
    pub fn new(z: Vec<R>, test_self_term: R) -> Result<Self> {
        if z.iter().any(|v| !v.is_finite()) || !test_self_term.is_finite() {
            return Err(Error::invalid("affinity vector has non-finite entries"));
        }
        // The self term is a squared norm; tiny negative round-off is zeroed.
        let test_self_term = if test_self_term < R::zero() {
            if test_self_term < -R::of(1e-10) {
                return Err(Error::invalid(format!(
                    "test self term {test_self_term} is negative beyond round-off"
                )));
            }
            R::zero()
        } else {
            test_self_term
        };
        Ok(AffinityVector { z, test_self_term })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn z(&self) -> &[R] {
        &self.z
    }

    pub fn z_at(&self, i: usize) -> R {
        self.z[i]
    }

    /// The constant term of the variance objective.
    pub fn test_self_term(&self) -> R {
        self.test_self_term
    }

    pub fn gather(&self, idx: &[usize]) -> Vec<R> {
        idx.iter().map(|&i| self.z[i]).collect()
    }
}

/// Anything that can answer train-side kernel queries. The selection
/// algorithms only see this surface, so they run identically over gradient
/// embeddings and over explicit kernel matrices.
pub trait KernelSource<R: Real>: Sync {
    fn pool_size(&self) -> usize;
    fn pair(&self, i: usize, j: usize) -> R;
    fn diag(&self, i: usize) -> R {
        self.pair(i, i)
    }
    fn eval_count(&self) -> u64;
}

impl<R: Real> KernelSource<R> for KernelOracle<R> {
    fn pool_size(&self) -> usize {
        self.train_len()
    }

    fn pair(&self, i: usize, j: usize) -> R {
        self.train_train(i, j)
    }

    fn eval_count(&self) -> u64 {
        KernelOracle::eval_count(self)
    }
}

/// Explicit symmetric kernel matrix, used by the verification instruments
/// and by tests that construct kernels directly.
#[derive(Debug)]
pub struct MatrixKernel<R> {
    matrix: Matrix<R>,
    evals: AtomicU64,
}

impl<R: Real> MatrixKernel<R> {
    pub fn new(matrix: Matrix<R>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::invalid("kernel matrix must be square"));
        }
        if !matrix.all_finite() {
            return Err(Error::invalid("kernel matrix has non-finite entries"));
        }
        let scale = matrix.max_abs_entry().max(R::one());
        for i in 0..matrix.nrows() {
            for j in (i + 1)..matrix.ncols() {
                if (matrix.get(i, j) - matrix.get(j, i)).abs() > R::of(1e-8) * scale {
                    return Err(Error::invalid(format!(
                        "kernel matrix is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(MatrixKernel {
            matrix,
            evals: AtomicU64::new(0),
        })
    }

    pub fn matrix(&self) -> &Matrix<R> {
        &self.matrix
    }
}

impl<R: Real> KernelSource<R> for MatrixKernel<R> {
    fn pool_size(&self) -> usize {
        self.matrix.nrows()
    }

    fn pair(&self, i: usize, j: usize) -> R {
        self.evals.fetch_add(1, Ordering::Relaxed);
        self.matrix.get(i, j)
    }

    fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }
}

/// Squared maximum mean discrepancy between the test distribution and the
/// weighted selection: `mu_pp - 2 w'z_S + w'K_SS w`. Values within 1e-10
/// below zero are round-off and are clipped to zero.
pub fn mmd_squared<R: Real>(
    source: &impl KernelSource<R>,
    selection: &[usize],
    weights: &[R],
    affinity: &AffinityVector<R>,
) -> Result<R> {
    if selection.len() != weights.len() {
        return Err(Error::dims(format!(
            "selection of size {} with {} weights",
            selection.len(),
            weights.len()
        )));
    }
    let t = source.pool_size();
    if let Some(&bad) = selection.iter().find(|&&i| i >= t) {
        return Err(Error::invalid(format!(
            "selection index {bad} out of range"
        )));
    }
    if affinity.len() != t {
        return Err(Error::dims(
            "affinity vector length does not match kernel pool",
        ));
    }
    let mut value = affinity.test_self_term();
    for (pos, &i) in selection.iter().enumerate() {
        value = value - R::of(2.0) * weights[pos] * affinity.z_at(i);
    }
    for (pi, &i) in selection.iter().enumerate() {
        for (pj, &j) in selection.iter().enumerate() {
            value = value + weights[pi] * weights[pj] * source.pair(i, j);
        }
    }
    if value < R::zero() && value >= -R::of(1e-10) {
        value = R::zero();
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::estimate_fisher_info;
    use crate::linalg::{gauss_jordan_inverse, norm2, sym_eigen, Cholesky};
    use crate::rng;

    fn grads_from(rows: &[Vec<f64>]) -> GradientMatrix<f64> {
        GradientMatrix::new(Matrix::from_rows(rows)).unwrap()
    }

    fn random_grads(n: usize, p: usize, seed: u64) -> GradientMatrix<f64> {
        let mut r = rng::seeded(seed);
        GradientMatrix::new(Matrix::from_fn(n, p, |_, _| rng::standard_normal(&mut r))).unwrap()
    }

    fn random_metric(p: usize, seed: u64) -> FisherMetric<f64> {
        estimate_fisher_info(&random_grads(3 * p, p, seed), 0.05).unwrap()
    }

    #[test]
    fn practical_mode_is_plain_dot_product() {
        let train = grads_from(&[vec![1.0, 2.0], vec![3.0, -1.0]]);
        let test = grads_from(&[vec![0.0, 0.0]]);
        let oracle = KernelOracle::new(&train, &test, &FisherMetric::practical(2)).unwrap();
        assert_eq!(oracle.train_train(0, 1), 1.0);
    }

    #[test]
    fn scalar_metric_rescales_dot_product() {
        // info = c * I  =>  k(i,j) = f_i . f_j / c
        let c: f64 = 4.0;
        let rows = vec![vec![2.0_f64, 0.0], vec![0.0, 2.0]];
        // Build a metric whose estimate is exactly c*I: gradient rows
        // (2c, 0), (0, 2c) over n = 2 give I0 = 2c^2 * I... easier to build
        // via orthogonal rows scaled so (1/n) sum f f^T = c I.
        let s = (2.0 * c).sqrt();
        let metric_rows = vec![vec![s, 0.0], vec![0.0, s]];
        let metric = estimate_fisher_info(&grads_from(&metric_rows), 0.0).unwrap();
        assert!((metric.info().get(0, 0) - c).abs() < 1e-12);

        let train = grads_from(&rows);
        let test = grads_from(&[vec![1.0, 1.0]]);
        let oracle = KernelOracle::new(&train, &test, &metric).unwrap();
        let expect = dot(&rows[0], &rows[1]) / c;
        assert!((oracle.train_train(0, 1) - expect).abs() < 1e-12);
        assert!((oracle.train_train(0, 0) - 4.0 / c).abs() < 1e-12);
    }

    #[test]
    fn full_mode_matches_dense_solve_oracle() {
        // Oracle: explicitly invert the metric with Gauss-Jordan and form
        // f_i^T info^{-1} f_j.
        let p = 4;
        let metric = random_metric(p, 21);
        let train = random_grads(6, p, 22);
        let test = random_grads(3, p, 23);
        let oracle = KernelOracle::new(&train, &test, &metric).unwrap();
        let inv = gauss_jordan_inverse(metric.info()).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let expect = dot(train.row(i), &inv.matvec(train.row(j)));
                let got = oracle.train_train(i, j);
                assert!(
                    (got - expect).abs() <= 1e-10 * expect.abs().max(1.0),
                    "({i},{j}): {got} vs {expect}"
                );
            }
        }
        for i in 0..6 {
            for j in 0..3 {
                let expect = dot(train.row(i), &inv.matvec(test.row(j)));
                let got = oracle.train_test(i, j);
                assert!((got - expect).abs() <= 1e-10 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn kernel_is_symmetric() {
        let metric = random_metric(5, 31);
        let train = random_grads(12, 5, 32);
        let test = random_grads(4, 5, 33);
        let oracle = KernelOracle::new(&train, &test, &metric).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let a = oracle.train_train(i, j);
                let b = oracle.train_train(j, i);
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn principal_submatrices_are_psd() {
        let mut r = rng::seeded(44);
        for trial in 0..10 {
            let metric = random_metric(6, 100 + trial);
            let train = random_grads(25, 6, 200 + trial);
            let test = random_grads(5, 6, 300 + trial);
            let oracle = KernelOracle::new(&train, &test, &metric).unwrap();
            let size = 2 + (trial as usize % 18);
            let all: Vec<usize> = (0..25).collect();
            let support = rng::sample_without_replacement(&mut r, &all, size.min(20));
            let sub = Matrix::from_fn(support.len(), support.len(), |a, b| {
                oracle.train_train(support[a], support[b])
            });
            let eig = sym_eigen(&sub);
            assert!(eig.values[0] >= -1e-8, "min eig {}", eig.values[0]);
        }
    }

    #[test]
    fn eval_counter_is_exact() {
        let metric = random_metric(3, 50);
        let train = random_grads(5, 3, 51);
        let test = random_grads(4, 3, 52);
        let oracle = KernelOracle::new(&train, &test, &metric).unwrap();
        assert_eq!(oracle.eval_count(), 0);
        for i in 0..5 {
            oracle
                .kernel_value(i, KernelPoint::Train((i + 1) % 5))
                .unwrap();
        }
        assert_eq!(oracle.eval_count(), 5);
        oracle.affinity_vector().unwrap();
        // t*n train/test sweeps plus n^2 self terms.
        assert_eq!(oracle.eval_count(), 5 + 5 * 4 + 4 * 4);
    }

    #[test]
    fn cache_is_coherent_with_recomputation() {
        let metric = random_metric(4, 60);
        let train = random_grads(9, 4, 61);
        let test = random_grads(2, 4, 62);
        let mut cached = KernelOracle::new(&train, &test, &metric).unwrap();
        cached.build_cache();
        let fresh = KernelOracle::new(&train, &test, &metric).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                let a = cached.train_train(i, j);
                let b = fresh.train_train(i, j);
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    // ---- affinity ----------------------------------------------------------

    #[test]
    fn affinity_of_duplicated_point_is_self_similarity() {
        let train = grads_from(&[vec![1.0, 2.0], vec![-1.0, 0.5]]);
        let test = grads_from(&[vec![1.0, 2.0]]);
        let oracle = KernelOracle::new(&train, &test, &FisherMetric::practical(2)).unwrap();
        let aff = oracle.affinity_vector().unwrap();
        assert_eq!(aff.z_at(0), oracle.train_train(0, 0));
    }

    #[test]
    fn affinity_of_zero_test_embeddings_is_zero() {
        let train = random_grads(4, 3, 70);
        let test = grads_from(&[vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]);
        let oracle = KernelOracle::new(&train, &test, &FisherMetric::practical(3)).unwrap();
        let aff = oracle.affinity_vector().unwrap();
        assert!(aff.z().iter().all(|&z| z == 0.0));
        assert_eq!(aff.test_self_term(), 0.0);
    }

    #[test]
    fn affinity_matches_double_loop_oracle() {
        let metric = random_metric(4, 80);
        let train = random_grads(5, 4, 81);
        let test = random_grads(8, 4, 82);
        let oracle = KernelOracle::new(&train, &test, &metric).unwrap();
        let aff = oracle.affinity_vector().unwrap();

        // Naive double loop against a second oracle instance.
        let check = KernelOracle::new(&train, &test, &metric).unwrap();
        for i in 0..5 {
            let mut s = 0.0;
            for j in 0..8 {
                s += check.train_test(i, j);
            }
            s /= 8.0;
            assert!((aff.z_at(i) - s).abs() <= 1e-12 * s.abs().max(1.0));
        }
        let mut mu = 0.0;
        for j in 0..8 {
            for l in 0..8 {
                mu += check.test_test(j, l);
            }
        }
        mu /= 64.0;
        assert!((aff.test_self_term() - mu).abs() <= 1e-12 * mu.abs().max(1.0));
    }

    // ---- mmd ----------------------------------------------------------------

    #[test]
    fn empty_selection_mmd_is_self_term() {
        let metric = random_metric(3, 90);
        let train = random_grads(4, 3, 91);
        let test = random_grads(3, 3, 92);
        let oracle = KernelOracle::new(&train, &test, &metric).unwrap();
        let aff = oracle.affinity_vector().unwrap();
        let v = mmd_squared(&oracle, &[], &[], &aff).unwrap();
        assert_eq!(v, aff.test_self_term());
    }

    #[test]
    fn matching_atoms_with_uniform_weights_give_zero() {
        let rows = random_grads(4, 3, 95);
        let oracle = KernelOracle::new(&rows, &rows, &FisherMetric::practical(3)).unwrap();
        let aff = oracle.affinity_vector().unwrap();
        let w = vec![0.25; 4];
        let v = mmd_squared(&oracle, &[0, 1, 2, 3], &w, &aff).unwrap();
        assert!(v.abs() <= 1e-10, "mmd^2 {v}");
    }

    #[test]
    fn optimal_weights_reduce_mmd_to_variance_form() {
        // With w = K_SS^{-1} z_S the expansion collapses to
        // mu_pp - z_S' K_SS^{-1} z_S.
        let metric = random_metric(4, 96);
        let train = random_grads(7, 4, 97);
        let test = random_grads(5, 4, 98);
        let oracle = KernelOracle::new(&train, &test, &metric).unwrap();
        let aff = oracle.affinity_vector().unwrap();
        let sel = [0usize, 2, 5];
        let k = Matrix::from_fn(3, 3, |a, b| oracle.train_train(sel[a], sel[b]));
        let zs = aff.gather(&sel);
        let chol = Cholesky::factor(&k).unwrap();
        let w = chol.solve(&zs);
        let expect = aff.test_self_term() - dot(&zs, &w);
        let got = mmd_squared(&oracle, &sel, &w, &aff).unwrap();
        assert!(
            (got - expect).abs() <= 1e-8 * expect.abs().max(1e-8),
            "{got} vs {expect}"
        );
    }

    #[test]
    fn mmd_rejects_out_of_range_selection() {
        let train = random_grads(3, 2, 99);
        let test = random_grads(2, 2, 99);
        let oracle = KernelOracle::new(&train, &test, &FisherMetric::practical(2)).unwrap();
        let aff = oracle.affinity_vector().unwrap();
        assert!(mmd_squared(&oracle, &[7], &[1.0], &aff).is_err());
    }

    // ---- rkhs distance --------------------------------------------------------

    #[test]
    fn identical_embeddings_have_zero_distance() {
        let train = grads_from(&[vec![1.5, -0.5]]);
        let test = grads_from(&[vec![1.5, -0.5]]);
        let metric = random_metric(2, 101);
        let oracle = KernelOracle::new(&train, &test, &metric).unwrap();
        assert!(oracle.rkhs_distance(0, 0).unwrap() <= 1e-8);
    }

    #[test]
    fn orthogonal_unit_embeddings_are_sqrt_two_apart() {
        let train = grads_from(&[vec![1.0, 0.0]]);
        let test = grads_from(&[vec![0.0, 1.0]]);
        let oracle = KernelOracle::new(&train, &test, &FisherMetric::practical(2)).unwrap();
        let d = oracle.rkhs_distance(0, 0).unwrap();
        assert!((d - 2.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn distance_matches_matrix_square_root_oracle() {
        // Oracle: info = V L V^T, apply info^{-1/2} explicitly and take the
        // Euclidean norm of the difference.
        let p = 4;
        let metric = random_metric(p, 110);
        let train = random_grads(3, p, 111);
        let test = random_grads(3, p, 112);
        let oracle = KernelOracle::new(&train, &test, &metric).unwrap();

        let eig = sym_eigen(metric.info());
        let inv_sqrt = {
            let n = p;
            let mut m = Matrix::zeros(n, n);
            for a in 0..n {
                for b in 0..n {
                    let mut v = 0.0;
                    for k in 0..n {
                        v += eig.vectors.get(a, k) * eig.vectors.get(b, k) / eig.values[k].sqrt();
                    }
                    m.set(a, b, v);
                }
            }
            m
        };
        for i in 0..3 {
            for j in 0..3 {
                let diff: Vec<f64> = train
                    .row(i)
                    .iter()
                    .zip(test.row(j))
                    .map(|(a, b)| a - b)
                    .collect();
                let expect = norm2(&inv_sqrt.matvec(&diff));
                let got = oracle.rkhs_distance(i, j).unwrap();
                assert!(
                    (got - expect).abs() <= 1e-8 * expect.abs().max(1e-8),
                    "({i},{j}): {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn matrix_kernel_requires_symmetry() {
        let bad = Matrix::from_rows(&[vec![1.0, 0.2], vec![0.0, 1.0]]);
        assert!(MatrixKernel::new(bad).is_err());
        let good = Matrix::from_rows(&[vec![1.0, 0.2], vec![0.2, 1.0]]);
        assert!(MatrixKernel::new(good).is_ok());
    }
}
