//! Sequential greedy selection with incremental inverse maintenance.
//!
//! The selection state carries `K_SS`, its inverse, and the running objective
//! `z_S' K_SS^{-1} z_S`. Growing the state by one atom uses the bordered
//! (Schur complement) inverse update, so a greedy step scores every candidate
//! from the current inverse without refactoring anything.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{AffinityVector, KernelOracle, KernelSource};
use crate::linalg::{dot, gauss_jordan_inverse, inverse_residual_inf, norm_inf, Cholesky, Matrix};
use crate::num::Real;

/// Numeric guards for the selection loop.
#[derive(Debug, Clone, Copy)]
pub struct SelectParams<R> {
    /// A candidate whose Schur complement falls at or below
    /// `tol_d_rel * max(c, 1)` is treated as linearly dependent and skipped.
    pub tol_d_rel: R,
    /// Maximum allowed `||K_SS * inv - I||_inf` after a step; beyond it the
    /// inverse is rebuilt by dense factorization.
    pub fidelity_tol: R,
}

impl<R: Real> Default for SelectParams<R> {
    fn default() -> Self {
        SelectParams {
            tol_d_rel: R::of(1e-10),
            fidelity_tol: R::of(1e-8),
        }
    }
}

/// Parameter echo carried inside every report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SelectionConfig {
    pub k: usize,
    pub tol_d_rel: f64,
    pub fidelity_tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partitions: Option<usize>,
}

/// Per-shard accounting for the distributed variant.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ShardStats {
    pub label: String,
    pub pool: usize,
    pub selected: usize,
    pub kernel_evals: u64,
    pub distinct_pairs: u64,
    pub final_objective: f64,
}

/// Output of any selection run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionReport<R> {
    pub selections: Vec<usize>,
    pub weights: Vec<R>,
    pub objective_trace: Vec<R>,
    pub variance_trace: Vec<R>,
    pub kernel_evals: u64,
    pub config: SelectionConfig,
    pub truncated: bool,
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shard_stats: Option<Vec<ShardStats>>,
}

impl<R: Real + Serialize> SelectionReport<R> {
    /// JSON of the method-independent fields, for equivalence comparisons
    /// between variants.
    pub fn core_json(&self) -> String {
        #[derive(Serialize)]
        struct Core<'a, R> {
            selections: &'a [usize],
            weights: &'a [R],
            objective_trace: &'a [R],
            variance_trace: &'a [R],
            kernel_evals: u64,
            truncated: bool,
        }
        serde_json::to_string(&Core {
            selections: &self.selections,
            weights: &self.weights,
            objective_trace: &self.objective_trace,
            variance_trace: &self.variance_trace,
            kernel_evals: self.kernel_evals,
            truncated: self.truncated,
        })
        .expect("core report serialization cannot fail")
    }
}

impl<R: Real> SelectionReport<R> {
    pub fn final_objective(&self) -> R {
        self.objective_trace.last().copied().unwrap_or_else(R::zero)
    }
}

/// Growing selection with maintained kernel inverse.
#[derive(Debug, Clone)]
pub struct InverseState<R> {
    indices: Vec<usize>,
    kmat: Matrix<R>,
    inv: Matrix<R>,
    zsel: Vec<R>,
    objective: R,
    rebuilds: u32,
}

impl<R: Real> InverseState<R> {
    pub fn empty() -> Self {
        InverseState {
            indices: Vec::new(),
            kmat: Matrix::zeros(0, 0),
            inv: Matrix::zeros(0, 0),
            zsel: Vec::new(),
            objective: R::zero(),
            rebuilds: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn inverse(&self) -> &Matrix<R> {
        &self.inv
    }

    pub fn kernel_matrix(&self) -> &Matrix<R> {
        &self.kmat
    }

    pub fn selected_affinities(&self) -> &[R] {
        &self.zsel
    }

    /// `z_S' K_SS^{-1} z_S` for the current selection.
    pub fn objective(&self) -> R {
        self.objective
    }

    pub fn rebuilds(&self) -> u32 {
        self.rebuilds
    }

    fn schur(&self, b: &[R], c: R) -> (Vec<R>, R) {
        let u = self.inv.matvec(b);
        let d = c - dot(b, &u);
        (u, d)
    }

    fn degenerate_tol(&self, c: R, params: &SelectParams<R>) -> R {
        params.tol_d_rel * c.max(R::one())
    }

    /// Extend the selection with atom `candidate` whose border is
    /// `b = k(X_S, x_j)`, `c = k(x_j, x_j)` and affinity `z_new`. Returns the
    /// grown state or flags the candidate as degenerate.
    pub fn extend(
        &self,
        candidate: usize,
        b: &[R],
        c: R,
        z_new: R,
        params: &SelectParams<R>,
    ) -> Result<InverseState<R>> {
        assert_eq!(b.len(), self.len(), "border length must match selection");
        let (u, d) = self.schur(b, c);
        let tol = self.degenerate_tol(c, params);
        if !(d > tol) || !d.is_finite() {
            return Err(Error::DegenerateCandidate {
                index: candidate,
                schur: d.as_f64(),
                tol: tol.as_f64(),
            });
        }
        let s = self.len();
        let inv_d = R::one() / d;
        let mut inv = Matrix::zeros(s + 1, s + 1);
        for i in 0..s {
            for j in 0..s {
                inv.set(i, j, self.inv.get(i, j) + u[i] * u[j] * inv_d);
            }
            inv.set(i, s, -u[i] * inv_d);
            inv.set(s, i, -u[i] * inv_d);
        }
        inv.set(s, s, inv_d);

        let kmat = self.kmat.push_border(b, c);
        let w_old = if s == 0 {
            Vec::new()
        } else {
            self.inv.matvec(&self.zsel)
        };
        let residual = z_new - dot(b, &w_old);
        let mut objective = self.objective + residual * residual * inv_d;

        let mut indices = self.indices.clone();
        indices.push(candidate);
        let mut zsel = self.zsel.clone();
        zsel.push(z_new);

        let mut rebuilds = self.rebuilds;
        if inverse_residual_inf(&kmat, &inv) > params.fidelity_tol {
            let rebuilt = match Cholesky::factor(&kmat) {
                Ok(chol) => Some(chol.inverse()),
                Err(_) => gauss_jordan_inverse(&kmat).ok(),
            };
            match rebuilt {
                Some(fresh) => {
                    inv = fresh;
                    objective = dot(&zsel, &inv.matvec(&zsel));
                    rebuilds += 1;
                    eprintln!(
                        "protoquad: rebuilt selection inverse at |S|={} (fidelity breached)",
                        s + 1
                    );
                }
                None => {
                    return Err(Error::DegenerateCandidate {
                        index: candidate,
                        schur: d.as_f64(),
                        tol: tol.as_f64(),
                    });
                }
            }
        }

        Ok(InverseState {
            indices,
            kmat,
            inv,
            zsel,
            objective,
            rebuilds,
        })
    }
}

/// Quadrature weights `w = K_SS^{-1} z_S` for the current selection.
pub fn quadrature_weights<R: Real>(state: &InverseState<R>) -> Vec<R> {
    if state.is_empty() {
        return Vec::new();
    }
    state.inv.matvec(&state.zsel)
}

/// Remaining variance of the quadrature estimate: the constant test term
/// minus the explained objective.
pub fn posterior_variance<R: Real>(state: &InverseState<R>, affinity: &AffinityVector<R>) -> R {
    affinity.test_self_term() - state.objective()
}

/// `||z_S - K_SS w||_inf` at the optimal weights; zero when the weighted
/// selection is the orthogonal projection of the target mean.
pub fn projection_residual_inf<R: Real>(state: &InverseState<R>) -> R {
    if state.is_empty() {
        return R::zero();
    }
    let w = quadrature_weights(state);
    let kw = state.kmat.matvec(&w);
    let diff: Vec<R> = state.zsel.iter().zip(&kw).map(|(&a, &b)| a - b).collect();
    norm_inf(&diff)
}

pub(crate) struct Candidate<R> {
    pub(crate) index: usize,
    pub(crate) gain: R,
    pub(crate) border: Vec<R>,
    pub(crate) diag: R,
}

pub(crate) fn better<R: Real>(a: Candidate<R>, b: Candidate<R>) -> Candidate<R> {
    if b.gain > a.gain || (b.gain == a.gain && b.index < a.index) {
        b
    } else {
        a
    }
}

pub(crate) fn score_candidate<R: Real, S: KernelSource<R>>(
    state: &InverseState<R>,
    weights: &[R],
    source: &S,
    affinity: &AffinityVector<R>,
    params: &SelectParams<R>,
    j: usize,
) -> Option<Candidate<R>> {
    let border: Vec<R> = state.indices.iter().map(|&s| source.pair(s, j)).collect();
    let diag = source.diag(j);
    let (_, d) = state.schur(&border, diag);
    if !(d > state.degenerate_tol(diag, params)) || !d.is_finite() {
        return None;
    }
    let residual = affinity.z_at(j) - dot(&border, weights);
    let gain = residual * residual / d;
    if !gain.is_finite() {
        return None;
    }
    Some(Candidate {
        index: j,
        gain,
        border,
        diag,
    })
}

/// One greedy step: score every unselected candidate by the marginal gain in
/// `z' K^{-1} z`, break ties toward the lowest index, and grow the state with
/// the winner. Candidate scoring runs in parallel over a read-only snapshot.
pub fn greedy_step<R: Real, S: KernelSource<R>>(
    state: &InverseState<R>,
    source: &S,
    affinity: &AffinityVector<R>,
    params: &SelectParams<R>,
) -> Result<(usize, InverseState<R>)> {
    let t = source.pool_size();
    assert_eq!(affinity.len(), t, "affinity length must match kernel pool");
    let mut selected = vec![false; t];
    for &i in &state.indices {
        selected[i] = true;
    }
    let weights = quadrature_weights(state);
    let best = (0..t)
        .into_par_iter()
        .filter(|&j| !selected[j])
        .filter_map(|j| score_candidate(state, &weights, source, affinity, params, j))
        .reduce_with(better);
    match best {
        Some(c) => {
            let grown = state.extend(c.index, &c.border, c.diag, affinity.z_at(c.index), params)?;
            Ok((c.index, grown))
        }
        None => Err(Error::PoolExhausted {
            selected: state.len(),
        }),
    }
}

pub(crate) struct GreedyRun<R> {
    pub state: InverseState<R>,
    pub objective_trace: Vec<R>,
    pub variance_trace: Vec<R>,
    pub truncated: bool,
}

pub(crate) fn run_greedy<R: Real, S: KernelSource<R>>(
    k: usize,
    source: &S,
    affinity: &AffinityVector<R>,
    mut step: impl FnMut(&InverseState<R>, &S) -> Result<InverseState<R>>,
) -> GreedyRun<R> {
    let mut state = InverseState::empty();
    let mut objective_trace = Vec::with_capacity(k);
    let mut variance_trace = Vec::with_capacity(k);
    let mut truncated = false;
    for _ in 0..k {
        match step(&state, source) {
            Ok(next) => {
                state = next;
                objective_trace.push(state.objective());
                variance_trace.push(posterior_variance(&state, affinity));
            }
            Err(_) => {
                truncated = true;
                break;
            }
        }
    }
    GreedyRun {
        state,
        objective_trace,
        variance_trace,
        truncated,
    }
}

pub(crate) fn assemble_report<R: Real, S: KernelSource<R>>(
    run: GreedyRun<R>,
    source: &S,
    evals_before: u64,
    method: &str,
    config: SelectionConfig,
    seed: Option<u64>,
    shard_stats: Option<Vec<ShardStats>>,
) -> SelectionReport<R> {
    SelectionReport {
        selections: run.state.indices().to_vec(),
        weights: quadrature_weights(&run.state),
        objective_trace: run.objective_trace,
        variance_trace: run.variance_trace,
        kernel_evals: source.eval_count() - evals_before,
        config,
        truncated: run.truncated,
        method: method.to_string(),
        seed,
        shard_stats,
    }
}

/// Full greedy selection of `k` prototypes, choosing at every step the
/// candidate that maximizes the explained objective. Deterministic; reports
/// a truncated prefix when the pool runs out of non-degenerate candidates.
pub fn select_sbq<R: Real, S: KernelSource<R>>(
    k: usize,
    source: &S,
    affinity: &AffinityVector<R>,
    params: &SelectParams<R>,
) -> SelectionReport<R> {
    assert!(k >= 1, "selection budget must be at least 1");
    let evals_before = source.eval_count();
    let run = run_greedy(k, source, affinity, |state, src| {
        greedy_step(state, src, affinity, params).map(|(_, next)| next)
    });
    let config = SelectionConfig {
        k,
        tol_d_rel: params.tol_d_rel.as_f64(),
        fidelity_tol: params.fidelity_tol.as_f64(),
        delta: None,
        partitions: None,
    };
    assemble_report(run, source, evals_before, "sbq", config, None, None)
}

/// Influence-style scores of every training point for one test point: the
/// metric-weighted inner products `k(i, test_j)`. With the metric set to the
/// empirical gradient Gram this ranks training points by their first-order
/// effect on the test point's loss.
pub fn influence_scores<R: Real>(oracle: &KernelOracle<R>, test_j: usize) -> Result<Vec<R>> {
    if test_j >= oracle.test_len() {
        return Err(Error::invalid(format!(
            "test index {test_j} out of range (test size {})",
            oracle.test_len()
        )));
    }
    Ok((0..oracle.train_len())
        .map(|i| oracle.train_test(i, test_j))
        .collect())
}

/// Indices sorted by descending score, ties toward the lowest index.
pub fn rank_descending<R: Real>(scores: &[R]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{estimate_fisher_info, FisherMetric, GradientMatrix};
    use crate::kernel::{mmd_squared, MatrixKernel};
    use crate::rng;

    fn identity_kernel(z: Vec<f64>) -> (MatrixKernel<f64>, AffinityVector<f64>) {
        let t = z.len();
        let kernel = MatrixKernel::new(Matrix::identity(t)).unwrap();
        let aff = AffinityVector::new(z, 2.0).unwrap();
        (kernel, aff)
    }

    fn random_instance(
        t: usize,
        n: usize,
        p: usize,
        seed: u64,
    ) -> (MatrixKernel<f64>, AffinityVector<f64>) {
        let mut r = rng::seeded(seed);
        let train = Matrix::from_fn(t, p, |_, _| rng::standard_normal::<f64>(&mut r));
        let test = Matrix::from_fn(n, p, |_, _| rng::standard_normal::<f64>(&mut r));
        let kmat = Matrix::from_fn(t, t, |i, j| dot(train.row(i), train.row(j)));
        let z: Vec<f64> = (0..t)
            .map(|i| (0..n).map(|j| dot(train.row(i), test.row(j))).sum::<f64>() / n as f64)
            .collect();
        let mut mu = 0.0;
        for a in 0..n {
            for b in 0..n {
                mu += dot(test.row(a), test.row(b));
            }
        }
        mu /= (n * n) as f64;
        (
            MatrixKernel::new(kmat).unwrap(),
            AffinityVector::new(z, mu).unwrap(),
        )
    }

    // ---- extend ------------------------------------------------------------

    #[test]
    fn base_case_inverse_is_reciprocal() {
        let state = InverseState::<f64>::empty();
        let grown = state
            .extend(0, &[], 2.0, 0.6, &SelectParams::default())
            .unwrap();
        assert_eq!(grown.inverse().get(0, 0), 0.5);
        assert!((grown.objective() - 0.18).abs() < 1e-15); // 0.6^2 / 2
    }

    #[test]
    fn two_by_two_extension_matches_direct_inverse() {
        let state = InverseState::<f64>::empty();
        let s1 = state
            .extend(0, &[], 2.0, 1.0, &SelectParams::default())
            .unwrap();
        let s2 = s1
            .extend(1, &[1.0], 2.0, 1.0, &SelectParams::default())
            .unwrap();
        let expect = [[2.0 / 3.0, -1.0 / 3.0], [-1.0 / 3.0, 2.0 / 3.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (s2.inverse().get(i, j) - expect[i][j]).abs() < 1e-15,
                    "({i},{j})"
                );
            }
        }
    }

    #[test]
    fn random_growth_tracks_dense_inversion_oracle() {
        // Oracle: Gauss-Jordan inversion of K_SS at every step.
        let mut r = rng::seeded(5);
        let n = 50;
        let g = Matrix::from_fn(n, n, |_, _| rng::standard_normal::<f64>(&mut r));
        let kmat = g.matmul(&g.transpose()).plus_scaled_identity(1.0);
        let z: Vec<f64> = rng::normal_vec(&mut r, n);
        let params = SelectParams::default();

        let mut state = InverseState::empty();
        for step in 0..n {
            let b: Vec<f64> = (0..step).map(|i| kmat.get(i, step)).collect();
            state = state
                .extend(step, &b, kmat.get(step, step), z[step], &params)
                .unwrap();
            let sub = kmat.principal(&(0..=step).collect::<Vec<_>>());
            assert!(
                inverse_residual_inf(&sub, state.inverse()) <= 1e-8,
                "fidelity lost at step {step}"
            );
            let oracle = gauss_jordan_inverse(&sub).unwrap();
            let mut max_diff = 0.0_f64;
            for i in 0..=step {
                for j in 0..=step {
                    max_diff = max_diff.max((state.inverse().get(i, j) - oracle.get(i, j)).abs());
                }
            }
            assert!(max_diff <= 1e-7, "step {step}: inverse drift {max_diff}");
        }
        assert_eq!(state.rebuilds(), 0);
    }

    #[test]
    fn duplicate_atom_is_degenerate() {
        let state = InverseState::<f64>::empty();
        let s1 = state
            .extend(0, &[], 1.0, 0.8, &SelectParams::default())
            .unwrap();
        let err = s1
            .extend(1, &[1.0], 1.0, 0.8, &SelectParams::default())
            .unwrap_err();
        assert!(matches!(err, Error::DegenerateCandidate { index: 1, .. }));
    }

    // ---- greedy_step / select_sbq -------------------------------------------

    #[test]
    fn orthogonal_atoms_pick_largest_affinity_first() {
        let (kernel, aff) = identity_kernel(vec![0.5, 0.2, 0.9]);
        let params = SelectParams::default();
        let (chosen, state) = greedy_step(&InverseState::empty(), &kernel, &aff, &params).unwrap();
        assert_eq!(chosen, 2);
        assert!((state.objective() - 0.81).abs() < 1e-15);
    }

    #[test]
    fn near_duplicate_pair_gains_little() {
        let kmat = Matrix::from_rows(&[vec![1.0, 0.9], vec![0.9, 1.0]]);
        let kernel = MatrixKernel::new(kmat).unwrap();
        let aff = AffinityVector::new(vec![0.8, 0.8], 1.0).unwrap();
        let params = SelectParams::default();
        let report = select_sbq(2, &kernel, &aff, &params);
        assert_eq!(report.selections, vec![0, 1]);
        // 0.64 + (0.8 - 0.9*0.8)^2 / (1 - 0.81)
        let expect = 0.64 + (0.8 - 0.72_f64).powi(2) / 0.19;
        assert!(
            (report.objective_trace[1] - expect).abs() < 1e-12,
            "{} vs {expect}",
            report.objective_trace[1]
        );
        assert!((expect - 0.6736842105263158).abs() < 1e-12);
    }

    #[test]
    fn exact_duplicate_candidate_is_skipped() {
        let kmat = Matrix::from_rows(&[
            vec![1.0, 1.0, 0.0],
            vec![1.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let kernel = MatrixKernel::new(kmat).unwrap();
        let aff = AffinityVector::new(vec![0.9, 0.9, 0.1], 1.0).unwrap();
        let report = select_sbq(2, &kernel, &aff, &SelectParams::default());
        // Index 1 duplicates index 0, so the second pick must be index 2.
        assert_eq!(report.selections, vec![0, 2]);
        assert!(!report.truncated);
    }

    #[test]
    fn full_selection_of_test_set_drives_variance_to_zero() {
        let mut r = rng::seeded(33);
        let rows = Matrix::from_fn(6, 8, |_, _| rng::standard_normal::<f64>(&mut r));
        let grads = GradientMatrix::new(rows).unwrap();
        let oracle =
            crate::kernel::KernelOracle::new(&grads, &grads, &FisherMetric::practical(8)).unwrap();
        let aff = oracle.affinity_vector().unwrap();
        let params = SelectParams::default();
        let report = select_sbq(6, &oracle, &aff, &params);
        assert_eq!(report.selections.len(), 6);
        let final_variance = *report.variance_trace.last().unwrap();
        assert!(
            final_variance.abs() <= 1e-8 * aff.test_self_term().max(1.0),
            "variance {final_variance}"
        );
    }

    #[test]
    fn matches_dense_greedy_oracle() {
        // Oracle: recompute z' K^{-1} z for every candidate at every step by
        // a dense Cholesky solve; same tie-breaking.
        for seed in 0..5 {
            let (kernel, aff) = random_instance(10, 4, 12, 400 + seed);
            let params = SelectParams::default();
            let report = select_sbq(2, &kernel, &aff, &params);

            let mut chosen: Vec<usize> = Vec::new();
            for _ in 0..2 {
                let mut best: Option<(f64, usize)> = None;
                for j in 0..10 {
                    if chosen.contains(&j) {
                        continue;
                    }
                    let mut support = chosen.clone();
                    support.push(j);
                    let sub = kernel.matrix().principal(&support);
                    let zs = aff.gather(&support);
                    let chol = match Cholesky::factor(&sub) {
                        Ok(c) => c,
                        Err(_) => continue,
                    };
                    let g = dot(&zs, &chol.solve(&zs));
                    let improves = match best {
                        None => true,
                        Some((bg, bj)) => g > bg || (g == bg && j < bj),
                    };
                    if improves {
                        best = Some((g, j));
                    }
                }
                chosen.push(best.unwrap().1);
            }
            assert_eq!(report.selections, chosen, "seed {seed}");
        }
    }

    #[test]
    fn oversized_budget_truncates_without_error() {
        let (kernel, aff) = identity_kernel(vec![0.3, 0.1]);
        let report = select_sbq(5, &kernel, &aff, &SelectParams::default());
        assert_eq!(report.selections, vec![0, 1]);
        assert!(report.truncated);
        assert_eq!(report.objective_trace.len(), 2);
    }

    // ---- weights / variance ---------------------------------------------------

    #[test]
    fn single_selection_weight_is_scalar_solve() {
        let kmat = Matrix::from_rows(&[vec![4.0]]);
        let kernel = MatrixKernel::new(kmat).unwrap();
        let aff = AffinityVector::new(vec![0.8], 1.0).unwrap();
        let report = select_sbq(1, &kernel, &aff, &SelectParams::default());
        assert_eq!(report.weights, vec![0.2]);
    }

    #[test]
    fn identity_kernel_weights_equal_affinities() {
        let (kernel, aff) = identity_kernel(vec![0.5, 0.2, 0.9]);
        let report = select_sbq(3, &kernel, &aff, &SelectParams::default());
        let expect: Vec<f64> = report.selections.iter().map(|&i| aff.z_at(i)).collect();
        assert_eq!(report.weights, expect);
    }

    #[test]
    fn weights_solve_the_kernel_system() {
        for seed in 0..5 {
            let (kernel, aff) = random_instance(12, 5, 15, 500 + seed);
            let params = SelectParams::default();
            let run = run_greedy(6, &kernel, &aff, |state, src| {
                greedy_step(state, src, &aff, &params).map(|(_, s)| s)
            });
            let w = quadrature_weights(&run.state);
            let kw = run.state.kernel_matrix().matvec(&w);
            for (pos, &i) in run.state.indices().iter().enumerate() {
                assert!(
                    (kw[pos] - aff.z_at(i)).abs() <= 1e-8,
                    "seed {seed}: residual at {pos}"
                );
            }
            assert!(projection_residual_inf(&run.state) <= 1e-8);
        }
    }

    #[test]
    fn empty_state_variance_is_self_term() {
        let (_, aff) = identity_kernel(vec![0.5, 0.2]);
        let state = InverseState::<f64>::empty();
        assert_eq!(posterior_variance(&state, &aff), 2.0);
    }

    #[test]
    fn variance_equals_mmd_expansion_at_optimal_weights() {
        for seed in 0..5 {
            let (kernel, aff) = random_instance(9, 6, 11, 600 + seed);
            let params = SelectParams::default();
            let run = run_greedy(5, &kernel, &aff, |state, src| {
                greedy_step(state, src, &aff, &params).map(|(_, s)| s)
            });
            let w = quadrature_weights(&run.state);
            let var = posterior_variance(&run.state, &aff);
            let mmd = mmd_squared(&kernel, run.state.indices(), &w, &aff).unwrap();
            assert!(
                (var - mmd).abs() <= 1e-8 * mmd.abs().max(1e-8),
                "seed {seed}: {var} vs {mmd}"
            );
            // Equivalent linear form: mu_pp - sum_i w_i z_i.
            let linear = aff.test_self_term() - dot(&w, &aff.gather(run.state.indices()));
            assert!((var - linear).abs() <= 1e-8 * linear.abs().max(1e-8));
        }
    }

    #[test]
    fn variance_trace_is_nonincreasing() {
        for seed in 0..10 {
            let (kernel, aff) = random_instance(14, 5, 16, 700 + seed);
            let report = select_sbq(10, &kernel, &aff, &SelectParams::default());
            for pair in report.variance_trace.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-12, "seed {seed}: trace rose");
            }
        }
    }

    #[test]
    fn reports_are_deterministic() {
        let (kernel_a, aff) = random_instance(12, 4, 10, 900);
        let (kernel_b, _) = random_instance(12, 4, 10, 900);
        let a = select_sbq(6, &kernel_a, &aff, &SelectParams::default());
        let b = select_sbq(6, &kernel_b, &aff, &SelectParams::default());
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    // ---- influence ------------------------------------------------------------

    #[test]
    fn influence_reduces_to_dot_products_under_identity_metric() {
        let mut r = rng::seeded(21);
        let train = GradientMatrix::new(Matrix::from_fn(8, 4, |_, _| rng::standard_normal(&mut r)))
            .unwrap();
        let test = GradientMatrix::new(Matrix::from_fn(2, 4, |_, _| rng::standard_normal(&mut r)))
            .unwrap();
        let oracle =
            crate::kernel::KernelOracle::new(&train, &test, &FisherMetric::practical(4)).unwrap();
        let scores = influence_scores(&oracle, 0).unwrap();
        let expect: Vec<f64> = (0..8).map(|i| dot(train.row(i), test.row(0))).collect();
        for (a, b) in scores.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let ranking = rank_descending(&scores);
        let oracle_rank = rank_descending(&expect);
        assert_eq!(ranking, oracle_rank);
    }

    #[test]
    fn zero_test_gradient_scores_zero() {
        let mut r = rng::seeded(22);
        let train = GradientMatrix::new(Matrix::from_fn(5, 3, |_, _| {
            rng::standard_normal::<f64>(&mut r)
        }))
        .unwrap();
        let test = GradientMatrix::new(Matrix::zeros(1, 3)).unwrap();
        let oracle =
            crate::kernel::KernelOracle::new(&train, &test, &FisherMetric::practical(3)).unwrap();
        let scores = influence_scores(&oracle, 0).unwrap();
        assert!(scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn influence_matches_dense_metric_solve() {
        // Oracle: score_i = g_i' M^{-1} g_test via Gauss-Jordan.
        let mut r = rng::seeded(23);
        let train = GradientMatrix::new(Matrix::from_fn(10, 4, |_, _| {
            rng::standard_normal::<f64>(&mut r)
        }))
        .unwrap();
        let test = GradientMatrix::new(Matrix::from_fn(3, 4, |_, _| rng::standard_normal(&mut r)))
            .unwrap();
        let metric = estimate_fisher_info(&train, 1e-3).unwrap();
        let oracle = crate::kernel::KernelOracle::new(&train, &test, &metric).unwrap();
        let scores = influence_scores(&oracle, 1).unwrap();
        let minv = gauss_jordan_inverse(metric.info()).unwrap();
        let solved = minv.matvec(test.row(1));
        for i in 0..10 {
            let expect = dot(train.row(i), &solved);
            assert!(
                (scores[i] - expect).abs() <= 1e-10 * expect.abs().max(1.0),
                "{i}: {} vs {expect}",
                scores[i]
            );
        }
    }

    #[test]
    fn influence_ranking_is_metric_scale_invariant() {
        // Scaling the metric by c scales every score by 1/c; the ranking
        // cannot move.
        let mut r = rng::seeded(24);
        let train =
            GradientMatrix::new(Matrix::from_fn(12, 5, |_, _| rng::standard_normal(&mut r)))
                .unwrap();
        let test = GradientMatrix::new(Matrix::from_fn(1, 5, |_, _| rng::standard_normal(&mut r)))
            .unwrap();
        let metric = estimate_fisher_info(&train, 1e-2).unwrap();
        let oracle = crate::kernel::KernelOracle::new(&train, &test, &metric).unwrap();
        let base = rank_descending(&influence_scores(&oracle, 0).unwrap());

        // c * M is realized by scaling every metric-building gradient by
        // sqrt(c).
        let c = 7.5_f64;
        let scaled_rows = Matrix::from_fn(12, 5, |i, j| train.row(i)[j] * c.sqrt());
        let scaled_metric =
            estimate_fisher_info(&GradientMatrix::new(scaled_rows).unwrap(), 1e-2).unwrap();
        let scaled_oracle =
            crate::kernel::KernelOracle::new(&train, &test, &scaled_metric).unwrap();
        let scaled = rank_descending(&influence_scores(&scaled_oracle, 0).unwrap());
        assert_eq!(base, scaled);
    }
}
