//! Scalable alternatives to the full greedy scan.
//!
//! Three drop-in variants share the report contract of the full algorithm:
//!
//! * matching pursuit: ranks candidates by normalized residual correlation
//!   (O(|S|) arithmetic per candidate instead of O(|S|^2)), then refits the
//!   weights exactly through the maintained inverse;
//! * stochastic selection: scores a seeded uniform subsample of the pool per
//!   step, trading a delta-sized failure probability for fewer evaluations;
//! * partitioned selection: splits the pool into shards that are solved
//!   independently (in parallel, no cross-shard kernel entries), then re-runs
//!   the greedy scan over the union of the shard shortlists and keeps the
//!   best solution seen.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::core::{
    assemble_report, better, quadrature_weights, run_greedy, score_candidate, select_sbq,
    InverseState, SelectParams, SelectionConfig, SelectionReport, ShardStats,
};
use crate::error::{Error, Result};
use crate::kernel::{AffinityVector, KernelSource};
use crate::linalg::dot;
use crate::num::Real;
use crate::rng;

/// Which selection algorithm to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    Sbq,
    Mp,
    Stochastic,
    Distributed,
}

impl std::fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            SelectionMethod::Sbq => "sbq",
            SelectionMethod::Mp => "mp",
            SelectionMethod::Stochastic => "stochastic",
            SelectionMethod::Distributed => "distributed",
        };
        write!(f, "{name}")
    }
}

/// Method plus its knobs, as carried by configs and the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantConfig {
    pub method: SelectionMethod,
    pub k: usize,
    /// Failure probability for the stochastic variant.
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Shard count for the distributed variant.
    #[serde(default = "default_partitions")]
    pub partitions: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_delta() -> f64 {
    0.1
}

fn default_partitions() -> usize {
    1
}

impl VariantConfig {
    pub fn new(method: SelectionMethod, k: usize) -> Self {
        VariantConfig {
            method,
            k,
            delta: default_delta(),
            partitions: default_partitions(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("selection budget k must be at least 1"));
        }
        if self.method == SelectionMethod::Stochastic && !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::invalid(format!(
                "delta must lie in (0, 1], got {}",
                self.delta
            )));
        }
        if self.method == SelectionMethod::Distributed && self.partitions == 0 {
            return Err(Error::invalid("partition count must be at least 1"));
        }
        Ok(())
    }

    /// Dispatch to the configured algorithm.
    pub fn run<R: Real, S: KernelSource<R>>(
        &self,
        source: &S,
        affinity: &AffinityVector<R>,
        params: &SelectParams<R>,
    ) -> Result<SelectionReport<R>> {
        self.validate()?;
        Ok(match self.method {
            SelectionMethod::Sbq => select_sbq(self.k, source, affinity, params),
            SelectionMethod::Mp => select_mp(self.k, source, affinity, params),
            SelectionMethod::Stochastic => {
                select_stochastic(self.k, self.delta, self.seed, source, affinity, params)?
            }
            SelectionMethod::Distributed => {
                select_distributed(self.k, self.partitions, self.seed, source, affinity, params)?
            }
        })
    }
}

struct MpCandidate<R> {
    index: usize,
    score: R,
    border: Vec<R>,
    diag: R,
}

fn mp_step<R: Real, S: KernelSource<R>>(
    state: &InverseState<R>,
    source: &S,
    affinity: &AffinityVector<R>,
    params: &SelectParams<R>,
) -> Result<InverseState<R>> {
    let t = source.pool_size();
    let mut selected = vec![false; t];
    for &i in state.indices() {
        selected[i] = true;
    }
    let weights = quadrature_weights(state);
    let mut scored: Vec<MpCandidate<R>> = (0..t)
        .into_par_iter()
        .filter(|&j| !selected[j])
        .filter_map(|j| {
            let border: Vec<R> = state.indices().iter().map(|&s| source.pair(s, j)).collect();
            let diag = source.diag(j);
            if !(diag > R::zero()) {
                return None;
            }
            let residual = affinity.z_at(j) - dot(&border, &weights);
            let score = residual.abs() / diag.sqrt();
            if !score.is_finite() {
                return None;
            }
            Some(MpCandidate {
                index: j,
                score,
                border,
                diag,
            })
        })
        .collect();
    scored.sort_unstable_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.index.cmp(&b.index))
    });
    for cand in scored {
        match state.extend(
            cand.index,
            &cand.border,
            cand.diag,
            affinity.z_at(cand.index),
            params,
        ) {
            Ok(next) => return Ok(next),
            Err(Error::DegenerateCandidate { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::PoolExhausted {
        selected: state.len(),
    })
}

/// Matching-pursuit selection: pick the candidate with the largest
/// `|z_j - k(j, S) w_S| / sqrt(k(j, j))`, then refit the weights exactly.
/// First step coincides with the full greedy scan (both maximize
/// `z_j^2 / k(j,j)`).
pub fn select_mp<R: Real, S: KernelSource<R>>(
    k: usize,
    source: &S,
    affinity: &AffinityVector<R>,
    params: &SelectParams<R>,
) -> SelectionReport<R> {
    assert!(k >= 1, "selection budget must be at least 1");
    let evals_before = source.eval_count();
    let run = run_greedy(k, source, affinity, |state, src| {
        mp_step(state, src, affinity, params)
    });
    let config = SelectionConfig {
        k,
        tol_d_rel: params.tol_d_rel.as_f64(),
        fidelity_tol: params.fidelity_tol.as_f64(),
        delta: None,
        partitions: None,
    };
    assemble_report(run, source, evals_before, "mp", config, None, None)
}

/// Per-step sample size `min(t, max(1, ceil((t/k) ln(1/delta))))`.
fn stochastic_sample_size(t: usize, k: usize, delta: f64) -> usize {
    let nominal = ((t as f64 / k as f64) * (1.0 / delta).ln()).ceil();
    if !nominal.is_finite() {
        return t;
    }
    (nominal.max(1.0) as usize).min(t).max(1)
}

/// Stochastic greedy selection: each step scores only a seeded uniform
/// subsample of the unselected pool. When the sample covers the whole pool
/// the run is identical to the full greedy scan (and consumes no randomness).
pub fn select_stochastic<R: Real, S: KernelSource<R>>(
    k: usize,
    delta: f64,
    seed: u64,
    source: &S,
    affinity: &AffinityVector<R>,
    params: &SelectParams<R>,
) -> Result<SelectionReport<R>> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::invalid(format!(
            "delta must lie in (0, 1], got {delta}"
        )));
    }
    assert!(k >= 1, "selection budget must be at least 1");
    let t = source.pool_size();
    let sample_target = stochastic_sample_size(t, k, delta);
    let mut generator = rng::seeded(seed);
    let evals_before = source.eval_count();
    let run = run_greedy(k, source, affinity, |state, src| {
        let mut selected = vec![false; t];
        for &i in state.indices() {
            selected[i] = true;
        }
        let mut untried: Vec<usize> = (0..t).filter(|&j| !selected[j]).collect();
        let weights = quadrature_weights(state);
        loop {
            if untried.is_empty() {
                return Err(Error::PoolExhausted {
                    selected: state.len(),
                });
            }
            let draw: Vec<usize> = if sample_target >= untried.len() {
                untried.clone()
            } else {
                rng::sample_without_replacement(&mut generator, &untried, sample_target)
            };
            let best = draw
                .par_iter()
                .filter_map(|&j| score_candidate(state, &weights, src, affinity, params, j))
                .reduce_with(better);
            match best {
                Some(c) => {
                    return state.extend(
                        c.index,
                        &c.border,
                        c.diag,
                        affinity.z_at(c.index),
                        params,
                    );
                }
                None => {
                    // Whole draw was degenerate; keep sampling the rest.
                    untried.retain(|j| !draw.contains(j));
                }
            }
        }
    });
    let config = SelectionConfig {
        k,
        tol_d_rel: params.tol_d_rel.as_f64(),
        fidelity_tol: params.fidelity_tol.as_f64(),
        delta: Some(delta),
        partitions: None,
    };
    Ok(assemble_report(
        run,
        source,
        evals_before,
        "stochastic",
        config,
        Some(seed),
        None,
    ))
}

/// Restriction of a kernel source to a subset of its pool, with its own
/// call counter and distinct-pair footprint.
struct ShardView<'a, S> {
    base: &'a S,
    map: Vec<usize>,
    calls: AtomicU64,
    pairs: Mutex<HashSet<(usize, usize)>>,
}

impl<'a, S> ShardView<'a, S> {
    fn new(base: &'a S, map: Vec<usize>) -> Self {
        ShardView {
            base,
            map,
            calls: AtomicU64::new(0),
            pairs: Mutex::new(HashSet::new()),
        }
    }

    fn stats<R: Real>(&self, label: &str, selected: usize, objective: R) -> ShardStats {
        ShardStats {
            label: label.to_string(),
            pool: self.map.len(),
            selected,
            kernel_evals: self.calls.load(Ordering::Relaxed),
            distinct_pairs: self.pairs.lock().expect("pair set poisoned").len() as u64,
            final_objective: objective.as_f64(),
        }
    }
}

impl<'a, R: Real, S: KernelSource<R>> KernelSource<R> for ShardView<'a, S> {
    fn pool_size(&self) -> usize {
        self.map.len()
    }

    fn pair(&self, i: usize, j: usize) -> R {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let (a, b) = (self.map[i], self.map[j]);
        self.pairs
            .lock()
            .expect("pair set poisoned")
            .insert((a.min(b), a.max(b)));
        self.base.pair(a, b)
    }

    fn eval_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

fn globalize<R: Real>(mut report: SelectionReport<R>, map: &[usize]) -> SelectionReport<R> {
    for idx in report.selections.iter_mut() {
        *idx = map[*idx];
    }
    report
}

/// Partitioned greedy selection: a seeded random split into `partitions`
/// shards, an independent greedy pass per shard (no cross-shard kernel
/// entries are ever requested), then a second greedy pass over the union of
/// the shard shortlists. The best objective among the merge result and the
/// individual shard results wins, so the output never falls below the best
/// single shard.
pub fn select_distributed<R: Real, S: KernelSource<R>>(
    k: usize,
    partitions: usize,
    seed: u64,
    source: &S,
    affinity: &AffinityVector<R>,
    params: &SelectParams<R>,
) -> Result<SelectionReport<R>> {
    if partitions == 0 {
        return Err(Error::invalid("partition count must be at least 1"));
    }
    assert!(k >= 1, "selection budget must be at least 1");
    let t = source.pool_size();
    let evals_before = source.eval_count();
    let mut generator = rng::seeded(seed);
    let mut order: Vec<usize> = (0..t).collect();
    order.shuffle(&mut generator);

    let mut shards: Vec<Vec<usize>> = Vec::with_capacity(partitions);
    let base_size = t / partitions;
    let remainder = t % partitions;
    let mut cursor = 0;
    for s in 0..partitions {
        let size = base_size + usize::from(s < remainder);
        let mut shard: Vec<usize> = order[cursor..cursor + size].to_vec();
        shard.sort_unstable();
        shards.push(shard);
        cursor += size;
    }

    let config = SelectionConfig {
        k,
        tol_d_rel: params.tol_d_rel.as_f64(),
        fidelity_tol: params.fidelity_tol.as_f64(),
        delta: None,
        partitions: Some(partitions),
    };

    let shard_outputs: Vec<(ShardStats, SelectionReport<R>)> = shards
        .par_iter()
        .enumerate()
        .map(|(sid, map)| {
            let view = ShardView::new(source, map.clone());
            let aff = AffinityVector::new(affinity.gather(map), affinity.test_self_term())
                .expect("restricted affinity is finite");
            let report = select_sbq(k, &view, &aff, params);
            let stats = view.stats(
                &sid.to_string(),
                report.selections.len(),
                report.final_objective(),
            );
            (stats, globalize(report, map))
        })
        .collect();

    let mut stats: Vec<ShardStats> = shard_outputs.iter().map(|(s, _)| s.clone()).collect();
    let total_evals = || source.eval_count() - evals_before;

    if partitions == 1 {
        let (_, report) = shard_outputs.into_iter().next().expect("one shard");
        return Ok(SelectionReport {
            kernel_evals: total_evals(),
            config,
            method: "distributed".to_string(),
            seed: Some(seed),
            shard_stats: Some(stats),
            ..report
        });
    }

    let mut union: Vec<usize> = shard_outputs
        .iter()
        .flat_map(|(_, r)| r.selections.iter().copied())
        .collect();
    union.sort_unstable();
    union.dedup();

    let merged = if union.is_empty() {
        None
    } else {
        let view = ShardView::new(source, union.clone());
        let aff = AffinityVector::new(affinity.gather(&union), affinity.test_self_term())
            .expect("restricted affinity is finite");
        let report = select_sbq(k, &view, &aff, params);
        stats.push(view.stats("merge", report.selections.len(), report.final_objective()));
        Some(globalize(report, &union))
    };

    // Keep the best objective seen; the merge result wins ties.
    let mut winner = merged;
    for (_, shard_report) in shard_outputs {
        let replace = match &winner {
            None => true,
            Some(best) => shard_report.final_objective() > best.final_objective(),
        };
        if replace {
            winner = Some(shard_report);
        }
    }
    let winner = winner.ok_or(Error::PoolExhausted { selected: 0 })?;

    Ok(SelectionReport {
        kernel_evals: total_evals(),
        config,
        method: "distributed".to_string(),
        seed: Some(seed),
        shard_stats: Some(stats),
        ..winner
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::MatrixKernel;
    use crate::linalg::Matrix;

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

    #[test]
    fn sample_size_formula() {
        assert_eq!(stochastic_sample_size(100, 10, 1.0), 1);
        assert_eq!(stochastic_sample_size(100, 10, 0.1), 24); // ceil(10*2.302..)
        assert_eq!(stochastic_sample_size(10, 10, 1e-9), 10); // clamped to t
    }

    #[test]
    fn mp_equals_sbq_on_orthogonal_atoms() {
        let kernel = MatrixKernel::new(Matrix::identity(5)).unwrap();
        let aff = AffinityVector::new(vec![0.3, -0.9, 0.6, 0.1, 0.8], 2.0).unwrap();
        let params = SelectParams::default();
        let mp = select_mp(4, &kernel, &aff, &params);
        let kernel2 = MatrixKernel::new(Matrix::identity(5)).unwrap();
        let sbq = select_sbq(4, &kernel2, &aff, &params);
        assert_eq!(mp.selections, sbq.selections);
        assert_eq!(mp.core_json(), sbq.core_json());
    }

    #[test]
    fn mp_first_pick_matches_sbq() {
        for seed in 0..10 {
            let (kernel, aff) = random_instance(12, 5, 6, 40 + seed);
            let params = SelectParams::default();
            let mp = select_mp(1, &kernel, &aff, &params);
            let (kernel2, _) = random_instance(12, 5, 6, 40 + seed);
            let sbq = select_sbq(1, &kernel2, &aff, &params);
            assert_eq!(mp.selections, sbq.selections, "seed {seed}");
        }
    }

    #[test]
    fn mp_never_uses_more_kernel_evals_than_sbq() {
        for seed in 0..5 {
            let (kernel, aff) = random_instance(20, 5, 25, 80 + seed);
            let params = SelectParams::default();
            let mp = select_mp(6, &kernel, &aff, &params);
            let (kernel2, _) = random_instance(20, 5, 25, 80 + seed);
            let sbq = select_sbq(6, &kernel2, &aff, &params);
            assert!(mp.kernel_evals <= sbq.kernel_evals);
        }
    }

    #[test]
    fn stochastic_with_full_pool_sampling_equals_sbq() {
        // t small enough that the sample covers the pool at every step.
        let (kernel, aff) = random_instance(12, 4, 15, 60);
        let params = SelectParams::default();
        let stoch = select_stochastic(3, 0.05, 999, &kernel, &aff, &params).unwrap();
        let (kernel2, _) = random_instance(12, 4, 15, 60);
        let sbq = select_sbq(3, &kernel2, &aff, &params);
        assert_eq!(stoch.core_json(), sbq.core_json());
    }

    #[test]
    fn stochastic_delta_one_samples_single_candidate() {
        let (kernel, aff) = random_instance(30, 4, 35, 61);
        let params = SelectParams::default();
        let k = 5;
        let report = select_stochastic(k, 1.0, 7, &kernel, &aff, &params).unwrap();
        assert_eq!(report.selections.len(), k);
        // Each step scores one candidate at |S| + 1 evals.
        let bound: u64 = (0..k as u64).map(|s| s + 1).sum();
        assert!(
            report.kernel_evals <= bound,
            "{} > {bound}",
            report.kernel_evals
        );
    }

    #[test]
    fn stochastic_eval_count_respects_sample_bound() {
        let t = 40;
        let k = 5;
        let delta = 0.3;
        let (kernel, aff) = random_instance(t, 6, 45, 62);
        let params = SelectParams::default();
        let report = select_stochastic(k, delta, 3, &kernel, &aff, &params).unwrap();
        let sample = stochastic_sample_size(t, k, delta) as u64;
        let bound: u64 = (0..k as u64).map(|s| sample * (s + 1)).sum();
        assert!(report.kernel_evals <= bound);

        let (kernel2, _) = random_instance(t, 6, 45, 62);
        let sbq = select_sbq(k, &kernel2, &aff, &params);
        assert!(report.kernel_evals < sbq.kernel_evals);
    }

    #[test]
    fn stochastic_rejects_bad_delta() {
        let (kernel, aff) = random_instance(5, 2, 6, 63);
        let params = SelectParams::default();
        assert!(select_stochastic(2, 0.0, 1, &kernel, &aff, &params).is_err());
        assert!(select_stochastic(2, 1.5, 1, &kernel, &aff, &params).is_err());
    }

    #[test]
    fn distributed_single_shard_equals_sbq() {
        let (kernel, aff) = random_instance(15, 5, 18, 64);
        let params = SelectParams::default();
        let dist = select_distributed(4, 1, 123, &kernel, &aff, &params).unwrap();
        let (kernel2, _) = random_instance(15, 5, 18, 64);
        let sbq = select_sbq(4, &kernel2, &aff, &params);
        assert_eq!(dist.core_json(), sbq.core_json());
        assert_eq!(dist.method, "distributed");
        assert_eq!(dist.shard_stats.as_ref().unwrap().len(), 1);
    }

    #[test]
    fn distributed_shard_footprint_is_bounded() {
        let t = 24;
        let l = 3;
        let k = 2;
        let (kernel, aff) = random_instance(t, 5, 30, 65);
        let params = SelectParams::default();
        let report = select_distributed(k, l, 9, &kernel, &aff, &params).unwrap();
        let bound = ((t / l + k) * (t / l + k)) as u64;
        for stat in report
            .shard_stats
            .as_ref()
            .unwrap()
            .iter()
            .filter(|s| s.label != "merge")
        {
            assert!(
                stat.distinct_pairs <= bound,
                "shard {} footprint {} > {bound}",
                stat.label,
                stat.distinct_pairs
            );
        }
    }

    #[test]
    fn distributed_objective_dominates_every_shard() {
        for seed in 0..5 {
            let (kernel, aff) = random_instance(12, 5, 14, 70 + seed);
            let params = SelectParams::default();
            let report = select_distributed(2, 3, seed, &kernel, &aff, &params).unwrap();
            for stat in report.shard_stats.as_ref().unwrap() {
                assert!(
                    report.final_objective() >= stat.final_objective - 1e-12,
                    "seed {seed}: shard {} beats the merged result",
                    stat.label
                );
            }
        }
    }

    #[test]
    fn variant_dispatch_validates() {
        let (kernel, aff) = random_instance(6, 3, 8, 75);
        let params = SelectParams::default();
        let mut cfg = VariantConfig::new(SelectionMethod::Stochastic, 2);
        cfg.delta = 0.0;
        assert!(cfg.run(&kernel, &aff, &params).is_err());
        cfg.delta = 0.5;
        assert!(cfg.run(&kernel, &aff, &params).is_ok());
    }

    #[test]
    fn mp_respects_weak_submodular_bound_against_exhaustive_optimum() {
        // Oracle: brute-forced optimum and sparse eigenvalues from the
        // analysis instruments; the pursuit run must reach the
        // (1 - e^{-mk/(Mr)}) fraction of the optimal objective.
        use crate::analysis::{brute_force_optimum, sparse_eigenvalue, Extreme};
        let params = SelectParams::default();
        for seed in 0..8 {
            let t = 8 + (seed as usize % 3);
            let r = 2 + (seed as usize % 2);
            let (kernel, aff) = random_instance(t, 4, 2 * t, 900 + seed);
            let kmat = kernel.matrix().clone();
            let m = sparse_eigenvalue(&kmat, (2 * r).min(t), Extreme::Min).unwrap();
            let big_m = sparse_eigenvalue(&kmat, r + 1, Extreme::Max).unwrap();
            let best = brute_force_optimum(&kmat, &aff, r).unwrap();
            let report = select_mp(r, &kernel, &aff, &params);
            let floor = (1.0 - (-(m * r as f64) / (big_m * r as f64)).exp()) * best.gain;
            assert!(
                report.final_objective() >= floor - 1e-9 * best.gain.abs().max(1.0),
                "seed {seed}: mp objective {} below bound {floor}",
                report.final_objective()
            );
        }
    }

    #[test]
    fn all_variants_satisfy_core_selection_invariants() {
        // Weight residual, variance identity and nonincreasing variance
        // hold for every variant's report on a common instance.
        use crate::kernel::mmd_squared;
        use crate::linalg::Cholesky;
        let params = SelectParams::default();
        let run = |method: SelectionMethod| {
            let (kernel, aff) = random_instance(16, 5, 20, 321);
            let mut cfg = VariantConfig::new(method, 6);
            cfg.delta = 0.4;
            cfg.partitions = 3;
            cfg.seed = 5;
            (cfg.run(&kernel, &aff, &params).unwrap(), aff)
        };
        for method in [
            SelectionMethod::Sbq,
            SelectionMethod::Mp,
            SelectionMethod::Stochastic,
            SelectionMethod::Distributed,
        ] {
            let (report, aff) = run(method);
            for pair in report.variance_trace.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-12, "{method}: variance rose");
            }
            // Rebuild K_SS densely and check the weight system and the
            // variance expression.
            let (kernel, _) = random_instance(16, 5, 20, 321);
            let kmat = kernel.matrix().principal(&report.selections);
            let zs = aff.gather(&report.selections);
            let kw = kmat.matvec(&report.weights);
            for (a, b) in kw.iter().zip(&zs) {
                assert!((a - b).abs() <= 1e-8, "{method}: weight residual");
            }
            let chol = Cholesky::factor(&kmat).unwrap();
            let gain = dot(&zs, &chol.solve(&zs));
            let variance = aff.test_self_term() - gain;
            let last = *report.variance_trace.last().unwrap();
            assert!(
                (variance - last).abs() <= 1e-8 * variance.abs().max(1e-8),
                "{method}: variance expression mismatch"
            );
            let mmd = mmd_squared(&kernel, &report.selections, &report.weights, &aff).unwrap();
            assert!((mmd - last).abs() <= 1e-8 * mmd.abs().max(1e-8));
        }
    }
}
