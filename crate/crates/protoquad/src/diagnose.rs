//! Named verification suites behind the `diagnose` subcommand.
//!
//! Each suite runs a fixed set of seeded checks and reports one pass/fail
//! row per check. Rows marked `report_only` never fail; they carry measured
//! values that have no asserted threshold.

use serde::{Deserialize, Serialize};

use crate::analysis::{
    hessian_gram_check, random_gram_instance, submodularity_ratio, verify_convergence_bound,
};
use crate::embedding::{
    estimate_fisher_info, per_example_gradients, train_logistic, Dataset, GradientMatrix,
    ParamVector, TrainConfig,
};
use crate::error::{Error, Result};
use crate::kernel::{mmd_squared, KernelOracle, MatrixKernel};
use crate::linalg::{dot, norm2, Matrix};
use crate::rng;
use crate::select::{
    influence_scores, posterior_variance, projection_residual_inf, quadrature_weights,
    rank_descending, select_sbq, SelectParams,
};
use crate::workflows::{synthetic_logistic, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Appendix,
    Gradients,
    Hessian,
    Influence,
    All,
}

impl std::fmt::Display for Suite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Suite::Appendix => "appendix",
            Suite::Gradients => "gradients",
            Suite::Hessian => "hessian",
            Suite::Influence => "influence",
            Suite::All => "all",
        };
        write!(f, "{name}")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub passed: bool,
    pub report_only: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub suite: String,
    pub seed: u64,
    pub checks: Vec<CheckRow>,
    pub all_passed: bool,
}

impl DiagnosticReport {
    /// Fixed-width pass/fail table.
    pub fn table(&self) -> String {
        let mut out = format!("suite: {} (seed {})\n", self.suite, self.seed);
        for row in &self.checks {
            let status = if row.report_only {
                "INFO"
            } else if row.passed {
                "PASS"
            } else {
                "FAIL"
            };
            out.push_str(&format!("{status}  {:<28}  {}\n", row.name, row.detail));
        }
        let gated = self.checks.iter().filter(|c| !c.report_only).count();
        let passed = self
            .checks
            .iter()
            .filter(|c| !c.report_only && c.passed)
            .count();
        out.push_str(&format!(
            "result: {} ({passed}/{gated})\n",
            if self.all_passed { "PASS" } else { "FAIL" }
        ));
        out
    }
}

fn check(name: &str, passed: bool, detail: String) -> CheckRow {
    CheckRow {
        name: name.to_string(),
        passed,
        report_only: false,
        detail,
    }
}

fn info(name: &str, detail: String) -> CheckRow {
    CheckRow {
        name: name.to_string(),
        passed: true,
        report_only: true,
        detail,
    }
}

fn appendix_checks(seed: u64) -> Result<Vec<CheckRow>> {
    let params = SelectParams::default();
    let mut rows = Vec::new();

    // Orthogonal projection: the fitted weights leave no residual against
    // any selected atom.
    let mut worst_residual = 0.0_f64;
    for i in 0..10 {
        let (kmat, aff) = random_gram_instance::<f64>(12, 5, 16, 0.1, seed + i);
        let kernel = MatrixKernel::new(kmat)?;
        let report = select_sbq(6, &kernel, &aff, &params);
        // Re-run through the state to measure the residual directly.
        let state = replay_state(&kernel, &aff, &report.selections, &params)?;
        worst_residual = worst_residual.max(projection_residual_inf(&state));
    }
    rows.push(check(
        "orthogonal-projection",
        worst_residual <= 1e-8,
        format!("max |z_S - K_SS w|_inf = {worst_residual:.3e} over 10 instances"),
    ));

    // Variance form equals the squared-discrepancy expansion at the fitted
    // weights.
    let mut worst_rel = 0.0_f64;
    for i in 0..10 {
        let (kmat, aff) = random_gram_instance::<f64>(10, 6, 14, 0.1, seed + 100 + i);
        let kernel = MatrixKernel::new(kmat)?;
        let report = select_sbq(5, &kernel, &aff, &params);
        let state = replay_state(&kernel, &aff, &report.selections, &params)?;
        let var = posterior_variance(&state, &aff);
        let w = quadrature_weights(&state);
        let mmd = mmd_squared(&kernel, &report.selections, &w, &aff)?;
        let rel = (var - mmd).abs() / mmd.abs().max(1e-8);
        worst_rel = worst_rel.max(rel);
    }
    rows.push(check(
        "mmd-equivalence",
        worst_rel <= 1e-8,
        format!("max relative gap {worst_rel:.3e} over 10 instances"),
    ));

    // Convergence bound at epsilon = 0.1 on small random instances.
    let mut bound_failures = 0;
    let instances = 20;
    for i in 0..instances {
        let t = 6 + (i as usize % 5);
        let r = 2 + (i as usize % 2);
        let (kmat, aff) = random_gram_instance::<f64>(t, 4, 2 * t, 0.15, seed + 200 + i);
        let report = verify_convergence_bound(&kmat, &aff, r, 0.1, &params)?;
        if !(report.holds && report.corollary_holds) {
            bound_failures += 1;
        }
    }
    rows.push(check(
        "theorem-bound",
        bound_failures == 0,
        format!(
            "{}/{instances} instances satisfied the bound at eps=0.1",
            instances - bound_failures
        ),
    ));

    // Weak-submodularity ratio against the spectral bound, exhaustively.
    let mut min_margin = f64::INFINITY;
    let mut submod_ok = true;
    for i in 0..5 {
        let (kmat, aff) = random_gram_instance::<f64>(8, 4, 12, 0.1, seed + 300 + i);
        let report = submodularity_ratio(&kmat, &aff, 3, 0, 0)?;
        submod_ok &= report.holds;
        min_margin = min_margin.min(report.min_ratio - report.m / report.big_m);
    }
    rows.push(check(
        "submodularity-ratio",
        submod_ok,
        format!("min (ratio - m/M) margin = {min_margin:.3e} over 5 instances"),
    ));

    Ok(rows)
}

/// Rebuild the selection state by extending along a known index sequence.
fn replay_state(
    kernel: &MatrixKernel<f64>,
    affinity: &crate::kernel::AffinityVector<f64>,
    selections: &[usize],
    params: &SelectParams<f64>,
) -> Result<crate::select::InverseState<f64>> {
    use crate::kernel::KernelSource;
    let mut state = crate::select::InverseState::empty();
    for &j in selections {
        let border: Vec<f64> = state.indices().iter().map(|&s| kernel.pair(s, j)).collect();
        state = state.extend(j, &border, kernel.diag(j), affinity.z_at(j), params)?;
    }
    Ok(state)
}

fn gradient_checks(seed: u64) -> Result<Vec<CheckRow>> {
    let mut generator = rng::seeded(seed);
    let d = 4;
    let h = 1e-5;
    let mut worst = 0.0_f64;
    for _ in 0..1000 {
        let theta: Vec<f64> = rng::normal_vec(&mut generator, d);
        let x: Vec<f64> = rng::normal_vec(&mut generator, d);
        let y = u8::from(rng::uniform::<f64>(&mut generator, 0.0, 1.0) < 0.5);
        let data = Dataset::from_parts(Matrix::from_rows(std::slice::from_ref(&x)), vec![y])?;
        let p = ParamVector::new(theta.clone())?;
        let analytic = per_example_gradients(&p, &data)?;
        let ll = |t: &[f64]| -> f64 {
            let m = dot(t, &x);
            let softplus = m.max(0.0) + (-m.abs()).exp().ln_1p();
            f64::from(y) * m - softplus
        };
        let mut fd = vec![0.0; d];
        for j in 0..d {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += h;
            tm[j] -= h;
            fd[j] = (ll(&tp) - ll(&tm)) / (2.0 * h);
        }
        let diff: Vec<f64> = analytic
            .row(0)
            .iter()
            .zip(&fd)
            .map(|(a, b)| a - b)
            .collect();
        let rel = norm2(&diff) / norm2(&fd).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(vec![check(
        "gradient-finite-differences",
        worst <= 1e-6,
        format!("max relative error {worst:.3e} over 1000 draws"),
    )])
}

fn hessian_checks(seed: u64) -> Result<Vec<CheckRow>> {
    let (train, _, _) = synthetic_logistic(
        &SyntheticSpec {
            train: 20_000,
            validation: 1,
            test: 1,
            dim: 5,
            param_scale: 1.5,
            density: 1.0,
            frequency_decay: 0.0,
            positive_rate: 0.5,
            clusters: 0,
            cluster_decay: 1.0,
            cluster_jitter: 0.1,
        },
        seed,
    );
    let cfg = TrainConfig {
        l2: 0.0,
        tol: 1e-8,
        max_iter: 100,
        intercept: false,
    };
    let fit = train_logistic(&train, &cfg)?;
    if !fit.converged {
        return Err(Error::invalid("hessian suite fit did not converge"));
    }
    let report = hessian_gram_check(&train, &fit.params)?;
    Ok(vec![
        check(
            "hessian-vs-gram",
            report.relative_frobenius_diff <= 0.05,
            format!(
                "relative Frobenius difference {:.4} at n = {}",
                report.relative_frobenius_diff, report.n
            ),
        ),
        info(
            "hessian-top-eigenvector",
            format!(
                "top-eigenvector |cos| = {:.4} (direction is unidentifiable when \
                 the spectrum is flat)",
                report.top_eigenvector_alignment
            ),
        ),
    ])
}

fn influence_checks(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();

    // Ranking invariance under metric rescaling.
    let mut generator = rng::seeded(seed);
    let mut stable = true;
    for _ in 0..5 {
        let train = GradientMatrix::new(Matrix::from_fn(15, 5, |_, _| {
            rng::standard_normal::<f64>(&mut generator)
        }))?;
        let test = GradientMatrix::new(Matrix::from_fn(1, 5, |_, _| {
            rng::standard_normal::<f64>(&mut generator)
        }))?;
        let metric = estimate_fisher_info(&train, 1e-3)?;
        let oracle = KernelOracle::new(&train, &test, &metric)?;
        let base_rank = rank_descending(&influence_scores(&oracle, 0)?);
        let c: f64 = 13.0;
        let scaled_rows = Matrix::from_fn(15, 5, |i, j| train.row(i)[j] * c.sqrt());
        let scaled = estimate_fisher_info(&GradientMatrix::new(scaled_rows)?, 1e-3)?;
        let scaled_oracle = KernelOracle::new(&train, &test, &scaled)?;
        let scaled_rank = rank_descending(&influence_scores(&scaled_oracle, 0)?);
        stable &= base_rank == scaled_rank;
    }
    rows.push(check(
        "influence-scale-covariance",
        stable,
        "ranking unchanged under metric rescaling (5 instances)".to_string(),
    ));

    // Agreement between the influence ranking and the one-step greedy pick,
    // reported without an assertion: the greedy objective normalizes by
    // k(i, i) while influence scores do not, so the two can differ.
    let mut agree = 0;
    let trials = 50;
    for i in 0..trials {
        let mut g2 = rng::seeded(seed + 1000 + i);
        let train = GradientMatrix::new(Matrix::from_fn(12, 6, |_, _| {
            rng::standard_normal::<f64>(&mut g2)
        }))?;
        let test = GradientMatrix::new(Matrix::from_fn(1, 6, |_, _| {
            rng::standard_normal::<f64>(&mut g2)
        }))?;
        let metric = estimate_fisher_info(&train, 1e-3)?;
        let oracle = KernelOracle::new(&train, &test, &metric)?;
        let top_influence = rank_descending(&influence_scores(&oracle, 0)?)[0];
        let aff = oracle.affinity_vector()?;
        let one_step = select_sbq(1, &oracle, &aff, &SelectParams::default());
        if one_step.selections.first() == Some(&top_influence) {
            agree += 1;
        }
    }
    rows.push(info(
        "influence-vs-one-step-greedy",
        format!(
            "top-1 agreement {agree}/{trials}; the greedy pick maximizes z_i^2/k(i,i), \
             influence maximizes z_i"
        ),
    ));

    Ok(rows)
}

/// Run one suite and collect its rows.
pub fn run_suite(suite: Suite, seed: u64) -> Result<DiagnosticReport> {
    let mut checks = Vec::new();
    match suite {
        Suite::Appendix => checks.extend(appendix_checks(seed)?),
        Suite::Gradients => checks.extend(gradient_checks(seed)?),
        Suite::Hessian => checks.extend(hessian_checks(seed)?),
        Suite::Influence => checks.extend(influence_checks(seed)?),
        Suite::All => {
            checks.extend(appendix_checks(seed)?);
            checks.extend(gradient_checks(seed)?);
            checks.extend(hessian_checks(seed)?);
            checks.extend(influence_checks(seed)?);
        }
    }
    let all_passed = checks.iter().all(|c| c.passed || c.report_only);
    Ok(DiagnosticReport {
        suite: suite.to_string(),
        seed,
        checks,
        all_passed,
    })
}
