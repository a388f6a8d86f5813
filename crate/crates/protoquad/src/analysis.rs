//! Verification instruments for the selection guarantees.
//!
//! Everything here is brute force on purpose: sparse eigenvalues by support
//! enumeration, exhaustive subset optima, convergence-bound checks, empirical
//! weak-submodularity ratios and the Hessian-vs-gradient-Gram comparison.
//! Combinatorial guards keep the enumerations at desk scale.

use serde::{Deserialize, Serialize};

use crate::embedding::{per_example_gradients, Dataset, ParamVector};
use crate::error::{Error, Result};
use crate::kernel::{AffinityVector, MatrixKernel};
use crate::linalg::{dot, norm_inf, sym_eigen, Cholesky, Matrix};
use crate::num::Real;
use crate::rng;
use crate::select::{select_sbq, SelectParams};

/// Hard cap on enumerated subsets.
pub const SUBSET_GUARD: u128 = 1_000_000;

/// Which extreme of the restricted Rayleigh quotient to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extreme {
    Min,
    Max,
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i + 1) as u128;
        if acc > SUBSET_GUARD.saturating_mul(1000) {
            return u128::MAX;
        }
    }
    acc
}

fn check_symmetric<R: Real>(k: &Matrix<R>) -> Result<()> {
    if !k.is_square() {
        return Err(Error::invalid("kernel matrix must be square"));
    }
    let scale = k.max_abs_entry().max(R::one());
    for i in 0..k.nrows() {
        for j in (i + 1)..k.ncols() {
            if (k.get(i, j) - k.get(j, i)).abs() > R::of(1e-8) * scale {
                return Err(Error::invalid(format!(
                    "kernel matrix is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    Ok(())
}

/// Visit every size-`s` subset of `0..n` in lexicographic order.
fn for_each_subset(n: usize, s: usize, mut f: impl FnMut(&[usize])) {
    if s == 0 {
        f(&[]);
        return;
    }
    if s > n {
        return;
    }
    let mut idx: Vec<usize> = (0..s).collect();
    loop {
        f(&idx);
        // advance
        let mut i = s;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - s {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in (i + 1)..s {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Extreme eigenvalue of the Rayleigh quotient restricted to vectors with at
/// most `s` nonzero coordinates: brute force over all size-`s` principal
/// submatrices.
pub fn sparse_eigenvalue<R: Real>(k: &Matrix<R>, s: usize, which: Extreme) -> Result<R> {
    check_symmetric(k)?;
    let n = k.nrows();
    if s == 0 || s > n {
        return Err(Error::invalid(format!(
            "sparsity {s} out of range for a {n}-dim matrix"
        )));
    }
    let supports = binomial(n, s);
    if supports > SUBSET_GUARD {
        return Err(Error::CombinatorialGuard {
            subsets: supports,
            limit: SUBSET_GUARD,
        });
    }
    let mut extreme: Option<R> = None;
    for_each_subset(n, s, |support| {
        let sub = k.principal(support);
        let eig = sym_eigen(&sub);
        let candidate = match which {
            Extreme::Min => eig.values[0],
            Extreme::Max => eig.values[s - 1],
        };
        extreme = Some(match extreme {
            None => candidate,
            Some(cur) => match which {
                Extreme::Min => cur.min(candidate),
                Extreme::Max => cur.max(candidate),
            },
        });
    });
    Ok(extreme.expect("at least one support visited"))
}

/// Result of the exhaustive search over subsets of bounded size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BruteForceOptimum<R> {
    pub subset: Vec<usize>,
    /// Explained objective `z_S' K_SS^{-1} z_S` of the optimum.
    pub gain: R,
    /// Variance value `mu_pp - gain`.
    pub value: R,
}

fn dense_gain<R: Real>(k: &Matrix<R>, z: &[R], support: &[usize]) -> Option<R> {
    if support.is_empty() {
        return Some(R::zero());
    }
    let sub = k.principal(support);
    let zs: Vec<R> = support.iter().map(|&i| z[i]).collect();
    let chol = Cholesky::factor(&sub).ok()?;
    Some(dot(&zs, &chol.solve(&zs)))
}

fn lex_less(a: &[usize], b: &[usize]) -> bool {
    a.iter().lt(b.iter())
}

/// Exhaustive minimizer of the variance objective over subsets of size at
/// most `r`, evaluated by dense solves. Ties break toward the
/// lexicographically smallest subset.
pub fn brute_force_optimum<R: Real>(
    k: &Matrix<R>,
    affinity: &AffinityVector<R>,
    r: usize,
) -> Result<BruteForceOptimum<R>> {
    check_symmetric(k)?;
    let t = k.nrows();
    if affinity.len() != t {
        return Err(Error::dims("affinity length does not match kernel"));
    }
    if r == 0 || r > t {
        return Err(Error::invalid(format!("subset size {r} out of range")));
    }
    let mut total: u128 = 0;
    for s in 0..=r {
        total = total.saturating_add(binomial(t, s));
    }
    if total > SUBSET_GUARD {
        return Err(Error::CombinatorialGuard {
            subsets: total,
            limit: SUBSET_GUARD,
        });
    }
    let z = affinity.z();
    let mut best_subset: Vec<usize> = Vec::new();
    let mut best_gain = R::zero(); // empty subset
    for s in 1..=r {
        for_each_subset(t, s, |support| {
            if let Some(gain) = dense_gain(k, z, support) {
                if gain > best_gain || (gain == best_gain && lex_less(support, &best_subset)) {
                    best_gain = gain;
                    best_subset = support.to_vec();
                }
            }
        });
    }
    Ok(BruteForceOptimum {
        value: affinity.test_self_term() - best_gain,
        subset: best_subset,
        gain: best_gain,
    })
}

/// Outcome of one convergence-bound check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport<R> {
    /// Smallest `2r`-sparse eigenvalue.
    pub m: R,
    /// Largest `(r+1)`-sparse eigenvalue.
    pub big_m: R,
    pub r: usize,
    /// Greedy steps run: `ceil((M/m) r ln(1/eps))`, clamped to the pool.
    pub k: usize,
    /// Achieved ratio `(v(S_G) - v(S*)) / (v(empty) - v(S*))`.
    pub epsilon: R,
    pub requested_epsilon: R,
    pub holds: bool,
    /// Whether `g(S_G) >= (1 - e^{-mk/(Mr)}) g(S*)` also holds.
    pub corollary_holds: bool,
    pub greedy_gain: R,
    pub optimal_gain: R,
}

/// Run the greedy selector long enough for the convergence guarantee to
/// apply at `epsilon` and compare against the exhaustive optimum of size `r`.
pub fn verify_convergence_bound<R: Real>(
    k: &Matrix<R>,
    affinity: &AffinityVector<R>,
    r: usize,
    epsilon: R,
    params: &SelectParams<R>,
) -> Result<BoundReport<R>> {
    if !(epsilon > R::zero() && epsilon < R::one()) {
        return Err(Error::invalid("epsilon must lie in (0, 1)"));
    }
    let t = k.nrows();
    if r == 0 || r > t {
        return Err(Error::invalid(format!("target size {r} out of range")));
    }
    let m = sparse_eigenvalue(k, (2 * r).min(t), Extreme::Min)?;
    if m <= R::of(1e-12) {
        return Err(Error::invalid(format!(
            "smallest sparse eigenvalue {m} is numerically zero; the bound is vacuous"
        )));
    }
    let big_m = sparse_eigenvalue(k, (r + 1).min(t), Extreme::Max)?;
    let steps_nominal =
        ((big_m / m).as_f64() * r as f64 * (R::one() / epsilon).as_f64().ln()).ceil();
    let steps = (steps_nominal.max(1.0) as usize).min(t);

    let kernel = MatrixKernel::new(k.clone())?;
    let report = select_sbq(steps, &kernel, affinity, params);
    let greedy_gain = report.final_objective();
    let brute = brute_force_optimum(k, affinity, r)?;
    let optimal_gain = brute.gain;

    let achieved = if optimal_gain > R::of(1e-15) {
        ((optimal_gain - greedy_gain) / optimal_gain).max(R::zero())
    } else {
        R::zero()
    };
    let corollary_floor =
        (R::one() - (-(m * R::of(steps as f64)) / (big_m * R::of(r as f64))).exp()) * optimal_gain;
    let tol = R::of(1e-9) * optimal_gain.abs().max(R::one());
    Ok(BoundReport {
        m,
        big_m,
        r,
        k: steps,
        epsilon: achieved,
        requested_epsilon: epsilon,
        holds: achieved <= epsilon,
        corollary_holds: greedy_gain >= corollary_floor - tol,
        greedy_gain,
        optimal_gain,
    })
}

/// Empirical lower bound on the weak-submodularity ratio.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmodReport<R> {
    pub min_ratio: R,
    pub m: R,
    pub big_m: R,
    pub pairs_evaluated: usize,
    pub pairs_skipped: usize,
    /// `min_ratio >= m/M - 1e-8`.
    pub holds: bool,
}

/// Ratio of summed singleton gains to the joint gain over disjoint `(L, S)`
/// pairs with `|L| <= r`, `|S| <= r`. `trials = 0` enumerates every pair;
/// otherwise pairs are sampled with the given seed. The reference bound uses
/// the smallest `2r`-sparse and largest `(r+1)`-sparse eigenvalues.
pub fn submodularity_ratio<R: Real>(
    k: &Matrix<R>,
    affinity: &AffinityVector<R>,
    r: usize,
    trials: usize,
    seed: u64,
) -> Result<SubmodReport<R>> {
    check_symmetric(k)?;
    let t = k.nrows();
    if r == 0 || 2 * r > t {
        return Err(Error::invalid(format!(
            "need 1 <= r and 2r <= {t} for disjoint pairs, got r = {r}"
        )));
    }
    let z = affinity.z();

    let mut pairs: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    if trials == 0 {
        // Exhaustive: guard the pair count first.
        let mut count: u128 = 0;
        for l in 0..=r {
            let choose_l = binomial(t, l);
            for s in 1..=r {
                count = count.saturating_add(choose_l.saturating_mul(binomial(t - l, s)));
            }
        }
        if count > SUBSET_GUARD {
            return Err(Error::CombinatorialGuard {
                subsets: count,
                limit: SUBSET_GUARD,
            });
        }
        for l in 0..=r {
            for_each_subset(t, l, |lset| {
                let complement: Vec<usize> = (0..t).filter(|i| !lset.contains(i)).collect();
                for s in 1..=r {
                    for_each_subset(complement.len(), s, |pick| {
                        let sset: Vec<usize> = pick.iter().map(|&p| complement[p]).collect();
                        pairs.push((lset.to_vec(), sset));
                    });
                }
            });
        }
    } else {
        let mut generator = rng::seeded(seed);
        let all: Vec<usize> = (0..t).collect();
        for trial in 0..trials {
            let l_size = trial % (r + 1);
            let s_size = 1 + trial % r;
            let drawn = rng::sample_without_replacement(&mut generator, &all, l_size + s_size);
            let mut lset = drawn[..l_size].to_vec();
            let mut sset = drawn[l_size..].to_vec();
            lset.sort_unstable();
            sset.sort_unstable();
            pairs.push((lset, sset));
        }
    }

    let mut min_ratio: Option<R> = None;
    let mut evaluated = 0;
    let mut skipped = 0;
    for (lset, sset) in &pairs {
        let g_l = match dense_gain(k, z, lset) {
            Some(g) => g,
            None => {
                skipped += 1;
                continue;
            }
        };
        let mut joint_support = lset.clone();
        joint_support.extend_from_slice(sset);
        joint_support.sort_unstable();
        let joint = match dense_gain(k, z, &joint_support) {
            Some(g) => g - g_l,
            None => {
                skipped += 1;
                continue;
            }
        };
        if joint.abs() <= R::of(1e-12) {
            skipped += 1;
            continue;
        }
        let mut singles = R::zero();
        let mut bad = false;
        for &j in sset {
            let mut support = lset.clone();
            support.push(j);
            support.sort_unstable();
            match dense_gain(k, z, &support) {
                Some(g) => singles = singles + (g - g_l),
                None => {
                    bad = true;
                    break;
                }
            }
        }
        if bad {
            skipped += 1;
            continue;
        }
        let ratio = singles / joint;
        evaluated += 1;
        min_ratio = Some(match min_ratio {
            None => ratio,
            Some(cur) => cur.min(ratio),
        });
    }

    let min_ratio = min_ratio
        .ok_or_else(|| Error::invalid("every sampled pair had a degenerate joint gain"))?;
    let m = sparse_eigenvalue(k, (2 * r).min(t), Extreme::Min)?;
    let big_m = sparse_eigenvalue(k, (r + 1).min(t), Extreme::Max)?;
    Ok(SubmodReport {
        min_ratio,
        m,
        big_m,
        pairs_evaluated: evaluated,
        pairs_skipped: skipped,
        holds: min_ratio >= m / big_m - R::of(1e-8),
    })
}

/// Comparison of the exact logistic Hessian with the gradient Gram matrix at
/// a (near-)optimum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HessianGramReport<R> {
    pub n: usize,
    pub param_dim: usize,
    pub hessian_frobenius: R,
    pub gram_frobenius: R,
    pub relative_frobenius_diff: R,
    /// |cosine| between the top eigenvectors of the two matrices.
    pub top_eigenvector_alignment: R,
    pub mean_gradient_norm: R,
}

/// At an unregularized optimum the mean log-likelihood gradient vanishes;
/// this gate enforces it before the comparison is meaningful.
const GRADIENT_GATE: f64 = 1e-6;

/// Compare `(1/n) sum sigma(1-sigma) x x'` (exact Hessian of the mean NLL)
/// against `(1/n) sum (y-sigma)^2 x x'` (the gradient Gram). Report-only:
/// the two agree statistically under a well-specified model at large `n`,
/// not pointwise on finite samples.
pub fn hessian_gram_check<R: Real>(
    data: &Dataset<R>,
    params: &ParamVector<R>,
) -> Result<HessianGramReport<R>> {
    let grads = per_example_gradients(params, data)?;
    let n = data.len();
    let p = grads.param_dim();
    let mut mean_grad = vec![R::zero(); p];
    for i in 0..n {
        for j in 0..p {
            mean_grad[j] = mean_grad[j] + grads.row(i)[j];
        }
    }
    for g in mean_grad.iter_mut() {
        *g = *g / R::of(n as f64);
    }
    let gate = norm_inf(&mean_grad);
    if gate > R::of(GRADIENT_GATE) {
        return Err(Error::GradientGate {
            norm: gate.as_f64(),
            gate: GRADIENT_GATE,
        });
    }

    let probs = crate::embedding::predict_proba(params, data)?;
    let intercept = p == data.dim() + 1;
    let d = data.dim();
    let mut hessian = Matrix::zeros(p, p);
    let mut gram = Matrix::zeros(p, p);
    let mut xt = vec![R::zero(); p];
    for i in 0..n {
        let x = data.features().row(i);
        xt[..d].copy_from_slice(x);
        if intercept {
            xt[d] = R::one();
        }
        let s = probs[i];
        let y = R::of(data.labels()[i] as f64);
        let wh = s * (R::one() - s);
        let r = y - s;
        let wg = r * r;
        for a in 0..p {
            for b in a..p {
                let v = hessian.get(a, b) + wh * xt[a] * xt[b];
                hessian.set(a, b, v);
                let v = gram.get(a, b) + wg * xt[a] * xt[b];
                gram.set(a, b, v);
            }
        }
    }
    let inv_n = R::one() / R::of(n as f64);
    for a in 0..p {
        for b in a..p {
            let h = hessian.get(a, b) * inv_n;
            hessian.set(a, b, h);
            hessian.set(b, a, h);
            let g = gram.get(a, b) * inv_n;
            gram.set(a, b, g);
            gram.set(b, a, g);
        }
    }

    let hf = hessian.frobenius_norm();
    let gf = gram.frobenius_norm();
    let mut diff = R::zero();
    for a in 0..p {
        for b in 0..p {
            let e = hessian.get(a, b) - gram.get(a, b);
            diff = diff + e * e;
        }
    }
    let diff = diff.sqrt();
    let relative = if hf > R::zero() { diff / hf } else { R::zero() };

    let top = |m: &Matrix<R>| -> Vec<R> {
        let eig = sym_eigen(m);
        (0..p).map(|i| eig.vectors.get(i, p - 1)).collect()
    };
    let hv = top(&hessian);
    let gv = top(&gram);
    let alignment = dot(&hv, &gv).abs();

    Ok(HessianGramReport {
        n,
        param_dim: p,
        hessian_frobenius: hf,
        gram_frobenius: gf,
        relative_frobenius_diff: relative,
        top_eigenvector_alignment: alignment,
        mean_gradient_norm: gate,
    })
}

/// Random consistent instance: `K` is the Gram matrix of `t` random
/// embeddings (plus `jitter` on the diagonal, which corresponds to appending
/// orthogonal tail coordinates), and the affinity comes from `test_size`
/// random test embeddings in the same space.
pub fn random_gram_instance<R: Real>(
    t: usize,
    test_size: usize,
    dim: usize,
    jitter: f64,
    seed: u64,
) -> (Matrix<R>, AffinityVector<R>) {
    let mut generator = rng::seeded(seed);
    let train = Matrix::from_fn(t, dim, |_, _| rng::standard_normal::<R>(&mut generator));
    let test = Matrix::from_fn(test_size, dim, |_, _| {
        rng::standard_normal::<R>(&mut generator)
    });
    let kmat = Matrix::from_fn(t, t, |i, j| dot(train.row(i), train.row(j)))
        .plus_scaled_identity(R::of(jitter));
    let z: Vec<R> = (0..t)
        .map(|i| {
            let mut s = R::zero();
            for j in 0..test_size {
                s = s + dot(train.row(i), test.row(j));
            }
            s / R::of(test_size as f64)
        })
        .collect();
    let mut mu = R::zero();
    for a in 0..test_size {
        for b in 0..test_size {
            mu = mu + dot(test.row(a), test.row(b));
        }
    }
    mu = mu / R::of((test_size * test_size) as f64);
    let affinity = AffinityVector::new(z, mu.max(R::zero())).expect("finite instance");
    (kmat, affinity)
}
