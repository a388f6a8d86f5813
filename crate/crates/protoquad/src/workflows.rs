//! Desk-scale experiment workflows: cleaning malicious training points,
//! repairing flipped labels, and training-set summarization.
//!
//! Each run builds one data instance per replicate seed; every method and
//! baseline inside a replicate sees the same splits and the same noise
//! realization, so curves are paired across methods. Reports are plain data
//! and serialize deterministically.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{
    accuracy, estimate_fisher_info, mean_log_likelihood, per_example_gradients, predict_proba,
    train_logistic, train_logistic_weighted, Dataset, FisherMetric, MetricMode, TrainConfig,
};
use crate::error::{Error, Result};
use crate::kernel::{KernelOracle, KernelSource};
use crate::linalg::{dot, Cholesky, Matrix};
use crate::rng;
use crate::select::{rank_descending, SelectParams, SelectionMethod, VariantConfig};

/// Synthetic instance description: features are standard normal, optionally
/// sparse (each coordinate is active with probability `density`, mimicking
/// bag-of-words data), and labels are drawn from a logistic model whose
/// margin scale is `param_scale`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub dim: usize,
    #[serde(default = "default_param_scale")]
    pub param_scale: f64,
    #[serde(default = "default_density")]
    pub density: f64,
    /// Power-law decay of per-feature activation rates (0 = uniform). With
    /// decay `a`, feature `j` is active with probability proportional to
    /// `(j+1)^-a`, mimicking word or fingerprint frequencies.
    #[serde(default)]
    pub frequency_decay: f64,
    /// Marginal rate of the positive class (0.5 = balanced).
    #[serde(default = "default_positive_rate")]
    pub positive_rate: f64,
    /// Number of population clusters (0 = unclustered). Examples are drawn
    /// as `center + cluster_jitter * noise`, with cluster probabilities
    /// decaying as `(c+1)^-cluster_decay`; a heavy tail of rare modes is
    /// what makes subset coverage matter.
    #[serde(default)]
    pub clusters: usize,
    #[serde(default = "default_cluster_decay")]
    pub cluster_decay: f64,
    #[serde(default = "default_cluster_jitter")]
    pub cluster_jitter: f64,
}

fn default_cluster_decay() -> f64 {
    1.0
}

fn default_cluster_jitter() -> f64 {
    0.1
}

fn default_param_scale() -> f64 {
    2.0
}

fn default_density() -> f64 {
    1.0
}

fn default_positive_rate() -> f64 {
    0.5
}

/// Where the experiment data comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSpec {
    Synthetic(SyntheticSpec),
    /// One CSV file split into train/validation/test at runtime.
    Csv {
        path: String,
        #[serde(default = "default_val_fraction")]
        validation_fraction: f64,
        test_count: usize,
    },
}

fn default_val_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Clean,
    Mislabel,
    Summarize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Random,
    SelfInfluence,
}

/// Selection method without the budget; the task decides `k`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: SelectionMethod,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_partitions")]
    pub partitions: usize,
}

fn default_delta() -> f64 {
    0.1
}

fn default_partitions() -> usize {
    1
}

impl Default for MethodSpec {
    fn default() -> Self {
        MethodSpec {
            method: SelectionMethod::Sbq,
            delta: default_delta(),
            partitions: default_partitions(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub data: DataSpec,
    /// Fraction of training labels flipped (clean and mislabel tasks).
    #[serde(default)]
    pub flip_fraction: f64,
    /// Clean points held out for curation (mislabel); 0 means the whole
    /// validation split.
    #[serde(default)]
    pub curated_size: usize,
    #[serde(default)]
    pub removal_counts: Vec<usize>,
    #[serde(default)]
    pub inspect_counts: Vec<usize>,
    #[serde(default)]
    pub subset_sizes: Vec<usize>,
    /// Retrain summaries with the (nonnegative part of the) quadrature
    /// weights instead of uniform weights.
    #[serde(default)]
    pub weighted_retrain: bool,
    /// Build the label-repair affinity from misclassified curated points
    /// only, rather than from the whole curated set.
    #[serde(default)]
    pub target_errors_only: bool,
    #[serde(default)]
    pub method: MethodSpec,
    #[serde(default)]
    pub baselines: Vec<Baseline>,
    #[serde(default = "default_mode")]
    pub mode: MetricMode,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_l2")]
    pub l2: f64,
    #[serde(default = "default_tol")]
    pub train_tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_intercept")]
    pub intercept: bool,
    pub seed: u64,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
}

fn default_mode() -> MetricMode {
    MetricMode::Full
}

fn default_ridge() -> f64 {
    1e-6
}

fn default_l2() -> f64 {
    1e-2
}

fn default_tol() -> f64 {
    1e-8
}

fn default_max_iter() -> usize {
    200
}

fn default_intercept() -> bool {
    true
}

fn default_replicates() -> usize {
    1
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::invalid("replicates must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.flip_fraction) {
            return Err(Error::invalid("flip_fraction must lie in [0, 1)"));
        }
        if self.ridge < 0.0 || self.l2 < 0.0 {
            return Err(Error::invalid("ridge and l2 must be nonnegative"));
        }
        match self.task {
            TaskKind::Clean => {
                if self.removal_counts.is_empty() {
                    return Err(Error::invalid("clean task needs removal_counts"));
                }
            }
            TaskKind::Mislabel => {
                if self.flip_fraction <= 0.0 {
                    return Err(Error::invalid(
                        "mislabel task needs flip_fraction > 0; the fraction of \
                         fixed flips is undefined otherwise",
                    ));
                }
                if self.inspect_counts.is_empty() {
                    return Err(Error::invalid("mislabel task needs inspect_counts"));
                }
            }
            TaskKind::Summarize => {
                if self.subset_sizes.is_empty() {
                    return Err(Error::invalid("summarize task needs subset_sizes"));
                }
                if self.subset_sizes.iter().any(|&k| k < 2) {
                    return Err(Error::invalid("subset sizes below 2 cannot be retrained"));
                }
            }
        }
        if let DataSpec::Synthetic(spec) = &self.data {
            if spec.train < 2 || spec.test == 0 || spec.validation == 0 || spec.dim == 0 {
                return Err(Error::invalid("synthetic spec sizes must be positive"));
            }
        }
        if let DataSpec::Csv {
            validation_fraction,
            ..
        } = &self.data
        {
            if !(0.0..1.0).contains(validation_fraction) {
                return Err(Error::invalid("validation_fraction must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    fn train_config(&self) -> TrainConfig<f64> {
        TrainConfig {
            l2: self.l2,
            tol: self.train_tol,
            max_iter: self.max_iter,
            intercept: self.intercept,
        }
    }
}

/// One evaluated budget on one curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub budget: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_log_likelihood: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fraction_fixed: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodCurve {
    pub method: String,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub seed: u64,
    pub curves: Vec<MethodCurve>,
    /// Metrics of the model trained on all available data.
    pub full_reference: CurvePoint,
    pub selection_kernel_evals: u64,
    pub selection_truncated: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub task: TaskKind,
    pub config: ExperimentConfig,
    pub replicates: Vec<ReplicateOutcome>,
    /// Per-method medians over replicates, point by point.
    pub medians: Vec<MethodCurve>,
}

impl ExperimentReport {
    /// Plot-ready rows `method,budget,metric,seed`. The metric column is the
    /// task's primary metric: accuracy for cleaning, fraction of flips fixed
    /// for label repair, test log-likelihood for summarization.
    pub fn csv_rows(&self) -> String {
        let mut out = String::from("method,budget,metric,seed\n");
        for rep in &self.replicates {
            for curve in &rep.curves {
                for point in &curve.points {
                    let metric = match self.task {
                        TaskKind::Clean => point.accuracy,
                        TaskKind::Mislabel => point.fraction_fixed,
                        TaskKind::Summarize => point.test_log_likelihood,
                    };
                    if let Some(value) = metric {
                        out.push_str(&format!(
                            "{},{},{},{}\n",
                            curve.method, point.budget, value, rep.seed
                        ));
                    }
                }
            }
        }
        out
    }

    pub fn median_curve(&self, method: &str) -> Option<&MethodCurve> {
        self.medians.iter().find(|c| c.method == method)
    }
}

struct Instance {
    train: Dataset<f64>,
    validation: Dataset<f64>,
    test: Dataset<f64>,
}

/// Draw a well-specified logistic instance; splits share the generator.
pub fn synthetic_logistic(
    spec: &SyntheticSpec,
    seed: u64,
) -> (Dataset<f64>, Dataset<f64>, Dataset<f64>) {
    let mut generator = rng::seeded(seed);
    let total = spec.train + spec.validation + spec.test;
    let density = spec.density.clamp(0.0, 1.0);
    // Per-feature activation rates, power-law decayed around the mean
    // density.
    let rates: Vec<f64> = if spec.frequency_decay > 0.0 {
        let raw: Vec<f64> = (0..spec.dim)
            .map(|j| ((j + 1) as f64).powf(-spec.frequency_decay))
            .collect();
        let mean = raw.iter().sum::<f64>() / spec.dim as f64;
        raw.iter().map(|r| (r * density / mean).min(1.0)).collect()
    } else {
        vec![density; spec.dim]
    };
    let features = if spec.clusters > 0 {
        let c = spec.clusters;
        let centers = Matrix::from_fn(c, spec.dim, |_, j| {
            if rates[j] < 1.0 && rng::uniform::<f64>(&mut generator, 0.0, 1.0) >= rates[j] {
                0.0
            } else {
                rng::standard_normal::<f64>(&mut generator)
            }
        });
        let weights: Vec<f64> = (0..c)
            .map(|i| ((i + 1) as f64).powf(-spec.cluster_decay))
            .collect();
        let total_weight: f64 = weights.iter().sum();
        let assignments: Vec<usize> = (0..total)
            .map(|_| {
                let mut draw = rng::uniform::<f64>(&mut generator, 0.0, total_weight);
                let mut pick = c - 1;
                for (idx, w) in weights.iter().enumerate() {
                    if draw < *w {
                        pick = idx;
                        break;
                    }
                    draw -= w;
                }
                pick
            })
            .collect();
        Matrix::from_fn(total, spec.dim, |i, j| {
            centers.get(assignments[i], j)
                + spec.cluster_jitter * rng::standard_normal::<f64>(&mut generator)
        })
    } else {
        Matrix::from_fn(total, spec.dim, |_, j| {
            if rates[j] < 1.0 && rng::uniform::<f64>(&mut generator, 0.0, 1.0) >= rates[j] {
                0.0
            } else {
                rng::standard_normal::<f64>(&mut generator)
            }
        })
    };
    let mut direction = rng::normal_vec::<f64>(&mut generator, spec.dim);
    // Normalize empirically so the margin scale is param_scale for any
    // feature law.
    let margin_std = {
        let margins: Vec<f64> = (0..total)
            .map(|i| dot(features.row(i), &direction))
            .collect();
        let mean = margins.iter().sum::<f64>() / total as f64;
        (margins.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / total as f64)
            .sqrt()
            .max(1e-12)
    };
    let scale = spec.param_scale / margin_std;
    for v in direction.iter_mut() {
        *v *= scale;
    }
    // Intercept shift hitting the requested positive rate on the sampled
    // margins (bisection on the mean predicted probability).
    let offset = {
        let rate = spec.positive_rate.clamp(0.01, 0.99);
        let margins: Vec<f64> = (0..total)
            .map(|i| dot(features.row(i), &direction))
            .collect();
        let mean_sigma = |b: f64| {
            margins
                .iter()
                .map(|m| 1.0 / (1.0 + (-(m + b)).exp()))
                .sum::<f64>()
                / total as f64
        };
        let (mut lo, mut hi) = (-60.0, 60.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if mean_sigma(mid) < rate {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let labels: Vec<u8> = (0..total)
        .map(|i| {
            let margin = dot(features.row(i), &direction) + offset;
            let p = 1.0 / (1.0 + (-margin).exp());
            u8::from(rng::uniform::<f64>(&mut generator, 0.0, 1.0) < p)
        })
        .collect();
    let all = Dataset::from_parts(features, labels).expect("synthetic instance is valid");
    let train: Vec<usize> = (0..spec.train).collect();
    let val: Vec<usize> = (spec.train..spec.train + spec.validation).collect();
    let test: Vec<usize> = (spec.train + spec.validation..total).collect();
    (all.subset(&train), all.subset(&val), all.subset(&test))
}

fn split_csv(
    data: &Dataset<f64>,
    validation_fraction: f64,
    test_count: usize,
    seed: u64,
) -> Result<Instance> {
    let n = data.len();
    if test_count + 2 > n {
        return Err(Error::invalid(format!(
            "test_count {test_count} leaves no training data out of {n} rows"
        )));
    }
    let mut generator = rng::seeded(seed);
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut generator);
    let mut test: Vec<usize> = order[..test_count].to_vec();
    let rest = &order[test_count..];
    let val_count = ((rest.len() as f64) * validation_fraction).round() as usize;
    let val_count = val_count.clamp(1, rest.len().saturating_sub(2).max(1));
    let mut validation: Vec<usize> = rest[..val_count].to_vec();
    let mut train: Vec<usize> = rest[val_count..].to_vec();
    test.sort_unstable();
    validation.sort_unstable();
    train.sort_unstable();
    Ok(Instance {
        train: data.subset(&train),
        validation: data.subset(&validation),
        test: data.subset(&test),
    })
}

fn derived_seed(base: u64, tag: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag)
}

fn flip_labels(data: &mut Dataset<f64>, count: usize, seed: u64) -> Vec<usize> {
    let mut generator = rng::seeded(seed);
    let all: Vec<usize> = (0..data.len()).collect();
    let mut flipped = rng::sample_without_replacement(&mut generator, &all, count);
    flipped.sort_unstable();
    for &i in &flipped {
        let y = data.labels()[i];
        data.set_label(i, 1 - y);
    }
    flipped
}

fn metric_for(
    mode: MetricMode,
    grads: &crate::embedding::GradientMatrix<f64>,
    ridge: f64,
) -> Result<FisherMetric<f64>> {
    match mode {
        MetricMode::Full => estimate_fisher_info(grads, ridge),
        MetricMode::Practical => Ok(FisherMetric::practical(grads.param_dim())),
    }
}

/// Selection order extended to the whole pool: once the kernel's span is
/// exhausted the remaining candidates follow in index order.
fn pad_order(selections: &[usize], pool: usize) -> Vec<usize> {
    let mut seen = vec![false; pool];
    let mut order = Vec::with_capacity(pool);
    for &i in selections {
        seen[i] = true;
        order.push(i);
    }
    for i in 0..pool {
        if !seen[i] {
            order.push(i);
        }
    }
    order
}

struct Retrained {
    accuracy: f64,
    test_ll: f64,
    converged: bool,
}

fn retrain(
    train: &Dataset<f64>,
    test: &Dataset<f64>,
    cfg: &TrainConfig<f64>,
    weights: Option<&[f64]>,
) -> Result<Retrained> {
    let outcome = match weights {
        Some(w) => train_logistic_weighted(train, w, cfg)?,
        None => train_logistic(train, cfg)?,
    };
    Ok(Retrained {
        accuracy: accuracy(&outcome.params, test)?,
        test_ll: mean_log_likelihood(&outcome.params, test)?,
        converged: outcome.converged,
    })
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn median_curves(replicates: &[ReplicateOutcome]) -> Vec<MethodCurve> {
    let Some(first) = replicates.first() else {
        return Vec::new();
    };
    first
        .curves
        .iter()
        .map(|template| {
            let points = template
                .points
                .iter()
                .enumerate()
                .map(|(pi, point)| {
                    let collect = |f: fn(&CurvePoint) -> Option<f64>| {
                        let mut vals: Vec<f64> = replicates
                            .iter()
                            .filter_map(|rep| {
                                rep.curves
                                    .iter()
                                    .find(|c| c.method == template.method)
                                    .and_then(|c| c.points.get(pi))
                                    .and_then(f)
                            })
                            .collect();
                        median(&mut vals)
                    };
                    CurvePoint {
                        budget: point.budget,
                        accuracy: collect(|p| p.accuracy),
                        test_log_likelihood: collect(|p| p.test_log_likelihood),
                        fraction_fixed: collect(|p| p.fraction_fixed),
                    }
                })
                .collect();
            MethodCurve {
                method: template.method.clone(),
                points,
            }
        })
        .collect()
}

/// Run the configured experiment over all replicate seeds (in parallel;
/// results are collected in seed order, so reports are deterministic).
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let csv_data = match &config.data {
        DataSpec::Csv { path, .. } => {
            Some(crate::io::load_dataset::<f64>(std::path::Path::new(path))?)
        }
        DataSpec::Synthetic(_) => None,
    };
    let replicates: Result<Vec<ReplicateOutcome>> = (0..config.replicates)
        .into_par_iter()
        .map(|rep| {
            let seed = config.seed.wrapping_add(rep as u64);
            let instance = match &config.data {
                DataSpec::Synthetic(spec) => {
                    let (train, validation, test) = synthetic_logistic(spec, seed);
                    Instance {
                        train,
                        validation,
                        test,
                    }
                }
                DataSpec::Csv {
                    validation_fraction,
                    test_count,
                    ..
                } => split_csv(
                    csv_data.as_ref().expect("csv loaded above"),
                    *validation_fraction,
                    *test_count,
                    seed,
                )?,
            };
            match config.task {
                TaskKind::Clean => run_cleaning_replicate(config, instance, seed),
                TaskKind::Mislabel => run_mislabel_replicate(config, instance, seed),
                TaskKind::Summarize => run_summarize_replicate(config, instance, seed),
            }
        })
        .collect();
    let replicates = replicates?;
    let medians = median_curves(&replicates);
    Ok(ExperimentReport {
        task: config.task,
        config: config.clone(),
        replicates,
        medians,
    })
}

/// Orders shared by the selection method and its baselines.
struct Rankings {
    curves: Vec<(String, Vec<usize>)>,
    kernel_evals: u64,
    truncated: bool,
    selection_prefix: usize,
}

fn build_rankings(
    config: &ExperimentConfig,
    oracle: &KernelOracle<f64>,
    seed: u64,
    k: usize,
) -> Result<Rankings> {
    let affinity = oracle.affinity_vector()?;
    let params = SelectParams::default();
    let variant = VariantConfig {
        method: config.method.method,
        k,
        delta: config.method.delta,
        partitions: config.method.partitions,
        seed: derived_seed(seed, 1),
    };
    let report = variant.run(oracle, &affinity, &params)?;
    let pool = oracle.train_len();
    let mut curves = vec![(
        config.method.method.to_string(),
        pad_order(&report.selections, pool),
    )];
    for baseline in &config.baselines {
        match baseline {
            Baseline::Random => {
                let mut generator = rng::seeded(derived_seed(seed, 2));
                let all: Vec<usize> = (0..pool).collect();
                let order = rng::sample_without_replacement(&mut generator, &all, pool);
                curves.push(("random".to_string(), order));
            }
            Baseline::SelfInfluence => {
                let diag: Vec<f64> = (0..pool).map(|i| oracle.diag(i)).collect();
                curves.push(("self_influence".to_string(), rank_descending(&diag)));
            }
        }
    }
    Ok(Rankings {
        curves,
        kernel_evals: report.kernel_evals,
        truncated: report.truncated,
        selection_prefix: report.selections.len(),
    })
}

fn misclassified_rows(
    params: &crate::embedding::ParamVector<f64>,
    data: &Dataset<f64>,
) -> Result<Vec<usize>> {
    let proba = predict_proba(params, data)?;
    Ok(proba
        .iter()
        .zip(data.labels())
        .enumerate()
        .filter(|(_, (&p, &y))| (p >= 0.5) != (y == 1))
        .map(|(i, _)| i)
        .collect())
}

fn run_cleaning_replicate(
    config: &ExperimentConfig,
    instance: Instance,
    seed: u64,
) -> Result<ReplicateOutcome> {
    let cfg = config.train_config();
    let mut warnings = Vec::new();
    let mut noisy_train = instance.train.clone();
    let flip_count = (config.flip_fraction * noisy_train.len() as f64).round() as usize;
    let _flipped = flip_labels(&mut noisy_train, flip_count, derived_seed(seed, 3));

    let max_budget = *config.removal_counts.iter().max().expect("validated");
    if max_budget >= noisy_train.len() {
        return Err(Error::invalid(format!(
            "removal budget {max_budget} does not leave a training set of size > 0"
        )));
    }

    let base = train_logistic(&noisy_train, &cfg)?;
    if !base.converged {
        warnings.push("base fit did not converge".to_string());
    }
    let miss = misclassified_rows(&base.params, &instance.validation)?;
    if miss.is_empty() {
        return Err(Error::NoMisclassified);
    }
    let train_grads = per_example_gradients(&base.params, &noisy_train)?;
    let target_grads = per_example_gradients(&base.params, &instance.validation.subset(&miss))?;
    let metric = metric_for(config.mode, &train_grads, config.ridge)?;
    let oracle = KernelOracle::new(&train_grads, &target_grads, &metric)?;
    let rankings = build_rankings(config, &oracle, seed, max_budget.max(1))?;

    let base_point = Retrained {
        accuracy: accuracy(&base.params, &instance.test)?,
        test_ll: mean_log_likelihood(&base.params, &instance.test)?,
        converged: base.converged,
    };

    let curves = rankings
        .curves
        .iter()
        .map(|(name, order)| {
            let points = config
                .removal_counts
                .iter()
                .map(|&budget| {
                    if budget == 0 {
                        return CurvePoint {
                            budget,
                            accuracy: Some(base_point.accuracy),
                            test_log_likelihood: Some(base_point.test_ll),
                            fraction_fixed: None,
                        };
                    }
                    let removed: std::collections::HashSet<usize> =
                        order[..budget].iter().copied().collect();
                    let kept: Vec<usize> = (0..noisy_train.len())
                        .filter(|i| !removed.contains(i))
                        .collect();
                    match retrain(&noisy_train.subset(&kept), &instance.test, &cfg, None) {
                        Ok(r) => {
                            if !r.converged {
                                warnings.push(format!(
                                    "{name}: retrain at budget {budget} did not converge"
                                ));
                            }
                            CurvePoint {
                                budget,
                                accuracy: Some(r.accuracy),
                                test_log_likelihood: Some(r.test_ll),
                                fraction_fixed: None,
                            }
                        }
                        Err(e) => {
                            warnings
                                .push(format!("{name}: retrain at budget {budget} failed: {e}"));
                            CurvePoint {
                                budget,
                                accuracy: None,
                                test_log_likelihood: None,
                                fraction_fixed: None,
                            }
                        }
                    }
                })
                .collect();
            MethodCurve {
                method: name.clone(),
                points,
            }
        })
        .collect::<Vec<_>>();

    Ok(ReplicateOutcome {
        seed,
        curves,
        full_reference: CurvePoint {
            budget: 0,
            accuracy: Some(base_point.accuracy),
            test_log_likelihood: Some(base_point.test_ll),
            fraction_fixed: None,
        },
        selection_kernel_evals: rankings.kernel_evals,
        selection_truncated: rankings.truncated,
        warnings,
    })
}

fn run_mislabel_replicate(
    config: &ExperimentConfig,
    instance: Instance,
    seed: u64,
) -> Result<ReplicateOutcome> {
    let cfg = config.train_config();
    let mut warnings = Vec::new();

    let curated = if config.curated_size == 0 || config.curated_size >= instance.validation.len() {
        instance.validation.clone()
    } else {
        let rows: Vec<usize> = (0..config.curated_size).collect();
        instance.validation.subset(&rows)
    };

    let mut noisy_train = instance.train.clone();
    let flip_count = ((config.flip_fraction * noisy_train.len() as f64).round() as usize).max(1);
    let flipped = flip_labels(&mut noisy_train, flip_count, derived_seed(seed, 3));
    let flipped_set: std::collections::HashSet<usize> = flipped.iter().copied().collect();

    let combined = noisy_train.concat(&curated)?;
    let base = train_logistic(&combined, &cfg)?;
    if !base.converged {
        warnings.push("base fit did not converge".to_string());
    }

    let target = if config.target_errors_only {
        let miss = misclassified_rows(&base.params, &curated)?;
        if miss.is_empty() {
            warnings.push(
                "no curated point was misclassified; targeting the whole curated set".to_string(),
            );
            curated.clone()
        } else {
            curated.subset(&miss)
        }
    } else {
        // The whole curated set: its mean embedding is the gradient of the
        // clean validation loss, the direction that undoes the flip damage.
        curated.clone()
    };

    let train_grads = per_example_gradients(&base.params, &noisy_train)?;
    let target_grads = per_example_gradients(&base.params, &target)?;
    let metric = metric_for(config.mode, &train_grads, config.ridge)?;
    let oracle = KernelOracle::new(&train_grads, &target_grads, &metric)?;

    let max_budget =
        (*config.inspect_counts.iter().max().expect("validated")).min(noisy_train.len());
    let rankings = build_rankings(config, &oracle, seed, max_budget.max(1))?;

    let total_flips = flipped.len() as f64;
    let curves = rankings
        .curves
        .iter()
        .map(|(name, order)| {
            let points = config
                .inspect_counts
                .iter()
                .map(|&budget| {
                    let budget = budget.min(noisy_train.len());
                    let inspected = &order[..budget];
                    let fixed = inspected.iter().filter(|i| flipped_set.contains(i)).count();
                    let mut repaired = noisy_train.clone();
                    for &i in inspected {
                        if flipped_set.contains(&i) {
                            repaired.set_label(i, instance.train.labels()[i]);
                        }
                    }
                    let training = repaired
                        .concat(&curated)
                        .expect("dims match by construction");
                    match retrain(&training, &instance.test, &cfg, None) {
                        Ok(r) => {
                            if !r.converged {
                                warnings.push(format!(
                                    "{name}: retrain at budget {budget} did not converge"
                                ));
                            }
                            CurvePoint {
                                budget,
                                accuracy: Some(r.accuracy),
                                test_log_likelihood: Some(r.test_ll),
                                fraction_fixed: Some(fixed as f64 / total_flips),
                            }
                        }
                        Err(e) => {
                            warnings
                                .push(format!("{name}: retrain at budget {budget} failed: {e}"));
                            CurvePoint {
                                budget,
                                accuracy: None,
                                test_log_likelihood: None,
                                fraction_fixed: Some(fixed as f64 / total_flips),
                            }
                        }
                    }
                })
                .collect();
            MethodCurve {
                method: name.clone(),
                points,
            }
        })
        .collect::<Vec<_>>();

    let full = retrain(&combined, &instance.test, &cfg, None)?;
    Ok(ReplicateOutcome {
        seed,
        curves,
        full_reference: CurvePoint {
            budget: 0,
            accuracy: Some(full.accuracy),
            test_log_likelihood: Some(full.test_ll),
            fraction_fixed: None,
        },
        selection_kernel_evals: rankings.kernel_evals,
        selection_truncated: rankings.truncated,
        warnings,
    })
}

fn prefix_weights(
    oracle: &KernelOracle<f64>,
    rankings: &Rankings,
    subset: &[usize],
    size: usize,
) -> Option<Vec<f64>> {
    // Exact quadrature weights for the prefix: solve K_SS w = z_S densely.
    if size > rankings.selection_prefix {
        return None;
    }
    let kmat = Matrix::from_fn(subset.len(), subset.len(), |a, b| {
        oracle.pair(subset[a], subset[b])
    });
    let aff = oracle.affinity_vector().ok()?;
    let zs: Vec<f64> = subset.iter().map(|&i| aff.z_at(i)).collect();
    let chol = Cholesky::factor(&kmat).ok()?;
    Some(chol.solve(&zs))
}

fn run_summarize_replicate(
    config: &ExperimentConfig,
    instance: Instance,
    seed: u64,
) -> Result<ReplicateOutcome> {
    let cfg = config.train_config();
    let mut warnings = Vec::new();
    let train = &instance.train;
    let max_size = *config.subset_sizes.iter().max().expect("validated");
    if max_size > train.len() {
        return Err(Error::invalid(format!(
            "subset size {max_size} exceeds the training set ({})",
            train.len()
        )));
    }

    let base = train_logistic(train, &cfg)?;
    if !base.converged {
        warnings.push("base fit did not converge".to_string());
    }
    let train_grads = per_example_gradients(&base.params, train)?;
    let target_grads = per_example_gradients(&base.params, &instance.validation)?;
    let metric = metric_for(config.mode, &train_grads, config.ridge)?;
    let oracle = KernelOracle::new(&train_grads, &target_grads, &metric)?;
    let rankings = build_rankings(config, &oracle, seed, max_size)?;

    let full = Retrained {
        accuracy: accuracy(&base.params, &instance.test)?,
        test_ll: mean_log_likelihood(&base.params, &instance.test)?,
        converged: base.converged,
    };

    let curves = rankings
        .curves
        .iter()
        .map(|(name, order)| {
            let is_selection_method = name == &config.method.method.to_string();
            let points = config
                .subset_sizes
                .iter()
                .map(|&size| {
                    let mut subset: Vec<usize> = order[..size].to_vec();
                    subset.sort_unstable();
                    let sub_data = train.subset(&subset);
                    let ones = sub_data.labels().iter().filter(|&&y| y == 1).count();
                    if ones == 0 || ones == sub_data.len() {
                        warnings.push(format!(
                            "{name}: subset of size {size} is single-class; skipped"
                        ));
                        return CurvePoint {
                            budget: size,
                            accuracy: None,
                            test_log_likelihood: None,
                            fraction_fixed: None,
                        };
                    }
                    let weights = if config.weighted_retrain && is_selection_method {
                        match prefix_weights(&oracle, &rankings, &subset, size) {
                            Some(w) => {
                                let clipped: Vec<f64> = w.iter().map(|&v| v.max(0.0)).collect();
                                if clipped.iter().sum::<f64>() > 0.0 {
                                    Some(clipped)
                                } else {
                                    warnings.push(format!(
                                        "{name}: all prefix weights clipped to zero at \
                                         size {size}; falling back to uniform"
                                    ));
                                    None
                                }
                            }
                            None => None,
                        }
                    } else {
                        None
                    };
                    match retrain(&sub_data, &instance.test, &cfg, weights.as_deref()) {
                        Ok(r) => {
                            if !r.converged {
                                warnings.push(format!(
                                    "{name}: retrain at size {size} did not converge"
                                ));
                            }
                            CurvePoint {
                                budget: size,
                                accuracy: Some(r.accuracy),
                                test_log_likelihood: Some(r.test_ll),
                                fraction_fixed: None,
                            }
                        }
                        Err(e) => {
                            warnings.push(format!("{name}: retrain at size {size} failed: {e}"));
                            CurvePoint {
                                budget: size,
                                accuracy: None,
                                test_log_likelihood: None,
                                fraction_fixed: None,
                            }
                        }
                    }
                })
                .collect();
            MethodCurve {
                method: name.clone(),
                points,
            }
        })
        .collect::<Vec<_>>();

    Ok(ReplicateOutcome {
        seed,
        curves,
        full_reference: CurvePoint {
            budget: train.len(),
            accuracy: Some(full.accuracy),
            test_log_likelihood: Some(full.test_ll),
            fraction_fixed: None,
        },
        selection_kernel_evals: rankings.kernel_evals,
        selection_truncated: rankings.truncated,
        warnings,
    })
}
