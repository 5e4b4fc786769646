//! Experiment orchestration: splits, evaluation, the full two-stage
//! pipeline, ablations, the plug-in experiment, sensitivity sweeps, and the
//! heterogeneity audit.

use std::path::Path;

use serde::Serialize;

use crate::baselines::{kmeans_pattern, run_baseline, BaselineMethod};
use crate::config::{DataSource, ExperimentConfig};
use crate::dataset::{
    generate_spurious, generate_toy, load_dataset, Dataset, DividingPattern,
};
use crate::error::{Error, Result};
use crate::hetero::{batch_heterogeneity_value, measure_h, run_stage1, Divider};
use crate::invariant::{run_stage2, Stage2Result};
use crate::matrix::RealMatrix;
use crate::metrics::{adjusted_rand_index, mean, population_std};
use crate::nn::{classify_accuracy, MlpModel};
use crate::rng::{derive_seed, rng_from_seed};

/// Train/validation/test datasets after the per-domain class-stratified
/// split. Train and validation keep remapped contiguous domain ids; the
/// test set is a single pseudo-domain.
pub struct SplitResult {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub warnings: Vec<String>,
}

/// Hold out `target_domain` entirely as the test set; split every other
/// domain `1 - fraction` / `fraction` into train/validation, stratified by
/// class, and pool the validation parts.
pub fn split(
    dataset: &Dataset,
    target_domain: usize,
    fraction: f64,
    seed: u64,
) -> Result<SplitResult> {
    if target_domain >= dataset.num_domains {
        return Err(Error::Contract(format!(
            "target domain {target_domain} not present ({} domains)",
            dataset.num_domains
        )));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Contract("validation fraction must lie in (0,1)".into()));
    }
    let mut warnings = Vec::new();
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    let mut test_idx = Vec::new();
    for d in 0..dataset.num_domains {
        if d == target_domain {
            test_idx.extend((0..dataset.len()).filter(|&i| dataset.domain_labels[i] == d));
            continue;
        }
        for c in 0..dataset.num_classes {
            let mut cell: Vec<usize> = (0..dataset.len())
                .filter(|&i| dataset.domain_labels[i] == d && dataset.class_labels[i] == c)
                .collect();
            if cell.is_empty() {
                warnings.push(format!("domain {d} has no samples of class {c}"));
                continue;
            }
            use rand::seq::SliceRandom;
            let mut rng = rng_from_seed(derive_seed(seed, (d * 1000 + c) as u64));
            cell.shuffle(&mut rng);
            let n_val = ((cell.len() as f64) * fraction).round() as usize;
            let n_val = n_val.min(cell.len().saturating_sub(1));
            val_idx.extend(&cell[..n_val]);
            train_idx.extend(&cell[n_val..]);
        }
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok(SplitResult {
        train: dataset.subset(&train_idx)?,
        validation: dataset.subset(&val_idx)?,
        test: dataset.subset(&test_idx)?,
        warnings,
    })
}

/// Accuracy of the model pair on a dataset split.
pub fn evaluate(phi: &MlpModel, w: &MlpModel, split: &Dataset) -> Result<f64> {
    classify_accuracy(phi, w, &split.features, &split.class_labels)
}

/// One training run's outcome.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub run_index: usize,
    pub seed: u64,
    pub validation_accuracy: f64,
    pub test_accuracy: f64,
    /// Agreement of the stage-1 pattern with the planted variant groups,
    /// when the data carries them.
    pub pattern_ari: Option<f64>,
    /// Per-iteration heterogeneity values from stage 1 (empty when stage 1
    /// did not run).
    pub stage1_h: Vec<f64>,
    pub stage1_best_iteration: Option<usize>,
}

/// Mean and population standard deviation over runs.
#[derive(Debug, Clone, Serialize)]
pub struct Aggregate {
    pub test_mean: f64,
    pub test_std: f64,
    pub validation_mean: f64,
    pub validation_std: f64,
}

/// Full report for one experiment: per-run records, their aggregate, the
/// config echo, and wall-clock timestamps isolated in one field so that
/// reports are otherwise byte-identical across repeated runs.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub method: String,
    pub runs: Vec<RunRecord>,
    pub aggregate: Aggregate,
    pub config_echo: String,
    pub warnings: Vec<String>,
    pub timestamps: Timestamps,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timestamps {
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

fn now_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn aggregate(runs: &[RunRecord]) -> Aggregate {
    let tests: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
    let vals: Vec<f64> = runs.iter().map(|r| r.validation_accuracy).collect();
    Aggregate {
        test_mean: mean(&tests),
        test_std: population_std(&tests),
        validation_mean: mean(&vals),
        validation_std: population_std(&vals),
    }
}

/// Materialized data for one run: training pool and held-out test set.
pub struct PreparedData {
    pub train_pool: Dataset,
    pub test: Dataset,
}

/// Resolve the config's data source. For the toy source a fresh i.i.d. draw
/// with a derived seed serves as the test set; for files without a separate
/// test file the target domain is carved out by `split` downstream.
pub fn prepare_data(config: &ExperimentConfig, run_seed: u64) -> Result<PreparedData> {
    match &config.data {
        DataSource::Toy(spec) => {
            // Draw one double-size dataset so train and test share the same
            // class and environment centers, then split each
            // (environment, class) cell in half.
            let mut spec = spec.clone();
            spec.seed = derive_seed(spec.seed, run_seed);
            let npc = spec.n_per_class_per_env;
            spec.n_per_class_per_env = npc * 2;
            let full = generate_toy(&spec)?;
            let latent = full.latent_groups.as_ref().expect("toy data carries latent groups");
            let mut train_idx = Vec::new();
            let mut test_idx = Vec::new();
            let mut seen = vec![0usize; spec.num_latent_envs * spec.num_classes];
            for i in 0..full.len() {
                let cell = latent[i] * spec.num_classes + full.class_labels[i];
                if seen[cell] < npc {
                    train_idx.push(i);
                } else {
                    test_idx.push(i);
                }
                seen[cell] += 1;
            }
            Ok(PreparedData {
                train_pool: full.subset(&train_idx)?,
                test: full.subset(&test_idx)?,
            })
        }
        DataSource::Spurious(spec) => {
            let mut spec = spec.clone();
            spec.seed = derive_seed(spec.seed, run_seed);
            let (train, test) = generate_spurious(&spec)?;
            Ok(PreparedData { train_pool: train, test })
        }
        DataSource::Files { train_path, test_path, target_domain } => {
            let full = load_dataset(Path::new(train_path))?;
            match (test_path, target_domain) {
                (Some(tp), _) => {
                    let test = load_dataset(Path::new(tp))?;
                    Ok(PreparedData { train_pool: full, test })
                }
                (None, Some(d)) => {
                    // Carve the target domain out once; per-run train/val
                    // splitting happens later on the remaining pool.
                    let test_idx: Vec<usize> =
                        (0..full.len()).filter(|&i| full.domain_labels[i] == *d).collect();
                    let rest_idx: Vec<usize> =
                        (0..full.len()).filter(|&i| full.domain_labels[i] != *d).collect();
                    if test_idx.is_empty() {
                        return Err(Error::Contract(format!("target domain {d} absent")));
                    }
                    Ok(PreparedData {
                        train_pool: full.subset(&rest_idx)?,
                        test: full.subset(&test_idx)?,
                    })
                }
                (None, None) => Err(Error::Config(
                    "files source needs data.test_path or data.target_domain".into(),
                )),
            }
        }
    }
}

/// Partition the training pool into train/pooled-validation per run.
fn split_pool(
    pool: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset, Vec<String>)> {
    use rand::seq::SliceRandom;
    let mut warnings = Vec::new();
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for d in 0..pool.num_domains {
        for c in 0..pool.num_classes {
            let mut cell: Vec<usize> = (0..pool.len())
                .filter(|&i| pool.domain_labels[i] == d && pool.class_labels[i] == c)
                .collect();
            if cell.is_empty() {
                warnings.push(format!("domain {d} has no samples of class {c}"));
                continue;
            }
            let mut rng = rng_from_seed(derive_seed(seed, (d * 1000 + c) as u64));
            cell.shuffle(&mut rng);
            let n_val = ((cell.len() as f64) * fraction).round() as usize;
            let n_val = n_val.min(cell.len().saturating_sub(1));
            val_idx.extend(&cell[..n_val]);
            train_idx.extend(&cell[n_val..]);
        }
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((pool.subset(&train_idx)?, pool.subset(&val_idx)?, warnings))
}

/// Pipeline variants covering the full method and its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineVariant {
    Full,
    /// Stage 2 with the original domain labels.
    NoStage1,
    /// Stage 1 with the assignment network replaced by k-means.
    KMeansDivider,
    /// Full pipeline with the contrastive weight at zero.
    NoContrastive,
}

impl PipelineVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(PipelineVariant::Full),
            "no_stage1" => Ok(PipelineVariant::NoStage1),
            "kmeans_divider" => Ok(PipelineVariant::KMeansDivider),
            "no_contrastive" => Ok(PipelineVariant::NoContrastive),
            other => Err(Error::Config(format!("unknown ablation variant '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PipelineVariant::Full => "htcl",
            PipelineVariant::NoStage1 => "no_stage1",
            PipelineVariant::KMeansDivider => "kmeans_divider",
            PipelineVariant::NoContrastive => "no_contrastive",
        }
    }
}

/// Artifacts of one pipeline run that the CLI may persist.
pub struct PipelineRunArtifacts {
    pub record: RunRecord,
    pub best_pattern: Option<DividingPattern>,
    pub stage2: Stage2Result,
    pub train: Dataset,
}

fn run_pipeline_once(
    config: &ExperimentConfig,
    variant: PipelineVariant,
    run_index: usize,
) -> Result<(PipelineRunArtifacts, Vec<String>)> {
    let run_seed = derive_seed(config.seed, run_index as u64);
    let data = prepare_data(config, run_index as u64)?;
    let (train, validation, warnings) =
        split_pool(&data.train_pool, config.validation_fraction, run_seed)?;

    let mut s1 = config.stage1.clone();
    s1.seed = derive_seed(run_seed, 1);
    let mut s2 = config.stage2.clone();
    s2.seed = derive_seed(run_seed, 2);
    if variant == PipelineVariant::NoContrastive {
        s2.lambda_cont = 0.0;
    }

    let initial = train.original_pattern();
    let (pattern, trace) = match variant {
        PipelineVariant::NoStage1 => (initial.clone(), None),
        PipelineVariant::Full | PipelineVariant::NoContrastive => {
            let (p, t) = run_stage1(&train, &initial, &s1, Divider::Learned)
                .map_err(|e| Error::Contract(format!("run {run_index}: {e}")))?;
            (p, Some(t))
        }
        PipelineVariant::KMeansDivider => {
            let (p, t) = run_stage1(&train, &initial, &s1, Divider::KMeans)
                .map_err(|e| Error::Contract(format!("run {run_index}: {e}")))?;
            (p, Some(t))
        }
    };

    let result = run_stage2(
        &train,
        &pattern,
        &s2,
        Some((&validation.features, &validation.class_labels)),
    )
    .map_err(|e| Error::Contract(format!("run {run_index}: {e}")))?;
    let val_acc = evaluate(&result.phi, &result.w, &validation)?;
    let test_acc = evaluate(&result.phi, &result.w, &data.test)?;
    let pattern_ari = train
        .latent_groups
        .as_ref()
        .map(|g| adjusted_rand_index(&pattern.assignment, g));
    let record = RunRecord {
        run_index,
        seed: run_seed,
        validation_accuracy: val_acc,
        test_accuracy: test_acc,
        pattern_ari,
        stage1_h: trace.as_ref().map(|t| t.h_values()).unwrap_or_default(),
        stage1_best_iteration: trace.as_ref().map(|t| t.best_iteration),
    };
    Ok((
        PipelineRunArtifacts {
            record,
            best_pattern: (variant != PipelineVariant::NoStage1).then_some(pattern),
            stage2: result,
            train,
        },
        warnings,
    ))
}

/// Full HTCL over `num_runs` runs.
pub fn run_htcl(config: &ExperimentConfig) -> Result<RunReport> {
    run_ablation(config, PipelineVariant::Full)
}

/// One pipeline variant over `num_runs` runs.
pub fn run_ablation(config: &ExperimentConfig, variant: PipelineVariant) -> Result<RunReport> {
    config.validate()?;
    let started = now_ms();
    let mut runs = Vec::new();
    let mut warnings = Vec::new();
    for r in 0..config.num_runs {
        let (artifacts, w) = run_pipeline_once(config, variant, r)?;
        warnings.extend(w.into_iter().map(|m| format!("run {r}: {m}")));
        runs.push(artifacts.record);
    }
    let agg = aggregate(&runs);
    Ok(RunReport {
        method: variant.name().into(),
        runs,
        aggregate: agg,
        config_echo: config.serialize(),
        warnings,
        timestamps: Timestamps { started_unix_ms: started, finished_unix_ms: now_ms() },
    })
}

/// Expose the per-run artifacts (pattern, models, logs) for the CLI.
pub fn run_pipeline_with_artifacts(
    config: &ExperimentConfig,
    variant: PipelineVariant,
    run_index: usize,
) -> Result<PipelineRunArtifacts> {
    config.validate()?;
    Ok(run_pipeline_once(config, variant, run_index)?.0)
}

/// Train one baseline method over `num_runs` runs with the given pattern
/// policy applied to each run's training split.
fn run_baseline_report(
    config: &ExperimentConfig,
    method: BaselineMethod,
    pattern_policy: &dyn Fn(&Dataset, u64) -> Result<DividingPattern>,
    label: &str,
) -> Result<RunReport> {
    config.validate()?;
    let started = now_ms();
    let mut runs = Vec::new();
    let mut warnings = Vec::new();
    for r in 0..config.num_runs {
        let run_seed = derive_seed(config.seed, r as u64);
        let data = prepare_data(config, r as u64)?;
        let (train, validation, w) =
            split_pool(&data.train_pool, config.validation_fraction, run_seed)?;
        warnings.extend(w.into_iter().map(|m| format!("run {r}: {m}")));
        let pattern = pattern_policy(&train, run_seed)?;
        let mut bc = config.baseline.clone();
        bc.method = method;
        bc.seed = derive_seed(run_seed, 3);
        let result = run_baseline(
            &train,
            &pattern,
            &bc,
            Some((&validation.features, &validation.class_labels)),
        )?;
        let val_acc = evaluate(&result.phi, &result.w, &validation)?;
        let test_acc = evaluate(&result.phi, &result.w, &data.test)?;
        let pattern_ari = train
            .latent_groups
            .as_ref()
            .map(|g| adjusted_rand_index(&pattern.assignment, g));
        runs.push(RunRecord {
            run_index: r,
            seed: run_seed,
            validation_accuracy: val_acc,
            test_accuracy: test_acc,
            pattern_ari,
            stage1_h: Vec::new(),
            stage1_best_iteration: None,
        });
    }
    let agg = aggregate(&runs);
    Ok(RunReport {
        method: label.into(),
        runs,
        aggregate: agg,
        config_echo: config.serialize(),
        warnings,
        timestamps: Timestamps { started_unix_ms: started, finished_unix_ms: now_ms() },
    })
}

/// Train the configured baseline with the original domain labels.
pub fn run_baseline_experiment(
    config: &ExperimentConfig,
    method: BaselineMethod,
) -> Result<RunReport> {
    run_baseline_report(config, method, &|train, _| Ok(train.original_pattern()), method.name())
}

/// Plug-in experiment: a domain-aware baseline trained twice, once with the
/// original labels and once with stage-1 generated labels.
#[derive(Debug, Clone, Serialize)]
pub struct PluginReport {
    pub method: String,
    pub original: RunReport,
    pub generated: RunReport,
    /// Mean OOD accuracy delta (generated - original), in points.
    pub delta_points: f64,
}

pub fn run_plugin(config: &ExperimentConfig, method: BaselineMethod) -> Result<PluginReport> {
    if !method.uses_domains() {
        return Err(Error::Config(
            "plug-in experiment needs a domain-aware baseline (groupdro or coral); \
             erm ignores domain labels"
                .into(),
        ));
    }
    if !matches!(method, BaselineMethod::GroupDro | BaselineMethod::Coral) {
        return Err(Error::Config("plug-in experiment supports groupdro and coral".into()));
    }
    let original =
        run_baseline_report(config, method, &|train, _| Ok(train.original_pattern()), method.name())?;
    let stage1 = config.stage1.clone();
    let generated = run_baseline_report(
        config,
        method,
        &|train, run_seed| {
            let mut s1 = stage1.clone();
            s1.seed = derive_seed(run_seed, 1);
            let (pattern, _) = run_stage1(train, &train.original_pattern(), &s1, Divider::Learned)?;
            Ok(pattern)
        },
        &format!("{}+stage1", method.name()),
    )?;
    let delta_points =
        (generated.aggregate.test_mean - original.aggregate.test_mean) * 100.0;
    Ok(PluginReport { method: method.name().into(), original, generated, delta_points })
}

/// Which hyperparameter a sensitivity sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    T1,
    Lambda1,
    LambdaCont,
}

impl SweepParameter {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "t1" | "T1" => Ok(SweepParameter::T1),
            "lambda1" => Ok(SweepParameter::Lambda1),
            "lambda_cont" => Ok(SweepParameter::LambdaCont),
            other => Err(Error::Config(format!("unknown sweep parameter '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepParameter::T1 => "t1",
            SweepParameter::Lambda1 => "lambda1",
            SweepParameter::LambdaCont => "lambda_cont",
        }
    }

    /// The default grid for each swept hyperparameter.
    pub fn default_grid(&self) -> Vec<f64> {
        match self {
            SweepParameter::T1 => vec![1.0, 3.0, 5.0, 7.0, 9.0],
            SweepParameter::Lambda1 => vec![0.0, 1e-3, 1e-2, 1e-1, 1.0],
            SweepParameter::LambdaCont => vec![0.5, 1.0, 1.5, 2.0, 2.5],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub report: RunReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub parameter: String,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    /// Summary table: one CSV line per swept value.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("parameter,value,test_mean,test_std,val_mean,val_std\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.parameter,
                p.value,
                p.report.aggregate.test_mean,
                p.report.aggregate.test_std,
                p.report.aggregate.validation_mean,
                p.report.aggregate.validation_std,
            ));
        }
        out
    }
}

/// One full pipeline run per value, varying only the swept parameter.
pub fn run_sweep(
    config: &ExperimentConfig,
    parameter: SweepParameter,
    values: &[f64],
) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut points = Vec::new();
    for &value in values {
        let mut cfg = config.clone();
        match parameter {
            SweepParameter::T1 => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("t1 sweep value {value} is not a count")));
                }
                cfg.stage1.t1 = value as usize;
            }
            SweepParameter::Lambda1 => cfg.stage1.lambda1 = value,
            SweepParameter::LambdaCont => cfg.stage2.lambda_cont = value,
        }
        let report = run_htcl(&cfg)?;
        points.push(SweepPoint { value, report });
    }
    Ok(SweepReport { parameter: parameter.name().into(), points })
}

/// Heterogeneity audit over externally supplied embeddings: H plus a
/// per-(class, domain-pair) breakdown.
#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub h: f64,
    pub batches: usize,
    pub breakdown: Vec<AuditCell>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditCell {
    pub class: usize,
    pub domain_a: usize,
    pub domain_b: usize,
    pub mean_log_ratio: f64,
    pub terms: usize,
}

/// Treat the embeddings as frozen extractor outputs and measure the
/// pattern's heterogeneity over one seeded epoch of stratified batches.
pub fn audit(
    embeddings: &RealMatrix,
    classes: &[usize],
    pattern: &DividingPattern,
    batch_size: usize,
    seed: u64,
) -> Result<AuditReport> {
    if embeddings.rows() != classes.len() || embeddings.rows() != pattern.len() {
        return Err(Error::Contract(format!(
            "audit: {} embeddings, {} classes, {} pattern entries",
            embeddings.rows(),
            classes.len(),
            pattern.len()
        )));
    }
    if pattern.num_domains < 2 {
        return Err(Error::Contract("audit: pattern needs at least 2 domains".into()));
    }
    // Wrap the inputs as a dataset for batching; an identity extractor
    // makes measure_h operate directly on the stored embeddings.
    let dataset = Dataset::new(
        embeddings.clone(),
        classes.to_vec(),
        pattern.assignment.clone(),
        None,
    )?;
    let mut rng = rng_from_seed(seed);
    let mut identity = MlpModel::new(&[embeddings.cols(), embeddings.cols()], &mut rng);
    for w in identity.weights.iter_mut() {
        for i in 0..w.rows() {
            for j in 0..w.cols() {
                w.set(i, j, if i == j { 1.0 } else { 0.0 });
            }
        }
    }
    for b in identity.biases.iter_mut() {
        b.scale_assign(0.0);
    }
    let h = measure_h(&identity, &dataset, pattern, batch_size, seed)?;

    // Per-(class, pair) breakdown over the same epoch.
    let batches = crate::batching::stratified_batches(&dataset, pattern, batch_size, seed)?;
    use std::collections::BTreeMap;
    let mut cells: BTreeMap<(usize, usize, usize), (f64, usize)> = BTreeMap::new();
    for batch in &batches {
        let reprs = embeddings.gather_rows(batch);
        let cls: Vec<usize> = batch.iter().map(|&i| classes[i]).collect();
        let doms: Vec<usize> = batch.iter().map(|&i| pattern.assignment[i]).collect();
        for c in 0..dataset.num_classes {
            for da in 0..pattern.num_domains {
                for db in (da + 1)..pattern.num_domains {
                    let sel: Vec<usize> = (0..cls.len()).filter(|&i| cls[i] == c).collect();
                    let ga: Vec<usize> =
                        sel.iter().copied().filter(|&i| doms[i] == da).collect();
                    let gb: Vec<usize> =
                        sel.iter().copied().filter(|&i| doms[i] == db).collect();
                    if ga.is_empty() || gb.is_empty() {
                        continue;
                    }
                    let sub_classes: Vec<usize> = ga.iter().chain(&gb).map(|_| 0).collect();
                    let sub_domains: Vec<usize> =
                        ga.iter().map(|_| 0).chain(gb.iter().map(|_| 1)).collect();
                    let idx: Vec<usize> = ga.iter().chain(&gb).copied().collect();
                    let sub = reprs.gather_rows(&idx);
                    let (lh, terms) =
                        batch_heterogeneity_value(&sub, &sub_classes, &sub_domains);
                    if terms > 0 {
                        let e = cells.entry((c, da, db)).or_insert((0.0, 0));
                        e.0 += lh;
                        e.1 += terms;
                    }
                }
            }
        }
    }
    let breakdown = cells
        .into_iter()
        .map(|((class, domain_a, domain_b), (sum, terms))| AuditCell {
            class,
            domain_a,
            domain_b,
            mean_log_ratio: sum / terms as f64,
            terms,
        })
        .collect();
    Ok(AuditReport { h, batches: batches.len(), breakdown })
}

/// K-means pattern from raw features (used by the CLI's ablation plumbing
/// and available as a library helper).
pub fn kmeans_pattern_for(dataset: &Dataset, k: usize, seed: u64) -> Result<DividingPattern> {
    kmeans_pattern(&dataset.features, k, seed)
}
