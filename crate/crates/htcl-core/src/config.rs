//! Experiment configuration: a flat `section.key = value` text format with
//! environment-variable overrides (`HTCL_<SECTION>_<KEY>`).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::baselines::{BaselineConfig, BaselineMethod};
use crate::dataset::{PatternMode, SyntheticSpec};
use crate::error::{Error, Result};
use crate::hetero::Stage1Config;
use crate::invariant::{ContrastiveVariant, Stage2Config};

/// Where the experiment's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum DataSource {
    /// Cluster toy generator; an i.i.d. test draw is generated alongside.
    Toy(SyntheticSpec),
    /// Correlation-shift generator with its held-out test environment.
    Spurious(SyntheticSpec),
    /// CSV files. `test_path` takes precedence; otherwise `target_domain`
    /// carves the test split out of the training file.
    Files { train_path: String, test_path: Option<String>, target_domain: Option<usize> },
}

/// Everything a run needs: data source, stage controls, baseline controls,
/// and the evaluation protocol.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub baseline: BaselineConfig,
    pub num_runs: usize,
    pub validation_fraction: f64,
    pub out_dir: String,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::Toy(SyntheticSpec::default()),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            baseline: BaselineConfig::default(),
            num_runs: 3,
            validation_fraction: 0.2,
            out_dir: "out".into(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_runs < 1 {
            return Err(Error::Config("run.num_runs must be >= 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("run.validation_fraction must lie in (0,1)".into()));
        }
        self.stage1.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.stage2.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.baseline.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Serialize to the flat text format. `parse` of the result reproduces
    /// the config exactly.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let w = |out: &mut String, k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        match &self.data {
            DataSource::Toy(spec) | DataSource::Spurious(spec) => {
                let kind =
                    if matches!(self.data, DataSource::Toy(_)) { "toy" } else { "spurious" };
                w(&mut out, "data.source", kind.into());
                w(&mut out, "data.n_per_class_per_env", spec.n_per_class_per_env.to_string());
                w(&mut out, "data.num_classes", spec.num_classes.to_string());
                w(&mut out, "data.num_latent_envs", spec.num_latent_envs.to_string());
                w(&mut out, "data.d_inv", spec.d_inv.to_string());
                w(&mut out, "data.d_var", spec.d_var.to_string());
                w(&mut out, "data.class_center_scale", fmt_f64(spec.class_center_scale));
                w(&mut out, "data.env_center_scale", fmt_f64(spec.env_center_scale));
                w(&mut out, "data.noise_std", fmt_f64(spec.noise_std));
                w(&mut out, "data.label_noise", fmt_f64(spec.label_noise));
                let corr: Vec<String> = spec.correlations.iter().map(|&c| fmt_f64(c)).collect();
                w(&mut out, "data.correlations", corr.join(","));
                w(&mut out, "data.correlation_test", fmt_f64(spec.correlation_test));
                w(&mut out, "data.variant_spread_step", fmt_f64(spec.variant_spread_step));
                w(&mut out, "data.variant_scale", fmt_f64(spec.variant_scale));
                w(&mut out, "data.initial_pattern", spec.initial_pattern_mode.name().into());
                w(&mut out, "data.seed", spec.seed.to_string());
            }
            DataSource::Files { train_path, test_path, target_domain } => {
                w(&mut out, "data.source", "files".into());
                w(&mut out, "data.train_path", train_path.clone());
                if let Some(t) = test_path {
                    w(&mut out, "data.test_path", t.clone());
                }
                if let Some(d) = target_domain {
                    w(&mut out, "data.target_domain", d.to_string());
                }
            }
        }
        let s1 = &self.stage1;
        w(&mut out, "stage1.t1", s1.t1.to_string());
        w(&mut out, "stage1.lambda1", fmt_f64(s1.lambda1));
        w(&mut out, "stage1.epochs_per_iter", s1.epochs_per_iter.to_string());
        w(&mut out, "stage1.lr", fmt_f64(s1.lr));
        w(&mut out, "stage1.batch_size", s1.batch_size.to_string());
        w(&mut out, "stage1.repr_dim", s1.repr_dim.to_string());
        w(&mut out, "stage1.reinit_per_iter", s1.reinit_per_iter.to_string());
        w(&mut out, "stage1.f_steps", s1.f_steps.to_string());
        w(&mut out, "stage1.f_lr", fmt_f64(s1.f_lr));
        w(&mut out, "stage1.literal_divide_loss", s1.literal_divide_loss.to_string());
        w(&mut out, "stage1.early_stop_delta", fmt_f64(s1.early_stop_delta));
        w(&mut out, "stage1.early_stop_window", s1.early_stop_window.to_string());
        let s2 = &self.stage2;
        w(&mut out, "stage2.t2", s2.t2.to_string());
        w(&mut out, "stage2.lambda_cont", fmt_f64(s2.lambda_cont));
        w(&mut out, "stage2.lambda_mmd", fmt_f64(s2.lambda_mmd));
        w(&mut out, "stage2.lr", fmt_f64(s2.lr));
        w(&mut out, "stage2.batch_size", s2.batch_size.to_string());
        w(&mut out, "stage2.min_group", s2.min_group.to_string());
        w(&mut out, "stage2.contrastive", s2.contrastive_variant.name().into());
        w(&mut out, "stage2.eval_every", s2.eval_every.to_string());
        let b = &self.baseline;
        w(&mut out, "baseline.method", b.method.name().into());
        w(&mut out, "baseline.irm_lambda", fmt_f64(b.irm_lambda));
        w(&mut out, "baseline.groupdro_eta", fmt_f64(b.groupdro_eta));
        w(&mut out, "baseline.lambda_mmd", fmt_f64(b.lambda_mmd));
        w(&mut out, "baseline.min_group", b.min_group.to_string());
        w(&mut out, "baseline.steps", b.steps.to_string());
        w(&mut out, "baseline.lr", fmt_f64(b.lr));
        w(&mut out, "baseline.batch_size", b.batch_size.to_string());
        w(&mut out, "baseline.eval_every", b.eval_every.to_string());
        w(&mut out, "run.num_runs", self.num_runs.to_string());
        w(&mut out, "run.validation_fraction", fmt_f64(self.validation_fraction));
        w(&mut out, "run.out_dir", self.out_dir.clone());
        w(&mut out, "run.seed", self.seed.to_string());
        out
    }

    /// Parse the flat text format. Unknown keys are errors; omitted keys
    /// keep their defaults. Environment overrides are NOT applied here.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", i + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Self::from_map(map)
    }

    /// Apply `HTCL_<SECTION>_<KEY>` environment overrides on top of a
    /// parsed config (e.g. `HTCL_STAGE1_LAMBDA1=0.1`).
    pub fn apply_env_overrides(
        self,
        env: impl Iterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut map = self.to_map();
        for (key, value) in env {
            let Some(rest) = key.strip_prefix("HTCL_") else { continue };
            let Some((section, name)) = rest.split_once('_') else { continue };
            let dotted = format!("{}.{}", section.to_lowercase(), name.to_lowercase());
            map.insert(dotted, value);
        }
        Self::from_map(map)
    }

    fn to_map(&self) -> BTreeMap<String, String> {
        self.serialize()
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect()
    }

    fn from_map(mut map: BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let source = map.remove("data.source").unwrap_or_else(|| "toy".into());
        cfg.data = match source.as_str() {
            "toy" | "spurious" => {
                let mut spec = SyntheticSpec::default();
                if let Some(v) = map.remove("data.n_per_class_per_env") {
                    spec.n_per_class_per_env = parse_usize("data.n_per_class_per_env", &v)?;
                }
                if let Some(v) = map.remove("data.num_classes") {
                    spec.num_classes = parse_usize("data.num_classes", &v)?;
                }
                if let Some(v) = map.remove("data.num_latent_envs") {
                    spec.num_latent_envs = parse_usize("data.num_latent_envs", &v)?;
                }
                if let Some(v) = map.remove("data.d_inv") {
                    spec.d_inv = parse_usize("data.d_inv", &v)?;
                }
                if let Some(v) = map.remove("data.d_var") {
                    spec.d_var = parse_usize("data.d_var", &v)?;
                }
                if let Some(v) = map.remove("data.class_center_scale") {
                    spec.class_center_scale = parse_f64("data.class_center_scale", &v)?;
                }
                if let Some(v) = map.remove("data.env_center_scale") {
                    spec.env_center_scale = parse_f64("data.env_center_scale", &v)?;
                }
                if let Some(v) = map.remove("data.noise_std") {
                    spec.noise_std = parse_f64("data.noise_std", &v)?;
                }
                if let Some(v) = map.remove("data.label_noise") {
                    spec.label_noise = parse_f64("data.label_noise", &v)?;
                }
                if let Some(v) = map.remove("data.correlations") {
                    spec.correlations = v
                        .split(',')
                        .map(|s| parse_f64("data.correlations", s.trim()))
                        .collect::<Result<_>>()?;
                }
                if let Some(v) = map.remove("data.correlation_test") {
                    spec.correlation_test = parse_f64("data.correlation_test", &v)?;
                }
                if let Some(v) = map.remove("data.variant_spread_step") {
                    spec.variant_spread_step = parse_f64("data.variant_spread_step", &v)?;
                }
                if let Some(v) = map.remove("data.variant_scale") {
                    spec.variant_scale = parse_f64("data.variant_scale", &v)?;
                }
                if let Some(v) = map.remove("data.initial_pattern") {
                    spec.initial_pattern_mode = PatternMode::parse(&v)?;
                }
                if let Some(v) = map.remove("data.seed") {
                    spec.seed = parse_u64("data.seed", &v)?;
                }
                if source == "toy" {
                    DataSource::Toy(spec)
                } else {
                    DataSource::Spurious(spec)
                }
            }
            "files" => {
                let train_path = map
                    .remove("data.train_path")
                    .ok_or_else(|| Error::Config("files source requires data.train_path".into()))?;
                let test_path = map.remove("data.test_path");
                let target_domain = map
                    .remove("data.target_domain")
                    .map(|v| parse_usize("data.target_domain", &v))
                    .transpose()?;
                DataSource::Files { train_path, test_path, target_domain }
            }
            other => return Err(Error::Config(format!("unknown data.source '{other}'"))),
        };

        if let Some(v) = map.remove("stage1.t1") {
            cfg.stage1.t1 = parse_usize("stage1.t1", &v)?;
        }
        if let Some(v) = map.remove("stage1.lambda1") {
            cfg.stage1.lambda1 = parse_f64("stage1.lambda1", &v)?;
        }
        if let Some(v) = map.remove("stage1.epochs_per_iter") {
            cfg.stage1.epochs_per_iter = parse_usize("stage1.epochs_per_iter", &v)?;
        }
        if let Some(v) = map.remove("stage1.lr") {
            cfg.stage1.lr = parse_f64("stage1.lr", &v)?;
        }
        if let Some(v) = map.remove("stage1.batch_size") {
            cfg.stage1.batch_size = parse_usize("stage1.batch_size", &v)?;
        }
        if let Some(v) = map.remove("stage1.repr_dim") {
            cfg.stage1.repr_dim = parse_usize("stage1.repr_dim", &v)?;
        }
        if let Some(v) = map.remove("stage1.reinit_per_iter") {
            cfg.stage1.reinit_per_iter = parse_bool("stage1.reinit_per_iter", &v)?;
        }
        if let Some(v) = map.remove("stage1.f_steps") {
            cfg.stage1.f_steps = parse_usize("stage1.f_steps", &v)?;
        }
        if let Some(v) = map.remove("stage1.f_lr") {
            cfg.stage1.f_lr = parse_f64("stage1.f_lr", &v)?;
        }
        if let Some(v) = map.remove("stage1.literal_divide_loss") {
            cfg.stage1.literal_divide_loss = parse_bool("stage1.literal_divide_loss", &v)?;
        }
        if let Some(v) = map.remove("stage1.early_stop_delta") {
            cfg.stage1.early_stop_delta = parse_f64("stage1.early_stop_delta", &v)?;
        }
        if let Some(v) = map.remove("stage1.early_stop_window") {
            cfg.stage1.early_stop_window = parse_usize("stage1.early_stop_window", &v)?;
        }

        if let Some(v) = map.remove("stage2.t2") {
            cfg.stage2.t2 = parse_usize("stage2.t2", &v)?;
        }
        if let Some(v) = map.remove("stage2.lambda_cont") {
            cfg.stage2.lambda_cont = parse_f64("stage2.lambda_cont", &v)?;
        }
        if let Some(v) = map.remove("stage2.lambda_mmd") {
            cfg.stage2.lambda_mmd = parse_f64("stage2.lambda_mmd", &v)?;
        }
        if let Some(v) = map.remove("stage2.lr") {
            cfg.stage2.lr = parse_f64("stage2.lr", &v)?;
        }
        if let Some(v) = map.remove("stage2.batch_size") {
            cfg.stage2.batch_size = parse_usize("stage2.batch_size", &v)?;
        }
        if let Some(v) = map.remove("stage2.min_group") {
            cfg.stage2.min_group = parse_usize("stage2.min_group", &v)?;
        }
        if let Some(v) = map.remove("stage2.contrastive") {
            cfg.stage2.contrastive_variant = ContrastiveVariant::parse(&v)?;
        }
        if let Some(v) = map.remove("stage2.eval_every") {
            cfg.stage2.eval_every = parse_usize("stage2.eval_every", &v)?;
        }

        if let Some(v) = map.remove("baseline.method") {
            cfg.baseline.method = BaselineMethod::parse(&v)?;
        }
        if let Some(v) = map.remove("baseline.irm_lambda") {
            cfg.baseline.irm_lambda = parse_f64("baseline.irm_lambda", &v)?;
        }
        if let Some(v) = map.remove("baseline.groupdro_eta") {
            cfg.baseline.groupdro_eta = parse_f64("baseline.groupdro_eta", &v)?;
        }
        if let Some(v) = map.remove("baseline.lambda_mmd") {
            cfg.baseline.lambda_mmd = parse_f64("baseline.lambda_mmd", &v)?;
        }
        if let Some(v) = map.remove("baseline.min_group") {
            cfg.baseline.min_group = parse_usize("baseline.min_group", &v)?;
        }
        if let Some(v) = map.remove("baseline.steps") {
            cfg.baseline.steps = parse_usize("baseline.steps", &v)?;
        }
        if let Some(v) = map.remove("baseline.lr") {
            cfg.baseline.lr = parse_f64("baseline.lr", &v)?;
        }
        if let Some(v) = map.remove("baseline.batch_size") {
            cfg.baseline.batch_size = parse_usize("baseline.batch_size", &v)?;
        }
        if let Some(v) = map.remove("baseline.eval_every") {
            cfg.baseline.eval_every = parse_usize("baseline.eval_every", &v)?;
        }

        if let Some(v) = map.remove("run.num_runs") {
            cfg.num_runs = parse_usize("run.num_runs", &v)?;
        }
        if let Some(v) = map.remove("run.validation_fraction") {
            cfg.validation_fraction = parse_f64("run.validation_fraction", &v)?;
        }
        if let Some(v) = map.remove("run.out_dir") {
            cfg.out_dir = v;
        }
        if let Some(v) = map.remove("run.seed") {
            cfg.seed = parse_u64("run.seed", &v)?;
        }

        if let Some((key, _)) = map.into_iter().next() {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        // Per-stage seeds follow the global seed.
        cfg.stage1.seed = cfg.seed;
        cfg.stage2.seed = cfg.seed;
        cfg.baseline.seed = cfg.seed;
        Ok(cfg)
    }
}

/// Round-trip float formatting for config values.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::Config(format!("{key}: invalid real '{v}'")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Config(format!("{key}: invalid count '{v}'")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| Error::Config(format!("{key}: invalid seed '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got '{v}'"))),
    }
}
