//! `htcl` command line: data generation, the two-stage pipeline, baselines,
//! ablations, the plug-in experiment, sensitivity sweeps, heterogeneity
//! audits, and model evaluation.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numerical
//! contract violation.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use htcl_core::baselines::BaselineMethod;
use htcl_core::config::ExperimentConfig;
use htcl_core::dataset::{
    load_classes, load_dataset, load_embeddings, load_pattern, save_dataset, save_embeddings,
    save_pattern,
};
use htcl_core::error::{exit_code, Error, Result};
use htcl_core::experiment::{
    audit, prepare_data, run_ablation, run_baseline_experiment, run_htcl, run_plugin,
    run_pipeline_with_artifacts, run_sweep, PipelineVariant, RunReport, SweepParameter,
};
use htcl_core::hetero::{run_stage1, Divider};
use htcl_core::invariant::run_stage2;
use htcl_core::nn::{classify_accuracy, load_model, save_model};

#[derive(Parser)]
#[command(name = "htcl", about = "Heterogeneity-driven domain re-labeling and invariant training")]
struct Cli {
    /// Path to a flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset (train and test CSVs).
    GenerateData,
    /// Full pipeline: pattern generation then invariant training.
    Run,
    /// Pattern generation only; writes the best pattern and its trace.
    Stage1 {
        /// Train on this dataset file instead of the configured source.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Initial pattern file (defaults to the dataset's domain labels).
        #[arg(long)]
        pattern: Option<PathBuf>,
        /// Also write per-iteration representation dumps.
        #[arg(long)]
        dump_reprs: bool,
    },
    /// Invariant training only, with a supplied pattern.
    Stage2 {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pattern file; defaults to the dataset's own domain labels.
        #[arg(long)]
        pattern: Option<PathBuf>,
    },
    /// Train a reference method (erm, irm, groupdro, coral).
    Baseline {
        #[arg(long)]
        method: String,
    },
    /// Run an ablation variant (no_stage1, kmeans_divider, no_contrastive).
    Ablate {
        #[arg(long)]
        variant: String,
    },
    /// Train a domain-aware baseline with original vs. generated labels.
    Plugin {
        #[arg(long)]
        method: String,
    },
    /// Sensitivity sweep over t1, lambda1 or lambda_cont.
    Sweep {
        #[arg(long)]
        parameter: String,
        /// Comma-separated values; defaults to the standard grid.
        #[arg(long)]
        values: Option<String>,
    },
    /// Heterogeneity audit of external embeddings under a pattern.
    Audit {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        classes: PathBuf,
        #[arg(long)]
        pattern: PathBuf,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
    },
    /// Evaluate a saved model pair on a dataset file.
    Eval {
        #[arg(long)]
        extractor: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn load_config(cli_config: &Option<PathBuf>, seed: Option<u64>, out: &Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = match cli_config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    cfg = cfg.apply_env_overrides(std::env::vars())?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.stage1.seed = s;
        cfg.stage2.seed = s;
        cfg.baseline.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Io(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn print_report(report: &RunReport) {
    println!(
        "{}: test {:.4} +- {:.4} | val {:.4} +- {:.4} ({} runs)",
        report.method,
        report.aggregate.test_mean,
        report.aggregate.test_std,
        report.aggregate.validation_mean,
        report.aggregate.validation_std,
        report.runs.len()
    );
}

/// Load a dataset from an explicit file or fall back to the config source.
fn dataset_for(cfg: &ExperimentConfig, data: &Option<PathBuf>) -> Result<htcl_core::dataset::Dataset> {
    match data {
        Some(path) => load_dataset(path),
        None => Ok(prepare_data(cfg, 0)?.train_pool),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.config, cli.seed, &cli.out)?;
    match cli.command {
        Command::GenerateData => {
            let dir = out_dir(&cfg)?;
            let data = prepare_data(&cfg, 0)?;
            let train_path = dir.join("train.csv");
            let test_path = dir.join("test.csv");
            save_dataset(&data.train_pool, &train_path)?;
            save_dataset(&data.test, &test_path)?;
            println!(
                "wrote {} ({} samples) and {} ({} samples)",
                train_path.display(),
                data.train_pool.len(),
                test_path.display(),
                data.test.len()
            );
            Ok(())
        }
        Command::Run => {
            let dir = out_dir(&cfg)?;
            let report = run_htcl(&cfg)?;
            write_json(&dir.join("report.json"), &report)?;
            let artifacts = run_pipeline_with_artifacts(&cfg, PipelineVariant::Full, 0)?;
            if let Some(p) = &artifacts.best_pattern {
                save_pattern(p, &dir.join("best_pattern_run0.csv"))?;
            }
            save_model(&artifacts.stage2.phi, &dir.join("extractor_run0.txt"))?;
            save_model(&artifacts.stage2.w, &dir.join("classifier_run0.txt"))?;
            write_log(&dir.join("stage2_log_run0.jsonl"), &artifacts.stage2.log)?;
            print_report(&report);
            Ok(())
        }
        Command::Stage1 { data, pattern, dump_reprs } => {
            let dir = out_dir(&cfg)?;
            let dataset = dataset_for(&cfg, &data)?;
            let initial = match &pattern {
                Some(p) => load_pattern(p, dataset.len())?,
                None => dataset.original_pattern(),
            };
            let mut s1 = cfg.stage1.clone();
            s1.seed = cfg.seed;
            let (best, trace) = run_stage1(&dataset, &initial, &s1, Divider::Learned)?;
            save_pattern(&best, &dir.join("best_pattern.csv"))?;
            #[derive(serde::Serialize)]
            struct TraceFile {
                iterations: Vec<TraceRow>,
                best_iteration: usize,
                best_h: f64,
                config_echo: String,
                finished_unix_ms: u128,
            }
            #[derive(serde::Serialize)]
            struct TraceRow {
                iteration: usize,
                h: f64,
            }
            let trace_file = TraceFile {
                iterations: trace
                    .entries
                    .iter()
                    .map(|e| TraceRow { iteration: e.iteration, h: e.h })
                    .collect(),
                best_iteration: trace.best_iteration,
                best_h: trace.best_h,
                config_echo: cfg.serialize(),
                finished_unix_ms: std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_millis())
                    .unwrap_or(0),
            };
            write_json(&dir.join("stage1_trace.json"), &trace_file)?;
            if dump_reprs {
                for entry in &trace.entries {
                    let reprs = entry.phi_star.forward(&dataset.features)?;
                    save_embeddings(
                        &reprs,
                        &dir.join(format!("reprs_iter{}.csv", entry.iteration)),
                    )?;
                }
            }
            println!(
                "best pattern from iteration {} (H = {:.6}) -> {}",
                trace.best_iteration,
                trace.best_h,
                dir.join("best_pattern.csv").display()
            );
            Ok(())
        }
        Command::Stage2 { data, pattern } => {
            let dir = out_dir(&cfg)?;
            let dataset = dataset_for(&cfg, &data)?;
            let pat = match &pattern {
                Some(p) => load_pattern(p, dataset.len())?,
                None => dataset.original_pattern(),
            };
            let mut s2 = cfg.stage2.clone();
            s2.seed = cfg.seed;
            let result = run_stage2(&dataset, &pat, &s2, None)?;
            save_model(&result.final_phi, &dir.join("extractor.txt"))?;
            save_model(&result.final_w, &dir.join("classifier.txt"))?;
            write_log(&dir.join("stage2_log.jsonl"), &result.log)?;
            let reprs = result.final_phi.forward(&dataset.features)?;
            save_embeddings(&reprs, &dir.join("representations.csv"))?;
            let train_acc =
                classify_accuracy(&result.final_phi, &result.final_w, &dataset.features, &dataset.class_labels)?;
            println!("training accuracy {:.4}; artifacts in {}", train_acc, dir.display());
            Ok(())
        }
        Command::Baseline { method } => {
            let dir = out_dir(&cfg)?;
            let m = BaselineMethod::parse(&method)?;
            let report = run_baseline_experiment(&cfg, m)?;
            write_json(&dir.join(format!("baseline_{}.json", m.name())), &report)?;
            print_report(&report);
            Ok(())
        }
        Command::Ablate { variant } => {
            let dir = out_dir(&cfg)?;
            let v = PipelineVariant::parse(&variant)?;
            let report = run_ablation(&cfg, v)?;
            write_json(&dir.join(format!("ablation_{}.json", v.name())), &report)?;
            print_report(&report);
            Ok(())
        }
        Command::Plugin { method } => {
            let dir = out_dir(&cfg)?;
            let m = BaselineMethod::parse(&method)?;
            let report = run_plugin(&cfg, m)?;
            write_json(&dir.join(format!("plugin_{}.json", m.name())), &report)?;
            println!(
                "{}: original {:.4} -> generated {:.4} (delta {:+.2} points)",
                report.method,
                report.original.aggregate.test_mean,
                report.generated.aggregate.test_mean,
                report.delta_points
            );
            Ok(())
        }
        Command::Sweep { parameter, values } => {
            let dir = out_dir(&cfg)?;
            let param = SweepParameter::parse(&parameter)?;
            let grid: Vec<f64> = match values {
                Some(list) => list
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Config(format!("bad sweep value '{s}'")))
                    })
                    .collect::<Result<_>>()?,
                None => param.default_grid(),
            };
            let report = run_sweep(&cfg, param, &grid)?;
            std::fs::write(dir.join("sweep_summary.csv"), report.summary_csv())?;
            write_json(&dir.join("sweep_report.json"), &report)?;
            for p in &report.points {
                println!(
                    "{} = {}: test {:.4} +- {:.4}",
                    report.parameter,
                    p.value,
                    p.report.aggregate.test_mean,
                    p.report.aggregate.test_std
                );
            }
            Ok(())
        }
        Command::Audit { embeddings, classes, pattern, batch_size } => {
            let dir = out_dir(&cfg)?;
            let emb = load_embeddings(&embeddings)?;
            let cls = load_classes(&classes, emb.rows())?;
            let pat = load_pattern(&pattern, emb.rows())?;
            let report = audit(&emb, &cls, &pat, batch_size, cfg.seed)?;
            write_json(&dir.join("audit.json"), &report)?;
            println!("H = {:.6} over {} batches", report.h, report.batches);
            for cell in &report.breakdown {
                println!(
                    "  class {} domains ({}, {}): mean log ratio {:+.4} ({} terms)",
                    cell.class, cell.domain_a, cell.domain_b, cell.mean_log_ratio, cell.terms
                );
            }
            Ok(())
        }
        Command::Eval { extractor, classifier, data } => {
            let phi = load_model(&extractor)?;
            let w = load_model(&classifier)?;
            let dataset = load_dataset(&data)?;
            let acc = classify_accuracy(&phi, &w, &dataset.features, &dataset.class_labels)?;
            println!("accuracy {:.6}", acc);
            Ok(())
        }
    }
}

fn write_log(path: &Path, log: &[htcl_core::invariant::StepLog]) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::new();
    for entry in log {
        let line = serde_json::to_string(entry)
            .map_err(|e| Error::Io(format!("serialize log: {e}")))?;
        let _ = writeln!(out, "{line}");
    }
    std::fs::write(path, out)?;
    Ok(())
}
