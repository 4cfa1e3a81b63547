use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use pgp_core::ir::{emit_ir, parse_ir, save_weights, to_base, to_dconv, to_pgp, Variant};
use pgp_core::AggregateMode;
use pgp_harness::data::{export, gen_synthetic};
use pgp_harness::suites::{check_equiv, gradient_suite};
use pgp_harness::{ensemble_eval, evaluate, train, transfer_matrix, Augment, ExperimentConfig};
use serde::Serialize;
use serde_json::json;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_PROPERTY: u8 = 3;

#[derive(Parser)]
#[command(name = "pgp", version, about = "Parallel grid pooling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as train/ and test/ split directories
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory to create
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Read a base network in IR text and print its DConv, PGP or base form
    Rewrite {
        #[arg(long, value_parser = parse_variant)]
        to: Variant,
        #[arg(long, default_value = "logits", value_parser = parse_aggregate)]
        aggregate: AggregateMode,
        /// IR file; standard input when absent
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the partition, factorization, decomposition and rewrite suites
    CheckEquiv {
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient check of every op and the reference network
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train `runs` models and write metrics and weights
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory for the weight files
        #[arg(long, default_value = "weights")]
        weights_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test error of a weights file under the test variant
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every variant and evaluate it under every test-time form
    TransferMatrix {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Variants to include, comma separated
        #[arg(long, value_delimiter = ',', value_parser = parse_variant, default_value = "base,dconv,pgp")]
        variants: Vec<Variant>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test error of the mean class probabilities of several models
    Ensemble {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, num_args = 1.., required = true)]
        weights: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Flags overriding `ExperimentConfig`; `--config` supplies the base values.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Flat JSON object with ExperimentConfig keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    net_ir: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    test_samples: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long, value_parser = parse_variant)]
    train_variant: Option<Variant>,
    #[arg(long, value_parser = parse_variant)]
    test_variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    /// Comma-separated subset of flip,crop,erase; `none` for no augmentation
    #[arg(long, value_delimiter = ',')]
    augment: Option<Vec<String>>,
    #[arg(long, value_parser = parse_aggregate)]
    aggregate_mode: Option<AggregateMode>,
    #[arg(long)]
    eval_batch_size: Option<usize>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: pgp_core::Error| e.to_string())
}

fn parse_aggregate(s: &str) -> Result<AggregateMode, String> {
    s.parse().map_err(|e: pgp_core::Error| e.to_string())
}

impl ConfigArgs {
    fn resolve(self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::from_json_file(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { c.$field = v; })*
            };
        }
        set!(
            classes,
            height,
            width,
            train_samples,
            test_samples,
            data_seed,
            amplitude,
            train_variant,
            test_variant,
            epochs,
            batch_size,
            lr_max,
            lr_min,
            momentum,
            weight_decay,
            seed,
            runs,
            aggregate_mode,
            eval_batch_size
        );
        if self.net_ir.is_some() {
            c.net_ir = self.net_ir;
        }
        if self.data_dir.is_some() {
            c.data_dir = self.data_dir;
        }
        if let Some(names) = self.augment {
            c.augmentations = names
                .iter()
                .filter(|n| n.as_str() != "none" && !n.is_empty())
                .map(|n| n.parse::<Augment>().map_err(anyhow::Error::msg))
                .collect::<Result<_>>()?;
            c.augmentations.sort();
            c.augmentations.dedup();
        }
        c.validate()?;
        Ok(c)
    }
}

fn emit_text(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(stdout.flush()?)
        }
    }
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    emit_text(&text, out)
}

/// Runs a command; `Ok(false)` means a property suite failed.
fn run(command: Command) -> Result<bool> {
    match command {
        Command::GenData { cfg, dir, out } => {
            let cfg = cfg.resolve()?;
            let spec = cfg.synthetic_spec();
            let (train, test) = gen_synthetic(&spec)?;
            export(&dir, &train, &test)?;
            emit_json(
                &json!({
                    "dir": dir,
                    "provenance": spec.descriptor(),
                    "train": train.len(),
                    "test": test.len(),
                    "shape": [train.c, train.h, train.w],
                    "classes": spec.classes,
                }),
                out.as_deref(),
            )?;
        }
        Command::Rewrite { to, aggregate, input, out } => {
            let text = match &input {
                Some(path) => std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
                None => {
                    let mut s = String::new();
                    std::io::stdin().read_to_string(&mut s)?;
                    s
                }
            };
            let net = parse_ir(&text)?;
            let rewritten = match to {
                Variant::Dconv => to_dconv(&net)?,
                Variant::Pgp => to_pgp(&net, aggregate)?,
                Variant::Base => to_base(&net)?,
            };
            emit_text(&emit_ir(&rewritten), out.as_deref())?;
        }
        Command::CheckEquiv { seeds, out } => {
            let report = check_equiv(seeds)?;
            emit_json(&report, out.as_deref())?;
            return Ok(report.passed);
        }
        Command::Gradcheck { seeds, out } => {
            let report = gradient_suite(&(0..seeds as u64).collect::<Vec<_>>())?;
            emit_json(&report, out.as_deref())?;
            return Ok(report.passed);
        }
        Command::Train { cfg, weights_dir, out } => {
            let cfg = cfg.resolve()?;
            let data = cfg.load_data()?;
            let (metrics, runs) = train(&cfg, &data)?;
            std::fs::create_dir_all(&weights_dir).with_context(|| format!("creating {}", weights_dir.display()))?;
            for r in &runs {
                let path = weights_dir.join(weights_file_name(cfg.train_variant, r.seed));
                save_weights(&r.model.params, &path).with_context(|| format!("writing {}", path.display()))?;
            }
            emit_json(&metrics, out.as_deref())?;
        }
        Command::Eval { cfg, weights, out } => {
            let cfg = cfg.resolve()?;
            let data = cfg.load_data()?;
            let err = evaluate(&weights, &cfg, &data)?;
            emit_json(
                &json!({
                    "weights": weights,
                    "train_variant": cfg.train_variant,
                    "test_variant": cfg.test_variant,
                    "aggregate_mode": cfg.aggregate_mode,
                    "test_err": err,
                }),
                out.as_deref(),
            )?;
        }
        Command::TransferMatrix { cfg, variants, out } => {
            let cfg = cfg.resolve()?;
            let data = cfg.load_data()?;
            let matrix = transfer_matrix(&cfg, &data, &variants)?;
            emit_json(&json!({ "config": cfg, "matrix": matrix }), out.as_deref())?;
        }
        Command::Ensemble { cfg, weights, out } => {
            let cfg = cfg.resolve()?;
            let data = cfg.load_data()?;
            let err = ensemble_eval(&weights, &cfg, &data)?;
            emit_json(
                &json!({
                    "members": weights,
                    "train_variant": cfg.train_variant,
                    "test_variant": cfg.test_variant,
                    "test_err": err,
                }),
                out.as_deref(),
            )?;
        }
    }
    Ok(true)
}

fn weights_file_name(variant: Variant, seed: u64) -> String {
    format!("{variant}-seed{seed}.pgpw")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("pgp: property suite failed, see the report");
            ExitCode::from(EXIT_PROPERTY)
        }
        Err(e) => {
            eprintln!("pgp: error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
