//! Training loop, evaluation under any test-time form, the train × test
//! transfer matrix and probability-averaging ensembles.

use std::path::Path;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use pgp_core::ir::{load_weights, to_variant, weights_compatible, Mode, Model, NetworkIR, Variant};
use pgp_core::ops::nn::softmax;
use pgp_core::optim::{cosine_lr, Sgd};
use pgp_core::{AggregateMode, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::augment::augment;
use crate::config::ExperimentConfig;
use crate::data::{Dataset, Splits};

const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub seed: u64,
    pub epoch: usize,
    /// Learning rate of the last step of the epoch.
    pub lr: f64,
    /// Mean training loss over the epoch; absent for the epoch-0 evaluation.
    pub train_loss: Option<f64>,
    pub test_err: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalSummary {
    pub test_err_mean: f64,
    pub test_err_std: f64,
    pub seeds: Vec<u64>,
    pub test_errs: Vec<f64>,
}

impl FinalSummary {
    pub fn new(seeds: Vec<u64>, test_errs: Vec<f64>) -> Self {
        let (test_err_mean, test_err_std) = mean_std(&test_errs);
        FinalSummary {
            test_err_mean,
            test_err_std,
            seeds,
            test_errs,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub config: ExperimentConfig,
    pub provenance: String,
    pub per_epoch: Vec<EpochRecord>,
    #[serde(rename = "final")]
    pub summary: FinalSummary,
}

/// One trained model and its history.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub seed: u64,
    pub model: Model<f32>,
    pub per_epoch: Vec<EpochRecord>,
    /// Test error of the final weights under the training form.
    pub test_err: f64,
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => s[n / 2],
        _ => 0.5 * (s[n / 2 - 1] + s[n / 2]),
    }
}

/// Worker count from `PGP_NUM_THREADS`; unset or unparsable means 1.
pub fn num_threads() -> usize {
    std::env::var("PGP_NUM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Runs independent jobs, in parallel when `PGP_NUM_THREADS` > 1. Results
/// keep the job order.
pub fn run_jobs<J: Sync, T: Send>(jobs: &[J], f: impl Fn(&J) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    let threads = num_threads();
    if threads <= 1 || jobs.len() <= 1 {
        return jobs.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    pool.install(|| jobs.par_iter().map(&f).collect())
}

/// Index of the largest score in each row of `(b, classes, 1, 1)` scores.
pub fn argmax_rows(scores: &Tensor<f32>) -> Vec<usize> {
    let c = scores.shape().c;
    scores
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

fn error_pct(pred: &[usize], labels: &[usize]) -> f64 {
    let wrong = pred.iter().zip(labels).filter(|(p, l)| p != l).count();
    100.0 * wrong as f64 / labels.len() as f64
}

fn chunks(n: usize, size: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(size).map(move |s| (s..(s + size).min(n)).collect())
}

/// Model output for a batch in evaluation mode.
fn outputs(model: &Model<f32>, data: &Dataset, batch: usize) -> Result<Vec<Tensor<f32>>> {
    chunks(data.len(), batch)
        .map(|idx| Ok(model.predict(&data.gather(&idx).0)?))
        .collect()
}

/// Test error (%) of the model's own output on `data`.
pub fn test_error(model: &Model<f32>, data: &Dataset, batch: usize) -> Result<f64> {
    let mut pred = Vec::with_capacity(data.len());
    for out in outputs(model, data, batch)? {
        pred.extend(argmax_rows(&out));
    }
    Ok(error_pct(&pred, &data.labels))
}

/// Class probabilities of the model's final prediction: the aggregated
/// probabilities for `probs` aggregation, otherwise the softmax of the output.
pub fn class_probs(model: &Model<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::inference();
    let xv = tape.input(x.clone());
    let out = model.forward(&mut tape, xv, Mode::Eval)?;
    let y = tape.value(out.output)?;
    Ok(match out.aggregate {
        Some(AggregateMode::Probs) => y.clone(),
        _ => softmax(y)?,
    })
}

/// Trains one model of `cfg.train_variant` from `seed`.
pub fn train_run(cfg: &ExperimentConfig, base: &NetworkIR, data: &Splits, seed: u64) -> Result<TrainedRun> {
    cfg.validate()?;
    let net = to_variant(base, cfg.train_variant, cfg.aggregate_mode)?;
    let mut model = Model::<f32>::init(net, seed)?;
    let start = Instant::now();
    let mut per_epoch = Vec::with_capacity(cfg.epochs.max(1));

    if cfg.epochs == 0 {
        let test_err = test_error(&model, &data.test, cfg.eval_batch_size)?;
        per_epoch.push(EpochRecord {
            seed,
            epoch: 0,
            lr: cfg.lr_max,
            train_loss: None,
            test_err,
            wall_s: start.elapsed().as_secs_f64(),
        });
        return Ok(TrainedRun {
            seed,
            model,
            per_epoch,
            test_err,
        });
    }

    let n = data.train.len();
    ensure!(n > 0, "empty training split");
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut shuffle = ChaCha8Rng::seed_from_u64(seed);
    shuffle.set_stream(SHUFFLE_STREAM);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(seed);
    aug_rng.set_stream(AUGMENT_STREAM);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut lr = cfg.lr_max;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            lr = cosine_lr(step, total, cfg.lr_max, cfg.lr_min)?;
            let (mut x, labels) = data.train.gather(idx);
            augment(&mut x, &cfg.augmentations, &mut aug_rng, &data.train.norm);
            let mut tape = Tape::new();
            let xv = tape.input(x);
            let out = model.forward(&mut tape, xv, Mode::Train)?;
            let loss = model.loss(&mut tape, &out, &labels)?;
            let value = tape.value(loss)?.data()[0] as f64;
            if !value.is_finite() {
                bail!(
                    "training diverged: loss is {value} at epoch {epoch}, step {step} (lr {lr:.5}, seed {seed}, variant {})",
                    cfg.train_variant
                );
            }
            loss_sum += value * idx.len() as f64;
            tape.backward(loss, &mut model.params)?;
            model.update_running_stats(&out.bn_stats)?;
            sgd.step(&mut model.params, lr);
            step += 1;
        }
        let test_err = test_error(&model, &data.test, cfg.eval_batch_size)?;
        per_epoch.push(EpochRecord {
            seed,
            epoch,
            lr,
            train_loss: Some(loss_sum / n as f64),
            test_err,
            wall_s: start.elapsed().as_secs_f64(),
        });
    }
    let test_err = per_epoch.last().expect("at least one epoch").test_err;
    Ok(TrainedRun {
        seed,
        model,
        per_epoch,
        test_err,
    })
}

/// Trains `cfg.runs` models with seeds `cfg.seed + k`.
pub fn train(cfg: &ExperimentConfig, data: &Splits) -> Result<(Metrics, Vec<TrainedRun>)> {
    cfg.validate()?;
    let base = cfg.base_net(input_of(data))?;
    let seeds = cfg.seeds();
    let runs = run_jobs(&seeds, |&s| train_run(cfg, &base, data, s))?;
    let metrics = Metrics {
        config: cfg.clone(),
        provenance: data.train.provenance.clone(),
        per_epoch: runs.iter().flat_map(|r| r.per_epoch.iter().cloned()).collect(),
        summary: FinalSummary::new(seeds, runs.iter().map(|r| r.test_err).collect()),
    };
    Ok((metrics, runs))
}

pub fn input_of(data: &Splits) -> (usize, usize, usize) {
    let s = data.train.images.shape();
    (s.c, s.h, s.w)
}

fn check_compatible(trained: &NetworkIR, test: &NetworkIR, train_variant: Variant, test_variant: Variant) -> Result<()> {
    let compat = weights_compatible(trained, test);
    if !compat.compatible {
        bail!(
            "weights trained as {train_variant} do not load into the {test_variant} network: {}",
            compat.shape_mismatches.join("; ")
        );
    }
    Ok(())
}

/// Error (%) of a trained model run under the `test_variant` form of `base`.
pub fn evaluate_model(
    model: &Model<f32>,
    train_variant: Variant,
    base: &NetworkIR,
    test_variant: Variant,
    aggregate: AggregateMode,
    data: &Dataset,
    batch: usize,
) -> Result<f64> {
    let test_net = to_variant(base, test_variant, aggregate)?;
    check_compatible(model.net(), &test_net, train_variant, test_variant)?;
    let m = model.clone().rewrite(test_net)?;
    test_error(&m, data, batch)
}

/// Loads a weights file strictly into the `test_variant` form of `base`.
pub fn load_for_test(
    weights: &Path,
    base: &NetworkIR,
    train_variant: Variant,
    test_variant: Variant,
    aggregate: AggregateMode,
) -> Result<Model<f32>> {
    let train_net = to_variant(base, train_variant, aggregate)?;
    let test_net = to_variant(base, test_variant, aggregate)?;
    check_compatible(&train_net, &test_net, train_variant, test_variant)?;
    let mut model = Model::<f32>::init(test_net, 0)?;
    load_weights(&mut model.params, weights, true).with_context(|| format!("loading {}", weights.display()))?;
    Ok(model)
}

/// Error (%) of a saved model on the test split under `cfg.test_variant`.
pub fn evaluate(weights: &Path, cfg: &ExperimentConfig, data: &Splits) -> Result<f64> {
    let base = cfg.base_net(input_of(data))?;
    let model = load_for_test(weights, &base, cfg.train_variant, cfg.test_variant, cfg.aggregate_mode)?;
    test_error(&model, &data.test, cfg.eval_batch_size)
}

/// Error (%) of the mean class probabilities of several saved models.
pub fn ensemble_eval(weights: &[impl AsRef<Path>], cfg: &ExperimentConfig, data: &Splits) -> Result<f64> {
    ensure!(!weights.is_empty(), "an ensemble needs at least one weights file");
    let base = cfg.base_net(input_of(data))?;
    let members = weights
        .iter()
        .map(|w| load_for_test(w.as_ref(), &base, cfg.train_variant, cfg.test_variant, cfg.aggregate_mode))
        .collect::<Result<Vec<_>>>()?;
    let test = &data.test;
    let mut pred = Vec::with_capacity(test.len());
    for idx in chunks(test.len(), cfg.eval_batch_size) {
        let x = test.gather(&idx).0;
        let mut sum: Option<Tensor<f32>> = None;
        for m in &members {
            let p = class_probs(m, &x)?;
            match &mut sum {
                None => sum = Some(p),
                Some(s) => s.data_mut().iter_mut().zip(p.data()).for_each(|(a, b)| *a += b),
            }
        }
        let k = members.len() as f32;
        let mean = sum.expect("non-empty").map(|v| v / k);
        pred.extend(argmax_rows(&mean));
    }
    Ok(error_pct(&pred, &test.labels))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferCell {
    pub train: Variant,
    pub test: Variant,
    /// Error per seed, in seed order.
    pub errors: Vec<f64>,
    pub median: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TransferMatrix {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub cells: Vec<TransferCell>,
    /// Training time per train variant, summed over seeds.
    pub train_wall_s: Vec<(Variant, f64)>,
}

impl TransferMatrix {
    pub fn cell(&self, train: Variant, test: Variant) -> Option<&TransferCell> {
        self.cells.iter().find(|c| c.train == train && c.test == test)
    }

    pub fn median(&self, train: Variant, test: Variant) -> Option<f64> {
        self.cell(train, test).map(|c| c.median)
    }
}

/// Trains every variant for every seed and evaluates each model under every
/// test-time form.
pub fn transfer_matrix(cfg: &ExperimentConfig, data: &Splits, variants: &[Variant]) -> Result<TransferMatrix> {
    cfg.validate()?;
    ensure!(!variants.is_empty(), "no variants given");
    let base = cfg.base_net(input_of(data))?;
    let seeds = cfg.seeds();
    let jobs: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let rows = run_jobs(&jobs, |&(train_variant, seed)| {
        let run_cfg = ExperimentConfig {
            train_variant,
            ..cfg.clone()
        };
        let start = Instant::now();
        let run = train_run(&run_cfg, &base, data, seed)?;
        let wall = start.elapsed().as_secs_f64();
        let errs = variants
            .iter()
            .map(|&tv| {
                evaluate_model(&run.model, train_variant, &base, tv, cfg.aggregate_mode, &data.test, cfg.eval_batch_size)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((train_variant, errs, wall))
    })?;

    let mut cells = Vec::new();
    let mut train_wall_s = Vec::new();
    for &tv in variants {
        let mine: Vec<_> = rows.iter().filter(|r| r.0 == tv).collect();
        train_wall_s.push((tv, mine.iter().map(|r| r.2).sum()));
        for (k, &ev) in variants.iter().enumerate() {
            let errors: Vec<f64> = mine.iter().map(|r| r.1[k]).collect();
            cells.push(TransferCell {
                train: tv,
                test: ev,
                median: median(&errors),
                errors,
            });
        }
    }
    Ok(TransferMatrix {
        variants: variants.to_vec(),
        seeds,
        cells,
        train_wall_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statistics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }

    #[test]
    fn argmax_and_error() {
        let t = Tensor::new(pgp_core::Shape::new(3, 3, 1, 1), vec![0.1, 0.5, 0.2, 2.0, -1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0, 2]);
        assert_eq!(error_pct(&[1, 0, 2], &[1, 1, 2]), 100.0 / 3.0);
    }

    #[test]
    fn chunking() {
        let c: Vec<_> = chunks(5, 2).collect();
        assert_eq!(c, vec![vec![0, 1], vec![2, 3], vec![4]]);
    }
}
