//! Evaluation: Hungarian-rounded exact-match accuracy and reconstruction
//! error on held-out sets.

use std::io::Write;

use rayon::prelude::*;

use super::config::{Config, TaskName};
use super::data::{gen_mosaic_batch, gen_sort_batch, Interval};
use super::model::Model;
use super::train::{stream_rng, with_threads, Batch, EVAL_STREAM};
use crate::assignment::round_soft;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::perm_optim::{PoConfig, UpdateMode};
use crate::sinkhorn::row_entropy;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub interval: Interval,
    /// Fraction of sets whose rounded output equals the target exactly.
    pub exact_acc: f64,
    /// Mean squared error of the rounded output against the target.
    pub hard_mse: f64,
}

pub fn write_eval_csv<W: Write>(rows: &[EvalRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "interval_lo,interval_hi,exact_acc,hard_mse")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.6},{:e}",
            r.interval.lo, r.interval.hi, r.exact_acc, r.hard_mse
        )?;
    }
    Ok(())
}

/// Outcome of one set: whether the rounded output is exact, and its squared
/// error summed over entries.
fn score_set(model: &Model, x: &Tensor, target: &Tensor) -> Result<(bool, f64)> {
    let p = model.soft_permutation(x, &model.po)?;
    let y = round_soft(&p)?.apply(x)?;
    let sq: f64 = y.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((y == *target, sq))
}

/// Accuracy and hard MSE of `model` over a batch.
pub fn evaluate_batch(model: &Model, batch: &Batch) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation batch".into()));
    }
    let scores: Vec<Result<(bool, f64)>> = batch
        .par_iter()
        .map(|(x, t)| score_set(model, x, t))
        .collect();
    let mut hits = 0usize;
    let mut sq = 0.0;
    let mut entries = 0usize;
    for (s, (_, t)) in scores.into_iter().zip(batch) {
        let (exact, e) = s?;
        hits += usize::from(exact);
        sq += e;
        entries += t.len();
    }
    Ok((hits as f64 / batch.len() as f64, sq / entries as f64))
}

/// Held-out evaluation of `model` on the task in `cfg`: one row per
/// evaluation interval for sorting, a single row for mosaics (tile features
/// lie in `[0, 1]`).
pub fn evaluate(model: &Model, cfg: &Config) -> Result<Vec<EvalRow>> {
    model.check()?;
    if model.set_size() != cfg.n {
        return Err(Error::Incompatible(format!(
            "model is configured for sets of {}, task has {}",
            model.set_size(),
            cfg.n
        )));
    }
    if cfg.eval_sets == 0 {
        return Err(Error::InvalidArgument("eval-sets must be positive".into()));
    }
    let mut rng = stream_rng(cfg.seed, EVAL_STREAM);
    let batches: Vec<(Interval, Batch)> = match cfg.task {
        TaskName::Sort => cfg
            .intervals
            .iter()
            .map(|&iv| {
                let b = gen_sort_batch(cfg.n, iv, cfg.eval_sets, &mut rng);
                (iv, b.inputs.into_iter().zip(b.targets).collect())
            })
            .collect(),
        TaskName::Mosaic => {
            let task = cfg.mosaic_task()?;
            let b = gen_mosaic_batch(&task, cfg.eval_sets, &mut rng)?;
            vec![(Interval::unit(), b.tiles.into_iter().zip(b.targets).collect())]
        }
    };
    with_threads(cfg.threads, || {
        batches
            .iter()
            .map(|(iv, batch)| {
                let (exact_acc, hard_mse) = evaluate_batch(model, batch)?;
                Ok(EvalRow {
                    interval: *iv,
                    exact_acc,
                    hard_mse,
                })
            })
            .collect()
    })?
}

/// Mean row entropy of the final soft permutations over `inputs`.
pub fn mean_row_entropy(model: &Model, inputs: &[Tensor], update: UpdateMode) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no inputs".into()));
    }
    let po = PoConfig {
        update,
        ..model.po
    };
    let values: Vec<Result<f64>> = inputs
        .par_iter()
        .map(|x| row_entropy(&model.soft_permutation(x, &po)?))
        .collect();
    let mut total = 0.0;
    for v in values {
        total += v?;
    }
    Ok(total / inputs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyComparison {
    pub alternative: f64,
    pub full_gradient: f64,
}

/// Row entropy of `P_final` under both inner update rules on the same sets.
pub fn entropy_diagnostic(model: &Model, inputs: &[Tensor]) -> Result<EntropyComparison> {
    Ok(EntropyComparison {
        alternative: mean_row_entropy(model, inputs, UpdateMode::Alternative)?,
        full_gradient: mean_row_entropy(model, inputs, UpdateMode::FullGradient)?,
    })
}
