//! Training loop: mean squared error between the permuted output and the
//! ordered target, minimised with Adam.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::adam::AdamState;
use super::config::{Config, TaskName};
use super::data::{gen_mosaic_batch, gen_sort_batch, MosaicTask};
use super::model::Model;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Random stream used for parameter initialisation.
pub const INIT_STREAM: u64 = 0;
/// Random stream used for training data.
pub const TRAIN_STREAM: u64 = 1;
/// Random stream used for held-out evaluation data.
pub const EVAL_STREAM: u64 = 2;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One row of the metrics log. Row 0 holds the initial step size and the
/// loss of the first batch before any update.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mse: f64,
    pub eta: f64,
    pub seconds: f64,
}

pub fn write_metrics_csv<W: Write>(log: &[EpochLog], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,mse,eta,seconds")?;
    for row in log {
        writeln!(out, "{},{:e},{:e},{:.3}", row.epoch, row.mse, row.eta, row.seconds)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// Input and target for each set of a batch.
pub type Batch = Vec<(Tensor, Tensor)>;

/// Draws training or evaluation batches for the configured task.
pub struct BatchSource {
    cfg: Config,
    mosaic: Option<MosaicTask>,
    rng: ChaCha8Rng,
}

impl BatchSource {
    pub fn new(cfg: &Config, stream: u64) -> Result<Self> {
        let mosaic = match cfg.task {
            TaskName::Sort => None,
            TaskName::Mosaic => Some(cfg.mosaic_task()?),
        };
        Ok(BatchSource {
            cfg: cfg.clone(),
            mosaic,
            rng: stream_rng(cfg.seed, stream),
        })
    }

    /// Raw element dimension of the task.
    pub fn input_dim(&self) -> Result<usize> {
        match &self.mosaic {
            None => Ok(1),
            Some(task) => task.tile_dim(),
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Result<Batch> {
        match &self.mosaic {
            None => {
                let b = gen_sort_batch(self.cfg.n, self.cfg.train_interval, size, &mut self.rng);
                Ok(b.inputs.into_iter().zip(b.targets).collect())
            }
            Some(task) => {
                let b = gen_mosaic_batch(task, size, &mut self.rng)?;
                Ok(b.tiles.into_iter().zip(b.targets).collect())
            }
        }
    }
}

/// Runs `f` on a pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {threads} threads: {e}")))?;
    Ok(pool.install(f))
}

/// Mean loss over the batch and the mean gradient of every parameter.
/// Per-set results are combined in set order, so the outcome does not
/// depend on the number of threads.
pub fn batch_loss_and_grad(model: &Model, batch: &Batch) -> Result<(f64, Vec<Tensor>)> {
    let per_set: Vec<Result<(f64, Vec<Tensor>)>> = batch
        .par_iter()
        .map(|(x, t)| model.loss_and_grad(x, t))
        .collect();
    let mut loss = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    for r in per_set {
        let (l, g) = r?;
        loss += l;
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let grads = grads
        .unwrap_or_else(|| model.params().iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect())
        .into_iter()
        .map(|g| g.scale(scale))
        .collect();
    Ok((loss * scale, grads))
}

/// Initialises a model from `cfg` and trains it.
pub fn train(cfg: &Config) -> Result<TrainOutput> {
    train_with(cfg, |_| {})
}

/// [`train`] reporting every log row as soon as it is available.
pub fn train_with(cfg: &Config, on_row: impl FnMut(&EpochLog) + Send) -> Result<TrainOutput> {
    let source = BatchSource::new(cfg, TRAIN_STREAM)?;
    let mut init_rng = stream_rng(cfg.seed, INIT_STREAM);
    let model = Model::init(
        cfg.structure()?,
        source.input_dim()?,
        cfg.hidden,
        cfg.embed,
        cfg.eta_init,
        cfg.po(),
        &mut init_rng,
    )?;
    train_model(cfg, model, source, on_row)
}

/// Trains `model` on batches from `source` for `cfg.epochs` epochs.
pub fn train_model(
    cfg: &Config,
    mut model: Model,
    mut source: BatchSource,
    mut on_row: impl FnMut(&EpochLog) + Send,
) -> Result<TrainOutput> {
    let threads = cfg.threads;
    let cfg = cfg.clone();
    with_threads(threads, move || {
        let start = Instant::now();
        let batch_size = cfg.batch_size;
        let batches = cfg.sets_per_epoch.div_ceil(batch_size);
        let mut adam = AdamState::for_params(cfg.lr, &model.params());
        let mut log = Vec::with_capacity(cfg.epochs + 1);

        let first = source.next_batch(batch_size.min(cfg.sets_per_epoch.max(1)))?;
        let (loss0, _) = batch_loss_and_grad(&model, &first)?;
        if !loss0.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0, batch: 0 });
        }
        let row = EpochLog {
            epoch: 0,
            mse: loss0,
            eta: model.eta.item(),
            seconds: start.elapsed().as_secs_f64(),
        };
        on_row(&row);
        log.push(row);

        let mut pending = Some(first);
        for epoch in 1..=cfg.epochs {
            let mut total = 0.0;
            let mut sets = 0usize;
            for b in 0..batches {
                let size = batch_size.min(cfg.sets_per_epoch - b * batch_size);
                let batch = match pending.take() {
                    Some(batch) => batch,
                    None => source.next_batch(size)?,
                };
                let (loss, grads) = batch_loss_and_grad(&model, &batch)?;
                if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFiniteLoss { epoch, batch: b });
                }
                adam.step(&mut model.params_mut(), &grads)?;
                total += loss * batch.len() as f64;
                sets += batch.len();
            }
            let row = EpochLog {
                epoch,
                mse: if sets == 0 { f64::NAN } else { total / sets as f64 },
                eta: model.eta.item(),
                seconds: start.elapsed().as_secs_f64(),
            };
            on_row(&row);
            log.push(row);
        }
        Ok(TrainOutput { model, log })
    })?
}
