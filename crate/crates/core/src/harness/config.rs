//! Experiment configuration as a flat `key = value` text file.
//!
//! Blank lines and lines starting with `#` are ignored. Every other line
//! must be `key = value` with a known key; each key may appear once.
//! Defaults depend on `task`:
//!
//! | key              | sort        | mosaic      |
//! |------------------|-------------|-------------|
//! | `n`              | 5           | rows·cols   |
//! | `grid`           | n/a         | `3x3`       |
//! | `lr`             | 0.1         | 0.001       |
//! | `batch-size`     | 512         | 32          |
//! | `T`              | 6           | 4           |
//! | `hidden`         | 16          | 64          |
//! | `sets-per-epoch` | 32768       | 8192        |
//! | `epochs`         | 8           | 8           |
//! | `eval-sets`      | 1024        | 512         |
//!
//! Shared defaults: `sinkhorn-iters = 4`, `eta-init = 1.0`,
//! `init-mode = uniform`, `train-interval = 0:1`, `intervals` = the seven
//! standard evaluation intervals, `source = synthetic`, `tile-dim = 4`,
//! `threads = 1`, `seed = 20180503`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::data::{standard_eval_intervals, Interval, MosaicTask, SortTask, TileSource};
use crate::error::{Error, Result};
use crate::perm_optim::{InitMode, PoConfig, PositionStructure, UpdateMode};

pub const DEFAULT_SEED: u64 = 20180503;

const KEYS: &[&str] = &[
    "task",
    "n",
    "grid",
    "train-interval",
    "intervals",
    "epochs",
    "sets-per-epoch",
    "batch-size",
    "lr",
    "T",
    "sinkhorn-iters",
    "eta-init",
    "hidden",
    "init-mode",
    "seed",
    "eval-sets",
    "tile-dim",
    "source",
    "mnist-images",
    "embed-hidden",
    "embed-dim",
    "checkpoint",
    "metrics",
    "threads",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskName {
    Sort,
    Mosaic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub task: TaskName,
    pub n: usize,
    pub grid: (usize, usize),
    pub train_interval: Interval,
    pub intervals: Vec<Interval>,
    pub epochs: usize,
    pub sets_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub sinkhorn_iters: usize,
    pub eta_init: f64,
    pub hidden: usize,
    pub init_mode: InitMode,
    pub seed: u64,
    pub eval_sets: usize,
    pub tile_dim: usize,
    /// `None` means synthetic tiles.
    pub mnist_images: Option<PathBuf>,
    /// Tile embedding `(hidden, output)` widths; `None` feeds raw tiles.
    pub embed: Option<(usize, usize)>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub threads: usize,
}

impl Config {
    pub fn sort() -> Self {
        Config {
            task: TaskName::Sort,
            n: 5,
            grid: (1, 5),
            train_interval: Interval::unit(),
            intervals: standard_eval_intervals(),
            epochs: 8,
            sets_per_epoch: 1 << 15,
            batch_size: 512,
            lr: 0.1,
            steps: 6,
            sinkhorn_iters: 4,
            eta_init: 1.0,
            hidden: 16,
            init_mode: InitMode::Uniform,
            seed: DEFAULT_SEED,
            eval_sets: 1024,
            tile_dim: 4,
            mnist_images: None,
            embed: None,
            checkpoint: None,
            metrics: None,
            threads: 1,
        }
    }

    pub fn mosaic() -> Self {
        Config {
            task: TaskName::Mosaic,
            n: 9,
            grid: (3, 3),
            epochs: 8,
            sets_per_epoch: 1 << 13,
            batch_size: 32,
            lr: 1e-3,
            steps: 4,
            hidden: 64,
            eval_sets: 512,
            ..Config::sort()
        }
    }

    /// Parses config text. Relative paths stay as written.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, &str, &str)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::Config {
                line,
                key: trimmed.to_string(),
                detail: "expected `key = value`".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config {
                    line,
                    key: key.into(),
                    detail: "unknown key".into(),
                });
            }
            if let Some((first, ..)) = entries.iter().find(|(_, k, _)| *k == key) {
                return Err(Error::Config {
                    line,
                    key: key.into(),
                    detail: format!("duplicate key, first set on line {first}"),
                });
            }
            entries.push((line, key, value));
        }

        let task = match entries.iter().find(|(_, k, _)| *k == "task") {
            None | Some((_, _, "sort")) => TaskName::Sort,
            Some((_, _, "mosaic")) => TaskName::Mosaic,
            Some(&(line, key, other)) => {
                return Err(Error::Config {
                    line,
                    key: key.into(),
                    detail: format!("expected `sort` or `mosaic`, got `{other}`"),
                })
            }
        };
        let mut cfg = match task {
            TaskName::Sort => Config::sort(),
            TaskName::Mosaic => Config::mosaic(),
        };
        let mut n_set = false;
        let mut source_mnist = None;
        let mut embed_hidden = None;
        let mut embed_dim = None;

        for &(line, key, value) in &entries {
            let err = |detail: String| Error::Config {
                line,
                key: key.into(),
                detail,
            };
            match key {
                "task" => {}
                "n" => {
                    cfg.n = parse_num(value).map_err(err)?;
                    n_set = true;
                }
                "grid" => cfg.grid = parse_grid(value).map_err(err)?,
                "train-interval" => cfg.train_interval = parse_interval(value).map_err(err)?,
                "intervals" => {
                    cfg.intervals = value
                        .split(',')
                        .map(|s| parse_interval(s.trim()))
                        .collect::<std::result::Result<_, _>>()
                        .map_err(err)?;
                }
                "epochs" => cfg.epochs = parse_num(value).map_err(err)?,
                "sets-per-epoch" => cfg.sets_per_epoch = parse_num(value).map_err(err)?,
                "batch-size" => cfg.batch_size = parse_num(value).map_err(err)?,
                "lr" => cfg.lr = parse_real(value).map_err(err)?,
                "T" => cfg.steps = parse_num(value).map_err(err)?,
                "sinkhorn-iters" => cfg.sinkhorn_iters = parse_num(value).map_err(err)?,
                "eta-init" => cfg.eta_init = parse_real(value).map_err(err)?,
                "hidden" => cfg.hidden = parse_num(value).map_err(err)?,
                "init-mode" => {
                    cfg.init_mode = match value {
                        "uniform" => InitMode::Uniform,
                        "linear-assignment" | "la" => InitMode::LinearAssignment,
                        _ => return Err(err(format!("expected `uniform` or `linear-assignment`, got `{value}`"))),
                    }
                }
                "seed" => cfg.seed = parse_num(value).map_err(err)?,
                "eval-sets" => cfg.eval_sets = parse_num(value).map_err(err)?,
                "tile-dim" => cfg.tile_dim = parse_num(value).map_err(err)?,
                "source" => {
                    source_mnist = Some(match value {
                        "synthetic" => false,
                        "mnist" => true,
                        _ => return Err(err(format!("expected `synthetic` or `mnist`, got `{value}`"))),
                    })
                }
                "mnist-images" => cfg.mnist_images = Some(PathBuf::from(value)),
                "embed-hidden" => embed_hidden = Some(parse_num(value).map_err(err)?),
                "embed-dim" => embed_dim = Some(parse_num(value).map_err(err)?),
                "checkpoint" => cfg.checkpoint = Some(PathBuf::from(value)),
                "metrics" => cfg.metrics = Some(PathBuf::from(value)),
                "threads" => cfg.threads = parse_num(value).map_err(err)?,
                _ => unreachable!("key list checked above"),
            }
        }

        let line_of = |key: &str| {
            entries
                .iter()
                .find(|(_, k, _)| *k == key)
                .map_or(0, |(l, ..)| *l)
        };
        let fail = |key: &str, detail: String| Error::Config {
            line: line_of(key),
            key: key.into(),
            detail,
        };

        match source_mnist {
            Some(true) if cfg.mnist_images.is_none() => {
                return Err(fail("source", "`source = mnist` needs `mnist-images`".into()))
            }
            Some(false) => cfg.mnist_images = None,
            _ => {}
        }
        cfg.embed = match (embed_hidden, embed_dim) {
            (None, None) => None,
            (Some(h), Some(d)) => Some((h, d)),
            (Some(h), None) => Some((h, cfg.tile_dim.min(16))),
            (None, Some(_)) => return Err(fail("embed-dim", "needs `embed-hidden`".into())),
        };
        if cfg.task == TaskName::Mosaic {
            let n = cfg.grid.0 * cfg.grid.1;
            if n_set && cfg.n != n {
                return Err(fail("n", format!("grid {}x{} has {n} tiles", cfg.grid.0, cfg.grid.1)));
            }
            cfg.n = n;
        }
        cfg.validate().map_err(|e| match e {
            Error::Config { key, detail, .. } => fail(&key, detail),
            other => other,
        })?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Config::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.mnist_images, &mut cfg.checkpoint, &mut cfg.metrics]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: &str| {
            Err(Error::Config {
                line: 0,
                key: key.into(),
                detail: detail.into(),
            })
        };
        match self.task {
            TaskName::Sort if self.n < 2 => return bad("n", "sort sets need n >= 2"),
            TaskName::Mosaic if self.grid.0 == 0 || self.grid.1 == 0 => {
                return bad("grid", "grid sides must be positive")
            }
            TaskName::Mosaic if self.mnist_images.is_none() && self.tile_dim < 2 => {
                return bad("tile-dim", "synthetic tiles need at least 2 features")
            }
            _ => {}
        }
        if self.batch_size == 0 {
            return bad("batch-size", "must be positive");
        }
        if self.sinkhorn_iters == 0 {
            return bad("sinkhorn-iters", "must be positive");
        }
        if self.hidden == 0 {
            return bad("hidden", "must be positive");
        }
        if self.threads == 0 {
            return bad("threads", "must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be a positive real");
        }
        if !self.eta_init.is_finite() {
            return bad("eta-init", "must be finite");
        }
        if matches!(self.embed, Some((0, _)) | Some((_, 0))) {
            return bad("embed-hidden", "embedding widths must be positive");
        }
        Ok(())
    }

    pub fn po(&self) -> PoConfig {
        PoConfig {
            steps: self.steps,
            sinkhorn_iters: self.sinkhorn_iters,
            init: self.init_mode,
            update: UpdateMode::Alternative,
            keep_trajectory: false,
        }
    }

    pub fn structure(&self) -> Result<PositionStructure> {
        match self.task {
            TaskName::Sort => PositionStructure::sequence(self.n),
            TaskName::Mosaic => PositionStructure::grid(self.grid.0, self.grid.1),
        }
    }

    pub fn sort_task(&self) -> SortTask {
        SortTask {
            n: self.n,
            train_interval: self.train_interval,
            eval_intervals: self.intervals.clone(),
            sets_per_epoch: self.sets_per_epoch,
            batch_size: self.batch_size,
        }
    }

    /// Loads the MNIST images when configured.
    pub fn mosaic_task(&self) -> Result<MosaicTask> {
        let source = match &self.mnist_images {
            Some(path) => TileSource::mnist(path)?,
            None => TileSource::Synthetic { dim: self.tile_dim },
        };
        let task = MosaicTask {
            rows: self.grid.0,
            cols: self.grid.1,
            source,
        };
        task.validate()?;
        Ok(task)
    }

    /// Canonical text form; [`Config::parse`] reads it back to an equal value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let task = match self.task {
            TaskName::Sort => "sort",
            TaskName::Mosaic => "mosaic",
        };
        let iv = |i: &Interval| format!("{:?}:{:?}", i.lo, i.hi);
        let _ = writeln!(s, "task = {task}");
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "grid = {}x{}", self.grid.0, self.grid.1);
        let _ = writeln!(s, "train-interval = {}", iv(&self.train_interval));
        let ivs: Vec<_> = self.intervals.iter().map(iv).collect();
        let _ = writeln!(s, "intervals = {}", ivs.join(", "));
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "sets-per-epoch = {}", self.sets_per_epoch);
        let _ = writeln!(s, "batch-size = {}", self.batch_size);
        let _ = writeln!(s, "lr = {:?}", self.lr);
        let _ = writeln!(s, "T = {}", self.steps);
        let _ = writeln!(s, "sinkhorn-iters = {}", self.sinkhorn_iters);
        let _ = writeln!(s, "eta-init = {:?}", self.eta_init);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let mode = match self.init_mode {
            InitMode::Uniform => "uniform",
            InitMode::LinearAssignment => "linear-assignment",
        };
        let _ = writeln!(s, "init-mode = {mode}");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "eval-sets = {}", self.eval_sets);
        let _ = writeln!(s, "tile-dim = {}", self.tile_dim);
        match &self.mnist_images {
            Some(p) => {
                let _ = writeln!(s, "source = mnist");
                let _ = writeln!(s, "mnist-images = {}", p.display());
            }
            None => {
                let _ = writeln!(s, "source = synthetic");
            }
        }
        if let Some((h, d)) = self.embed {
            let _ = writeln!(s, "embed-hidden = {h}");
            let _ = writeln!(s, "embed-dim = {d}");
        }
        if let Some(p) = &self.checkpoint {
            let _ = writeln!(s, "checkpoint = {}", p.display());
        }
        if let Some(p) = &self.metrics {
            let _ = writeln!(s, "metrics = {}", p.display());
        }
        let _ = writeln!(s, "threads = {}", self.threads);
        s
    }
}

fn parse_num<T: std::str::FromStr>(value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("expected a non-negative integer, got `{value}`"))
}

fn parse_real(value: &str) -> std::result::Result<f64, String> {
    value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("expected a finite real, got `{value}`"))
}

/// `lo:hi`.
fn parse_interval(value: &str) -> std::result::Result<Interval, String> {
    let (lo, hi) = value
        .split_once(':')
        .ok_or_else(|| format!("expected an interval `lo:hi`, got `{value}`"))?;
    let lo = parse_real(lo.trim())?;
    let hi = parse_real(hi.trim())?;
    Interval::new(lo, hi).map_err(|e| e.to_string())
}

/// `RxC`.
fn parse_grid(value: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = value
        .split_once(['x', 'X', '×'])
        .ok_or_else(|| format!("expected a grid `RxC`, got `{value}`"))?;
    Ok((parse_num(r.trim())?, parse_num(c.trim())?))
}
