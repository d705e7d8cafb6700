//! Task data: number sets to sort and tile mosaics to reassemble.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use super::idx::{load_idx, IdxImages};
use crate::assignment::HardPermutation;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Half-open real interval `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!("empty interval [{lo}, {hi})")));
        }
        Ok(Interval { lo, hi })
    }

    pub fn unit() -> Self {
        Interval { lo: 0.0, hi: 1.0 }
    }
}

impl std::fmt::Display for Interval {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

/// The seven intervals sorting models are evaluated on.
pub fn standard_eval_intervals() -> Vec<Interval> {
    [
        (0.0, 1.0),
        (0.0, 10.0),
        (0.0, 1000.0),
        (1.0, 2.0),
        (10.0, 11.0),
        (100.0, 101.0),
        (1000.0, 1001.0),
    ]
    .into_iter()
    .map(|(lo, hi)| Interval { lo, hi })
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SortTask {
    pub n: usize,
    pub train_interval: Interval,
    pub eval_intervals: Vec<Interval>,
    pub sets_per_epoch: usize,
    pub batch_size: usize,
}

impl SortTask {
    pub fn new(n: usize) -> Self {
        SortTask {
            n,
            train_interval: Interval::unit(),
            eval_intervals: standard_eval_intervals(),
            sets_per_epoch: 1 << 15,
            batch_size: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidArgument(format!("sort sets need N >= 2, got {}", self.n)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        for iv in std::iter::once(&self.train_interval).chain(&self.eval_intervals) {
            Interval::new(iv.lo, iv.hi)?;
        }
        Ok(())
    }
}

/// Inputs and their ascending-sorted copies, one `N × 1` matrix per set.
#[derive(Debug, Clone, PartialEq)]
pub struct SortBatch {
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
}

impl SortBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// `batch` sets of `n` numbers drawn i.i.d. from `interval`.
pub fn gen_sort_batch<R: Rng>(n: usize, interval: Interval, batch: usize, rng: &mut R) -> SortBatch {
    let mut inputs = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch);
    for _ in 0..batch {
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(interval.lo..interval.hi)).collect();
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        inputs.push(Tensor::column(&values));
        targets.push(Tensor::column(&sorted));
    }
    SortBatch { inputs, targets }
}

/// Where mosaic tiles come from.
#[derive(Debug, Clone)]
pub enum TileSource {
    /// Generated tiles of `dim` features; see [`synthetic_mosaic`].
    Synthetic { dim: usize },
    /// Square tiles cut from grey-scale images.
    Images(Arc<IdxImages>),
}

impl TileSource {
    pub fn mnist(path: impl AsRef<Path>) -> Result<Self> {
        Ok(TileSource::Images(Arc::new(load_idx(path)?)))
    }
}

#[derive(Debug, Clone)]
pub struct MosaicTask {
    pub rows: usize,
    pub cols: usize,
    pub source: TileSource,
}

impl MosaicTask {
    pub fn n(&self) -> usize {
        self.rows * self.cols
    }

    /// Features per tile.
    pub fn tile_dim(&self) -> Result<usize> {
        match &self.source {
            TileSource::Synthetic { dim } => Ok(*dim),
            TileSource::Images(images) => {
                let (side, tile) = padded_side(images.rows, images.cols, self.rows, self.cols)?;
                let _ = side;
                Ok(tile.0 * tile.1)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "empty mosaic grid {}x{}",
                self.rows, self.cols
            )));
        }
        match &self.source {
            TileSource::Synthetic { dim } if *dim < 2 => Err(Error::InvalidArgument(format!(
                "synthetic tiles need at least 2 features, got {dim}"
            ))),
            TileSource::Images(images) if images.is_empty() => {
                Err(Error::InvalidArgument("image set is empty".into()))
            }
            _ => self.tile_dim().map(|_| ()),
        }
    }
}

/// Image side lengths after zero-padding to multiples of the grid, and the
/// resulting tile shape.
fn padded_side(
    height: usize,
    width: usize,
    grid_rows: usize,
    grid_cols: usize,
) -> Result<((usize, usize), (usize, usize))> {
    if grid_rows == 0 || grid_cols == 0 || grid_rows > height || grid_cols > width {
        return Err(Error::InvalidArgument(format!(
            "cannot cut a {height}x{width} image into a {grid_rows}x{grid_cols} grid"
        )));
    }
    let ph = height.div_ceil(grid_rows) * grid_rows;
    let pw = width.div_ceil(grid_cols) * grid_cols;
    Ok(((ph, pw), (ph / grid_rows, pw / grid_cols)))
}

/// Tiles of `image` in row-major grid order, one flattened tile per row.
/// The image is zero-padded symmetrically (extra column/row at the end) up
/// to the nearest size divisible by the grid.
pub fn cut_tiles(image: &Tensor, grid_rows: usize, grid_cols: usize) -> Result<Tensor> {
    let (h, w) = (image.rows(), image.cols());
    let ((ph, pw), (th, tw)) = padded_side(h, w, grid_rows, grid_cols)?;
    let (top, left) = ((ph - h) / 2, (pw - w) / 2);
    let pixel = |r: usize, c: usize| -> f64 {
        if r < top || c < left || r - top >= h || c - left >= w {
            0.0
        } else {
            image.get(r - top, c - left)
        }
    };
    let mut tiles = Tensor::zeros(grid_rows * grid_cols, th * tw);
    for gr in 0..grid_rows {
        for gc in 0..grid_cols {
            let t = gr * grid_cols + gc;
            for r in 0..th {
                for c in 0..tw {
                    tiles.set(t, r * tw + c, pixel(gr * th + r, gc * tw + c));
                }
            }
        }
    }
    Ok(tiles)
}

/// One synthetic picture: the tile at grid cell `(r, c)` has first feature
/// uniform on `[r/rows, (r+1)/rows)`, second feature uniform on
/// `[c/cols, (c+1)/cols)` and every other feature uniform on `[0, 1)`.
/// Every feature is marginally uniform on `[0, 1)` and tiles are distinct
/// with probability one, while the correct cell of each tile is recoverable
/// from pairwise comparisons.
pub fn synthetic_mosaic<R: Rng>(rows: usize, cols: usize, dim: usize, rng: &mut R) -> Tensor {
    let mut tiles = Tensor::zeros(rows * cols, dim);
    for r in 0..rows {
        for c in 0..cols {
            let t = r * cols + c;
            for d in 0..dim {
                let u: f64 = rng.gen();
                let v = match d {
                    0 => (r as f64 + u) / rows as f64,
                    1 => (c as f64 + u) / cols as f64,
                    _ => u,
                };
                tiles.set(t, d, v);
            }
        }
    }
    tiles
}

#[derive(Debug, Clone)]
pub struct MosaicBatch {
    /// Tiles in shuffled order, one tile per row.
    pub tiles: Vec<Tensor>,
    /// `truth[b].apply(&tiles[b]) == targets[b]`.
    pub truth: Vec<HardPermutation>,
    /// Tiles in grid order.
    pub targets: Vec<Tensor>,
}

impl MosaicBatch {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }
}

/// Presents `target` under `truth`: the returned rows satisfy
/// `truth.apply(&shuffled) == target`.
pub fn shuffle_with(target: &Tensor, truth: &HardPermutation) -> Result<Tensor> {
    truth.inverse().apply(target)
}

pub fn random_permutation<R: Rng>(n: usize, rng: &mut R) -> HardPermutation {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    HardPermutation::new(order).expect("shuffle is a bijection")
}

pub fn gen_mosaic_batch<R: Rng>(task: &MosaicTask, batch: usize, rng: &mut R) -> Result<MosaicBatch> {
    task.validate()?;
    let n = task.n();
    let mut out = MosaicBatch {
        tiles: Vec::with_capacity(batch),
        truth: Vec::with_capacity(batch),
        targets: Vec::with_capacity(batch),
    };
    for _ in 0..batch {
        let target = match &task.source {
            TileSource::Synthetic { dim } => synthetic_mosaic(task.rows, task.cols, *dim, rng),
            TileSource::Images(images) => {
                let idx = rng.gen_range(0..images.len());
                cut_tiles(&images.image(idx), task.rows, task.cols)?
            }
        };
        let truth = random_permutation(n, rng);
        out.tiles.push(shuffle_with(&target, &truth)?);
        out.truth.push(truth);
        out.targets.push(target);
    }
    Ok(out)
}
