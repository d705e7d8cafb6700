//! Learned antisymmetric pairwise ordering costs.
//!
//! A two-layer perceptron `f` scores the concatenation of two elements. The
//! cost of placing element `i` before element `j` on channel `m` is
//! `f_m(x_i ⧺ x_j) - f_m(x_j ⧺ x_i)`, which is antisymmetric by
//! construction, and each channel matrix is scaled to unit Frobenius norm.

use std::io::Write;

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::harness::init::{bias_uniform, xavier_uniform};

/// Channels whose Frobenius norm falls below this are left unnormalised.
pub const ZERO_NORM_GUARD: f64 = 1e-30;

/// Two-layer ReLU perceptron over concatenated element pairs.
///
/// Weight matrices are stored output-major: `w1` is `hidden × 2·dim` and
/// `w2` is `channels × hidden`. Biases are row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ComparisonNet {
    /// Xavier-uniform weights; biases uniform on `±1/sqrt(fan_in)`.
    pub fn xavier<R: Rng>(element_dim: usize, hidden: usize, channels: usize, rng: &mut R) -> Self {
        ComparisonNet {
            w1: xavier_uniform(hidden, 2 * element_dim, rng),
            b1: bias_uniform(hidden, 2 * element_dim, rng),
            w2: xavier_uniform(channels, hidden, rng),
            b2: bias_uniform(channels, hidden, rng),
        }
    }

    pub fn from_parts(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Result<Self> {
        let hidden = w1.rows();
        let ok = w1.cols().is_multiple_of(2)
            && w1.cols() > 0
            && b1.shape() == [1, hidden]
            && w2.cols() == hidden
            && b2.shape() == [1, w2.rows()];
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "inconsistent comparison net shapes: w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                w1.shape(),
                b1.shape(),
                w2.shape(),
                b2.shape()
            )));
        }
        let net = ComparisonNet { w1, b1, w2, b2 };
        if !net.is_finite() {
            return Err(Error::InvalidArgument("non-finite comparison net weights".into()));
        }
        Ok(net)
    }

    /// A net computing `f(a, b) = a₀` exactly on every channel, so that
    /// `F(a, b) = a₀ - b₀`. Ranking by it is an ascending sort on the first
    /// feature.
    pub fn first_feature(element_dim: usize, channels: usize) -> Self {
        Self::feature_selector(element_dim, &vec![0; channels])
    }

    /// A net whose channel `m` computes `f_m(a, b) = a[features[m]]`
    /// exactly, ranking elements by that feature.
    ///
    /// # Panics
    ///
    /// If a feature index is not below `element_dim`.
    pub fn feature_selector(element_dim: usize, features: &[usize]) -> Self {
        // a_k = relu(a_k) - relu(-a_k), two hidden units per channel
        let channels = features.len();
        let mut w1 = Tensor::zeros(2 * channels, 2 * element_dim);
        let mut w2 = Tensor::zeros(channels, 2 * channels);
        for (m, &k) in features.iter().enumerate() {
            assert!(k < element_dim, "feature {k} of a {element_dim}-dimensional element");
            w1.set(2 * m, k, 1.0);
            w1.set(2 * m + 1, k, -1.0);
            w2.set(m, 2 * m, 1.0);
            w2.set(m, 2 * m + 1, -1.0);
        }
        ComparisonNet {
            w1,
            b1: Tensor::zeros(1, 2 * channels),
            w2,
            b2: Tensor::zeros(1, channels),
        }
    }

    pub fn element_dim(&self) -> usize {
        self.w1.cols() / 2
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn channels(&self) -> usize {
        self.w2.rows()
    }

    pub fn is_finite(&self) -> bool {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .all(|t| t.is_finite())
    }

    /// Registers the weights as differentiable leaves.
    pub fn on_tape<'t>(&self, tape: &'t Tape) -> ComparisonNetVars<'t> {
        ComparisonNetVars {
            w1: tape.param(self.w1.clone()),
            b1: tape.param(self.b1.clone()),
            w2: tape.param(self.w2.clone()),
            b2: tape.param(self.b2.clone()),
        }
    }

    /// `f(a ⧺ b)` for every channel.
    pub fn score(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let dim = self.element_dim();
        debug_assert!(a.len() == dim && b.len() == dim);
        let hidden: Vec<f64> = (0..self.hidden())
            .map(|h| {
                let w = self.w1.row(h);
                let mut acc = self.b1.get(0, h);
                for (k, v) in a.iter().chain(b).enumerate() {
                    acc += w[k] * v;
                }
                acc.max(0.0)
            })
            .collect();
        (0..self.channels())
            .map(|c| {
                let w = self.w2.row(c);
                self.b2.get(0, c) + w.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>()
            })
            .collect()
    }

    /// `F(a, b) = f(a ⧺ b) - f(b ⧺ a)` for every channel.
    pub fn compare(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let ab = self.score(a, b);
        let ba = self.score(b, a);
        ab.iter().zip(&ba).map(|(x, y)| x - y).collect()
    }
}

/// Comparison net weights recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ComparisonNetVars<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

impl<'t> ComparisonNetVars<'t> {
    pub fn leaves(&self) -> [Var<'t>; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn element_dim(&self) -> usize {
        self.w1.shape()[1] / 2
    }

    pub fn channels(&self) -> usize {
        self.w2.shape()[0]
    }
}

/// One antisymmetric, unit-norm cost matrix per channel.
#[derive(Debug, Clone)]
pub struct CostChannels<'t> {
    pub channels: Vec<Var<'t>>,
}

impl<'t> CostChannels<'t> {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// Set size `N`.
    pub fn size(&self) -> usize {
        self.channels.first().map_or(0, |c| c.shape()[0])
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.channels.iter().map(|c| c.value().as_ref().clone()).collect()
    }
}

/// Cost matrices for the set whose elements are the rows of `x`.
///
/// All `N²` ordered pairs go through the net in one batched pass: the first
/// layer splits into the halves acting on each pair member, so its
/// pre-activation for pair `(i, j)` is `A_i + B_j + b1`.
pub fn pairwise_costs<'t>(x: Var<'t>, net: &ComparisonNetVars<'t>) -> Result<CostChannels<'t>> {
    let [n, dim] = x.shape();
    if dim != net.element_dim() {
        return Err(Error::ShapeMismatch {
            op: "pairwise_costs",
            left: [n, dim],
            right: [n, net.element_dim()],
        });
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty set".into()));
    }
    let first = x.matmul(net.w1.slice_cols(0, dim)?.transpose())?;
    let second = x.matmul(net.w1.slice_cols(dim, 2 * dim)?.transpose())?;
    let pre = first
        .repeat_rows(n)
        .add(second.tile_rows(n))?
        .add(net.b1.broadcast_row(n * n)?)?;
    let scores = pre
        .relu()
        .matmul(net.w2.transpose())?
        .add(net.b2.broadcast_row(n * n)?)?;

    let mut channels = Vec::with_capacity(net.channels());
    for m in 0..net.channels() {
        let f = scores.slice_cols(m, m + 1)?.reshape(n, n)?;
        let raw = f.sub(f.transpose())?;
        let norm = raw.frobenius_norm();
        let c = if norm.value().item() < ZERO_NORM_GUARD {
            raw
        } else {
            raw.div_scalar(norm)?
        };
        channels.push(c);
    }
    Ok(CostChannels { channels })
}

/// `F(a, b)` of a scalar-element net over a uniform square grid.
#[derive(Debug, Clone)]
pub struct ComparisonGrid {
    pub points: Vec<f64>,
    /// `values[(i, j)] = F(points[i], points[j])` on channel 0.
    pub values: Tensor,
}

impl ComparisonGrid {
    /// CSV with header `a,b,F`, one row per grid point, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "a,b,F")?;
        for (i, a) in self.points.iter().enumerate() {
            for (j, b) in self.points.iter().enumerate() {
                writeln!(out, "{a:.16e},{b:.16e},{:.16e}", self.values.get(i, j))?;
            }
        }
        Ok(())
    }
}

pub fn dump_comparison_grid(net: &ComparisonNet, lo: f64, hi: f64, steps: usize) -> Result<ComparisonGrid> {
    if net.element_dim() != 1 {
        return Err(Error::InvalidArgument(format!(
            "comparison grid needs scalar elements, net takes dimension {}",
            net.element_dim()
        )));
    }
    if steps < 2 || !(lo < hi) {
        return Err(Error::InvalidArgument(format!(
            "grid needs lo < hi and at least 2 steps, got {lo}:{hi}:{steps}"
        )));
    }
    let step = (hi - lo) / (steps - 1) as f64;
    let points: Vec<f64> = (0..steps).map(|i| lo + step * i as f64).collect();
    let mut values = Tensor::zeros(steps, steps);
    for (i, &a) in points.iter().enumerate() {
        for (j, &b) in points.iter().enumerate() {
            values.set(i, j, net.compare(&[a], &[b])[0]);
        }
    }
    Ok(ComparisonGrid { points, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    fn random_net(rng: &mut ChaCha8Rng, dim: usize, hidden: usize, channels: usize) -> ComparisonNet {
        ComparisonNet::from_parts(
            random(rng, hidden, 2 * dim),
            random(rng, 1, hidden),
            random(rng, channels, hidden),
            random(rng, 1, channels),
        )
        .unwrap()
    }

    fn costs(x: &Tensor, net: &ComparisonNet) -> Vec<Tensor> {
        let tape = Tape::inference();
        let vars = net.on_tape(&tape);
        pairwise_costs(tape.constant(x.clone()), &vars).unwrap().values()
    }

    #[test]
    fn first_feature_costs_by_hand() {
        let net = ComparisonNet::first_feature(1, 1);
        let c = costs(&Tensor::column(&[1.0, 2.0]), &net);
        let h = 1.0 / std::f64::consts::SQRT_2;
        let expected = Tensor::from_rows(&[[0.0, -h], [h, 0.0]]);
        assert!(c[0].max_abs_diff(&expected) < 1e-15, "{:?}", c[0]);
    }

    #[test]
    fn equal_elements_give_zero_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = random_net(&mut rng, 2, 5, 2);
        let x = Tensor::from_rows(&[[0.3, -1.0], [0.3, -1.0], [0.3, -1.0]]);
        for c in costs(&x, &net) {
            assert_eq!(c, Tensor::zeros(3, 3));
        }
    }

    #[test]
    fn single_element_set() {
        let net = ComparisonNet::first_feature(1, 1);
        assert_eq!(costs(&Tensor::column(&[4.0]), &net)[0], Tensor::zeros(1, 1));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = ComparisonNet::first_feature(2, 1);
        let tape = Tape::new();
        let vars = net.on_tape(&tape);
        assert!(pairwise_costs(tape.constant(Tensor::zeros(3, 1)), &vars).is_err());
    }

    #[test]
    fn batched_pairs_match_per_pair_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = random_net(&mut rng, 3, 6, 2);
        let x = random(&mut rng, 5, 3);
        let c = costs(&x, &net);
        for m in 0..2 {
            let mut raw = Tensor::zeros(5, 5);
            for i in 0..5 {
                for j in 0..5 {
                    raw.set(i, j, net.compare(x.row(i), x.row(j))[m]);
                }
            }
            let expected = raw.scale(1.0 / raw.frobenius_norm());
            assert!(c[m].max_abs_diff(&expected) < 1e-12);
        }
    }

    #[test]
    fn gradient_wrt_net_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let net = random_net(&mut rng, 2, 4, 2);
        let x = random(&mut rng, 4, 2);
        let w = [random(&mut rng, 4, 4), random(&mut rng, 4, 4)];
        let params = [net.w1, net.b1, net.w2, net.b2];
        let err = finite_diff_check(
            |tape, p| {
                let vars = ComparisonNetVars {
                    w1: p[0],
                    b1: p[1],
                    w2: p[2],
                    b2: p[3],
                };
                let c = pairwise_costs(tape.constant(x.clone()), &vars)?;
                let mut total = tape.constant(Tensor::scalar(0.0));
                for (ch, wm) in c.channels.iter().zip(&w) {
                    total = total.add(ch.mul(tape.constant(wm.clone()))?.sum_all())?;
                }
                Ok(total)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grid_examples() {
        let net = ComparisonNet::first_feature(1, 1);
        let g = dump_comparison_grid(&net, 0.0, 1.0, 5).unwrap();
        for (i, a) in g.points.iter().enumerate() {
            for (j, b) in g.points.iter().enumerate() {
                assert!((g.values.get(i, j) - (a - b)).abs() < 1e-15);
            }
        }
        let mut csv = Vec::new();
        g.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 26);
        assert!(text.starts_with("a,b,F\n"));
        let wide = ComparisonNet::first_feature(2, 1);
        assert!(dump_comparison_grid(&wide, 0.0, 1.0, 5).is_err());
        assert!(dump_comparison_grid(&net, 0.0, 1.0, 1).is_err());
    }

    proptest! {
        #[test]
        fn channels_are_antisymmetric_and_unit_norm(seed in any::<u64>(), n in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = random_net(&mut rng, 2, 5, 2);
            let x = random(&mut rng, n, 2);
            for c in costs(&x, &net) {
                for i in 0..n {
                    prop_assert_eq!(c.get(i, i), 0.0);
                    for j in 0..n {
                        prop_assert!((c.get(i, j) + c.get(j, i)).abs() < 1e-12);
                    }
                }
                let norm = c.frobenius_norm();
                prop_assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn costs_are_permutation_equivariant(
            seed in any::<u64>(),
            perm in Just(vec![0usize, 1, 2, 3, 4, 5]).prop_shuffle(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = random_net(&mut rng, 1, 6, 1);
            let x = random(&mut rng, 6, 1);
            let mut pm = Tensor::zeros(6, 6);
            for (i, &j) in perm.iter().enumerate() {
                pm.set(i, j, 1.0);
            }
            let px = pm.matmul(&x).unwrap();
            let lhs = &costs(&px, &net)[0];
            let rhs = pm.matmul(&costs(&x, &net)[0]).unwrap().matmul(&pm.transpose()).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }

        #[test]
        fn grid_is_antisymmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = random_net(&mut rng, 1, 8, 1);
            let g = dump_comparison_grid(&net, -3.0, 3.0, 9).unwrap();
            for i in 0..9 {
                for j in 0..9 {
                    prop_assert!((g.values.get(i, j) + g.values.get(j, i)).abs() < 1e-12);
                }
            }
        }
    }
}
