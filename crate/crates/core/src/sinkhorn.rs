//! Sinkhorn normalisation of square matrices into (approximately)
//! doubly-stochastic soft permutations.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Normalisation rounds used by the permutation optimiser.
pub const DEFAULT_ITERATIONS: usize = 4;

/// Unnormalised matrix and its normalised image.
#[derive(Debug, Clone, Copy)]
pub struct SoftPermutation<'t> {
    pub pre: Var<'t>,
    pub post: Var<'t>,
}

/// Exponentiates `pre` and alternates `iterations` rounds of row then column
/// normalisation. The last operation is a column normalisation, so columns
/// sum to one up to rounding; rows converge as `iterations` grows.
///
/// Each row is shifted by its maximum before exponentiation. The row
/// normalisation that follows cancels the shift exactly.
pub fn sinkhorn(pre: Var<'_>, iterations: usize) -> Result<SoftPermutation<'_>> {
    let value = pre.value();
    if !value.is_square() {
        return Err(Error::InvalidArgument(format!(
            "sinkhorn needs a square matrix, got {:?}",
            value.shape()
        )));
    }
    if iterations == 0 {
        return Err(Error::InvalidArgument(
            "sinkhorn needs at least one iteration".into(),
        ));
    }
    let n = value.rows();
    let shifts: Vec<f64> = (0..n)
        .map(|r| -value.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    drop(value);

    let mut p = pre.add_row_offsets(&shifts)?.exp();
    for _ in 0..iterations {
        p = p.div(p.sum_rows().broadcast_col(n)?)?;
        p = p.div(p.sum_cols().broadcast_row(n)?)?;
    }
    Ok(SoftPermutation { pre, post: p })
}

/// Evaluates [`sinkhorn`] on plain values without recording.
pub fn sinkhorn_values(pre: &Tensor, iterations: usize) -> Result<Tensor> {
    let tape = Tape::inference();
    let sp = sinkhorn(tape.constant(pre.clone()), iterations)?;
    let out = sp.post.value().as_ref().clone();
    Ok(out)
}

/// Mean over rows of the Shannon entropy (nats) of each row, with
/// `0 ln 0 = 0`.
pub fn row_entropy(p: &Tensor) -> Result<f64> {
    if p.data().iter().any(|&v| v < 0.0) {
        return Err(Error::domain("row_entropy", "negative entry"));
    }
    if p.rows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..p.rows())
        .map(|r| {
            -p.row(r)
                .iter()
                .filter(|&&v| v > 0.0)
                .map(|&v| v * v.ln())
                .sum::<f64>()
        })
        .sum();
    Ok(total / p.rows() as f64)
}

/// Largest deviation of any row or column sum from one.
pub fn doubly_stochastic_residual(p: &Tensor) -> f64 {
    let rows = p.row_sums();
    let cols = p.col_sums();
    rows.data()
        .iter()
        .chain(cols.data())
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Tensor {
        let data = (0..n * n).map(|_| rng.gen_range(-spread..spread)).collect();
        Tensor::from_vec(n, n, data).unwrap()
    }

    fn permutation_matrix(perm: &[usize]) -> Tensor {
        let n = perm.len();
        let mut t = Tensor::zeros(n, n);
        for (i, &j) in perm.iter().enumerate() {
            t.set(i, j, 1.0);
        }
        t
    }

    #[test]
    fn zeros_give_uniform() {
        let p = sinkhorn_values(&Tensor::zeros(2, 2), 4).unwrap();
        assert_eq!(p, Tensor::full(2, 2, 0.5));
    }

    #[test]
    fn one_round_by_hand() {
        let ln2 = std::f64::consts::LN_2;
        let p = sinkhorn_values(&Tensor::from_rows(&[[ln2, 0.0], [0.0, ln2]]), 1).unwrap();
        let expected = Tensor::from_rows(&[[2.0 / 3.0, 1.0 / 3.0], [1.0 / 3.0, 2.0 / 3.0]]);
        assert!(p.max_abs_diff(&expected) < 1e-15, "{p:?}");
    }

    #[test]
    fn constant_offset_cancels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pre = random(&mut rng, 5, 3.0);
        let a = sinkhorn_values(&pre, 4).unwrap();
        let b = sinkhorn_values(&pre.map(|v| v + 7.0), 4).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(sinkhorn_values(&Tensor::zeros(2, 3), 4).is_err());
        assert!(sinkhorn_values(&Tensor::zeros(2, 2), 0).is_err());
    }

    #[test]
    fn large_logits_stay_finite() {
        let pre = Tensor::from_rows(&[[0.0, 900.0, -900.0], [5e3, 1.0, 2.0], [3.0, -4e3, 7.0]]);
        let p = sinkhorn_values(&pre, 4).unwrap();
        assert!(p.is_finite());
    }

    #[test]
    fn entropy_examples() {
        let uniform = Tensor::full(2, 2, 0.5);
        assert!((row_entropy(&uniform).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(row_entropy(&Tensor::identity(3)).unwrap(), 0.0);
        let p = Tensor::from_rows(&[[0.9, 0.1], [0.1, 0.9]]);
        let h = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((row_entropy(&p).unwrap() - h).abs() < 1e-15);
        assert!((h - 0.3251).abs() < 5e-5);
        assert!(row_entropy(&Tensor::from_rows(&[[-0.1, 1.1]])).is_err());
    }

    #[test]
    fn residual_examples() {
        assert_eq!(doubly_stochastic_residual(&permutation_matrix(&[2, 0, 1])), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let pre = random(&mut rng, 6, 5.0);
            let r4 = doubly_stochastic_residual(&sinkhorn_values(&pre, 4).unwrap());
            let r8 = doubly_stochastic_residual(&sinkhorn_values(&pre, 8).unwrap());
            assert!(r8 <= r4, "{r8} > {r4}");
        }
    }

    #[test]
    fn moderate_logits_are_nearly_doubly_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let pre = random(&mut rng, 6, 1.0);
            worst = worst.max(doubly_stochastic_residual(&sinkhorn_values(&pre, 4).unwrap()));
        }
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [1, 2, 4, 5] {
            let pre = random(&mut rng, n, 2.0);
            let w = random(&mut rng, n, 1.0);
            let err = finite_diff_check(
                |tape, p| {
                    let sp = sinkhorn(p[0], 4)?;
                    Ok(sp.post.mul(tape.constant(w.clone()))?.sum_all())
                },
                &[pre],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "n={n}: {err}");
        }
    }

    proptest! {
        #[test]
        fn columns_sum_to_one(seed in any::<u64>(), n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = sinkhorn_values(&random(&mut rng, n, 5.0), 4).unwrap();
            for s in p.col_sums().data() {
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
            prop_assert!(p.data().iter().all(|&v| v > 0.0 && v <= 1.0));
        }

        #[test]
        fn equivariant_under_row_and_column_permutations(
            seed in any::<u64>(),
            rows in Just(vec![0usize, 1, 2, 3, 4]).prop_shuffle(),
            cols in Just(vec![0usize, 1, 2, 3, 4]).prop_shuffle(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pre = random(&mut rng, 5, 3.0);
            let pr = permutation_matrix(&rows);
            let pc = permutation_matrix(&cols);
            let permuted = pr.matmul(&pre).unwrap().matmul(&pc).unwrap();
            let lhs = sinkhorn_values(&permuted, 4).unwrap();
            let rhs = pr
                .matmul(&sinkhorn_values(&pre, 4).unwrap())
                .unwrap()
                .matmul(&pc)
                .unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }

        #[test]
        fn invariant_to_global_shift(seed in any::<u64>(), shift in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pre = random(&mut rng, 4, 5.0);
            let a = sinkhorn_values(&pre, 4).unwrap();
            let b = sinkhorn_values(&pre.map(|v| v + shift), 4).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }
}
