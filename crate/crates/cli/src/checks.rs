//! Verification suites behind the `gradcheck` and `selftest` subcommands.

use permopt::assignment::{assignment_cost, brute_force_assignment, hungarian};
use permopt::autodiff::{analytic_gradients, compare_with_finite_differences, Tape, Tensor, Var};
use permopt::harness::checkpoint::Checkpoint;
use permopt::harness::eval::entropy_diagnostic;
use permopt::harness::model::{mse, Model};
use permopt::ordering::{ComparisonNet, CostChannels};
use permopt::perm_optim::{
    cost_gradient, optimise, qp_cost, total_cost, InitMode, PoConfig, PositionStructure,
};
use permopt::sinkhorn::{doubly_stochastic_residual, sinkhorn_values};
use permopt::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Trained N=5 sorting checkpoint used by the entropy diagnostic.
const BUNDLED_CHECKPOINT: &[u8] = include_bytes!("../assets/sort5.popt");

const EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn below(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Check {
            name: name.into(),
            value,
            threshold,
            passed: value < threshold,
            detail: String::new(),
        }
    }

    fn holds(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            value: f64::NAN,
            threshold: f64::NAN,
            passed,
            detail: detail.into(),
        }
    }

    fn failed(name: impl Into<String>, err: permopt::Error) -> Self {
        Check::holds(name, false, format!("error: {err}"))
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        if self.value.is_nan() && self.threshold.is_nan() {
            write!(f, "{tag}  {:<44} {}", self.name, self.detail)
        } else {
            write!(
                f,
                "{tag}  {:<44} {:.3e} (threshold {:.0e})",
                self.name, self.value, self.threshold
            )
        }
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

/// Random entries of magnitude in `[0.2, 1.5]` with random sign, so that
/// relu kinks and small denominators stay out of finite-difference reach.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.gen_range(0.2..1.5);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

fn antisymmetric_unit(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let r = random(rng, n, n, -1.0, 1.0);
    let a = r.zip_with(&r.transpose(), |x, y| x - y);
    let norm = a.frobenius_norm();
    if norm > 0.0 {
        a.scale(1.0 / norm)
    } else {
        a
    }
}

fn doubly_stochastic(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    sinkhorn_values(&random(rng, n, n, -2.0, 2.0), 50).expect("square")
}

/// Fixed non-uniform weights so that every output entry affects the loss.
fn weights(shape: [usize; 2]) -> Tensor {
    let data = (0..shape[0] * shape[1])
        .map(|i| 0.5 + ((i * 7919) % 13) as f64 / 13.0)
        .collect();
    Tensor::from_vec(shape[0], shape[1], data).expect("sized")
}

fn weighted_sum<'t>(out: Var<'t>) -> Result<Var<'t>> {
    let w = out.tape().constant(weights(out.shape()));
    Ok(out.mul(w)?.sum_all())
}

type ScalarFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

/// Finite-difference error of `f` at `params`; with `flip` the analytic
/// gradients are negated before comparison.
fn fd_error(f: &ScalarFn, params: &[Tensor], flip: bool) -> Result<f64> {
    let mut analytic = analytic_gradients(f, params)?;
    if flip {
        analytic.iter_mut().for_each(|g| *g = g.scale(-1.0));
    }
    compare_with_finite_differences(f, params, &analytic, EPS)
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, ScalarFn, Vec<Tensor>)> {
    let a = away_from_zero(rng, 3, 4);
    let b = away_from_zero(rng, 3, 4);
    let c = away_from_zero(rng, 4, 2);
    let pos = random(rng, 3, 4, 0.5, 2.0);
    let s = Tensor::scalar(rng.gen_range(0.5..2.0));
    let row = away_from_zero(rng, 1, 4);
    let col = away_from_zero(rng, 3, 1);
    vec![
        ("add", Box::new(|_, v| weighted_sum(v[0].add(v[1])?)), vec![a.clone(), b.clone()]),
        ("sub", Box::new(|_, v| weighted_sum(v[0].sub(v[1])?)), vec![a.clone(), b.clone()]),
        ("mul", Box::new(|_, v| weighted_sum(v[0].mul(v[1])?)), vec![a.clone(), b.clone()]),
        ("div", Box::new(|_, v| weighted_sum(v[0].div(v[1])?)), vec![a.clone(), pos.clone()]),
        ("matmul", Box::new(|_, v| weighted_sum(v[0].matmul(v[1])?)), vec![a.clone(), c.clone()]),
        ("transpose", Box::new(|_, v| weighted_sum(v[0].transpose())), vec![a.clone()]),
        ("exp", Box::new(|_, v| weighted_sum(v[0].exp())), vec![a.clone()]),
        ("tanh", Box::new(|_, v| weighted_sum(v[0].tanh())), vec![a.clone()]),
        ("relu", Box::new(|_, v| weighted_sum(v[0].relu())), vec![a.clone()]),
        ("neg", Box::new(|_, v| weighted_sum(v[0].neg())), vec![a.clone()]),
        ("scale", Box::new(|_, v| weighted_sum(v[0].scale(-2.5))), vec![a.clone()]),
        ("sum-all", Box::new(|_, v| Ok(v[0].square().sum_all())), vec![a.clone()]),
        ("sum-rows", Box::new(|_, v| weighted_sum(v[0].sum_rows())), vec![a.clone()]),
        ("sum-cols", Box::new(|_, v| weighted_sum(v[0].sum_cols())), vec![a.clone()]),
        ("broadcast-row", Box::new(|_, v| weighted_sum(v[0].broadcast_row(3)?)), vec![row]),
        ("broadcast-col", Box::new(|_, v| weighted_sum(v[0].broadcast_col(4)?)), vec![col]),
        ("square", Box::new(|_, v| weighted_sum(v[0].square())), vec![a.clone()]),
        ("sqrt", Box::new(|_, v| weighted_sum(v[0].sum_all().sqrt()?)), vec![pos.clone()]),
        ("frobenius-norm", Box::new(|_, v| Ok(v[0].frobenius_norm())), vec![a.clone()]),
        ("mul-scalar", Box::new(|_, v| weighted_sum(v[0].mul_scalar(v[1])?)), vec![a.clone(), s.clone()]),
        ("div-scalar", Box::new(|_, v| weighted_sum(v[0].div_scalar(v[1])?)), vec![a.clone(), s]),
        ("repeat-rows", Box::new(|_, v| weighted_sum(v[0].repeat_rows(2))), vec![a.clone()]),
        ("tile-rows", Box::new(|_, v| weighted_sum(v[0].tile_rows(2))), vec![a.clone()]),
        ("reshape", Box::new(|_, v| weighted_sum(v[0].reshape(2, 6)?)), vec![a.clone()]),
        ("slice-cols", Box::new(|_, v| weighted_sum(v[0].slice_cols(1, 3)?)), vec![a]),
    ]
}

/// Largest error over `trials` runs of `case`, or the first error raised.
fn worst_over(trials: usize, mut case: impl FnMut(usize) -> Result<f64>) -> Result<f64> {
    let mut worst = 0.0f64;
    for t in 0..trials {
        worst = worst.max(case(t)?);
    }
    Ok(worst)
}

fn record(out: &mut Vec<Check>, name: String, threshold: f64, result: Result<f64>) {
    out.push(match result {
        Ok(v) => Check::below(name, v, threshold),
        Err(e) => Check::failed(name, e),
    });
}

/// Finite-difference suites: every differentiable op, the closed-form cost
/// gradient, and the end-to-end sorting loss.
pub fn gradcheck(trials: usize, flip: bool) -> Vec<Check> {
    let trials = trials.max(1);
    let mut out = Vec::new();

    let mut per_op: Vec<(&'static str, Result<f64>)> = Vec::new();
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + t as u64);
        for (i, (name, f, params)) in op_cases(&mut rng).into_iter().enumerate() {
            let r = fd_error(&f, &params, flip);
            if t == 0 {
                per_op.push((name, r));
            } else {
                let slot = &mut per_op[i].1;
                *slot = match (std::mem::replace(slot, Ok(0.0)), r) {
                    (Ok(a), Ok(b)) => Ok(a.max(b)),
                    (Err(e), _) | (_, Err(e)) => Err(e),
                };
            }
        }
    }
    for (name, r) in per_op {
        record(&mut out, format!("op {name}"), 1e-6, r);
    }

    let structures: Vec<(String, PositionStructure)> = (1..=6)
        .map(|n| (format!("sequence N={n}"), PositionStructure::sequence(n).expect("n > 0")))
        .chain([("grid 2x3".to_string(), PositionStructure::grid(2, 3).expect("non-empty"))])
        .collect();
    for (label, s) in &structures {
        let r = worst_over(trials, |t| {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + t as u64);
            let n = s.size();
            let costs: Vec<Tensor> = (0..s.channels().len()).map(|_| antisymmetric_unit(&mut rng, n)).collect();
            let p = doubly_stochastic(&mut rng, n);
            let s_fn = s.clone();
            let c_fn = costs.clone();
            let f: ScalarFn = Box::new(move |tape, v| {
                let costs = CostChannels {
                    channels: c_fn.iter().map(|c| tape.constant(c.clone())).collect(),
                };
                total_cost(v[0], &costs, &s_fn)
            });
            let tape = Tape::inference();
            let cc = CostChannels {
                channels: costs.iter().map(|c| tape.constant(c.clone())).collect(),
            };
            let mut g = cost_gradient(tape.constant(p.clone()), &cc, s)?.value().as_ref().clone();
            if flip {
                g = g.scale(-1.0);
            }
            compare_with_finite_differences(&f, &[p], &[g], EPS)
        });
        record(&mut out, format!("cost_gradient {label}"), 1e-6, r);
    }

    for init in [InitMode::Uniform, InitMode::LinearAssignment] {
        let r = worst_over(trials, |t| {
            let mut rng = ChaCha8Rng::seed_from_u64(3000 + t as u64);
            let po = PoConfig {
                steps: 2,
                init,
                ..PoConfig::default()
            };
            // redraw until some hidden unit is active, otherwise every
            // gradient is zero and the comparison proves nothing
            let (model, x, target) = loop {
                let s = PositionStructure::sequence(4)?;
                let model = Model::init(s, 1, 4, None, 1.0, po, &mut rng)?;
                let x = random(&mut rng, 4, 1, 0.0, 1.0);
                let mut sorted = x.data().to_vec();
                sorted.sort_by(f64::total_cmp);
                let target = Tensor::column(&sorted);
                let (_, grads) = model.loss_and_grad(&x, &target)?;
                if grads.iter().any(|g| g.data().iter().any(|v| *v != 0.0)) {
                    break (model, x, target);
                }
            };
            let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
            let f: ScalarFn = Box::new(move |tape, v| {
                let vars = model.vars_from(v)?;
                mse(model.forward(&vars, tape.constant(x.clone()), &model.po)?.y, &target)
            });
            fd_error(&f, &params, flip)
        });
        record(&mut out, format!("end-to-end sorting MSE ({init:?})"), 1e-4, r);
    }
    out
}

/// Property suites plus the entropy diagnostic on the bundled checkpoint.
pub fn selftest() -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4242);

    // quadratic-programming oracle agreement, and zero cost at uniform P
    let mut qp_worst = 0.0f64;
    let mut uniform_worst = 0.0f64;
    let mut qp_err = None;
    for trial in 0..40 {
        let s = if trial % 2 == 0 {
            PositionStructure::sequence(rng.gen_range(1..=8))
        } else {
            PositionStructure::grid(rng.gen_range(1..=3), rng.gen_range(1..=3))
        }
        .expect("non-empty");
        let n = s.size();
        let costs: Vec<Tensor> = (0..s.channels().len()).map(|_| antisymmetric_unit(&mut rng, n)).collect();
        let p = doubly_stochastic(&mut rng, n);
        let tape = Tape::inference();
        let cc = CostChannels {
            channels: costs.iter().map(|c| tape.constant(c.clone())).collect(),
        };
        let eval = |p: &Tensor| -> Result<(f64, f64)> {
            let c = total_cost(tape.constant(p.clone()), &cc, &s)?.value().item();
            Ok((c, qp_cost(p, &costs, &s)?))
        };
        match (eval(&p), eval(&Tensor::full(n, n, 1.0 / n as f64))) {
            (Ok((c, q)), Ok((u, _))) => {
                qp_worst = qp_worst.max((c - q).abs());
                uniform_worst = uniform_worst.max(u.abs());
            }
            (Err(e), _) | (_, Err(e)) => qp_err = Some(e),
        }
    }
    match qp_err {
        Some(e) => out.push(Check::failed("QP oracle equivalence", e)),
        None => {
            out.push(Check::below("QP oracle |c - qp|", qp_worst, 1e-10));
            out.push(Check::below("uniform P total cost |c|", uniform_worst, 1e-12));
        }
    }

    // Sinkhorn contract
    let mut col_worst = 0.0f64;
    let mut shift_worst = 0.0f64;
    let mut monotone = true;
    for _ in 0..50 {
        let n = rng.gen_range(2..=8);
        let x = random(&mut rng, n, n, -5.0, 5.0);
        let p4 = sinkhorn_values(&x, 4).expect("square");
        let p8 = sinkhorn_values(&x, 8).expect("square");
        let shifted = sinkhorn_values(&x.map(|v| v + 3.7), 4).expect("square");
        let cols = p4.col_sums();
        col_worst = cols.data().iter().fold(col_worst, |m, c| m.max((c - 1.0).abs()));
        shift_worst = shift_worst.max(p4.max_abs_diff(&shifted));
        monotone &= doubly_stochastic_residual(&p8) <= doubly_stochastic_residual(&p4);
    }
    out.push(Check::below("sinkhorn column sums |s - 1|", col_worst, 1e-12));
    out.push(Check::below("sinkhorn shift invariance", shift_worst, 1e-12));
    out.push(Check::holds("sinkhorn residual L=8 <= L=4", monotone, "50 random inputs in [-5, 5]"));

    // Hungarian against brute force
    let mut mismatches = 0;
    let mut hung_err = None;
    for _ in 0..100 {
        let n = rng.gen_range(1..=7);
        let cost = random(&mut rng, n, n, -10.0, 10.0);
        match (hungarian(&cost), brute_force_assignment(&cost)) {
            (Ok(h), Ok(b)) => {
                if assignment_cost(&cost, &h) != assignment_cost(&cost, &b) {
                    mismatches += 1;
                }
            }
            (Err(e), _) | (_, Err(e)) => hung_err = Some(e),
        }
    }
    out.push(match hung_err {
        Some(e) => Check::failed("hungarian == brute force", e),
        None => Check::holds(
            "hungarian == brute force",
            mismatches == 0,
            format!("{mismatches} mismatches in 100 matrices, N <= 7"),
        ),
    });

    // permutation invariance of the PO output
    for init in [InitMode::Uniform, InitMode::LinearAssignment] {
        let r = (|| -> Result<f64> {
            let mut worst = 0.0f64;
            for _ in 0..20 {
                let n = rng.gen_range(2..=7);
                let po = PoConfig {
                    init,
                    ..PoConfig::default()
                };
                let net = ComparisonNet::xavier(2, 8, 1, &mut rng);
                let w = random(&mut rng, n, 2, -1.0, 1.0);
                let x = random(&mut rng, n, 2, 0.0, 1.0);
                let shuffle = permopt::harness::data::random_permutation(n, &mut rng);
                let y_of = |x: &Tensor| -> Result<Tensor> {
                    let tape = Tape::inference();
                    let s = PositionStructure::sequence(n)?;
                    let vars = net.on_tape(&tape);
                    let eta = tape.constant(Tensor::scalar(1.0));
                    let la = Some(tape.constant(w.clone()));
                    let o = optimise(tape.constant(x.clone()), &vars, &s, &po, eta, la)?;
                    Ok(o.y.value().as_ref().clone())
                };
                worst = worst.max(y_of(&x)?.max_abs_diff(&y_of(&shuffle.apply(&x)?)?));
            }
            Ok(worst)
        })();
        record(&mut out, format!("permutation invariance ({init:?})"), 1e-9, r);
    }

    // degenerate single-element set
    let single = (|| -> Result<bool> {
        let tape = Tape::inference();
        let net = ComparisonNet::first_feature(1, 1);
        let s = PositionStructure::sequence(1)?;
        let o = optimise(
            tape.constant(Tensor::column(&[0.3])),
            &net.on_tape(&tape),
            &s,
            &PoConfig::default(),
            tape.constant(Tensor::scalar(1.0)),
            None,
        )?;
        Ok(o.y.value().item() == 0.3)
    })();
    out.push(match single {
        Ok(ok) => Check::holds("N=1 set", ok, "optimise returns the element unchanged"),
        Err(e) => Check::failed("N=1 set", e),
    });

    // entropy of P_final under both update rules
    let entropy = (|| -> Result<(f64, f64)> {
        let ck = Checkpoint::decode(BUNDLED_CHECKPOINT)?;
        let model = ck.model()?;
        let inputs: Vec<Tensor> = (0..64)
            .map(|_| random(&mut rng, model.set_size(), 1, 0.0, 1.0))
            .collect();
        let e = entropy_diagnostic(&model, &inputs)?;
        Ok((e.alternative, e.full_gradient))
    })();
    out.push(match entropy {
        Ok((alt, full)) => Check::holds(
            "entropy alternative < full-gradient",
            alt < full,
            format!("mean row entropy {alt:.4} vs {full:.4} on the bundled N=5 checkpoint"),
        ),
        Err(e) => Check::failed("entropy alternative < full-gradient", e),
    });
    out
}
