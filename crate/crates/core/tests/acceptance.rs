//! End-to-end acceptance criteria. Each criterion prints one PASS/FAIL line
//! and the process exits non-zero if any criterion fails. The training
//! criteria take tens of minutes on one core, so they run sequentially
//! without the libtest harness.

use std::time::{Duration, Instant};

use permopt::assignment::{assignment_cost, brute_force_assignment, hungarian};
use permopt::autodiff::{analytic_gradients, compare_with_finite_differences, Tape, Tensor, Var};
use permopt::harness::checkpoint::Checkpoint;
use permopt::harness::config::Config;
use permopt::harness::data::{gen_sort_batch, random_permutation, Interval};
use permopt::harness::eval::{entropy_diagnostic, evaluate};
use permopt::harness::idx::{parse_idx_images, parse_idx_labels};
use permopt::harness::model::{mse, Model};
use permopt::harness::train::{stream_rng, train_with, TrainOutput, EVAL_STREAM};
use permopt::ordering::{ComparisonNet, CostChannels};
use permopt::perm_optim::{
    cost_gradient, optimise, qp_cost, total_cost, InitMode, PoConfig, PositionStructure,
};
use permopt::sinkhorn::{doubly_stochastic_residual, sinkhorn_values};
use permopt::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

fn antisymmetric(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
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
    sinkhorn_values(&random(rng, n, n, -2.0, 2.0), 50).unwrap()
}

fn random_structure(rng: &mut ChaCha8Rng, trial: usize, max_n: usize) -> PositionStructure {
    if trial % 2 == 0 {
        PositionStructure::sequence(rng.gen_range(1..=max_n)).unwrap()
    } else {
        let rows = rng.gen_range(1..=3);
        let cols = rng.gen_range(1..=(max_n / rows).clamp(1, 3));
        PositionStructure::grid(rows, cols).unwrap()
    }
}

fn constants<'t>(tape: &'t Tape, costs: &[Tensor]) -> CostChannels<'t> {
    CostChannels {
        channels: costs.iter().map(|c| tape.constant(c.clone())).collect(),
    }
}

fn scalar_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

fn minutes(d: Duration) -> String {
    format!("{:.1} min", d.as_secs_f64() / 60.0)
}

fn accuracy_table(cfg: &Config, out: &TrainOutput) -> Result<(f64, String)> {
    let rows = evaluate(&out.model, cfg)?;
    let worst = rows.iter().map(|r| r.exact_acc).fold(1.0, f64::min);
    let table = rows
        .iter()
        .map(|r| format!("{} {:.2}%", r.interval, 100.0 * r.exact_acc))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((worst, table))
}

fn train_timed(cfg: &Config) -> Result<(TrainOutput, Duration)> {
    let start = Instant::now();
    let out = train_with(cfg, |_| {})?;
    Ok((out, start.elapsed()))
}

fn sorting_n5(trained: &(TrainOutput, Duration)) -> Result<Outcome> {
    let cfg = Config::sort();
    let (out, took) = trained;
    let (worst, table) = accuracy_table(&cfg, out)?;
    let passed = worst >= 0.995 && *took <= Duration::from_secs(15 * 60);
    Ok(outcome(passed, format!("min acc {:.2}% in {}; {table}", 100.0 * worst, minutes(*took))))
}

fn sorting_n64() -> Result<Outcome> {
    let mut cfg = Config::sort();
    cfg.n = 64;
    cfg.intervals = vec![Interval::unit(), Interval::new(1000.0, 1001.0)?];
    let trained = train_timed(&cfg)?;
    let (worst, table) = accuracy_table(&cfg, &trained.0)?;
    let passed = worst >= 0.99 && trained.1 <= Duration::from_secs(60 * 60);
    Ok(outcome(passed, format!("min acc {:.2}% in {}; {table}", 100.0 * worst, minutes(trained.1))))
}

fn cost_gradient_check() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let s = if trial % 2 == 0 {
            PositionStructure::sequence(rng.gen_range(1..=6))?
        } else {
            PositionStructure::grid(2, 3)?
        };
        let n = s.size();
        let costs: Vec<Tensor> = (0..s.channels().len()).map(|_| antisymmetric(&mut rng, n)).collect();
        let p = doubly_stochastic(&mut rng, n);
        let tape = Tape::inference();
        let g = cost_gradient(tape.constant(p.clone()), &constants(&tape, &costs), &s)?;
        let analytic = g.value().as_ref().clone();
        let total = scalar_fn(move |tape, v| total_cost(v[0], &constants(tape, &costs), &s));
        worst = worst.max(compare_with_finite_differences(&total, &[p], &[analytic], 1e-6)?);
    }
    Ok(outcome(worst < 1e-6, format!("max rel err {worst:.2e} over 50 trials (threshold 1e-6)")))
}

fn end_to_end_gradient() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for init in [InitMode::Uniform, InitMode::LinearAssignment] {
        for _ in 0..3 {
            let po = PoConfig {
                steps: 2,
                init,
                ..PoConfig::default()
            };
            let (model, x, target) = loop {
                let model = Model::init(PositionStructure::sequence(4)?, 1, 4, None, 1.0, po, &mut rng)?;
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
            let loss = scalar_fn(|tape, v| {
                let vars = model.vars_from(v)?;
                mse(model.forward(&vars, tape.constant(x.clone()), &model.po)?.y, &target)
            });
            let analytic = analytic_gradients(&loss, &params)?;
            worst = worst.max(compare_with_finite_differences(&loss, &params, &analytic, 1e-6)?);
        }
    }
    Ok(outcome(
        worst < 1e-4,
        format!("max rel err {worst:.2e} over net, eta and LA weights, both init modes (threshold 1e-4)"),
    ))
}

fn qp_equivalence() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut qp_worst, mut uniform_worst) = (0.0f64, 0.0f64);
    for trial in 0..100 {
        let s = random_structure(&mut rng, trial, 8);
        let n = s.size();
        let costs: Vec<Tensor> = (0..s.channels().len()).map(|_| antisymmetric(&mut rng, n)).collect();
        let p = doubly_stochastic(&mut rng, n);
        let tape = Tape::inference();
        let cc = constants(&tape, &costs);
        let c = total_cost(tape.constant(p.clone()), &cc, &s)?.value().item();
        qp_worst = qp_worst.max((c - qp_cost(&p, &costs, &s)?).abs());
        let uniform = Tensor::full(n, n, 1.0 / n as f64);
        uniform_worst = uniform_worst.max(total_cost(tape.constant(uniform), &cc, &s)?.value().item().abs());
    }
    Ok(outcome(
        qp_worst < 1e-10 && uniform_worst < 1e-12,
        format!("|c - qp| {qp_worst:.2e} (< 1e-10), uniform |c| {uniform_worst:.2e} (< 1e-12)"),
    ))
}

fn permutation_invariance() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for init in [InitMode::Uniform, InitMode::LinearAssignment] {
        let po = PoConfig {
            init,
            ..PoConfig::default()
        };
        for _ in 0..100 {
            let n = rng.gen_range(2..=8);
            let net = ComparisonNet::xavier(2, 8, 1, &mut rng);
            let w = random(&mut rng, n, 2, -1.0, 1.0);
            let x = random(&mut rng, n, 2, 0.0, 1.0);
            let shuffled = random_permutation(n, &mut rng).apply(&x)?;
            let y_of = |x: &Tensor| -> Result<Tensor> {
                let tape = Tape::inference();
                let o = optimise(
                    tape.constant(x.clone()),
                    &net.on_tape(&tape),
                    &PositionStructure::sequence(n)?,
                    &po,
                    tape.constant(Tensor::scalar(1.0)),
                    Some(tape.constant(w.clone())),
                )?;
                Ok(o.y.value().as_ref().clone())
            };
            worst = worst.max(y_of(&x)?.max_abs_diff(&y_of(&shuffled)?));
        }
    }
    Ok(outcome(worst < 1e-9, format!("max |dY| {worst:.2e} over 200 inputs (threshold 1e-9)")))
}

fn hungarian_optimality() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.gen_range(1..=7);
        let cost = random(&mut rng, n, n, -10.0, 10.0);
        let h = assignment_cost(&cost, &hungarian(&cost)?);
        let b = assignment_cost(&cost, &brute_force_assignment(&cost)?);
        if h != b {
            mismatches += 1;
        }
    }
    Ok(outcome(mismatches == 0, format!("{mismatches} mismatches in 200 matrices, N <= 7")))
}

fn sinkhorn_contract() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut cols, mut shift) = (0.0f64, 0.0f64);
    let mut violations = 0;
    for _ in 0..100 {
        let n = rng.gen_range(2..=8);
        let x = random(&mut rng, n, n, -5.0, 5.0);
        let p4 = sinkhorn_values(&x, 4)?;
        let p8 = sinkhorn_values(&x, 8)?;
        let c = rng.gen_range(-10.0..10.0);
        shift = shift.max(p4.max_abs_diff(&sinkhorn_values(&x.map(|v| v + c), 4)?));
        cols = p4.col_sums().data().iter().fold(cols, |m, s| m.max((s - 1.0).abs()));
        if doubly_stochastic_residual(&p8) > doubly_stochastic_residual(&p4) {
            violations += 1;
        }
    }
    Ok(outcome(
        cols < 1e-12 && shift < 1e-12 && violations == 0,
        format!("col sums {cols:.2e}, shift {shift:.2e} (< 1e-12); L8 > L4 residual in {violations}/100"),
    ))
}

fn mosaic() -> Result<Outcome> {
    let cfg = Config::mosaic();
    let trained = train_timed(&cfg)?;
    let acc = evaluate(&trained.0.model, &cfg)?[0].exact_acc;
    let passed = acc >= 0.95 && trained.1 <= Duration::from_secs(30 * 60);
    Ok(outcome(
        passed,
        format!("3x3 synthetic D=4: {:.2}% exact on 512 puzzles, trained in {}", 100.0 * acc, minutes(trained.1)),
    ))
}

fn entropy(trained: &(TrainOutput, Duration)) -> Result<Outcome> {
    let model = &trained.0.model;
    let mut rng = stream_rng(Config::sort().seed, EVAL_STREAM);
    let batch = gen_sort_batch(model.set_size(), Interval::unit(), 256, &mut rng);
    let e = entropy_diagnostic(model, &batch.inputs)?;
    Ok(outcome(
        e.alternative < e.full_gradient,
        format!("mean row entropy alternative {:.4} vs full-gradient {:.4}", e.alternative, e.full_gradient),
    ))
}

fn round_trips(trained: &(TrainOutput, Duration)) -> Result<Outcome> {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("n5.popt");
    let original = Checkpoint::new(&trained.0.model, &Config::sort());
    original.save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    let bits_equal = original.arrays.len() == loaded.arrays.len()
        && original.arrays.iter().zip(&loaded.arrays).all(|((na, a), (nb, b))| {
            na == nb
                && a.shape() == b.shape()
                && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
        && loaded.config == original.config
        && loaded.encode() == std::fs::read(&path).unwrap();

    // four 28x28 images and their labels, laid out byte by byte
    let mut images = vec![0x00, 0x00, 0x08, 0x03, 0, 0, 0, 4, 0, 0, 0, 28, 0, 0, 0, 28];
    let pixel = |i: usize, p: usize| ((i * 97 + p * 31) % 256) as u8;
    for i in 0..4 {
        images.extend((0..784).map(|p| pixel(i, p)));
    }
    let labels_bytes = [0x00, 0x00, 0x08, 0x01, 0, 0, 0, 4, 7, 2, 1, 0];
    let parsed = parse_idx_images(&images)?;
    let labels = parse_idx_labels(&labels_bytes)?;
    let pixels_match = parsed.shape() == (4, 28, 28)
        && (0..4).all(|i| {
            let img = parsed.image(i);
            (0..784).all(|p| img.data()[p] == pixel(i, p) as f64 / 255.0)
        });
    let idx_ok = pixels_match && labels == [7, 2, 1, 0];
    Ok(outcome(
        bits_equal && idx_ok,
        format!("checkpoint bit-identical: {bits_equal}; IDX fixture matches: {idx_ok}"),
    ))
}

fn main() {
    let mut results: Vec<(&str, Result<Outcome>)> = Vec::new();
    let mut report = |name: &'static str, r: Result<Outcome>| {
        let line = match &r {
            Ok(o) => format!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail),
            Err(e) => format!("FAIL {name}: error {e}"),
        };
        println!("{line}");
        results.push((name, r));
    };

    report("3 cost gradient", cost_gradient_check());
    report("4 end-to-end gradient", end_to_end_gradient());
    report("5 QP oracle", qp_equivalence());
    report("6 permutation invariance", permutation_invariance());
    report("7 hungarian", hungarian_optimality());
    report("8 sinkhorn", sinkhorn_contract());

    let n5 = train_timed(&Config::sort());
    match &n5 {
        Ok(trained) => {
            report("1 sorting N=5", sorting_n5(trained));
            report("10 entropy diagnostic", entropy(trained));
            report("11 format round-trips", round_trips(trained));
        }
        Err(e) => {
            for name in ["1 sorting N=5", "10 entropy diagnostic", "11 format round-trips"] {
                report(name, Err(permopt::Error::InvalidArgument(format!("N=5 training failed: {e}"))));
            }
        }
    }
    report("9 mosaic", mosaic());
    report("2 sorting N=64", sorting_n64());

    let failed: Vec<&str> = results
        .iter()
        .filter(|(_, r)| !matches!(r, Ok(o) if o.passed))
        .map(|(name, _)| *name)
        .collect();
    if failed.is_empty() {
        println!("all {} criteria passed", results.len());
    } else {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
