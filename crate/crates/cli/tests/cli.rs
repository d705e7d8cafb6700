use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use permopt::harness::checkpoint::Checkpoint;

fn permopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_permopt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn asset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets").join(name)
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

const TINY_SORT: &str = "task = sort\nn = 4\nhidden = 4\nsets-per-epoch = 64\nbatch-size = 16\nepochs = 2\neval-sets = 32\n";

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_checkpoint_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.conf", TINY_SORT);
    let out = dir.path().join("tiny.popt");
    let o = permopt(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read(&out).unwrap().starts_with(b"POPT1\n"));
    let metrics = fs::read_to_string(dir.path().join("tiny.metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,mse,eta,seconds");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0,") && lines[1].contains(",1e0,"), "{}", lines[1]);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.conf", TINY_SORT);
    let mut bytes = Vec::new();
    for (name, seed) in [("a.popt", "11"), ("b.popt", "11"), ("c.popt", "12")] {
        let out = dir.path().join(name);
        let o = permopt(&["train", "--config", s(&cfg), "--seed", seed, "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        bytes.push(fs::read(&out).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    assert_ne!(bytes[0], bytes[2]);
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = permopt(&["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));

    let o = permopt(&["train", "--config", "/nonexistent/run.conf"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_errors_name_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.conf", "task = sort\n# comment\nlearning_rate = 0.1\n");
    let o = permopt(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("line 3") && err.contains("learning_rate"), "{err}");
}

#[test]
fn eval_bundled_checkpoint_covers_seven_intervals() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("eval.csv");
    let o = permopt(&[
        "eval",
        "--checkpoint",
        s(&asset("sort5.popt")),
        "--config",
        s(&asset("sort5.conf")),
        "--csv",
        s(&csv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "interval_lo,interval_hi,exact_acc,hard_mse");
    assert_eq!(rows.len(), 8);
    assert!(rows[7].starts_with("1000,1001,"), "{}", rows[7]);
}

#[test]
fn oracle_eval_is_perfect() {
    let o = permopt(&["eval", "--oracle", "--config", s(&asset("sort5.conf"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.matches("100.00%").count(), 7, "{out}");
}

#[test]
fn corrupt_checkpoint_names_magic() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = fs::read(asset("sort5.popt")).unwrap();
    bytes[4] = b'9';
    let bad = dir.path().join("bad.popt");
    fs::write(&bad, bytes).unwrap();
    let o = permopt(&["eval", "--checkpoint", s(&bad), "--config", s(&asset("sort5.conf"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn linear_assignment_size_mismatch_is_incompatible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "la.conf",
        &format!("{TINY_SORT}init-mode = linear-assignment\nepochs = 0\n").replace("epochs = 2\n", ""),
    );
    let out = dir.path().join("la.popt");
    assert!(permopt(&["train", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let other = write(dir.path(), "n6.conf", "task = sort\nn = 6\neval-sets = 8\n");
    let o = permopt(&["eval", "--checkpoint", s(&out), "--config", s(&other)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("incompatible"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_detects_a_sign_flip() {
    let o = permopt(&["gradcheck"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(!stdout(&o).contains("FAIL"));

    let o = permopt(&["gradcheck", "--trials", "1"]);
    assert!(o.status.success());

    let o = permopt(&["gradcheck", "--trials", "1", "--inject-sign-flip"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checks failed"), "{}", stderr(&o));
}

#[test]
fn inspect_writes_antisymmetric_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid.csv");
    let o = permopt(&[
        "inspect",
        "--checkpoint",
        s(&asset("sort5.popt")),
        "--grid",
        "0:1:64",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<(f64, f64, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (v[0], v[1], v[2])
        })
        .collect();
    assert_eq!(rows.len(), 4096);
    for i in 0..64 {
        for j in 0..64 {
            let (a, b, f) = rows[i * 64 + j];
            let (b2, a2, g) = rows[j * 64 + i];
            assert_eq!((a, b), (a2, b2));
            assert_eq!(f, -g);
        }
    }

    let o = permopt(&[
        "inspect",
        "--checkpoint",
        s(&asset("sort5.popt")),
        "--grid",
        "0:1000:64",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success());
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.lines().last().unwrap().starts_with("1.0000000000000000e3,1.0000000000000000e3,"));
}

#[test]
fn inspect_rejects_bad_grids_and_non_scalar_models() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid.csv");
    for grid in ["0:1", "1:0:10", "0:1:1", "a:b:c"] {
        let o = permopt(&["inspect", "--checkpoint", s(&asset("sort5.popt")), "--grid", grid, "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(2), "{grid}");
    }

    let cfg = write(dir.path(), "mosaic.conf", "task = mosaic\ngrid = 2x2\nepochs = 0\nsets-per-epoch = 4\nhidden = 4\n");
    let ck = dir.path().join("mosaic.popt");
    assert!(permopt(&["train", "--config", s(&cfg), "--out", s(&ck)]).status.success());
    let o = permopt(&["inspect", "--checkpoint", s(&ck), "--grid", "0:1:8", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("scalar"), "{}", stderr(&o));
}

#[test]
fn selftest_passes() {
    let o = permopt(&["selftest"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    for line in ["uniform P total cost", "N=1 set", "entropy alternative < full-gradient"] {
        assert!(out.lines().any(|l| l.starts_with("PASS") && l.contains(line)), "{line}\n{out}");
    }
}

#[test]
fn threads_flag_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.conf", TINY_SORT);
    let one = dir.path().join("one.popt");
    let three = dir.path().join("three.popt");
    assert!(permopt(&["train", "--config", s(&cfg), "--out", s(&one)]).status.success());
    assert!(permopt(&["--threads", "3", "train", "--config", s(&cfg), "--out", s(&three)]).status.success());
    let (a, b) = (Checkpoint::load(one).unwrap(), Checkpoint::load(three).unwrap());
    assert_eq!(a.arrays.len(), b.arrays.len());
    for ((na, ta), (nb, tb)) in a.arrays.iter().zip(&b.arrays) {
        assert_eq!(na, nb);
        let bits = |t: &permopt::autodiff::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ta), bits(tb), "{na}");
    }
    assert_eq!((a.config.threads, b.config.threads), (1, 3));
}
