use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cstn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cstn"))
        .args(args)
        .current_dir(dir)
        .env("CSTN_THREADS", "1")
        .output()
        .expect("spawn cstn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const TINY: [&str; 10] = [
    "--set",
    "model.embed_dim=8",
    "--set",
    "model.num_rstb=1",
    "--set",
    "model.window_size=4",
    "--set",
    "model.target_height=64",
    "--set",
    "model.target_width=64",
];

#[test]
fn phantom_is_byte_deterministic_and_accepts_one_echo() {
    let d = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = cstn(d.path(), &["phantom", "--seed", "4", "--count", "2", "--size", "32", "--out", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for i in ["phantom-000", "phantom-001"] {
        for f in ["magnitude.cst", "phase.cst", "echoes.txt", "maps.cst", "maps.txt"] {
            let (a, b) = (d.path().join("a").join(i).join(f), d.path().join("b").join(i).join(f));
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap(), "{i}/{f}");
        }
    }
    let mag = cstn::cst::load(&d.path().join("a/phantom-000/magnitude.cst")).unwrap();
    assert_eq!(mag.shape(), &[3, 32, 32]);

    let o = cstn(d.path(), &["phantom", "--tes", "10", "--size", "32", "--out", "one"]);
    assert_eq!(code(&o), 0);
    let v = cstn::volume::load(&d.path().join("one/phantom-000")).unwrap();
    assert_eq!(v.echo_times_ms(), &[10.0]);
}

#[test]
fn usage_errors_exit_1() {
    let d = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &["phantom"],
        &["phantom", "--out", "x", "--tes", "a,b"],
        &["phantom", "--out", "x", "--count", "-1"],
        &["init", "--out", "x.cstck", "--set", "model.nope=1"],
        &["init", "--out", "x.cstck", "--set", "model.embed_dim=many"],
        &["eval", "--data", ".", "--out", "r", "--protocol", "100"],
    ] {
        let o = cstn(d.path(), args);
        assert_eq!(code(&o), 1, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn data_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let o = cstn(d.path(), &["downsample", "--in", "missing", "--target", "16", "--out", "lr"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing"));

    fs::write(d.path().join("junk.cstck"), b"CSTK\x01").unwrap();
    let o = cstn(d.path(), &["infer", "--ckpt", "junk.cstck", "--in", "x", "--out", "y"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn infer_with_wrong_echo_count_exits_2_with_diagnostic() {
    let d = tempfile::tempdir().unwrap();
    let mut init = vec!["init", "--out", "m.cstck"];
    init.extend(TINY);
    assert_eq!(code(&cstn(d.path(), &init)), 0);
    assert_eq!(code(&cstn(d.path(), &["phantom", "--tes", "10,20", "--size", "64", "--out", "ph"])), 0);
    let o = cstn(d.path(), &["infer", "--ckpt", "m.cstck", "--in", "ph/phantom-000", "--out", "hq"]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("model.in_echoes") && err.contains("expected 3, found 2"), "{err}");
}

#[test]
fn help_lists_local_defaults() {
    let d = tempfile::tempdir().unwrap();
    for cmd in [&["--help"][..], &["train", "--help"], &["eval", "--help"], &["smwi", "--help"]] {
        let o = cstn(d.path(), cmd);
        assert_eq!(code(&o), 0);
        let text = String::from_utf8_lossy(&o.stdout);
        assert!(text.contains("Defaults not from paper"), "{cmd:?}");
        assert!(text.contains("train.learning_rate=0.0002"));
        assert!(text.contains("smwi.kernel=33"));
        assert!(!text.contains("model.num_rstb="), "published default listed as local");
    }
}

#[test]
fn export_png_writes_image_and_window() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&cstn(d.path(), &["phantom", "--size", "32", "--out", "ph"])), 0);
    let o = cstn(d.path(), &["export-png", "--in", "ph/phantom-000/magnitude.cst", "--index", "2", "--out", "m.png"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.path().join("m.png").is_file());
    assert!(fs::read_to_string(d.path().join("m.window.txt")).unwrap().starts_with("min="));
    let o = cstn(d.path(), &["export-png", "--in", "ph/phantom-000/magnitude.cst", "--index", "3", "--out", "m.png"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn train_run_directory_and_zero_steps() {
    let d = tempfile::tempdir().unwrap();
    let mut args = vec![
        "train",
        "--out-dir",
        "runs",
        "--set",
        "train.total_steps=0",
        "--set",
        "train.phantom_size=64",
        "--set",
        "train.lowres_size=32",
        "--set",
        "train.train_phantoms=2",
        "--set",
        "train.val_phantoms=1",
        "--set",
        "train.patch_size=16",
    ];
    args.extend(TINY);
    let o = cstn(d.path(), &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let runs: Vec<_> = fs::read_dir(d.path().join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    let run = &runs[0];
    let name = run.file_name().unwrap().to_string_lossy().into_owned();
    assert!(name.starts_with("run-") && name.ends_with("-seed0"), "{name}");
    let config = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(config.contains("train.total_steps=0  # not from paper"));
    assert_eq!(fs::read_to_string(run.join("loss.csv")).unwrap(), "step,loss,lr\n");

    let mut init = vec!["init", "--out", "init.cstck"];
    init.extend(TINY);
    assert_eq!(code(&cstn(d.path(), &init)), 0);
    let want = fs::read(d.path().join("init.cstck")).unwrap();
    assert_eq!(fs::read(run.join("best.cstck")).unwrap(), want);
    assert_eq!(fs::read(run.join("last.cstck")).unwrap(), want);
}

#[test]
fn divergence_aborts_with_exit_3() {
    let d = tempfile::tempdir().unwrap();
    let mut args = vec![
        "train",
        "--out-dir",
        "runs",
        "--set",
        "train.total_steps=20",
        "--set",
        "train.learning_rate=1e30",
        "--set",
        "train.phantom_size=64",
        "--set",
        "train.lowres_size=32",
        "--set",
        "train.train_phantoms=1",
        "--set",
        "train.val_phantoms=1",
        "--set",
        "train.batch_size=1",
        "--set",
        "train.patch_size=16",
    ];
    args.extend(TINY);
    let o = cstn(d.path(), &args);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let run = fs::read_dir(d.path().join("runs")).unwrap().next().unwrap().unwrap().path();
    let log = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(log.lines().count() >= 2, "{log}");
    assert!(!run.join("best.cstck").exists());
}

#[test]
fn gradcheck_passes() {
    let d = tempfile::tempdir().unwrap();
    let o = cstn(d.path(), &["gradcheck"]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{out}");
    assert_eq!(out.lines().count(), cstn::gradcheck_suite::names().len());
    assert!(out.lines().all(|l| l.ends_with(" ok")), "{out}");
}
