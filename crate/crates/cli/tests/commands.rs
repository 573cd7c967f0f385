use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latent_relight::train::load_checkpoint;
use latent_relight::ImageBuffer;
use latent_relight_cli::grid::{LABEL_BAND, SEPARATOR};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_latent-relight"));
    cmd.env_remove("LATENT_RELIGHT_SEED").env("RUST_LOG", "warn");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small synthetic dataset plus a checkpoint trained for two steps.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    ok(&["synth-data", "--out", s(&data), "--n-scenes", "3", "--n-lights", "3", "--image-size", "64", "--seed", "5"]);
    let run_dir = root.join("run");
    ok(&[
        "train", "--data", s(&data), "--out", s(&run_dir), "--preset", "tiny", "--batch-size", "2",
        "--max-steps", "2", "--eval-every", "1", "--seed", "3",
    ]);
    let ckpt = run_dir.join("step_00000002.ckpt");
    assert!(ckpt.is_file());
    Fixture { _dir: dir, root, data, ckpt }
}

fn img(f: &Fixture, scene: usize, light: usize) -> PathBuf {
    f.data.join(format!("scene_{scene:04}")).join(format!("light_{light:02}.png"))
}

#[test]
fn end_to_end_commands() {
    let f = fixture();
    assert!(f.data.join("manifest.json").is_file());
    assert!(f.root.join("run/manifest.json").is_file());
    let metrics = fs::read_to_string(f.root.join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    let relit = f.root.join("relit.png");
    ok(&["relight", "--ckpt", s(&f.ckpt), "--input", s(&img(&f, 0, 0)), "--ref", s(&img(&f, 1, 2)), "--out", s(&relit)]);
    let out = ImageBuffer::<f32>::load_png(&relit).unwrap();
    assert_eq!((out.height(), out.width()), (64, 64));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.root.join("relit.png.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "relight");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 3);

    let albedo = f.root.join("albedo.png");
    ok(&["albedo", "--ckpt", s(&f.ckpt), "--input", s(&img(&f, 0, 1)), "--out", s(&albedo)]);
    assert!(albedo.is_file());

    let strip = f.root.join("strip.png");
    let frames = f.root.join("frames");
    ok(&[
        "interpolate", "--ckpt", s(&f.ckpt), "--input", s(&img(&f, 0, 0)), "--ref-a", s(&img(&f, 1, 0)),
        "--ref-b", s(&img(&f, 2, 1)), "--steps", "4", "--out", s(&strip), "--frames-dir", s(&frames),
    ]);
    let grid = ImageBuffer::<f32>::load_png(&strip).unwrap();
    assert_eq!((grid.height(), grid.width()), (LABEL_BAND + 64, 4 * 64 + 3 * SEPARATOR));
    // Endpoints equal plain relighting with each reference.
    let weights = load_checkpoint(&f.ckpt).unwrap().weights;
    let input = ImageBuffer::<f32>::load_png(img(&f, 0, 0)).unwrap();
    let end_b = weights.relight(&input, &ImageBuffer::load_png(img(&f, 2, 1)).unwrap()).unwrap();
    let last = ImageBuffer::<f32>::load_png(frames.join("frame_03.png")).unwrap();
    assert_eq!(last.to_rgb8(), end_b.to_rgb8());
    let end_a = weights.relight(&input, &ImageBuffer::load_png(img(&f, 1, 0)).unwrap()).unwrap();
    let first = ImageBuffer::<f32>::load_png(frames.join("frame_00.png")).unwrap();
    assert_eq!(first.to_rgb8(), end_a.to_rgb8());
    let again = f.root.join("strip_again.png");
    ok(&[
        "interpolate", "--ckpt", s(&f.ckpt), "--input", s(&img(&f, 0, 0)), "--ref-a", s(&img(&f, 1, 0)),
        "--ref-b", s(&img(&f, 2, 1)), "--steps", "4", "--out", s(&again),
    ]);
    assert_eq!(fs::read(&strip).unwrap(), fs::read(&again).unwrap());

    let report_path = f.root.join("relight.json");
    ok(&["eval-relight", "--ckpt", s(&f.ckpt), "--data", s(&f.data), "--n-refs", "2", "--out", s(&report_path)]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 3 * 3 * 2);
    assert!(report["mean_raw_rmse"].as_f64().unwrap().is_finite());

    let out = ok(&["inspect-checkpoint", "--ckpt", s(&f.ckpt)]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["step"], 2);
    assert_eq!(summary["manifest"]["command"], "inspect-checkpoint");
    assert_eq!(summary["train_config"]["batch_size"], 2);
}

#[test]
fn whdr_report_with_fixed_and_tuned_delta() {
    let f = fixture();
    let iiw = f.root.join("iiw");
    fs::create_dir_all(&iiw).unwrap();
    for id in ["100", "200"] {
        fs::copy(img(&f, 0, 0), iiw.join(format!("{id}.png"))).unwrap();
        fs::write(
            iiw.join(format!("{id}.json")),
            r#"{"intrinsic_points":[{"id":1,"x":0.5,"y":0.5,"opaque":true},{"id":2,"x":0.505,"y":0.505,"opaque":true}],
                "intrinsic_comparisons":[{"point1":1,"point2":2,"darker":"E","darker_score":0.8}]}"#,
        )
        .unwrap();
    }
    let fixed = f.root.join("whdr.json");
    ok(&["eval-whdr", "--ckpt", s(&f.ckpt), "--data", s(&iiw), "--delta", "0.1", "--out", s(&fixed)]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&fixed).unwrap()).unwrap();
    assert_eq!(report["images"].as_array().unwrap().len(), 2);
    assert_eq!(report["delta"], 0.1);
    let w = report["mean_whdr"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&w));

    let tuned = f.root.join("whdr_tuned.json");
    ok(&["eval-whdr", "--ckpt", s(&f.ckpt), "--data", s(&iiw), "--tune-data", s(&iiw), "--out", s(&tuned)]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&tuned).unwrap()).unwrap();
    assert_eq!(report["tuned"], true);
    // Both points fall in the same pixel, so an "equal" label always agrees.
    assert_eq!(report["mean_whdr"], 0.0);
}

#[test]
fn resume_continues_the_run() {
    let f = fixture();
    let resumed = f.root.join("resumed");
    ok(&["train", "--data", s(&f.data), "--out", s(&resumed), "--resume", s(&f.ckpt), "--max-steps", "3"]);
    let ckpt = load_checkpoint(resumed.join("step_00000003.ckpt")).unwrap();
    assert_eq!(ckpt.step, 3);

    let straight = f.root.join("straight");
    ok(&[
        "train", "--data", s(&f.data), "--out", s(&straight), "--preset", "tiny", "--batch-size", "2",
        "--max-steps", "3", "--eval-every", "1", "--seed", "3",
    ]);
    let reference = load_checkpoint(straight.join("step_00000003.ckpt")).unwrap();
    assert_eq!(ckpt.weights.params(), reference.weights.params());
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["train"]).status.code(), Some(1));
    assert_eq!(run(&["relight", "--ckpt", "x"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let out = run(&["inspect-checkpoint", "--ckpt", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ckpt"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nbatchsize = 3\n").unwrap();
    let out = run(&["train", "--data", s(dir.path()), "--out", s(&dir.path().join("o")), "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batchsize"));
}

#[test]
fn seed_comes_from_environment_when_no_flag() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let out = bin()
        .args(["synth-data", "--out", s(&a), "--n-scenes", "1", "--n-lights", "2", "--image-size", "16"])
        .env("LATENT_RELIGHT_SEED", "42")
        .output()
        .unwrap();
    assert!(out.status.success());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 42);
    assert_eq!(manifest["config"]["seed"], 42);
}

#[test]
fn inputs_are_resized_to_model_resolution() {
    let f = fixture();
    let big = f.root.join("big.png");
    ImageBuffer::<f32>::load_png(img(&f, 0, 0)).unwrap().resize_bilinear(80, 96).save_png(&big).unwrap();
    let out_path = f.root.join("a.png");
    let out = ok(&["albedo", "--ckpt", s(&f.ckpt), "--input", s(&big), "--out", s(&out_path)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("resizing"));
    let a = ImageBuffer::<f32>::load_png(&out_path).unwrap();
    assert_eq!((a.height(), a.width()), (64, 64));
}
