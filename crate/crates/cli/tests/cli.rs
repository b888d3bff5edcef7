use std::path::Path;
use std::process::{Command, Output};

fn edrain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edrain"))
        .args(args)
        .env("EDRAIN_THREADS", "1")
        .output()
        .expect("spawn edrain")
}

fn ok(args: &[&str]) -> Output {
    let out = edrain(args);
    assert!(
        out.status.success(),
        "edrain {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--synthetic",
    "2",
    "--levels",
    "2",
    "--base-channels",
    "4",
    "--kernel-size",
    "3",
    "--crop-size",
    "16",
    "--batch-size",
    "2",
    "--val-interval",
    "2",
    "--log-every",
    "0",
];

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", s(out)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args)
}

fn header(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join("metrics.csv"))
        .unwrap()
        .lines()
        .filter(|l| l.starts_with('#'))
        .map(String::from)
        .collect()
}

#[test]
fn derain_keeps_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "gen-pairs",
        s(&data),
        "--count",
        "1",
        "--size",
        "40",
        "--seed",
        "3",
    ]);
    let input = data.join("rainy/pair_000.png");
    let output = dir.path().join("out.png");
    ok(&["derain", s(&input), s(&output)]);
    let dims = |p: &Path| {
        derain_core::image_io::load_image(p)
            .unwrap()
            .shape()
            .to_vec()
    };
    assert_eq!(dims(&output), dims(&input));
}

#[test]
fn rainmix_preview_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&[
            "rainmix-preview",
            s(d),
            "--seed",
            "7",
            "--count",
            "3",
            "--size",
            "48",
        ]);
    }
    for i in 0..3 {
        let name = format!("rain_{i:03}.png");
        assert_eq!(
            std::fs::read(a.join(&name)).unwrap(),
            std::fs::read(b.join(&name)).unwrap()
        );
    }
    ok(&[
        "rainmix-preview",
        s(&b),
        "--seed",
        "8",
        "--count",
        "1",
        "--size",
        "48",
    ]);
    assert_ne!(
        std::fs::read(a.join("rain_000.png")).unwrap(),
        std::fs::read(b.join("rain_000.png")).unwrap()
    );
}

#[test]
fn preview_composites_onto_an_image() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-pairs", s(&data), "--count", "1", "--size", "32"]);
    let out = dir.path().join("p");
    ok(&[
        "rainmix-preview",
        s(&out),
        "--count",
        "2",
        "--size",
        "32",
        "--image",
        s(&data.join("clean/pair_000.png")),
    ]);
    assert!(out.join("composite_001.png").exists());
}

#[test]
fn gen_streaks_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&[
            "gen-streaks",
            s(d),
            "--count",
            "2",
            "--size",
            "32",
            "--seed",
            "5",
        ]);
    }
    let name = "synthetic_001.png";
    assert_eq!(
        std::fs::read(a.join(name)).unwrap(),
        std::fs::read(b.join(name)).unwrap()
    );
}

#[test]
fn seeded_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&a, &["--iterations", "3", "--seed", "4"]);
    train(&b, &["--iterations", "3", "--seed", "4"]);
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("final.edrn")).unwrap(),
        std::fs::read(b.join("final.edrn")).unwrap()
    );
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    train(
        &full,
        &[
            "--iterations",
            "4",
            "--seed",
            "9",
            "--checkpoint-interval",
            "2",
        ],
    );
    train(&part, &["--iterations", "2", "--seed", "9"]);
    let ck = part.join("final.edrn");
    train(
        &part,
        &["--iterations", "4", "--seed", "9", "--resume", s(&ck)],
    );
    assert_eq!(
        std::fs::read(full.join("final.edrn")).unwrap(),
        std::fs::read(part.join("final.edrn")).unwrap()
    );
    let rows = |d: &Path| -> Vec<String> {
        std::fs::read_to_string(d.join("metrics.csv"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(String::from)
            .collect()
    };
    assert_eq!(rows(&full), rows(&part));
    assert!(full.join("checkpoint_000002.edrn").exists());
}

#[test]
fn ablation_switches_echo_in_header() {
    let dir = tempfile::tempdir().unwrap();
    let flags = dir.path().join("flags");
    let preset = dir.path().join("preset");
    train(
        &flags,
        &[
            "--iterations",
            "1",
            "--rainmix",
            "off",
            "--ssim-loss",
            "off",
            "--dilations",
            "1",
        ],
    );
    train(&preset, &["--iterations", "1", "--variant", "v1"]);
    let h = header(&flags);
    assert_eq!(h, header(&preset));
    assert!(h.contains(&"# rainmix=off".to_string()));
    assert!(h.contains(&"# ssim-loss=off".to_string()));
    assert!(h.contains(&"# dilations=1".to_string()));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny run\niterations=2\nlambda=0.5\nrainmix=off\n").unwrap();
    let out = dir.path().join("run");
    train(&out, &["--config", s(&cfg), "--lambda", "0.3"]);
    let h = header(&out);
    assert!(h.contains(&"# iterations=2".to_string()));
    assert!(h.contains(&"# lambda=0.3".to_string()));
    assert!(h.contains(&"# rainmix=off".to_string()));
}

#[test]
fn eval_reports_one_row_per_image_plus_mean() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-pairs", s(&data), "--count", "3", "--size", "32"]);
    let csv = dir.path().join("report.csv");
    ok(&["eval", "--data", s(&data), "--csv", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "image,psnr,ssim");
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert!(lines[4].starts_with("mean,"));

    let clean = data.join("clean");
    let out = ok(&[
        "eval",
        "--rainy-dir",
        s(&clean),
        "--clean-dir",
        s(&clean),
        "--inputs-only",
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(
        stdout
            .lines()
            .last()
            .unwrap()
            .starts_with("mean,100.000000,1.000000"),
        "{stdout}"
    );
}

#[test]
fn eval_with_trained_checkpoint_rejects_channel_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    train(&run, &["--iterations", "1", "--rainmix", "off"]);
    let gray = dir.path().join("gray");
    for sub in ["rainy", "clean"] {
        std::fs::create_dir_all(gray.join(sub)).unwrap();
        let img = derain_core::Tensor::full(&[1, 1, 16, 16], 0.5);
        derain_core::image_io::save_image(gray.join(sub).join("a.png"), &img).unwrap();
    }
    let ck = run.join("final.edrn");
    let out = edrain(&["eval", "--data", s(&gray), "--checkpoint", s(&ck)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("channels"));
}

#[test]
fn bench_reports_three_stages() {
    let out = ok(&["bench", "--size", "32", "--repetitions", "10"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for stage in ["kpn_forward", "filtering", "end_to_end"] {
        assert!(text.contains(stage), "{text}");
    }
}

#[test]
fn exit_codes() {
    let out = edrain(&["derain", "a.png", "b.png", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(edrain(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(edrain(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.png");
    let out = edrain(&["derain", s(&missing), s(&dir.path().join("o.png"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.png"));
    assert!(!dir.path().join("o.png").exists());

    let out = Command::new(env!("CARGO_BIN_EXE_edrain"))
        .args(["gen-streaks", s(&dir.path().join("s")), "--count", "1"])
        .env("EDRAIN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
