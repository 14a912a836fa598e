//! End-to-end runs of the `sslab` binary on a tiny dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sslab::imageio::load_raw;

const SMALL: &[&str] = &[
    "--set", "image_size=32",
    "--set", "widths=4,4,8,8",
    "--set", "n_train=48",
    "--set", "n_clean=16",
    "--set", "n_cueconflict=24",
    "--set", "n_stylized=8",
    "--set", "batch_size=8",
    "--set", "lr=0.02",
];

fn sslab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sslab"))
        .args(args)
        .env("SSL_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = sslab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL.iter().copied()).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn data(&self) -> PathBuf {
        self.path("data")
    }

    fn ckpt(&self) -> PathBuf {
        self.path("train").join("model.sslm")
    }

    fn image(&self) -> PathBuf {
        self.data().join("eval-clean").join("00003.png")
    }
}

/// Generates data and trains a 2-epoch Top-K model.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let f = Fixture { _dir: dir, root };
    ok(&with_small(&["gen-data", "--seed", "1", "--out", s(&f.data())]));
    ok(&with_small(&[
        "train", "--seed", "2", "--epochs", "2", "--topk-layer", "2",
        "--data", s(&f.data()), "--out", s(&f.path("train")),
    ]));
    f
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn missing_out_is_usage_error() {
    assert_eq!(sslab(&["gen-data", "--seed", "0"]).status.code(), Some(64));
    assert_eq!(sslab(&["frobnicate"]).status.code(), Some(64));
    assert_eq!(sslab(&["train", "--set", "nope=1", "--out", "x"]).status.code(), Some(64));
}

#[test]
fn gen_data_counts_and_echoed_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let stdout = ok(&with_small(&["gen-data", "--seed", "3", "--out", s(&out)])).stdout;
    assert!(String::from_utf8(stdout).unwrap().trim().ends_with("manifest.tsv"));
    let manifest = read(out.join("manifest.tsv"));
    assert_eq!(manifest.lines().count(), 48 + 16 + 24 + 8);
    for line in manifest.lines() {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 4);
        assert!(out.join(cols[0]).is_file());
    }
    let cfg = read(out.join("run.cfg"));
    assert!(cfg.contains("seed = 3"));
    assert!(cfg.contains("lr = 0.02"));
    assert!(cfg.contains("momentum = 0.9"));
}

#[test]
fn bad_image_is_data_error() {
    let f = fixture();
    let junk = f.path("junk.png");
    fs::write(&junk, b"not a png").unwrap();
    let out = sslab(&[
        "synth", "--checkpoint", s(&f.ckpt()), "--image", s(&junk), "--out", s(&f.path("s")),
    ]);
    assert_eq!(out.status.code(), Some(65));
    let out = sslab(&[
        "eval", "--checkpoint", s(&f.path("missing.sslm")), "--data", s(&f.data()), "--out", s(&f.path("e")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_eval_synth_reconstruct_dump() {
    let f = fixture();
    let train = f.path("train");
    let metrics = read(train.join("metrics.csv"));
    assert_eq!(metrics.lines().next(), Some("epoch,train_loss,clean_acc"));
    assert_eq!(metrics.lines().count(), 3);
    let conn = read(train.join("connectivity.csv"));
    assert_eq!(conn.lines().count(), 1 + 3 * 4);
    assert!(train.join("masks/epoch002/probe_layer2_ch003.png").is_file());

    ok(&[
        "eval", "--checkpoint", s(&f.ckpt()), "--data", s(&f.data()), "--out", s(&f.path("e")),
        "--split", "eval-cueconflict",
    ]);
    let report = read(f.path("e").join("report.txt"));
    let field = |k: &str| -> usize {
        report
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{k}=")))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert_eq!(field("n_total"), 24);
    assert_eq!(field("n_correct_shape") + field("n_correct_texture") + field("n_other"), 24);
    let json: serde_json::Value = serde_json::from_str(&read(f.path("e").join("report.json"))).unwrap();
    assert_eq!(json["n_total"], 24);

    ok(&[
        "eval", "--checkpoint", s(&f.ckpt()), "--data", s(&f.data()), "--out", s(&f.path("c")),
        "--split", "eval-clean",
    ]);
    let clean = read(f.path("c").join("report.txt"));
    assert!(clean.contains("accuracy=") && !clean.contains("shape_bias"));

    let synth = f.path("s");
    ok(&[
        "synth", "--checkpoint", s(&f.ckpt()), "--image", s(&f.image()), "--out", s(&synth),
        "--mode", "both", "--steps", "3",
    ]);
    for mode in ["with_topk", "without_topk"] {
        assert!(synth.join(format!("synth_{mode}.png")).is_file());
        let trace = read(synth.join(format!("synth_{mode}_trace.csv")));
        assert_eq!(trace.lines().next(), Some("step,loss"));
        let losses: Vec<f64> = trace.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
        assert!(losses.windows(2).all(|w| w[1] <= w[0]));
    }

    let rec = f.path("r");
    ok(&[
        "reconstruct", "--checkpoint", s(&f.ckpt()), "--image", s(&f.image()), "--out", s(&rec),
        "--layers", "1,2", "--masks", "topk_mask,identity_mask", "--steps", "3",
    ]);
    assert!(rec.join("reconstruct.png").is_file());
    assert!(read(rec.join("reconstruct_summary.txt")).contains("edge_energy="));

    let masks = f.path("m");
    ok(&[
        "dump-masks", "--checkpoint", s(&f.ckpt()), "--image", s(&f.image()), "--out", s(&masks),
        "--rho", "1.0",
    ]);
    let pngs: Vec<PathBuf> = fs::read_dir(&masks)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    assert_eq!(pngs.len(), 4);
    for p in pngs {
        let raw = load_raw(&p).unwrap();
        assert!(raw.pixels.iter().all(|&v| v == 255));
    }
}

#[test]
fn synth_with_zero_steps_emits_the_noise_start() {
    let f = fixture();
    let a = f.path("a");
    ok(&[
        "synth", "--checkpoint", s(&f.ckpt()), "--image", s(&f.image()), "--out", s(&a),
        "--mode", "with_topk", "--steps", "0", "--seed", "5",
    ]);
    let img = load_raw(a.join("synth_with_topk.png")).unwrap();
    let noise = sslab::viz::noise_image(&[3, 32, 32], 5);
    let plane = 32 * 32;
    for i in 0..plane {
        for c in 0..3 {
            let expect = (noise.data()[c * plane + i] * 255.0).round() as u8;
            assert_eq!(img.pixels[i * img.channels + c], expect);
        }
    }
    assert_eq!(read(a.join("synth_with_topk_trace.csv")).lines().count(), 2);
}
