mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::fixtures::tiny_config;
use fec::backbone::build_model;
use fec::checkpoint::save_checkpoint;
use image::{Rgb, RgbImage};

fn fec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fec")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes an 8×8 idx dataset whose bright half (left or right) is the label.
fn write_idx(dir: &Path, prefix: &str, n: usize) {
    let mut images = vec![0, 0, 8, 3];
    images.extend((n as u32).to_be_bytes());
    images.extend(8u32.to_be_bytes());
    images.extend(8u32.to_be_bytes());
    let mut labels = vec![0, 0, 8, 1];
    labels.extend((n as u32).to_be_bytes());
    for i in 0..n {
        let label = (i % 2) as u8;
        for y in 0..8 {
            for x in 0..8 {
                let bright = (x >= 4) == (label == 1);
                images.push(if bright { 200 } else { 30 } + ((i * 7 + y * 3 + x) % 20) as u8);
            }
        }
        labels.push(label);
    }
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels).unwrap();
}

const CONFIG: &str = r#"
[model]
input_size = [16, 16]
stem_stride = 1
stage_channels = [4, 6, 8, 8]
encode_dims = [3, 3, 4, 4]
num_classes = 2

[train]
epochs = 1
warmup_epochs = 0
batch_size = 8
hflip = false

[data]
path = "data"
"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fs::create_dir(&data).unwrap();
    write_idx(&data, "train", 32);
    write_idx(&data, "t10k", 12);
    let config = dir.path().join("run.toml");
    fs::write(&config, CONFIG).unwrap();
    (dir, config)
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = fec(&["train", "--config", p(&dir.path().join("nope.toml")), "--out", p(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.toml"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let (dir, config) = setup();
    fs::write(&config, format!("{CONFIG}\nepohcs = 3\n")).unwrap();
    let out = fec(&["train", "--config", p(&config), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);
    fs::write(&config, CONFIG.replace("hflip", "hflp")).unwrap();
    assert_eq!(code(&fec(&["train", "--config", p(&config), "--out", p(&dir.path().join("o"))])), 2);
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(code(&fec(&["train"])), 2);
    assert_eq!(code(&fec(&["frobnicate"])), 2);
    assert_eq!(code(&fec(&["--version"])), 0);
}

#[test]
fn smoke_train_then_eval_and_segment() {
    let (dir, config) = setup();
    let out_dir = dir.path().join("run");
    let out = fec(&["train", "--config", p(&config), "--out", p(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let metrics = fs::read_to_string(out_dir.join("metrics.log")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 1);
    assert!(lines[0].starts_with("epoch=1 lr="));
    assert!(out_dir.join("model.fecw").is_file());
    let resolved = fs::read_to_string(out_dir.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("[model]") && resolved.contains("base_lr"));
    let log = fs::read_to_string(out_dir.join("run.log")).unwrap();
    assert!(log.contains(&format!("build {}", fec::cli::BUILD_ID)));
    assert!(log.contains(&resolved));

    let ckpt = out_dir.join("model.fecw");
    let eval = fec(&["eval", "--checkpoint", p(&ckpt), "--data", p(&dir.path().join("data"))]);
    assert_eq!(code(&eval), 0);
    let top1 = lines[0].split("val_top1=").nth(1).unwrap();
    assert!(stdout(&eval).starts_with(&format!("top1={top1} ")), "{} vs {}", stdout(&eval), lines[0]);
    assert!(stdout(&eval).contains("samples=12"));

    let img = dir.path().join("img.png");
    RgbImage::from_fn(20, 20, |x, y| Rgb([(x * 12) as u8, (y * 12) as u8, 90])).save(&img).unwrap();
    let seg = |name: &str, extra: &[&str]| {
        let o = dir.path().join(name);
        let mut args = vec!["segment", "--checkpoint", p(&ckpt), "--image", p(&img), "--out", p(&o)];
        args.extend_from_slice(extra);
        let r = fec(&args);
        (r, o)
    };
    let (r1, o1) = seg("s1", &["--k", "2", "--seed", "4"]);
    let (r2, o2) = seg("s2", &["--k", "2", "--seed", "4"]);
    assert_eq!(code(&r1), 0, "{}", String::from_utf8_lossy(&r1.stderr));
    assert_eq!(code(&r2), 0);
    for f in ["assignments.json", "level3_labels.json"] {
        assert_eq!(fs::read(o1.join(f)).unwrap(), fs::read(o2.join(f)).unwrap(), "{f}");
    }
    let dump: serde_json::Value = serde_json::from_slice(&fs::read(o1.join("assignments.json")).unwrap()).unwrap();
    assert_eq!(dump["layers"].as_array().unwrap().len(), tiny_config().records_per_image());

    let (r, o) = seg("flat", &["--k", "1", "--level", "2", "--median-radius", "1"]);
    assert_eq!(code(&r), 0);
    let overlay = image::open(o.join("level2_overlay.png")).unwrap().to_rgb8();
    let first = *overlay.get_pixel(0, 0);
    assert!(overlay.pixels().all(|px| *px == first));
    assert!(o.join("level2_blend.png").is_file());

    let (r, _) = seg("bad", &["--level", "9"]);
    assert_eq!(code(&r), 2);
    let (r, _) = seg("bad0", &["--level", "0"]);
    assert_eq!(code(&r), 2);
}

#[test]
fn eval_of_a_constant_model_prints_one_over_k() {
    let (dir, _) = setup();
    let mut model = build_model::<f32>(&tiny_config()).unwrap();
    for v in model.params.value_mut(model.head_weight).data_mut() {
        *v = 0.0;
    }
    let ckpt = dir.path().join("zero.fecw");
    save_checkpoint(&model, &ckpt).unwrap();
    let out = fec(&["eval", "--checkpoint", p(&ckpt), "--data", p(&dir.path().join("data"))]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).starts_with("top1=0.500000 "), "{}", stdout(&out));
}

#[test]
fn eval_needs_an_existing_checkpoint() {
    let (dir, _) = setup();
    let out = fec(&["eval", "--checkpoint", p(&dir.path().join("none.fecw")), "--data", p(&dir.path().join("data"))]);
    assert_eq!(code(&out), 2);
    let junk = dir.path().join("junk.fecw");
    fs::write(&junk, b"FECW not really a checkpoint").unwrap();
    assert_eq!(code(&fec(&["eval", "--checkpoint", p(&junk), "--data", p(&dir.path().join("data"))])), 2);
}

#[test]
fn gradcheck_passes_and_lists_encode_groups() {
    let out = fec(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    let encode: Vec<&str> = text.lines().filter(|l| l.starts_with("encode ")).collect();
    assert_eq!(encode.len(), 6);
    for group in ["key_proj", "value_proj", "alpha", "beta", "mlp_weight", "mlp_bias"] {
        assert!(encode.iter().any(|l| l.split_whitespace().nth(1) == Some(group)), "{group} missing");
    }
}

#[test]
fn gradcheck_fails_on_a_corrupted_backward_rule() {
    let out = fec(&["gradcheck", "--corrupt-backward", "similarity"]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn inspect_reports_presets() {
    let out = fec(&["inspect", "--preset", "small"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("stage 1 grid 56×56"));
    assert!(text.contains("stage 4 grid 7×7"));
    assert_eq!(code(&fec(&["inspect", "--preset", "huge"])), 2);
}

#[test]
fn seed_override_is_logged() {
    let (dir, config) = setup();
    let out_dir = dir.path().join("seeded");
    let out = fec(&["train", "--config", p(&config), "--out", p(&out_dir), "--seed", "7", "--similarity", "euclidean"]);
    assert_eq!(code(&out), 0);
    let resolved = fs::read_to_string(out_dir.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("seed = 7"));
    assert!(resolved.contains("similarity = \"euclidean\""));
}
