use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hair::data::save_image;
use hair::degrade::gen_clean;
use hair::train::{save_checkpoint, Checkpoint};
use hair::{HairModel, ModelConfig, Tensor};

fn hair(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hair"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY: &str = "\
train.steps = 3
train.batch = 2
train.patch = 32
train.eval_every = 2
data.train_images = 4
data.val_images = 2
data.image_size = 32
";

fn tiny_run(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    let cfg = dir.join(format!("{name}.cfg"));
    std::fs::write(&cfg, format!("{TINY}paths.out_dir = {name}\n")).unwrap();
    let out = hair(&["train", "--config", cfg.to_str().unwrap()], dir);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    (dir.join(name).join("model.ckpt"), dir.join(name).join("metrics.csv"))
}

fn identity_checkpoint(dir: &Path) -> PathBuf {
    let mut model = HairModel::<f32>::new(ModelConfig::toy(), 3).unwrap();
    let shape = model.store().get("out.conv").unwrap().shape().to_vec();
    model.store_mut().set("out.conv", Tensor::zeros(&shape)).unwrap();
    let path = dir.join("identity.ckpt");
    save_checkpoint(&Checkpoint::from_model(&model, None, 0, 0), &path).unwrap();
    path
}

#[test]
fn distributivity_suite_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = hair(&["check", "--suite", "distributivity"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
}

#[test]
fn training_twice_writes_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt_a, log_a) = tiny_run(dir.path(), "a");
    let (ckpt_b, log_b) = tiny_run(dir.path(), "b");
    let log = std::fs::read(&log_a).unwrap();
    assert_eq!(log, std::fs::read(&log_b).unwrap());
    assert_eq!(std::fs::read(&ckpt_a).unwrap(), std::fs::read(&ckpt_b).unwrap());
    let text = String::from_utf8(log).unwrap();
    assert_eq!(text.lines().count(), 3, "header plus rows at steps 2 and 3:\n{text}");
}

#[test]
fn identity_output_conv_reproduces_the_input_file() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = identity_checkpoint(dir.path());
    let input = dir.path().join("in.png");
    save_image(&gen_clean(11, 40, 24).unwrap(), &input).unwrap();
    let out = hair(&["restore", "--ckpt", "identity.ckpt", "--in", "in.png", "--out", "out.png"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(ckpt.exists());
    assert_eq!(std::fs::read(&input).unwrap(), std::fs::read(dir.path().join("out.png")).unwrap());
}

#[test]
fn restore_keeps_image_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = tiny_run(dir.path(), "run");
    for (h, w) in [(16, 16), (17, 33), (45, 20)] {
        let input = dir.path().join(format!("in_{h}x{w}.png"));
        let output = dir.path().join(format!("out_{h}x{w}.png"));
        save_image(&gen_clean(h as u64, h, w).unwrap(), &input).unwrap();
        let out = hair(
            &["restore", "--ckpt", ckpt.to_str().unwrap(), "--in", input.to_str().unwrap(), "--out", output.to_str().unwrap()],
            dir.path(),
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let img = hair::data::load_image(&output).unwrap();
        assert_eq!(img.shape(), &[3, h, w]);
    }
}

#[test]
fn eval_and_giv_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = tiny_run(dir.path(), "run");
    let ckpt = ckpt.to_str().unwrap();
    let out = hair(
        &["eval", "--ckpt", ckpt, "--synthetic", "noise:sigma=25", "--synthetic", "haze", "--images", "2", "--size", "32"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "label,n,psnr,ssim");
    assert!(lines[1].starts_with("noise,2,") && lines[2].starts_with("haze,2,"), "{csv}");

    std::fs::write(
        dir.path().join("manifest.csv"),
        "id,source,spec,seed\nx,seed:5,rain,1\ny,seed:6,noise:sigma=15+haze,2\n",
    )
    .unwrap();
    let out = hair(&["giv", "--ckpt", ckpt, "--data", ".", "--size", "32", "--out", "givs.csv"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("givs.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    let width = 2 * ModelConfig::toy().base_channels;
    assert_eq!(rows[0].len(), 2 + width);
    assert_eq!(&rows[1][..2], &["x", "rain"]);
    assert_eq!(&rows[2][..2], &["y", "noise+haze"]);
    assert!(rows[1..].iter().all(|r| r.len() == 2 + width));
}

#[test]
fn invalid_config_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    for (text, key) in [
        ("model.channels = 3\nmodel.heads = 2,2,2,2\n", "model.heads"),
        ("train.batch = 0\n", "train.batch"),
        ("train.lr = fast\n", "train.lr"),
        ("model.chanels = 8\n", "model.chanels"),
    ] {
        std::fs::write(dir.path().join("bad.cfg"), text).unwrap();
        let out = hair(&["train", "--config", "bad.cfg"], dir.path());
        assert_eq!(code(&out), 2, "{text}: {}", stderr(&out));
        assert!(stderr(&out).contains(key), "{text}: {}", stderr(&out));
    }
}

#[test]
fn missing_or_corrupt_files_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = identity_checkpoint(dir.path());
    let bytes = std::fs::read(&ckpt).unwrap();
    std::fs::write(dir.path().join("short.ckpt"), &bytes[..bytes.len() / 2]).unwrap();
    std::fs::write(dir.path().join("junk.png"), b"not an image").unwrap();
    for args in [
        vec!["train", "--config", "absent.cfg"],
        vec!["restore", "--ckpt", "absent.ckpt", "--in", "a.png", "--out", "b.png"],
        vec!["restore", "--ckpt", "short.ckpt", "--in", "a.png", "--out", "b.png"],
        vec!["restore", "--ckpt", "identity.ckpt", "--in", "absent.png", "--out", "b.png"],
        vec!["restore", "--ckpt", "identity.ckpt", "--in", "junk.png", "--out", "b.png"],
        vec!["eval", "--ckpt", "identity.ckpt", "--data", "nowhere"],
    ] {
        let out = hair(&args, dir.path());
        assert_eq!(code(&out), 3, "{args:?}: {}", stderr(&out));
    }
}

#[test]
fn bad_synthetic_spec_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    identity_checkpoint(dir.path());
    let out = hair(&["eval", "--ckpt", "identity.ckpt", "--synthetic", "smog"], dir.path());
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("--synthetic"));
}
