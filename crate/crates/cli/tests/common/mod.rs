#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A small but complete run: 64×128 scenes, tiny schedule.
pub const TINY: &str = r#"
[data]
height = 64
width = 128
num_classes = 8
train_images = 4
eval_images = 3
train_seed = 5
eval_seed = 6

[models.vit]
kind = "toy_vit"
name = "vit"
token_size = 8
dim = 16

[models.cnn]
kind = "toy_cnn"
name = "cnn"
channels = 4
downscale = 1.0

[[models.targets]]
kind = "toy_cnn"
name = "target"
seed = 3
channels = 4
downscale = 1.0

[pretrain]
epochs = 1

[schedule]
stage1_epochs = 2
stage2_epochs = 1
batches_per_epoch = 1
batch_size = 2
attack_iterations = 2

[patch]
size = 16
"#;

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p
}

pub fn segpatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segpatch")).args(args).output().unwrap()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}
