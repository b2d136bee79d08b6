#![allow(dead_code)]

use std::path::{Path, PathBuf};

use cil_lab::{parse_config, ExperimentConfig};

/// A small, fast experiment: 6 classes in 3 tasks.
pub fn tiny_toml(algorithm: &str, extra: &str) -> String {
    format!(
        r#"algorithm = "{algorithm}"
memory_size = 24
init_cls = 2
increment = 2
convnet_type = "mlp-32"
output_dir = "out/{algorithm}"

[dataset]
kind = "synthetic"
num_classes = 6
dim = 8
train_per_class = 30
test_per_class = 15

[optimizer]
lr = 0.05
epochs = 3
batch_size = 16
{extra}"#
    )
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

pub fn tiny_config(dir: &Path, algorithm: &str, extra: &str) -> ExperimentConfig {
    let path = write_config(dir, &format!("{algorithm}.toml"), &tiny_toml(algorithm, extra));
    parse_config(&path).unwrap()
}

/// Parses `results.csv` into its `A_b` column.
pub fn csv_accuracies(text: &str) -> Vec<f64> {
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("stage,n_seen_classes,A_b,old_acc,new_acc"));
    lines.map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect()
}
