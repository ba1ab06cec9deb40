#![allow(dead_code)]

use std::path::Path;

use evadapt::datasets::{generate_toy_dataset, load_dataset, Dataset, DatasetSpec, ToyConfig};
use evadapt::trainer::TrainConfig;

/// Writes a toy dataset under `root` and returns a matching training config.
pub fn toy_setup(root: &Path, classes: usize, per_class: usize, eval_per_class: usize) -> TrainConfig {
    let toy = ToyConfig {
        classes,
        per_class,
        eval_per_class,
        ..ToyConfig::default()
    };
    generate_toy_dataset(&toy, 7, &root.join("data")).unwrap();
    let mut cfg = TrainConfig::toy();
    cfg.data = DatasetSpec {
        root: root.join("data"),
        classes: Some(classes),
        ..DatasetSpec::default()
    };
    cfg.output.dir = root.join("run");
    cfg
}

pub fn load(cfg: &TrainConfig) -> Dataset {
    load_dataset(&cfg.data).unwrap()
}
