//! Shared fixtures for the integration suites: synthetic datasets written in
//! the real on-disk formats, and small TOML configs.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use cudgnet::synth;

/// Synthetic CIFAR-10 tree (train batches + test batch) under a temp root.
pub fn fake_cifar10(root: &Path, n_train: usize, n_test: usize, seed: u64) {
    synth::write_cifar10_dir(root, n_train, n_test, seed).expect("write cifar tree");
}

/// Synthetic CIFAR-10-C stacks for all 19 corruptions.
pub fn fake_cifar10c(root: &Path, rows_per_severity: usize, seed: u64) {
    synth::write_cifar10c_dir(root, rows_per_severity, seed).expect("write cifar10c tree");
}

/// Minimal training config TOML for a tiny model and full component stack.
pub fn write_tiny_config(
    dir: &Path,
    seed: u64,
    epochs: usize,
    batch_size: usize,
    subset: Option<usize>,
) -> PathBuf {
    let subset_line = match subset {
        Some(n) => format!("subset_size = {n}\n"),
        None => String::new(),
    };
    let toml = format!(
        "seed = {seed}\n\
         epochs = {epochs}\n\
         batch_size = {batch_size}\n\
         {subset_line}\
         [model]\n\
         depth = 10\n\
         widen_factor = 1\n\
         [loss]\n\
         k_samples = 1\n\
         [tc]\n\
         k_max = 1\n"
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, toml).expect("write config");
    path
}
