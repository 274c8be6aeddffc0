//! Synthetic CIFAR-layout data for smoke runs, demos, and tests.
//!
//! Images carry a class-dependent blocky pattern plus noise, so small models
//! can genuinely fit them; corruption stacks perturb the clean images with a
//! per-corruption noise style whose strength grows with severity. Files are
//! written in the same on-disk formats as the real datasets (binary batches
//! and NPY stacks), so every loader runs its production path.

use std::path::Path;

use rand::Rng;
use rand_pcg::Pcg64;

use crate::data::{Dataset, IMG_BYTES, IMG_SIDE, NUM_CLASSES};
use crate::error::Result;
use crate::npy::{write_npy_i64, write_npy_u8};

fn seeded(seed: u64, salt: u64) -> Pcg64 {
    Pcg64::new(
        ((seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15)) as u128) << 64 | 0xcafef00dd15ea5e5,
        0xa02bdbf7bb3c0a7 | 1,
    )
}

fn pattern_pixel(class: usize, c: usize, h: usize, w: usize) -> u8 {
    match c {
        0 => (30 + 20 * (class % 5)) as u8,
        1 => (220 - 18 * (class / 2)) as u8,
        _ => {
            if (h / 4 + w / 4) % 2 == class % 2 {
                200
            } else {
                55
            }
        }
    }
}

/// Class-balanced in-memory dataset (class of image i is `i % 10`).
pub fn dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = seeded(seed, 1);
    let mut images = Vec::with_capacity(n * IMG_BYTES);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % NUM_CLASSES;
        labels.push(class as u8);
        for c in 0..3 {
            for h in 0..IMG_SIDE {
                for w in 0..IMG_SIDE {
                    let base = pattern_pixel(class, c, h, w) as i32;
                    let noise: i32 = rng.gen_range(-12..=12);
                    images.push((base + noise).clamp(0, 255) as u8);
                }
            }
        }
    }
    Dataset::new(images, labels).expect("consistent synthetic data")
}

fn write_bin_batch(path: &Path, ds: &Dataset, range: std::ops::Range<usize>) -> Result<()> {
    let mut raw = Vec::with_capacity(range.len() * (IMG_BYTES + 1));
    let (imgs, labels) = ds.batch(&range.clone().collect::<Vec<_>>());
    let flat: Vec<u8> = imgs.iter().map(|&v| (v * 255.0).round() as u8).collect();
    for (i, _) in range.enumerate() {
        raw.push(labels[i]);
        raw.extend_from_slice(&flat[i * IMG_BYTES..(i + 1) * IMG_BYTES]);
    }
    std::fs::write(path, raw)?;
    Ok(())
}

/// Write a CIFAR-10-shaped binary tree under `root/cifar-10-batches-bin/`:
/// five train batches of `n_train / 5` records plus a test batch.
pub fn write_cifar10_dir(root: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
    assert_eq!(n_train % 5, 0, "n_train must split into 5 batches");
    let dir = root.join("cifar-10-batches-bin");
    std::fs::create_dir_all(&dir)?;
    let train = dataset(n_train, seed);
    let per = n_train / 5;
    for b in 0..5 {
        write_bin_batch(
            &dir.join(format!("data_batch_{}.bin", b + 1)),
            &train,
            b * per..(b + 1) * per,
        )?;
    }
    let test = dataset(n_test, seed.wrapping_add(1));
    write_bin_batch(&dir.join("test_batch.bin"), &test, 0..n_test)?;
    Ok(())
}

/// Write all 19 corruption stacks plus labels under `root/CIFAR-10-C/`, with
/// `rows_per_severity` images per severity (the published layout uses
/// 10000). Noise strength scales with severity, so uncertainty scores have
/// a real gradient to find.
pub fn write_cifar10c_dir(root: &Path, rows_per_severity: usize, seed: u64) -> Result<()> {
    let dir = root.join("CIFAR-10-C");
    std::fs::create_dir_all(&dir)?;
    let clean = dataset(rows_per_severity, seed.wrapping_add(1));
    let idxs: Vec<usize> = (0..rows_per_severity).collect();
    let (clean_f, labels) = clean.batch(&idxs);
    let clean_u8: Vec<u8> = clean_f.iter().map(|&v| (v * 255.0).round() as u8).collect();

    for (ci, (name, _)) in crate::data::CORRUPTIONS.iter().enumerate() {
        let mut rng = seeded(seed, 100 + ci as u64);
        let mut stack = Vec::with_capacity(5 * rows_per_severity * IMG_BYTES);
        for severity in 1..=5u32 {
            let strength = 6 * severity as i32 + (ci as i32 % 3) * 2;
            for img in 0..rows_per_severity {
                let src = &clean_u8[img * IMG_BYTES..(img + 1) * IMG_BYTES];
                // HWC layout, like the published stacks
                for h in 0..IMG_SIDE {
                    for w in 0..IMG_SIDE {
                        for c in 0..3 {
                            let v = src[c * IMG_SIDE * IMG_SIDE + h * IMG_SIDE + w] as i32;
                            let noise: i32 = rng.gen_range(-strength..=strength);
                            stack.push((v + noise).clamp(0, 255) as u8);
                        }
                    }
                }
            }
        }
        write_npy_u8(
            &dir.join(format!("{name}.npy")),
            &[5 * rows_per_severity, IMG_SIDE, IMG_SIDE, 3],
            &stack,
        )?;
    }
    let all_labels: Vec<i64> = (0..5)
        .flat_map(|_| labels.iter().map(|&l| l as i64))
        .collect();
    write_npy_i64(
        &dir.join("labels.npy"),
        &[5 * rows_per_severity],
        &all_labels,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;

    #[test]
    fn synthetic_cifar_tree_loads_through_production_loaders() {
        let tmp = tempfile::tempdir().unwrap();
        write_cifar10_dir(tmp.path(), 50, 20, 3).unwrap();
        let full = data::load_source(tmp.path(), None, 0).unwrap();
        assert_eq!(full.len(), 50);
        let sub = data::load_source(tmp.path(), Some(20), 1).unwrap();
        assert_eq!(sub.len(), 20);
        let mut hist = [0usize; 10];
        for &l in &sub.labels {
            hist[l as usize] += 1;
        }
        assert!(hist.iter().all(|&h| h == 2), "{hist:?}");
        let test = data::load_test(tmp.path()).unwrap();
        assert_eq!(test.len(), 20);
    }

    #[test]
    fn synthetic_corruption_stacks_slice_by_severity() {
        let tmp = tempfile::tempdir().unwrap();
        write_cifar10c_dir(tmp.path(), 8, 4).unwrap();
        let labels = data::cifar10c_labels(tmp.path()).unwrap();
        assert_eq!(labels.len(), 40);
        let s1 = data::load_cifar10c_slice_rows(tmp.path(), "fog", 1, 8).unwrap();
        let s5 = data::load_cifar10c_slice_rows(tmp.path(), "fog", 5, 8).unwrap();
        assert_eq!(s1.len(), 8);
        assert_eq!(s5.len(), 8);
        assert_eq!(s1.labels, s5.labels, "labels shared across severities");
        // severity 5 deviates more from severity 1 than from itself
        let (a, _) = s1.batch(&[0]);
        let (b, _) = s5.batch(&[0]);
        let diff = (&a - &b).mapv(f64::abs).mean().unwrap();
        assert!(diff > 0.0);
    }
}
