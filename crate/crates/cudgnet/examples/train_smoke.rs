//! End-to-end smoke training run. Uses the real CIFAR-10 tree when
//! `CUDGNET_DATA_ROOT` is set, otherwise writes a synthetic stand-in so the
//! whole pipeline (TC, generator min-max, contrastive loss, checkpointing)
//! can be watched in under a minute.
//!
//! Run: `cargo run --release --example train_smoke`

use cudgnet::data;
use cudgnet::models::TaskModelConfig;
use cudgnet::objectives::LossWeights;
use cudgnet::synth;
use cudgnet::training::{evaluate_dataset, MetricsLog, TrainConfig, Trainer};

fn main() -> cudgnet::Result<()> {
    let tmp = std::env::temp_dir().join("cudgnet_train_smoke");
    let data_root = match std::env::var("CUDGNET_DATA_ROOT") {
        Ok(root) => std::path::PathBuf::from(root),
        Err(_) => {
            println!("CUDGNET_DATA_ROOT not set; writing a synthetic CIFAR tree");
            synth::write_cifar10_dir(&tmp, 500, 100, 0)?;
            tmp.clone()
        }
    };

    let cfg = TrainConfig {
        seed: 0,
        epochs: 1,
        batch_size: 50,
        subset_size: Some(500),
        model: TaskModelConfig {
            depth: 10,
            widen_factor: 1,
            ..Default::default()
        },
        loss: LossWeights {
            k_samples: 1,
            ..Default::default()
        },
        ..Default::default()
    };
    let source = data::load_source(&data_root, cfg.subset_size, cfg.seed)?;
    println!("training on {} images, 1 epoch, tiny WRN-10-1", source.len());

    let mut trainer = Trainer::new(cfg)?;
    let ckpt_dir = tmp.join("checkpoints");
    let mut log = MetricsLog::to_file(&tmp.join("metrics.ndjson"))?;
    let start = std::time::Instant::now();
    trainer.run(&source, Some(&ckpt_dir), &mut log)?;
    println!(
        "finished {} steps in {:.1}s",
        log.lines.len(),
        start.elapsed().as_secs_f64()
    );

    let min_totals: Vec<f64> = log
        .lines
        .iter()
        .filter_map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).ok()?;
            (v["phase"] == "min").then(|| v["total"].as_f64())?
        })
        .collect();
    println!(
        "min-phase loss: {:.3} -> {:.3}",
        min_totals.first().unwrap_or(&f64::NAN),
        min_totals.last().unwrap_or(&f64::NAN)
    );
    let acc = evaluate_dataset(&mut trainer.model, &trainer.cfg.normalization, &source, 100);
    println!("clean train-subset accuracy after 1 epoch: {acc:.1}%");
    println!("checkpoints under {}", ckpt_dir.display());
    Ok(())
}
