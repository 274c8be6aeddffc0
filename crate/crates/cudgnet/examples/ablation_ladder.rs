//! The cumulative component ladder (baseline, +G, +TC, +Style,
//! +Contrastive) at micro scale on synthetic data. The desk-scale run on
//! real CIFAR-10(-C) goes through the CLI:
//! `cudgnet ablate --config desk.toml --severities 1,3,5`.
//!
//! Run: `cargo run --release --example ablation_ladder`

use cudgnet::data::{self, CorruptionSpec, Normalization};
use cudgnet::models::TaskModelConfig;
use cudgnet::objectives::LossWeights;
use cudgnet::synth;
use cudgnet::training::{ablation_ladder, evaluate_corruptions, ladder_table, TrainConfig};

fn main() -> cudgnet::Result<()> {
    let tmp = std::env::temp_dir().join("cudgnet_ablation_demo");
    synth::write_cifar10_dir(&tmp, 100, 20, 4)?;
    synth::write_cifar10c_dir(&tmp, 12, 4)?;

    let cfg = TrainConfig {
        seed: 6,
        epochs: 1,
        batch_size: 10,
        subset_size: Some(100),
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
    let source = data::load_source(&tmp, cfg.subset_size, cfg.seed)?;
    let specs = CorruptionSpec::grid(
        &["fog", "defocus_blur", "gaussian_noise", "contrast"],
        &[1, 3],
    )?;
    let norm = Normalization::default();
    let root = tmp.clone();

    let rows = ablation_ladder(&cfg, &source, None, |trainer| {
        evaluate_corruptions(&mut trainer.model, &norm, &root, &specs, 24, 12)
    })?;
    println!("{}", ladder_table(&rows));
    println!("(micro scale on synthetic data; accuracies are not meaningful here)");
    Ok(())
}
