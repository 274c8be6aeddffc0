//! Corruption-robustness evaluation: per-corruption accuracies rolled up
//! into the weather/blur/noise/digital category means and the overall Avg.
//!
//! With `CUDGNET_DATA_ROOT` set this evaluates real CIFAR-10-C slices;
//! otherwise it fabricates subsampled synthetic stacks, trains briefly, and
//! evaluates those (layout and arithmetic identical, numbers obviously not).
//!
//! Run: `cargo run --release --example evaluate_corruptions`

use cudgnet::data::{self, CorruptionSpec, Normalization};
use cudgnet::models::TaskModelConfig;
use cudgnet::objectives::LossWeights;
use cudgnet::synth;
use cudgnet::training::{evaluate_corruptions, MetricsLog, TrainConfig, Trainer};

fn main() -> cudgnet::Result<()> {
    let tmp = std::env::temp_dir().join("cudgnet_eval_demo");
    let (data_root, rows) = match std::env::var("CUDGNET_DATA_ROOT") {
        Ok(root) => (std::path::PathBuf::from(root), 10_000),
        Err(_) => {
            println!("CUDGNET_DATA_ROOT not set; writing synthetic stacks (16 rows/severity)");
            synth::write_cifar10_dir(&tmp, 200, 50, 3)?;
            synth::write_cifar10c_dir(&tmp, 16, 3)?;
            (tmp.clone(), 16)
        }
    };

    let cfg = TrainConfig {
        seed: 1,
        epochs: 2,
        batch_size: 20,
        subset_size: Some(200),
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
    let mut trainer = Trainer::new(cfg)?;
    let mut log = MetricsLog::in_memory();
    trainer.run(&source, None, &mut log)?;

    let specs = CorruptionSpec::grid(&data::all_corruption_names(), &[1, 3, 5])?;
    let report = evaluate_corruptions(
        &mut trainer.model,
        &Normalization::default(),
        &data_root,
        &specs,
        64,
        rows,
    )?;

    println!("\nper-category accuracy (%):");
    for (cat, acc) in &report.per_category {
        println!("  {cat:<8} {acc:6.2}");
    }
    println!("  overall  {:6.2}", report.overall);
    println!("\nworst five corruptions:");
    let mut rows: Vec<_> = report.per_corruption.iter().collect();
    rows.sort_by(|a, b| a.1.partial_cmp(b.1).unwrap());
    for (name, acc) in rows.iter().take(5) {
        println!("  {name:<20} {acc:6.2}");
    }
    Ok(())
}
