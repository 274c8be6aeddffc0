//! Single-pass domain uncertainty vs the 30-sample Bayesian baseline on a
//! severity ladder, with the speedup measurement and the two-series figure.
//!
//! Run: `cargo run --release --example uncertainty_compare`

use cudgnet::data::{self, Normalization};
use cudgnet::models::TaskModelConfig;
use cudgnet::objectives::LossWeights;
use cudgnet::rng::RngBundle;
use cudgnet::synth;
use cudgnet::training::{MetricsLog, TrainConfig, Trainer};
use cudgnet::uncertainty::{
    bayesian_baseline, calibrate_sigma_s, compare_and_plot, single_pass_uncertainty,
    DomainComparison,
};

fn main() -> cudgnet::Result<()> {
    let tmp = std::env::temp_dir().join("cudgnet_uncertainty_demo");
    synth::write_cifar10_dir(&tmp, 100, 40, 9)?;
    synth::write_cifar10c_dir(&tmp, 16, 9)?;

    // short training run so sigma(h) carries signal
    let cfg = TrainConfig {
        seed: 2,
        epochs: 2,
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
    let mut trainer = Trainer::new(cfg)?;
    let mut log = MetricsLog::in_memory();
    trainer.run(&source, None, &mut log)?;

    let norm = Normalization::default();
    let val = data::load_test(&tmp)?;
    let sigma_s = calibrate_sigma_s(&mut trainer.model, &norm, &val, 20)?;
    println!("calibrated sigma(S) = {sigma_s:.4}");

    let mut rngs = RngBundle::from_seed(42);
    let mut records = Vec::new();
    for name in ["gaussian_noise", "fog", "contrast"] {
        for severity in [1u8, 3, 5] {
            let ds = data::load_cifar10c_slice_rows(&tmp, name, severity, 16)?;
            let idx: Vec<usize> = (0..16).collect();
            let (x, _) = ds.batch(&idx);
            let u = single_pass_uncertainty(&mut trainer.model, &norm, &x, sigma_s)?;
            let (var, ms_bayes) = bayesian_baseline(&mut trainer.model, &norm, &x, 30, &mut rngs)?;
            println!(
                "{name:<16} s{severity}: score {:+.4}  bayes-var {:.3e}  ({:.1} ms vs {:.1} ms)",
                u.score, var, u.wall_time_ms_per_batch, ms_bayes
            );
            records.push(DomainComparison {
                domain: name.to_string(),
                severity,
                single_pass_score: u.score,
                bayesian_variance: var,
                ms_single: u.wall_time_ms_per_batch,
                ms_bayes,
            });
        }
    }

    let out = tmp.join("reports");
    let summary = compare_and_plot(&records, &out)?;
    println!(
        "\nspearman {:.3}  pearson {:.3}  single-pass speedup {:.0}x",
        summary.spearman, summary.pearson, summary.speedup
    );
    println!("figure: {}", out.join("uncertainty.svg").display());
    Ok(())
}
