//! Acceptance suite. Each test covers one release criterion and prints one
//! `ACCEPTANCE <name>: PASS` line on success (run with `--nocapture` to see
//! them). Oracles are re-implemented here, independent of the library paths
//! they check.
//!
//! Two criteria need the real CIFAR-10 / CIFAR-10-C datasets and multi-hour
//! desk-scale training; they are `#[ignore]`d by default and run with
//! `cargo test --test acceptance -- --ignored` on a machine with
//! `CUDGNET_DATA_ROOT` set. Their default-run placeholders print DEFERRED.

mod common;

use std::time::Instant;

use cudgnet::data::{self, Normalization};
use cudgnet::generator::GenOverrides;
use cudgnet::models::{CudgNetModel, ForwardMode, TaskModelConfig};
use cudgnet::nn::{ForwardCtx, Trainable};
use cudgnet::objectives;
use cudgnet::rng::{stream_rng, RngBundle, Stream};
use cudgnet::style_ops;
use cudgnet::tape::{finite_difference_grad, Arr, Tape};
use cudgnet::training::{
    ablation_ladder, evaluate_corruptions, ComponentToggles, MetricsLog, TrainConfig, Trainer,
};
use cudgnet::uncertainty;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_pcg::Pcg64;

// ---------------------------------------------------------------- kernels

/// Independent rank-matching oracle: explicit stable double argsort.
fn oracle_sort_match(w: &[f64], r: &[f64]) -> Vec<f64> {
    let mut tau: Vec<usize> = (0..w.len()).collect();
    tau.sort_by(|&a, &b| w[a].partial_cmp(&w[b]).unwrap());
    let mut kappa: Vec<usize> = (0..r.len()).collect();
    kappa.sort_by(|&a, &b| r[a].partial_cmp(&r[b]).unwrap());
    let mut out = vec![0.0; w.len()];
    for i in 0..w.len() {
        out[tau[i]] = r[kappa[i]];
    }
    out
}

fn random_vector(rng: &mut Pcg64, len: usize, quantized: bool) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let v: f64 = rng.gen_range(-100.0..100.0);
            if quantized {
                (v / 10.0).round() * 10.0 // forces ties
            } else {
                v
            }
        })
        .collect()
}

#[test]
fn kernel_oracle_suite() {
    let start = Instant::now();
    let mut rng = stream_rng(2024, Stream::Eval);

    // 1000 random vectors, lengths 1..=257, half with ties: exact agreement
    for trial in 0..1000 {
        let len = rng.gen_range(1..=257);
        let quantized = trial % 2 == 0;
        let w = random_vector(&mut rng, len, quantized);
        let r = random_vector(&mut rng, len, quantized);
        let got = style_ops::sort_matching(&w, &r).expect("valid inputs");
        let want = oracle_sort_match(&w, &r);
        assert_eq!(got, want, "trial {trial} len {len}");
    }

    // efdmix closed-form value oracle within 1e-6
    for trial in 0..200 {
        let len = rng.gen_range(2..=64);
        let w = random_vector(&mut rng, len, trial % 3 == 0);
        let r = random_vector(&mut rng, len, false);
        let d: f64 = rng.gen_range(0.0..=1.0);
        let got =
            style_ops::efdmix(&w, &r, style_ops::MixWeight::new(d).unwrap()).unwrap();
        let matched = oracle_sort_match(&w, &r);
        for i in 0..len {
            let want = d * w[i] + (1.0 - d) * matched[i];
            assert!(
                (got[i] - want).abs() <= 1e-6,
                "trial {trial} idx {i}: {} vs {want}",
                got[i]
            );
        }
    }

    // gradient contract: d(out)/d(w) = I (not d*I), d(out)/d(r) = (1-d) on
    // rank-matched positions, both within 1e-4
    for trial in 0..20 {
        let len = rng.gen_range(2..=12);
        let w = random_vector(&mut rng, len, false);
        let r = random_vector(&mut rng, len, false);
        let d: f64 = rng.gen_range(0.05..=0.95);
        let upstream = random_vector(&mut rng, len, false);

        let mut tape = Tape::new();
        let wv = tape.leaf(
            ndarray::Array3::from_shape_vec((1, 1, len), w.clone())
                .unwrap()
                .into_dyn(),
            true,
        );
        let rv = tape.leaf(
            ndarray::Array3::from_shape_vec((1, 1, len), r.clone())
                .unwrap()
                .into_dyn(),
            true,
        );
        let out = style_ops::efdmix_op(&mut tape, wv, rv, vec![d]);
        let u = tape.constant(
            ndarray::Array3::from_shape_vec((1, 1, len), upstream.clone())
                .unwrap()
                .into_dyn(),
        );
        let prod = tape.mul(out, u);
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss);

        // identity Jacobian: J^T u == u exactly
        let gw = grads.get(wv).unwrap();
        for (a, b) in gw.iter().zip(upstream.iter()) {
            assert!((a - b).abs() < 1e-4, "trial {trial}: grad_w {a} vs {b}");
        }

        // style gradient: scatter of (1-d) through the frozen rank match
        let mut tau: Vec<usize> = (0..len).collect();
        tau.sort_by(|&a, &b| w[a].partial_cmp(&w[b]).unwrap());
        let mut kappa: Vec<usize> = (0..len).collect();
        kappa.sort_by(|&a, &b| r[a].partial_cmp(&r[b]).unwrap());
        let mut gr_expect = vec![0.0; len];
        for i in 0..len {
            gr_expect[kappa[i]] += (1.0 - d) * upstream[tau[i]];
        }
        let gr = grads.get(rv).unwrap();
        for (a, b) in gr.iter().zip(gr_expect.iter()) {
            assert!((a - b).abs() < 1e-4, "trial {trial}: grad_r {a} vs {b}");
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "kernel oracle suite took {elapsed:.1}s (limit 10s)");
    println!("ACCEPTANCE kernel_oracle_suite: PASS ({elapsed:.2}s)");
}

// ----------------------------------------------------------------- losses

/// Independent double-loop InfoNCE oracle.
fn oracle_info_nce(z: &Array2<f64>, zp: &Array2<f64>, t: f64) -> f64 {
    let n = z.nrows();
    let m = 2 * n;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
    for i in 0..n {
        rows.push(z.row(i).to_vec());
    }
    for i in 0..n {
        rows.push(zp.row(i).to_vec());
    }
    for row in rows.iter_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    let sim = |a: &Vec<f64>, b: &Vec<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / t
    };
    let mut total = 0.0;
    for i in 0..m {
        let pos = (i + n) % m;
        let num = sim(&rows[i], &rows[pos]).exp();
        let mut den = 0.0;
        for (j, row) in rows.iter().enumerate() {
            if j != i {
                den += sim(&rows[i], row).exp();
            }
        }
        total += -(num / den).ln();
    }
    total / m as f64
}

fn oracle_kl(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(sigma.iter())
        .map(|(&m, &s)| 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln()))
        .sum::<f64>()
        / mu.len() as f64
}

#[test]
fn loss_oracle_suite() {
    let start = Instant::now();
    let mut rng = stream_rng(7, Stream::Eval);

    // KL closed form on 100 random (mu, sigma) within 1e-6
    for _ in 0..100 {
        let n = rng.gen_range(1..=32);
        let mu: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..4.0)).collect();
        let mut tape = Tape::new();
        let m = tape.constant(ArrayD::from_shape_vec(IxDyn(&[n]), mu.clone()).unwrap());
        let s = tape.constant(ArrayD::from_shape_vec(IxDyn(&[n]), sigma.clone()).unwrap());
        let kl = objectives::kl_diag_gaussian(&mut tape, m, s).unwrap();
        let got = tape.scalar_value(kl);
        let want = oracle_kl(&mu, &sigma);
        assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
    }

    // InfoNCE vs double-loop reference within 1e-6; ln 3 special case
    for _ in 0..50 {
        let n = rng.gen_range(2..=8);
        let d = rng.gen_range(2..=16);
        let z = Array2::from_shape_fn((n, d), |_| rng.gen_range(-2.0..2.0));
        let zp = Array2::from_shape_fn((n, d), |_| rng.gen_range(-2.0..2.0));
        let t = rng.gen_range(0.05..2.0);
        let got = objectives::info_nce_value(
            &z,
            &zp,
            t,
            objectives::NceDenominator::AllOthers,
        )
        .unwrap();
        let want = oracle_info_nce(&z, &zp, t);
        assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
    }
    let z_same = Array2::from_elem((2, 4), 0.3);
    let ln3 = objectives::info_nce_value(
        &z_same,
        &z_same,
        1.0,
        objectives::NceDenominator::AllOthers,
    )
    .unwrap();
    assert!((ln3 - 3.0f64.ln()).abs() <= 1e-6, "identical case: {ln3}");

    // gradients of all three loss families vs finite differences, 1e-3
    // relative, on 8-element toy instances
    let rel_ok = |analytic: &Arr, numeric: &Arr| {
        for (a, b) in analytic.iter().zip(numeric.iter()) {
            assert!(
                (a - b).abs() <= 1e-3 * b.abs().max(1.0),
                "gradient {a} vs fd {b}"
            );
        }
    };

    // info_nce wrt z
    let z0 = Array2::from_shape_fn((2, 4), |_| rng.gen_range(-1.0..1.0)).into_dyn();
    let zp0 = Array2::from_shape_fn((2, 4), |_| rng.gen_range(-1.0..1.0));
    {
        let mut tape = Tape::new();
        let z = tape.leaf(z0.clone(), true);
        let p = tape.constant(zp0.clone().into_dyn());
        let loss =
            objectives::info_nce(&mut tape, z, p, 0.5, objectives::NceDenominator::AllOthers)
                .unwrap();
        let grads = tape.backward(loss);
        let mut f = |v: &Arr| {
            let z2 = v.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
            oracle_info_nce(&z2, &zp0, 0.5)
        };
        let numeric = finite_difference_grad(&mut f, &z0, 1e-6);
        rel_ok(grads.get(z).unwrap(), &numeric);
    }

    // kl wrt mu and sigma
    {
        let mu0 = ArrayD::from_shape_vec(
            IxDyn(&[8]),
            (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let s0 = ArrayD::from_shape_vec(
            IxDyn(&[8]),
            (0..8).map(|_| rng.gen_range(0.2..2.0)).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let m = tape.leaf(mu0.clone(), true);
        let s = tape.leaf(s0.clone(), true);
        let kl = objectives::kl_diag_gaussian(&mut tape, m, s).unwrap();
        let grads = tape.backward(kl);
        let mut fm = |v: &Arr| {
            oracle_kl(v.as_slice().unwrap(), s0.as_slice().unwrap())
        };
        rel_ok(
            grads.get(m).unwrap(),
            &finite_difference_grad(&mut fm, &mu0, 1e-6),
        );
        let mut fs = |v: &Arr| {
            oracle_kl(mu0.as_slice().unwrap(), v.as_slice().unwrap())
        };
        rel_ok(
            grads.get(s).unwrap(),
            &finite_difference_grad(&mut fs, &s0, 1e-6),
        );
    }

    // generator adversarial loss wrt logits and z_plus
    {
        let logits0 = Array2::from_shape_fn((2, 4), |_| rng.gen_range(-1.0..1.0)).into_dyn();
        let mut y = Array2::<f64>::zeros((2, 4));
        y[[0, 1]] = 1.0;
        y[[1, 2]] = 1.0;
        let zq = Array2::from_shape_fn((2, 4), |_| rng.gen_range(-1.0..1.0));
        let zp0 = Array2::from_shape_fn((2, 4), |_| rng.gen_range(-1.0..1.0)).into_dyn();
        let beta = 0.8;

        let run_val = |l: &Arr, zpv: &Arr| -> f64 {
            let mut t = Tape::new();
            let lv = t.constant(l.clone());
            let za = t.constant(zq.clone().into_dyn());
            let zb = t.constant(zpv.clone());
            let adv = objectives::generator_adv_loss(&mut t, lv, &y, za, zb, beta);
            t.scalar_value(adv)
        };
        let mut tape = Tape::new();
        let lv = tape.leaf(logits0.clone(), true);
        let za = tape.constant(zq.clone().into_dyn());
        let zb = tape.leaf(zp0.clone(), true);
        let adv = objectives::generator_adv_loss(&mut tape, lv, &y, za, zb, beta);
        let grads = tape.backward(adv);
        let mut fl = |v: &Arr| run_val(v, &zp0);
        rel_ok(
            grads.get(lv).unwrap(),
            &finite_difference_grad(&mut fl, &logits0, 1e-6),
        );
        let mut fz = |v: &Arr| run_val(&logits0, v);
        rel_ok(
            grads.get(zb).unwrap(),
            &finite_difference_grad(&mut fz, &zp0, 1e-6),
        );
    }

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "loss oracle suite took {elapsed:.1}s (limit 30s)");
    println!("ACCEPTANCE loss_oracle_suite: PASS ({elapsed:.2}s)");
}

// ------------------------------------------------------- identity collapse

#[test]
fn identity_collapse() {
    // mu = 0 (zero-init heads), sigma -> 0 (softplus driven to its floor),
    // d = 1, lambda = 1, TC repetition count k = 0 (identity on inputs):
    // the perturbed forward must match the clean forward within 1e-3.
    let cfg = TaskModelConfig {
        depth: 16,
        widen_factor: 2,
        ..Default::default()
    };
    let mut rng = stream_rng(99, Stream::Init);
    let mut model = CudgNetModel::new(cfg, &mut rng).unwrap();
    if let Some(b) = &mut model.generator.sigma_head.bias {
        b.value.fill(-40.0); // softplus(-40) + 1e-6 ~ 1e-6
    }
    let overrides = GenOverrides {
        force_d: Some(1.0),
        force_lambda: Some(1.0),
        force_epsilon_zero: false, // sigma -> 0 already suppresses the noise
        force_lottery: Some(false),
    };

    let mut data_rng = stream_rng(100, Stream::Eval);
    let mut style = stream_rng(101, Stream::StyleMix);
    let mut pert = stream_rng(101, Stream::Perturbation);
    let mut mixup = stream_rng(101, Stream::Mixup);
    let y = {
        let mut y = Array2::<f64>::zeros((2, 10));
        y[[0, 0]] = 1.0;
        y[[1, 1]] = 1.0;
        y
    };

    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 3, 32, 32]), |_| data_rng.gen_range(-1.0..1.0));

        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(true, false, Trainable::None);
        let clean = model.forward_clean(&mut tape, &mut ctx, &x);
        let clean_logits = tape.value(clean.logits).clone();

        let mut tape2 = Tape::new();
        let mut ctx2 = ForwardCtx::new(true, false, Trainable::None);
        let pert_out = model
            .forward(
                &mut tape2,
                &mut ctx2,
                &x,
                &y,
                ForwardMode::Perturbed,
                0.1,
                0.1,
                &mut style,
                &mut pert,
                &mut mixup,
                &overrides,
            )
            .unwrap();
        let pert_logits = tape2.value(pert_out.logits).clone();
        let err = (&clean_logits - &pert_logits)
            .mapv(f64::abs)
            .fold(0.0f64, |a, &b| a.max(b));
        worst = worst.max(err);
        assert!(err < 1e-3, "identity collapse violated: {err:.3e}");
    }
    println!("ACCEPTANCE identity_collapse: PASS (worst deviation {worst:.2e} over 100 batches)");
}

// ------------------------------------------------------------- determinism

#[test]
fn determinism_two_epochs_bit_compatible() {
    let tmp = tempfile::tempdir().unwrap();
    common::fake_cifar10(tmp.path(), 20, 10, 5);
    let source = data::load_source(tmp.path(), Some(20), 5).unwrap();

    let cfg = TrainConfig {
        seed: 31,
        epochs: 2,
        batch_size: 10,
        subset_size: Some(20),
        model: TaskModelConfig {
            depth: 10,
            widen_factor: 1,
            ..Default::default()
        },
        loss: cudgnet::objectives::LossWeights {
            k_samples: 1,
            ..Default::default()
        },
        ..Default::default()
    };

    let run = |dir: &std::path::Path| -> Vec<u8> {
        let mut trainer = Trainer::new(cfg.clone()).unwrap();
        let log_path = dir.join("metrics.ndjson");
        let mut log = MetricsLog::to_file(&log_path).unwrap();
        trainer.run(&source, None, &mut log).unwrap();
        std::fs::read(&log_path).unwrap()
    };
    let a = run(&tmp.path().join("a"));
    let b = run(&tmp.path().join("b"));
    assert!(!a.is_empty());
    assert_eq!(a, b, "metric logs are not bit-compatible");
    println!(
        "ACCEPTANCE determinism_two_epochs: PASS ({} identical log bytes)",
        a.len()
    );
}

// ------------------------------------------------- single-pass speed ratio

#[test]
fn uncertainty_single_pass_speedup() {
    // one tap+generator forward vs a 30-sample stochastic baseline on the
    // same batch and hardware; required margin is 5x
    let cfg = TaskModelConfig {
        depth: 16,
        widen_factor: 1,
        ..Default::default()
    };
    let mut rng = stream_rng(55, Stream::Init);
    let mut model = CudgNetModel::new(cfg, &mut rng).unwrap();
    let norm = Normalization::default();
    let mut data_rng = stream_rng(56, Stream::Eval);
    let x = ArrayD::from_shape_fn(IxDyn(&[16, 3, 32, 32]), |_| data_rng.gen_range(0.0..1.0));

    // warm up allocators and caches
    let _ = uncertainty::predicted_sigma_mean(&mut model, &norm, &x).unwrap();

    let mut ms_single = f64::INFINITY;
    for _ in 0..3 {
        let (_, ms) = uncertainty::predicted_sigma_mean(&mut model, &norm, &x).unwrap();
        ms_single = ms_single.min(ms);
    }
    let mut rngs = RngBundle::from_seed(57);
    let (_, ms_bayes) = uncertainty::bayesian_baseline(&mut model, &norm, &x, 30, &mut rngs).unwrap();

    let ratio = ms_bayes / ms_single;
    assert!(
        ratio >= 5.0,
        "single pass only {ratio:.1}x faster ({ms_single:.2} ms vs {ms_bayes:.2} ms)"
    );
    println!(
        "ACCEPTANCE uncertainty_single_pass_speedup: PASS ({ratio:.0}x, {ms_single:.2} ms vs {ms_bayes:.2} ms; published reference: 0.15 vs 5.1 ms/batch)"
    );
}

// ------------------------------------------- synthetic protocol smoke (not
// the desk-scale criterion; directional sanity only)

#[test]
fn uncertainty_protocol_synthetic_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    common::fake_cifar10(tmp.path(), 40, 16, 8);
    common::fake_cifar10c(tmp.path(), 16, 8);

    let cfg = TrainConfig {
        seed: 3,
        epochs: 2,
        batch_size: 8,
        subset_size: Some(40),
        model: TaskModelConfig {
            depth: 10,
            widen_factor: 1,
            ..Default::default()
        },
        loss: cudgnet::objectives::LossWeights {
            k_samples: 1,
            ..Default::default()
        },
        ..Default::default()
    };
    let source = data::load_source(tmp.path(), Some(40), 3).unwrap();
    let mut trainer = Trainer::new(cfg).unwrap();
    let mut log = MetricsLog::in_memory();
    trainer.run(&source, None, &mut log).unwrap();

    let val = data::load_test(tmp.path()).unwrap();
    let norm = Normalization::default();
    let sigma_s = uncertainty::calibrate_sigma_s(&mut trainer.model, &norm, &val, 16).unwrap();

    // single-pass score should rise with severity on the synthetic stacks
    let mut scores = Vec::new();
    let mut severities = Vec::new();
    for severity in [1u8, 3, 5] {
        let ds = data::load_cifar10c_slice_rows(tmp.path(), "gaussian_noise", severity, 16).unwrap();
        let idx: Vec<usize> = (0..16).collect();
        let (x, _) = ds.batch(&idx);
        let u = uncertainty::single_pass_uncertainty(&mut trainer.model, &norm, &x, sigma_s)
            .unwrap();
        scores.push(u.score);
        severities.push(severity as f64);
    }
    let rho = uncertainty::spearman(&scores, &severities);
    assert!(
        rho > 0.0,
        "synthetic severity ladder should push sigma up: scores {scores:?}"
    );
    println!(
        "ACCEPTANCE uncertainty_protocol (synthetic smoke): PASS (severity rho = {rho:.2}; desk-scale criterion deferred, see ignored tests)"
    );
}

#[test]
fn desk_scale_criteria_deferred_notice() {
    // Placeholder that documents the two long-running criteria in the
    // default run; the faithful implementations are the #[ignore]d tests
    // below.
    println!(
        "ACCEPTANCE desk_scale_directional_experiment: DEFERRED (needs CIFAR-10/CIFAR-10-C under CUDGNET_DATA_ROOT and hours of compute; run `cargo test --test acceptance -- --ignored --nocapture`)"
    );
    println!(
        "ACCEPTANCE uncertainty_protocol_desk_scale: DEFERRED (same prerequisites; published full-scale reference Avg 85.53 and component ladder 53.01 -> 85.53 are context, not desk-scale targets)"
    );
}

// ------------------------------------------------------- desk scale (real
// data, multi-hour; run explicitly with --ignored)

fn desk_env() -> Option<(std::path::PathBuf, usize)> {
    let root = std::env::var("CUDGNET_DATA_ROOT").ok()?;
    let width = std::env::var("CUDGNET_DESK_WIDTH")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(4);
    Some((std::path::PathBuf::from(root), width))
}

fn desk_config(seed: u64, width: usize, toggles: ComponentToggles) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 20,
        batch_size: 64,
        subset_size: Some(5000),
        model: TaskModelConfig {
            depth: 16,
            widen_factor: width,
            ..Default::default()
        },
        components: toggles,
        ..Default::default()
    }
}

/// Desk-scale directional experiment (severities {1,3,5}, all 19
/// corruptions): full model beats ERM by >= 2.0 points averaged over 3
/// seeds, and no cumulative ablation step loses more than 1.0 point.
#[test]
#[ignore = "requires real CIFAR-10(-C) under CUDGNET_DATA_ROOT; hours of compute"]
fn desk_scale_directional_experiment() {
    let (root, width) = desk_env().expect("set CUDGNET_DATA_ROOT to run desk-scale tests");
    let specs =
        data::CorruptionSpec::grid(&data::all_corruption_names(), &[1, 3, 5]).unwrap();
    let norm = Normalization::default();

    let mut gains = Vec::new();
    for seed in [0u64, 1, 2] {
        let source = data::load_source(&root, Some(5000), seed).unwrap();

        let mut erm = Trainer::new(desk_config(seed, width, ComponentToggles::baseline()))
            .unwrap();
        let mut log = MetricsLog::in_memory();
        erm.run(&source, None, &mut log).unwrap();
        let erm_avg = evaluate_corruptions(&mut erm.model, &norm, &root, &specs, 256, 10_000)
            .unwrap()
            .overall;

        let mut full =
            Trainer::new(desk_config(seed, width, ComponentToggles::default())).unwrap();
        let mut log = MetricsLog::in_memory();
        full.run(&source, None, &mut log).unwrap();
        let full_avg = evaluate_corruptions(&mut full.model, &norm, &root, &specs, 256, 10_000)
            .unwrap()
            .overall;

        println!("seed {seed}: ERM {erm_avg:.2} vs full {full_avg:.2}");
        gains.push(full_avg - erm_avg);
    }
    let mean_gain = gains.iter().sum::<f64>() / gains.len() as f64;
    assert!(
        mean_gain >= 2.0,
        "full model gains only {mean_gain:.2} points over ERM (need >= 2.0)"
    );

    // cumulative ladder: no step degrades Avg by more than 1.0 vs its
    // predecessor (one seed)
    let base = desk_config(0, width, ComponentToggles::default());
    let source = data::load_source(&root, Some(5000), 0).unwrap();
    let rows = ablation_ladder(&base, &source, None, |t| {
        evaluate_corruptions(&mut t.model, &norm, &root, &specs, 256, 10_000)
    })
    .unwrap();
    let mut prev = f64::NEG_INFINITY;
    for (name, report) in &rows {
        assert!(
            report.overall >= prev - 1.0,
            "{name} degraded Avg to {:.2} (predecessor {:.2})",
            report.overall,
            prev
        );
        println!("{name}: Avg {:.2}", report.overall);
        prev = report.overall;
    }
    println!(
        "ACCEPTANCE desk_scale_directional_experiment: PASS (mean gain {mean_gain:.2} points)"
    );
}

/// Desk-scale uncertainty protocol: Spearman(single-pass score, Bayesian
/// 30-sample variance) >= 0.6 over the 19 corruption domains, plus the 5x
/// speed margin, on a trained desk-scale model.
#[test]
#[ignore = "requires real CIFAR-10(-C) under CUDGNET_DATA_ROOT and a desk-scale run; hours of compute"]
fn uncertainty_protocol_desk_scale() {
    let (root, width) = desk_env().expect("set CUDGNET_DATA_ROOT to run desk-scale tests");
    let norm = Normalization::default();

    // use a pre-trained checkpoint when given, otherwise train one here
    let mut trainer = match std::env::var("CUDGNET_DESK_CHECKPOINT") {
        Ok(path) => Trainer::from_checkpoint(std::path::Path::new(&path)).unwrap(),
        Err(_) => {
            let source = data::load_source(&root, Some(5000), 0).unwrap();
            let mut t =
                Trainer::new(desk_config(0, width, ComponentToggles::default())).unwrap();
            let mut log = MetricsLog::in_memory();
            t.run(&source, None, &mut log).unwrap();
            t
        }
    };

    let sigma_s = match trainer.sigma_s_ref {
        Some(s) => s,
        None => {
            let val = data::load_test(&root).unwrap();
            uncertainty::calibrate_sigma_s(&mut trainer.model, &norm, &val, 256).unwrap()
        }
    };

    let mut rngs = RngBundle::from_seed(0x5eed);
    let mut records = Vec::new();
    let mut per_domain_rho = 0usize;
    for name in data::all_corruption_names() {
        let mut scores = Vec::new();
        let mut variances = Vec::new();
        let mut sevs = Vec::new();
        let mut ms_single = 0.0;
        let mut ms_bayes = 0.0;
        for severity in 1..=5u8 {
            let ds = data::load_cifar10c_slice(&root, name, severity).unwrap();
            let idx: Vec<usize> = (0..128.min(ds.len())).collect();
            let (x, _) = ds.batch(&idx);
            let u =
                uncertainty::single_pass_uncertainty(&mut trainer.model, &norm, &x, sigma_s)
                    .unwrap();
            let (var, msb) =
                uncertainty::bayesian_baseline(&mut trainer.model, &norm, &x, 30, &mut rngs)
                    .unwrap();
            scores.push(u.score);
            variances.push(var);
            sevs.push(severity as f64);
            ms_single += u.wall_time_ms_per_batch;
            ms_bayes += msb;
        }
        if uncertainty::spearman(&scores, &sevs) > 0.0 {
            per_domain_rho += 1;
        }
        records.push(uncertainty::DomainComparison {
            domain: name.to_string(),
            severity: 3,
            single_pass_score: scores.iter().sum::<f64>() / scores.len() as f64,
            bayesian_variance: variances.iter().sum::<f64>() / variances.len() as f64,
            ms_single: ms_single / 5.0,
            ms_bayes: ms_bayes / 5.0,
        });
    }
    let summary = uncertainty::compare(&records).unwrap();
    println!(
        "spearman {:.3}, speedup {:.1}x, severity-monotone domains {per_domain_rho}/19",
        summary.spearman, summary.speedup
    );
    assert!(
        summary.spearman >= 0.6,
        "Spearman {:.3} below 0.6",
        summary.spearman
    );
    assert!(summary.speedup >= 5.0, "speedup {:.1}x below 5x", summary.speedup);
    assert!(
        per_domain_rho >= 12,
        "score rises with severity on only {per_domain_rho}/19 domains (need >= 12)"
    );
    println!("ACCEPTANCE uncertainty_protocol_desk_scale: PASS");
}
