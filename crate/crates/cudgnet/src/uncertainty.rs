//! Single-pass domain-uncertainty scoring and the sampling-based Bayesian
//! baseline it is compared against.
//!
//! The generator's predicted perturbation scale sigma is the only learned
//! sigma in the system; its mean over a batch from a new domain T, relative
//! to the calibrated source reference, gives the score
//! `(sigma(T) - sigma(S)) / sigma(S)` in one forward pass through the tap
//! layers and the perturbation net. The baseline instead runs the stochastic
//! perturbed forward many times and measures predictive variance.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::generator::GenOverrides;
use crate::models::CudgNetModel;
use crate::nn::ForwardCtx;
use crate::rng::RngBundle;
use crate::style_ops::BatchMixPlan;
use crate::tape::{Arr, Tape};

/// Relative-sigma uncertainty of one batch/domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainUncertainty {
    pub score: f64,
    pub sigma_t: f64,
    pub sigma_s_ref: f64,
    pub wall_time_ms_per_batch: f64,
}

/// One row of the single-pass vs Bayesian comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainComparison {
    pub domain: String,
    pub severity: u8,
    pub single_pass_score: f64,
    pub bayesian_variance: f64,
    pub ms_single: f64,
    pub ms_bayes: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub spearman: f64,
    pub pearson: f64,
    /// mean ms_bayes / mean ms_single
    pub speedup: f64,
}

/// Mean predicted sigma over one normalized batch: a single forward through
/// the pre-tap layers and the perturbation net (the rest of the network is
/// not evaluated). Returns (mean sigma, wall milliseconds).
pub fn predicted_sigma_mean(
    model: &mut CudgNetModel,
    norm: &Normalization,
    x_raw: &Arr,
) -> Result<(f64, f64)> {
    let start = Instant::now();
    let mut x = x_raw.clone();
    norm.apply(&mut x);
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::eval();
    let xv = tape.constant(x);
    let h = model.backbone.forward_to_tap(&mut tape, &mut ctx, xv);
    let params = model.generator.forward(&mut tape, &mut ctx, h)?;
    let sigma = tape.value(params.sigma).mean().unwrap_or(0.0);
    Ok((sigma, start.elapsed().as_secs_f64() * 1e3))
}

/// Mean generator-predicted sigma over a full split (single pass), stored
/// with the checkpoint as sigma(S).
pub fn calibrate_sigma_s(
    model: &mut CudgNetModel,
    norm: &Normalization,
    source_val: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    if source_val.is_empty() {
        return Err(Error::Dataset("calibration split is empty".into()));
    }
    let idxs: Vec<usize> = (0..source_val.len()).collect();
    let mut weighted = 0.0;
    let mut count = 0usize;
    for chunk in idxs.chunks(batch_size) {
        let (x, _) = source_val.batch(chunk);
        let (sigma, _) = predicted_sigma_mean(model, norm, &x)?;
        weighted += sigma * chunk.len() as f64;
        count += chunk.len();
    }
    let sigma_s = weighted / count as f64;
    let init_sigma = 2.0f64.ln() + crate::generator::SIGMA_FLOOR;
    if (sigma_s - init_sigma).abs() < 1e-6 {
        eprintln!(
            "warning: calibrated sigma(S) = {sigma_s:.6} is at the generator's \
             initialization value; the generator looks untrained"
        );
    }
    Ok(sigma_s)
}

/// Single-pass uncertainty of one batch from a (possibly unseen) domain.
pub fn single_pass_uncertainty(
    model: &mut CudgNetModel,
    norm: &Normalization,
    x_raw: &Arr,
    sigma_s_ref: f64,
) -> Result<DomainUncertainty> {
    if x_raw.shape()[0] == 0 {
        return Err(Error::Dataset("empty batch".into()));
    }
    if sigma_s_ref <= 0.0 {
        return Err(Error::InvalidParam(format!(
            "sigma_s_ref must be positive, got {sigma_s_ref}"
        )));
    }
    let (sigma_t, ms) = predicted_sigma_mean(model, norm, x_raw)?;
    Ok(DomainUncertainty {
        score: (sigma_t - sigma_s_ref) / sigma_s_ref,
        sigma_t,
        sigma_s_ref,
        wall_time_ms_per_batch: ms,
    })
}

/// Sampling-based baseline: `n_samples` stochastic perturbed forwards, mean
/// over (example, class) of the variance of the softmax outputs. Returns
/// (mean predictive variance, wall milliseconds for the whole batch).
pub fn bayesian_baseline(
    model: &mut CudgNetModel,
    norm: &Normalization,
    x_raw: &Arr,
    n_samples: usize,
    rngs: &mut RngBundle,
) -> Result<(f64, f64)> {
    if n_samples < 2 {
        return Err(Error::InvalidParam(
            "bayesian baseline needs n_samples >= 2".into(),
        ));
    }
    let batch = x_raw.shape()[0];
    if batch == 0 {
        return Err(Error::Dataset("empty batch".into()));
    }
    let start = Instant::now();
    let mut x = x_raw.clone();
    norm.apply(&mut x);
    let classes = model.config().num_classes;
    // uniform dummy labels: the label path does not touch the logits
    let y = ndarray::Array2::<f64>::from_elem((batch, classes), 1.0 / classes as f64);

    let mut sum = vec![0.0f64; batch * classes];
    let mut sumsq = vec![0.0f64; batch * classes];
    for _ in 0..n_samples {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval();
        let xv = tape.constant(x.clone());
        let h = model.backbone.forward_to_tap(&mut tape, &mut ctx, xv);
        let plan = if batch >= 2 {
            BatchMixPlan::sample(batch, 0.1, &mut rngs.style_mix)?
        } else {
            BatchMixPlan::identity(batch)
        };
        let setup = model.setup_perturbation(&mut tape, &mut ctx, h, plan, batch >= 2)?;
        let draw = model.perturbed_draw(
            &mut tape,
            &mut ctx,
            &setup,
            &y,
            0.1,
            &mut rngs.perturbation,
            &mut rngs.mixup,
            &GenOverrides::default(),
        )?;
        let logits = tape.value(draw.logits);
        let l2 = logits.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        for (i, row) in l2.rows().into_iter().enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (k, e) in exps.iter().enumerate() {
                let p = e / z;
                sum[i * classes + k] += p;
                sumsq[i * classes + k] += p * p;
            }
        }
    }
    let n = n_samples as f64;
    let mut var_acc = 0.0;
    for i in 0..batch * classes {
        let mean = sum[i] / n;
        var_acc += (sumsq[i] / n - mean * mean).max(0.0);
    }
    let variance = var_acc / (batch * classes) as f64;
    Ok((variance, start.elapsed().as_secs_f64() * 1e3))
}

/// Average ranks (ties share the mean rank).
fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = mean_rank;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

/// Pair single-pass and baseline series computed separately. The two lists
/// must cover the same (domain, severity) sequence.
pub fn pair_series(
    singles: &[(String, u8, DomainUncertainty)],
    baselines: &[(String, u8, f64, f64)],
) -> Result<Vec<DomainComparison>> {
    if singles.len() != baselines.len() {
        return Err(Error::InvalidParam(format!(
            "domain lists differ: {} single-pass entries vs {} baseline entries",
            singles.len(),
            baselines.len()
        )));
    }
    let mut out = Vec::with_capacity(singles.len());
    for ((sd, ss, u), (bd, bs, var, ms_bayes)) in singles.iter().zip(baselines.iter()) {
        if sd != bd || ss != bs {
            return Err(Error::InvalidParam(format!(
                "domain lists differ: {sd} s{ss} vs {bd} s{bs}"
            )));
        }
        out.push(DomainComparison {
            domain: sd.clone(),
            severity: *ss,
            single_pass_score: u.score,
            bayesian_variance: *var,
            ms_single: u.wall_time_ms_per_batch,
            ms_bayes: *ms_bayes,
        });
    }
    Ok(out)
}

/// Correlate and summarize paired per-domain scores.
pub fn compare(records: &[DomainComparison]) -> Result<ComparisonSummary> {
    if records.len() < 2 {
        return Err(Error::InvalidParam(
            "need at least 2 domains to correlate".into(),
        ));
    }
    let scores: Vec<f64> = records.iter().map(|r| r.single_pass_score).collect();
    let bayes: Vec<f64> = records.iter().map(|r| r.bayesian_variance).collect();
    let ms_single: f64 =
        records.iter().map(|r| r.ms_single).sum::<f64>() / records.len() as f64;
    let ms_bayes: f64 = records.iter().map(|r| r.ms_bayes).sum::<f64>() / records.len() as f64;
    Ok(ComparisonSummary {
        spearman: spearman(&scores, &bayes),
        pearson: pearson(&scores, &bayes),
        speedup: ms_bayes / ms_single.max(1e-9),
    })
}

pub fn comparison_csv(records: &[DomainComparison]) -> String {
    let mut s =
        String::from("domain,severity,single_pass_score,bayesian_variance,ms_single,ms_bayes\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{:.6},{:.6e},{:.4},{:.4}\n",
            r.domain, r.severity, r.single_pass_score, r.bayesian_variance, r.ms_single, r.ms_bayes
        ));
    }
    s
}

/// Emit CSV + summary JSON + a two-series SVG figure into `out_dir`.
pub fn compare_and_plot(records: &[DomainComparison], out_dir: &Path) -> Result<ComparisonSummary> {
    let summary = compare(records)?;
    crate::report::write_text(&out_dir.join("uncertainty.csv"), &comparison_csv(records))?;
    crate::report::write_text(
        &out_dir.join("uncertainty_summary.json"),
        &serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::Other(format!("summary json: {e}")))?,
    )?;
    let labels: Vec<String> = records
        .iter()
        .map(|r| format!("{}-s{}", r.domain, r.severity))
        .collect();
    let scores: Vec<f64> = records.iter().map(|r| r.single_pass_score).collect();
    let bayes: Vec<f64> = records.iter().map(|r| r.bayesian_variance).collect();
    let svg = crate::report::two_series_svg(
        "Domain uncertainty: single-pass score vs Bayesian variance",
        &labels,
        ("single-pass score", &scores),
        ("Bayesian variance", &bayes),
    );
    crate::report::write_text(&out_dir.join("uncertainty.svg"), &svg)?;
    Ok(summary)
}
