//! Loss functions: the adversarial generator objective, the Monte-Carlo task
//! objective with its KL regularizer, InfoNCE, and the total loss.
//!
//! Cross-entropy takes soft labels throughout (mixed labels are
//! distributions, not class indices). Embeddings are L2-normalized before
//! the InfoNCE similarities; the safety constraint uses the raw projection
//! outputs.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tape::{Arr, Tape, Var};

/// Loss weighting knobs shared by the objectives.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Safety-constraint weight limiting source/augmented divergence.
    pub beta: f64,
    /// Contrastive loss weight.
    pub w1: f64,
    /// Monte-Carlo sample count.
    pub k_samples: usize,
    /// InfoNCE temperature.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 1.0,
            w1: 0.1,
            k_samples: 2,
            temperature: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || self.w1 < 0.0 {
            return Err(Error::InvalidParam("beta and w1 must be >= 0".into()));
        }
        if self.k_samples < 1 {
            return Err(Error::InvalidParam("K must be >= 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidParam("temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// How the InfoNCE denominator treats the positive: the written equation
/// sums over all other 2N-1 embeddings (positive included); the SimCLR-style
/// variant drops the positive term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NceDenominator {
    #[default]
    AllOthers,
    ExcludePositive,
}

/// Mean squared L2 distance between paired embedding rows.
pub fn mean_pair_sq_dist(tape: &mut Tape, z: Var, z_plus: Var) -> Var {
    let d = tape.sub(z, z_plus);
    let sq = tape.sqr(d);
    let rows = tape.sum_rows(sq);
    tape.mean_all(rows)
}

/// Adversarial objective for the generator: minimize
/// -[ CE(logits_plus, y_plus) - beta * mean||z - z_plus||^2 ].
/// Only generator-side parameters should be trainable on the tape when this
/// loss is used; the task model receives no update from it.
pub fn generator_adv_loss(
    tape: &mut Tape,
    logits_plus: Var,
    y_plus: &Array2<f64>,
    z: Var,
    z_plus: Var,
    beta: f64,
) -> Var {
    let ce = tape.softmax_cross_entropy(logits_plus, y_plus.clone().into_dyn());
    let dist = mean_pair_sq_dist(tape, z, z_plus);
    let penalty = tape.mul_scalar(dist, beta);
    let gain = tape.sub(ce, penalty);
    tape.neg(gain)
}

/// Mean elementwise KL( N(mu, sigma^2) || N(0, 1) )
/// = mean of 0.5 * (mu^2 + sigma^2 - 1 - 2 ln sigma).
pub fn kl_diag_gaussian(tape: &mut Tape, mu: Var, sigma: Var) -> Result<Var> {
    if tape.value(sigma).iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidParam("sigma must be positive in KL".into()));
    }
    let mu2 = tape.sqr(mu);
    let s2 = tape.sqr(sigma);
    let lns = tape.ln(sigma);
    let two_lns = tape.mul_scalar(lns, 2.0);
    let sum = tape.add(mu2, s2);
    let sum = tape.sub(sum, two_lns);
    let sum = tape.add_scalar(sum, -1.0);
    let half = tape.mul_scalar(sum, 0.5);
    Ok(tape.mean_all(half))
}

/// Value-level KL for oracles and the uncertainty module.
pub fn kl_diag_gaussian_value(mu: &Arr, sigma: &Arr) -> Result<f64> {
    if sigma.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidParam("sigma must be positive in KL".into()));
    }
    let mut acc = 0.0;
    for (&m, &s) in mu.iter().zip(sigma.iter()) {
        acc += 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln());
    }
    Ok(acc / mu.len() as f64)
}

/// Monte-Carlo task objective: (1/K) sum_k CE(logits_k, y_k) + KL(mu, sigma).
/// `draws` yields one (logits, soft labels) pathway per MC sample; the caller
/// resamples epsilon and lambda inside it.
pub fn mc_task_loss(
    tape: &mut Tape,
    k_samples: usize,
    mu: Var,
    sigma: Var,
    mut draws: impl FnMut(&mut Tape, usize) -> Result<(Var, Array2<f64>)>,
) -> Result<Var> {
    if k_samples < 1 {
        return Err(Error::InvalidParam("K must be >= 1".into()));
    }
    let mut ce_acc: Option<Var> = None;
    for k in 0..k_samples {
        let (logits, y_plus) = draws(tape, k)?;
        let ce = tape.softmax_cross_entropy(logits, y_plus.into_dyn());
        ce_acc = Some(match ce_acc {
            Some(acc) => tape.add(acc, ce),
            None => ce,
        });
    }
    let ce_mean = tape.mul_scalar(ce_acc.unwrap(), 1.0 / k_samples as f64);
    let kl = kl_diag_gaussian(tape, mu, sigma)?;
    Ok(tape.add(ce_mean, kl))
}

/// L2-normalize rows of a (B, D) embedding on the tape.
pub fn l2_normalize_rows(tape: &mut Tape, z: Var) -> Var {
    let sq = tape.sqr(z);
    let norms2 = tape.sum_rows(sq);
    let norms = tape.sqrt_eps(norms2, 1e-12);
    let inv = tape.recip(norms);
    tape.scale_rows(z, inv)
}

/// InfoNCE over 2N views: rows of `z` and `z_plus` are positives of each
/// other; every anchor's denominator sums exp(sim / T) over the other 2N-1
/// embeddings. Returns the mean over all 2N anchors.
pub fn info_nce(
    tape: &mut Tape,
    z: Var,
    z_plus: Var,
    temperature: f64,
    denominator: NceDenominator,
) -> Result<Var> {
    let shape = tape.value(z).shape().to_vec();
    if shape != tape.value(z_plus).shape() {
        return Err(Error::ShapeMismatch(
            "info_nce: z and z_plus shapes differ".into(),
        ));
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::InvalidParam(
            "info_nce needs batch >= 2 (no negatives otherwise)".into(),
        ));
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidParam("temperature must be > 0".into()));
    }
    let all = tape.concat0(z, z_plus); // (2N, D)
    let normed = l2_normalize_rows(tape, all);
    let sims = tape.matmul_nt(normed, normed); // (2N, 2N)
    let scaled = tape.mul_scalar(sims, 1.0 / temperature);

    let m = 2 * n;
    // positives: i <-> i + N (mod 2N)
    let pos_idx: Vec<usize> = (0..m).map(|i| (i + n) % m).collect();
    let pos = tape.take_pairs(scaled, pos_idx.clone());

    // stabilized log-sum-exp over j != i (optionally also j != positive):
    // exp(s - rowmax), mask, sum, ln, + rowmax
    let vals = tape.value(scaled).clone();
    let v2 = vals.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut row_max = vec![f64::NEG_INFINITY; m];
    let mut mask = Array2::<f64>::ones((m, m));
    for i in 0..m {
        mask[[i, i]] = 0.0;
        if denominator == NceDenominator::ExcludePositive {
            mask[[i, pos_idx[i]]] = 0.0;
        }
        for j in 0..m {
            if mask[[i, j]] > 0.0 {
                row_max[i] = row_max[i].max(v2[[i, j]]);
            }
        }
    }
    let mut shift = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        for j in 0..m {
            shift[[i, j]] = -row_max[i];
        }
    }
    let shifted = tape.add_const(scaled, shift.into_dyn());
    let ex = tape.exp(shifted);
    let masked = tape.mul_const(ex, mask.into_dyn());
    let denom_sum = tape.sum_rows(masked);
    let log_denom = tape.ln(denom_sum);
    let log_denom = tape.add_const(
        log_denom,
        ndarray::Array1::from(row_max).into_dyn(),
    );

    let per_anchor = tape.sub(log_denom, pos);
    Ok(tape.mean_all(per_anchor))
}

/// Value-level double-loop InfoNCE reference (the oracle in the test suite
/// imports this as an independent cross-check of shapes only; the acceptance
/// oracle re-implements it from scratch).
pub fn info_nce_value(
    z: &Array2<f64>,
    z_plus: &Array2<f64>,
    temperature: f64,
    denominator: NceDenominator,
) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(z.clone().into_dyn());
    let b = tape.constant(z_plus.clone().into_dyn());
    let loss = info_nce(&mut tape, a, b, temperature, denominator)?;
    Ok(tape.scalar_value(loss))
}

/// Total loss for the minimization phase: task + w1 * nce.
pub fn total_loss(tape: &mut Tape, task: Var, nce: Option<Var>, w1: f64) -> Var {
    match nce {
        Some(n) if w1 != 0.0 => {
            let weighted = tape.mul_scalar(n, w1);
            tape.add(task, weighted)
        }
        _ => task,
    }
}
