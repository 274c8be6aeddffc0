//! Domain-augmentation generator: variational feature perturbations, the
//! uncertainty-conditioned mixup head, and the feature-space augmentation
//! pathway they form together.
//!
//! The generator taps an intermediate feature map `h` of the task model and
//! predicts per-element Gaussian parameters (mu, sigma). A perturbation
//! `e = mu + sigma * eps` (reparameterized, `eps ~ N(0, I)`) is added to the
//! style-mixed feature, giving `h_plus = EFDMix(h, r) + e`. A small head maps
//! the pooled (mu, sigma) to Beta parameters (a, b) and a lottery probability
//! tau; one `lambda ~ Beta(a, b)` per sample blends the style-mixed feature
//! with `h_plus`, and the label is mixed with a (possibly lottery-smoothed)
//! copy of itself with the same lambda.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rand_pcg::Pcg64;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ForwardCtx, Init, Linear, Param};
use crate::tape::{Arr, Tape, Var};

pub const SIGMA_FLOOR: f64 = 1e-6;
pub const SIGMA_CAP: f64 = 5.0;
pub const MIXUP_PARAM_FLOOR: f64 = 1e-3;

/// Per-element Gaussian parameters tapped from the generator, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct PerturbationParams {
    pub mu: Var,
    pub sigma: Var,
}

/// Per-sample mixup parameters predicted from (mu, sigma): Beta(a, b) shape
/// parameters and the label-smoothing lottery probability.
#[derive(Debug, Clone)]
pub struct MixupParams {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub tau_lottery: Vec<f64>,
}

/// Tape handles for the mixup head outputs (for gradient probes).
#[derive(Debug, Clone, Copy)]
pub struct MixupParamVars {
    pub a: Var,
    pub b: Var,
    pub tau: Var,
}

/// Two parallel single-conv heads for mu and pre-sigma.
/// sigma = min(softplus(pre) + 1e-6, sigma_cap), so it is strictly positive
/// and bounded away from divergence.
pub struct PerturbationNet {
    pub mu_head: Conv2d,
    pub sigma_head: Conv2d,
    pub channels: usize,
    pub sigma_cap: f64,
}

impl PerturbationNet {
    /// Heads start zeroed: mu = 0, sigma = softplus(0) + 1e-6 everywhere.
    pub fn new(channels: usize) -> Self {
        Self {
            mu_head: Conv2d::new_zeroed("gen.mu", channels, channels, 3),
            sigma_head: Conv2d::new_zeroed("gen.sigma", channels, channels, 3),
            channels,
            sigma_cap: SIGMA_CAP,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &mut ForwardCtx, h: Var) -> Result<PerturbationParams> {
        let hc = tape.value(h).shape().to_vec();
        if hc.len() != 4 || hc[1] != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "perturbation net built for {} channels, feature has shape {:?}",
                self.channels, hc
            )));
        }
        let mu = self.mu_head.forward(tape, ctx, h);
        let pre = self.sigma_head.forward(tape, ctx, h);
        let sp = tape.softplus(pre);
        let floored = tape.add_scalar(sp, SIGMA_FLOOR);
        let sigma = tape.clamp_max(floored, self.sigma_cap);
        Ok(PerturbationParams { mu, sigma })
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.mu_head.collect(out);
        self.sigma_head.collect(out);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.mu_head.collect_mut(out);
        self.sigma_head.collect_mut(out);
    }
}

/// One fully connected layer over the pooled (mu, sigma) maps producing
/// (a, b, tau_lottery) per sample.
pub struct MixupHead {
    pub fc: Linear,
}

impl MixupHead {
    pub fn new(channels: usize, init: &mut Init) -> Self {
        Self {
            fc: Linear::new("mixup.fc", 2 * channels, 3, true, init),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        ctx: &mut ForwardCtx,
        params: PerturbationParams,
    ) -> MixupParamVars {
        let mu_pool = tape.global_avg_pool(params.mu);
        let sigma_pool = tape.global_avg_pool(params.sigma);
        let cat = tape.concat1(mu_pool, sigma_pool);
        let out = self.fc.forward(tape, ctx, cat);
        let a_raw = tape.slice_col(out, 0);
        let b_raw = tape.slice_col(out, 1);
        let t_raw = tape.slice_col(out, 2);
        let a_sp = tape.softplus(a_raw);
        let a = tape.add_scalar(a_sp, MIXUP_PARAM_FLOOR);
        let b_sp = tape.softplus(b_raw);
        let b = tape.add_scalar(b_sp, MIXUP_PARAM_FLOOR);
        let tau = tape.sigmoid(t_raw);
        MixupParamVars { a, b, tau }
    }

    pub fn values(&self, tape: &Tape, vars: MixupParamVars) -> MixupParams {
        MixupParams {
            a: tape.value(vars.a).iter().copied().collect(),
            b: tape.value(vars.b).iter().copied().collect(),
            tau_lottery: tape.value(vars.tau).iter().copied().collect(),
        }
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.fc.collect(out);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.fc.collect_mut(out);
    }
}

/// Test/probe knobs forcing the stochastic pieces to fixed values.
#[derive(Debug, Clone, Default)]
pub struct GenOverrides {
    pub force_d: Option<f64>,
    pub force_lambda: Option<f64>,
    pub force_epsilon_zero: bool,
    pub force_lottery: Option<bool>,
}

/// Draw the reparameterization noise for one MC sample.
pub fn sample_epsilon(shape: &[usize], rng: &mut Pcg64, force_zero: bool) -> Arr {
    if force_zero {
        return Arr::zeros(ndarray::IxDyn(shape));
    }
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Arr::from_shape_vec(ndarray::IxDyn(shape), data).unwrap()
}

/// h_plus = style + mu + sigma * eps. Differentiable in mu, sigma and style.
pub fn perturb(tape: &mut Tape, style: Var, params: PerturbationParams, eps: Arr) -> Var {
    let scaled = tape.mul_const(params.sigma, eps);
    let e = tape.add(params.mu, scaled);
    tape.add(style, e)
}

/// One sampled realization of the mixup: per-sample lambda and lottery.
#[derive(Debug, Clone)]
pub struct MixDraw {
    pub lambda: Vec<f64>,
    pub lottery: Vec<bool>,
}

pub fn sample_mix_draw(
    params: &MixupParams,
    rng: &mut Pcg64,
    overrides: &GenOverrides,
) -> Result<MixDraw> {
    let b = params.a.len();
    let mut lambda = Vec::with_capacity(b);
    let mut lottery = Vec::with_capacity(b);
    for i in 0..b {
        let l = match overrides.force_lambda {
            Some(v) => v,
            None => {
                let beta = Beta::new(params.a[i], params.b[i]).map_err(|e| {
                    Error::InvalidParam(format!(
                        "Beta({}, {}): {e}",
                        params.a[i], params.b[i]
                    ))
                })?;
                beta.sample(rng)
            }
        };
        lambda.push(l);
        let fires = match overrides.force_lottery {
            Some(v) => v,
            None => rng.gen_range(0.0..1.0) < params.tau_lottery[i],
        };
        lottery.push(fires);
    }
    Ok(MixDraw { lambda, lottery })
}

fn validate_label_dist(y: &Array2<f64>) -> Result<()> {
    for row in y.rows() {
        let mut sum = 0.0;
        for &v in row.iter() {
            if !v.is_finite() || v < -1e-12 {
                return Err(Error::InvalidParam(
                    "label distribution has negative or non-finite entries".into(),
                ));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParam(format!(
                "label distribution row sums to {sum}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Uniform label smoothing: (1 - eps) * y + eps / num_classes.
pub fn smooth_labels(y: &Array2<f64>, eps: f64) -> Array2<f64> {
    let k = y.ncols() as f64;
    y.mapv(|v| (1.0 - eps) * v) + eps / k
}

/// Blend the style-mixed feature with the perturbed feature and mix labels:
/// h' = lambda * h_style + (1 - lambda) * h_plus,
/// y' = lambda * y + (1 - lambda) * y_tilde, where y_tilde is the smoothed
/// label when the per-sample lottery fires and y otherwise.
pub fn learnable_mixup(
    tape: &mut Tape,
    h_style: Var,
    h_plus: Var,
    y: &Array2<f64>,
    draw: &MixDraw,
    label_smooth_eps: f64,
) -> Result<(Var, Array2<f64>)> {
    validate_label_dist(y)?;
    let b = y.nrows();
    if draw.lambda.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "mix draw covers {} samples, labels cover {b}",
            draw.lambda.len()
        )));
    }
    let lam = draw.lambda.clone();
    let one_minus: Vec<f64> = lam.iter().map(|l| 1.0 - l).collect();
    let a = tape.scale_rows_const(h_style, lam.clone());
    let c = tape.scale_rows_const(h_plus, one_minus);
    let mixed = tape.add(a, c);

    let smoothed = smooth_labels(y, label_smooth_eps);
    let mut y_plus = Array2::<f64>::zeros(y.dim());
    for i in 0..b {
        let l = draw.lambda[i];
        let tilde = if draw.lottery[i] {
            smoothed.index_axis(Axis(0), i).to_owned()
        } else {
            y.index_axis(Axis(0), i).to_owned()
        };
        let row = y.index_axis(Axis(0), i).mapv(|v| l * v) + tilde.mapv(|v| (1.0 - l) * v);
        y_plus.index_axis_mut(Axis(0), i).assign(&row);
    }
    Ok((mixed, y_plus))
}
