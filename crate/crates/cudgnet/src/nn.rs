//! Layers, parameters, and the per-step binding context.
//!
//! Parameters live in the layer structs between steps; each training step
//! binds them onto a fresh [`Tape`] as leaves. Whether a leaf is marked
//! differentiable is decided by the [`ForwardCtx`]'s trainable filter, which
//! is how the alternating min-max phases freeze whole parameter groups: a
//! frozen group is bound as constants and provably receives zero gradient.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;

use crate::tape::{Arr, Grads, Tape, Var};

pub struct Param {
    pub name: String,
    pub value: Arr,
    /// Subject to weight decay (conv/linear kernels; not biases or BN affine).
    pub decay: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Arr, decay: bool) -> Self {
        Self {
            name: name.into(),
            value,
            decay,
        }
    }
}

/// Which parameter groups are trainable in the current pass.
#[derive(Debug, Clone)]
pub enum Trainable {
    /// Nothing trains (evaluation / probes).
    None,
    /// Everything bound trains.
    All,
    /// Only params whose name starts with one of these prefixes train.
    Prefixes(Vec<String>),
}

impl Trainable {
    fn admits(&self, name: &str) -> bool {
        match self {
            Trainable::None => false,
            Trainable::All => true,
            Trainable::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// Per-tape forward context: binding cache plus mode flags.
pub struct ForwardCtx {
    pub training: bool,
    /// Update BN running statistics on this pass (only the canonical clean
    /// training pass should set this, so perturbed/MC passes don't skew them).
    pub update_bn_stats: bool,
    pub trainable: Trainable,
    bindings: HashMap<String, Var>,
}

impl ForwardCtx {
    pub fn new(training: bool, update_bn_stats: bool, trainable: Trainable) -> Self {
        Self {
            training,
            update_bn_stats,
            trainable,
            bindings: HashMap::new(),
        }
    }

    pub fn eval() -> Self {
        Self::new(false, false, Trainable::None)
    }

    /// Bind a parameter onto the tape (cached per name within this context).
    pub fn bind(&mut self, tape: &mut Tape, p: &Param) -> Var {
        if let Some(&v) = self.bindings.get(&p.name) {
            return v;
        }
        let v = tape.leaf(p.value.clone(), self.trainable.admits(&p.name));
        self.bindings.insert(p.name.clone(), v);
        v
    }

    pub fn binding(&self, name: &str) -> Option<Var> {
        self.bindings.get(name).copied()
    }

    /// Collect gradients keyed by parameter name after a backward pass.
    pub fn grads_by_name(&self, grads: &mut Grads) -> HashMap<String, Arr> {
        let mut out = HashMap::new();
        for (name, &var) in &self.bindings {
            if let Some(g) = grads.take(var) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// Weight initializer drawing from a dedicated stream.
pub struct Init<'r> {
    pub rng: &'r mut Pcg64,
}

impl<'r> Init<'r> {
    pub fn new(rng: &'r mut Pcg64) -> Self {
        Self { rng }
    }

    pub fn he_normal(&mut self, shape: &[usize], fan_in: usize) -> Arr {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| normal.sample(self.rng)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Arr {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }
}

pub fn zeros(shape: &[usize]) -> Arr {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Arr {
    ArrayD::ones(IxDyn(shape))
}

pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: &mut Init,
    ) -> Self {
        let fan_in = in_c * k * k;
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                init.he_normal(&[out_c, in_c, k, k], fan_in),
                true,
            ),
            bias: bias.then(|| Param::new(format!("{name}.bias"), zeros(&[out_c]), false)),
            stride,
            pad,
        }
    }

    /// Zero-initialized variant (generator heads start as the identity map).
    pub fn new_zeroed(name: &str, in_c: usize, out_c: usize, k: usize) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), zeros(&[out_c, in_c, k, k]), true),
            bias: Some(Param::new(format!("{name}.bias"), zeros(&[out_c]), false)),
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &mut ForwardCtx, x: Var) -> Var {
        let w = ctx.bind(tape, &self.weight);
        let b = self.bias.as_ref().map(|b| ctx.bind(tape, b));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.weight);
        if let Some(b) = &self.bias {
            out.push(b);
        }
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.weight);
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
    }
}

pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Arr,
    pub running_var: Arr,
    pub momentum: f64,
    pub eps: f64,
    name: String,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), ones(&[channels]), false),
            beta: Param::new(format!("{name}.beta"), zeros(&[channels]), false),
            running_mean: zeros(&[channels]),
            running_var: ones(&[channels]),
            momentum: 0.1,
            eps: 1e-5,
            name: name.to_string(),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, ctx: &mut ForwardCtx, x: Var) -> Var {
        let gamma = ctx.bind(tape, &self.gamma);
        let beta = ctx.bind(tape, &self.beta);
        if ctx.training {
            let m = tape.mean_bchw(x);
            let xc = tape.sub_c(x, m);
            let sq = tape.sqr(xc);
            let v = tape.mean_bchw(sq);
            if ctx.update_bn_stats {
                let mv = tape.value(m).clone();
                let vv = tape.value(v).clone();
                let shape = tape.value(x).shape().to_vec();
                let n = (shape[0] * shape[2] * shape[3]) as f64;
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let mom = self.momentum;
                self.running_mean = &self.running_mean * (1.0 - mom) + &mv * mom;
                self.running_var = &self.running_var * (1.0 - mom) + &(vv * unbias) * mom;
            }
            let std = tape.sqrt_eps(v, self.eps);
            let rstd = tape.recip(std);
            let xn = tape.mul_c(xc, rstd);
            let scaled = tape.mul_c(xn, gamma);
            tape.add_c(scaled, beta)
        } else {
            let rm = tape.constant(self.running_mean.clone());
            let rv = tape.constant(self.running_var.clone());
            let xc = tape.sub_c(x, rm);
            let std = tape.sqrt_eps(rv, self.eps);
            let rstd = tape.recip(std);
            let xn = tape.mul_c(xc, rstd);
            let scaled = tape.mul_c(xn, gamma);
            tape.add_c(scaled, beta)
        }
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.gamma);
        out.push(&self.beta);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }

    /// Running statistics (checkpointed alongside parameters).
    pub fn buffers(&self) -> Vec<(String, &Arr)> {
        vec![
            (format!("{}.running_mean", self.name), &self.running_mean),
            (format!("{}.running_var", self.name), &self.running_var),
        ]
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Arr)> {
        vec![
            (format!("{}.running_mean", self.name), &mut self.running_mean),
            (format!("{}.running_var", self.name), &mut self.running_var),
        ]
    }
}

pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(name: &str, in_f: usize, out_f: usize, bias: bool, init: &mut Init) -> Self {
        let bound = (1.0 / in_f as f64).sqrt();
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                init.uniform(&[out_f, in_f], bound),
                true,
            ),
            bias: bias.then(|| Param::new(format!("{name}.bias"), zeros(&[out_f]), false)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &mut ForwardCtx, x: Var) -> Var {
        let w = ctx.bind(tape, &self.weight);
        let b = self.bias.as_ref().map(|b| ctx.bind(tape, b));
        tape.linear(x, w, b)
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.weight);
        if let Some(b) = &self.bias {
            out.push(b);
        }
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.weight);
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
    }
}
