//! Task model (WideResNet for CIFAR), projection head, and the feature-tap
//! plumbing that lets the generator intercept the intermediate feature map.
//!
//! The backbone is a pre-activation WideResNet: an entry conv, three groups
//! of basic blocks at strides 1/2/2, a final BN-ReLU, global average pooling
//! and a classifier. The tap sits after the first (default) or second block
//! group; `forward_to_tap` / `forward_from_tap` split the network there so
//! the perturbation pathway can swap the feature in between.

use ndarray::Array2;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{
    learnable_mixup, perturb, sample_epsilon, sample_mix_draw, GenOverrides, MixupHead,
    MixupParams, MixupParamVars, PerturbationNet, PerturbationParams,
};
use crate::nn::{BatchNorm2d, Conv2d, ForwardCtx, Init, Linear, Param};
use crate::style_ops::{batch_efdmix, BatchMixPlan};
use crate::tape::{Arr, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapStage {
    AfterBlock1,
    AfterBlock2,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskModelConfig {
    pub depth: usize,
    pub widen_factor: usize,
    pub num_classes: usize,
    pub tap_stage: TapStage,
    pub proj_dim: usize,
}

impl Default for TaskModelConfig {
    fn default() -> Self {
        Self {
            depth: 16,
            widen_factor: 4,
            num_classes: 10,
            tap_stage: TapStage::AfterBlock1,
            proj_dim: 128,
        }
    }
}

impl TaskModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 10 || !(self.depth - 4).is_multiple_of(6) {
            return Err(Error::InvalidParam(format!(
                "depth {} must satisfy (depth - 4) % 6 == 0",
                self.depth
            )));
        }
        if self.widen_factor == 0 {
            return Err(Error::InvalidParam("widen_factor must be >= 1".into()));
        }
        if self.proj_dim < 2 {
            return Err(Error::InvalidParam("proj_dim must be >= 2".into()));
        }
        Ok(())
    }

    pub fn blocks_per_group(&self) -> usize {
        (self.depth - 4) / 6
    }

    pub fn group_widths(&self) -> [usize; 3] {
        [
            16 * self.widen_factor,
            32 * self.widen_factor,
            64 * self.widen_factor,
        ]
    }

    /// Channel count of the tapped feature map.
    pub fn tap_channels(&self) -> usize {
        match self.tap_stage {
            TapStage::AfterBlock1 => self.group_widths()[0],
            TapStage::AfterBlock2 => self.group_widths()[1],
        }
    }
}

/// Pre-activation basic block. When the channel count or stride changes, the
/// shortcut convolves the pre-activated input, like the reference WRN.
struct BasicBlock {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl BasicBlock {
    fn new(name: &str, in_c: usize, out_c: usize, stride: usize, init: &mut Init) -> Self {
        let equal = in_c == out_c && stride == 1;
        Self {
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), in_c),
            conv1: Conv2d::new(&format!("{name}.conv1"), in_c, out_c, 3, stride, 1, false, init),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), out_c),
            conv2: Conv2d::new(&format!("{name}.conv2"), out_c, out_c, 3, 1, 1, false, init),
            shortcut: (!equal)
                .then(|| Conv2d::new(&format!("{name}.shortcut"), in_c, out_c, 1, stride, 0, false, init)),
        }
    }

    fn forward(&mut self, tape: &mut Tape, ctx: &mut ForwardCtx, x: Var) -> Var {
        let pre = self.bn1.forward(tape, ctx, x);
        let pre = tape.relu(pre);
        let out = self.conv1.forward(tape, ctx, pre);
        let out = self.bn2.forward(tape, ctx, out);
        let out = tape.relu(out);
        let out = self.conv2.forward(tape, ctx, out);
        let sc = match &self.shortcut {
            Some(conv) => conv.forward(tape, ctx, pre),
            None => x,
        };
        tape.add(out, sc)
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.bn1.collect(out);
        self.conv1.collect(out);
        self.bn2.collect(out);
        self.conv2.collect(out);
        if let Some(s) = &self.shortcut {
            s.collect(out);
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.bn1.collect_mut(out);
        self.conv1.collect_mut(out);
        self.bn2.collect_mut(out);
        self.conv2.collect_mut(out);
        if let Some(s) = &mut self.shortcut {
            s.collect_mut(out);
        }
    }

    fn buffers(&self) -> Vec<(String, &Arr)> {
        let mut v = self.bn1.buffers();
        v.extend(self.bn2.buffers());
        v
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Arr)> {
        let mut v = self.bn1.buffers_mut();
        v.extend(self.bn2.buffers_mut());
        v
    }
}

pub struct WideResNet {
    conv1: Conv2d,
    groups: [Vec<BasicBlock>; 3],
    bn_final: BatchNorm2d,
    fc: Linear,
    pub cfg: TaskModelConfig,
}

impl WideResNet {
    pub fn new(cfg: TaskModelConfig, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.blocks_per_group();
        let widths = cfg.group_widths();
        let conv1 = Conv2d::new("model.conv1", 3, 16, 3, 1, 1, false, init);
        let mut groups: [Vec<BasicBlock>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        let mut in_c = 16;
        for (gi, group) in groups.iter_mut().enumerate() {
            let out_c = widths[gi];
            let stride = if gi == 0 { 1 } else { 2 };
            for bi in 0..n {
                let s = if bi == 0 { stride } else { 1 };
                group.push(BasicBlock::new(
                    &format!("model.g{}.b{}", gi + 1, bi),
                    in_c,
                    out_c,
                    s,
                    init,
                ));
                in_c = out_c;
            }
        }
        Ok(Self {
            conv1,
            groups,
            bn_final: BatchNorm2d::new("model.bn_final", widths[2]),
            fc: Linear::new("model.fc", widths[2], cfg.num_classes, true, init),
            cfg,
        })
    }

    /// Run the layers before the tap point: conv1 and group 1 (and group 2
    /// when tapping after block 2). Returns the tapped feature map.
    pub fn forward_to_tap(&mut self, tape: &mut Tape, ctx: &mut ForwardCtx, x: Var) -> Var {
        let mut h = self.conv1.forward(tape, ctx, x);
        for block in &mut self.groups[0] {
            h = block.forward(tape, ctx, h);
        }
        if self.cfg.tap_stage == TapStage::AfterBlock2 {
            for block in &mut self.groups[1] {
                h = block.forward(tape, ctx, h);
            }
        }
        h
    }

    /// Run the layers after the tap point. Returns (pooled features, logits).
    pub fn forward_from_tap(&mut self, tape: &mut Tape, ctx: &mut ForwardCtx, h: Var) -> (Var, Var) {
        let mut out = h;
        if self.cfg.tap_stage == TapStage::AfterBlock1 {
            for block in &mut self.groups[1] {
                out = block.forward(tape, ctx, out);
            }
        }
        for block in &mut self.groups[2] {
            out = block.forward(tape, ctx, out);
        }
        let out = self.bn_final.forward(tape, ctx, out);
        let out = tape.relu(out);
        let pooled = tape.global_avg_pool(out);
        let logits = self.fc.forward(tape, ctx, pooled);
        (pooled, logits)
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.conv1.collect(out);
        for g in &self.groups {
            for b in g {
                b.collect(out);
            }
        }
        self.bn_final.collect(out);
        self.fc.collect(out);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.conv1.collect_mut(out);
        for g in &mut self.groups {
            for b in g {
                b.collect_mut(out);
            }
        }
        self.bn_final.collect_mut(out);
        self.fc.collect_mut(out);
    }

    pub fn buffers(&self) -> Vec<(String, &Arr)> {
        let mut v = Vec::new();
        for g in &self.groups {
            for b in g {
                v.extend(b.buffers());
            }
        }
        v.extend(self.bn_final.buffers());
        v
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Arr)> {
        let mut v = Vec::new();
        for g in &mut self.groups {
            for b in g {
                v.extend(b.buffers_mut());
            }
        }
        v.extend(self.bn_final.buffers_mut());
        v
    }

    pub fn num_params(&self) -> usize {
        let mut ps = Vec::new();
        self.collect(&mut ps);
        ps.iter().map(|p| p.value.len()).sum()
    }
}

/// Single fully connected layer mapping pooled features into the contrastive
/// embedding space.
pub struct ProjectionHead {
    pub fc: Linear,
}

impl ProjectionHead {
    pub fn new(in_dim: usize, proj_dim: usize, bias: bool, init: &mut Init) -> Self {
        Self {
            fc: Linear::new("proj.fc", in_dim, proj_dim, bias, init),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &mut ForwardCtx, pooled: Var) -> Var {
        self.fc.forward(tape, ctx, pooled)
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.fc.collect(out);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.fc.collect_mut(out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Clean,
    Perturbed,
}

/// Everything a clean forward produces.
pub struct ForwardOutputs {
    pub logits: Var,
    pub h: Var,
    pub pooled: Var,
    pub z: Var,
}

/// Extras from one perturbed draw on top of the shared setup.
pub struct PerturbedDraw {
    pub logits: Var,
    pub pooled: Var,
    pub z_plus: Var,
    pub y_plus: Array2<f64>,
    pub lambda: Vec<f64>,
}

/// Shared (per-step) pieces of the perturbation pathway: one style shuffle
/// and one (mu, sigma, mixup-head) evaluation serve all MC draws.
pub struct PerturbSetup {
    pub h: Var,
    pub style: Var,
    pub params: PerturbationParams,
    pub head_vars: MixupParamVars,
    pub head_values: MixupParams,
    pub plan: BatchMixPlan,
}

/// The full trainable bundle: task model M, projection head P, generator G
/// and its mixup head.
pub struct CudgNetModel {
    pub backbone: WideResNet,
    pub projection: ProjectionHead,
    pub generator: PerturbationNet,
    pub mixup_head: MixupHead,
}

/// Prefixes for the two adversarial parameter groups.
pub const TASK_PREFIXES: [&str; 2] = ["model.", "proj."];
pub const GEN_PREFIXES: [&str; 2] = ["gen.", "mixup."];

impl CudgNetModel {
    pub fn new(cfg: TaskModelConfig, rng: &mut Pcg64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(rng);
        let backbone = WideResNet::new(cfg.clone(), &mut init)?;
        let projection = ProjectionHead::new(cfg.group_widths()[2], cfg.proj_dim, true, &mut init);
        let generator = PerturbationNet::new(cfg.tap_channels());
        let mixup_head = MixupHead::new(cfg.tap_channels(), &mut init);
        Ok(Self {
            backbone,
            projection,
            generator,
            mixup_head,
        })
    }

    pub fn config(&self) -> &TaskModelConfig {
        &self.backbone.cfg
    }

    pub fn forward_clean(&mut self, tape: &mut Tape, ctx: &mut ForwardCtx, x: &Arr) -> ForwardOutputs {
        let xv = tape.constant(x.clone());
        let h = self.backbone.forward_to_tap(tape, ctx, xv);
        let (pooled, logits) = self.backbone.forward_from_tap(tape, ctx, h);
        let z = self.projection.forward(tape, ctx, pooled);
        ForwardOutputs { logits, h, pooled, z }
    }

    /// Build the shared perturbation pieces over an already tapped feature.
    pub fn setup_perturbation(
        &mut self,
        tape: &mut Tape,
        ctx: &mut ForwardCtx,
        h: Var,
        plan: BatchMixPlan,
        enable_style: bool,
    ) -> Result<PerturbSetup> {
        let params = self.generator.forward(tape, ctx, h)?;
        let style = if enable_style {
            batch_efdmix(tape, h, &plan)
        } else {
            h
        };
        let head_vars = self.mixup_head.forward(tape, ctx, params);
        let head_values = self.mixup_head.values(tape, head_vars);
        Ok(PerturbSetup {
            h,
            style,
            params,
            head_vars,
            head_values,
            plan,
        })
    }

    /// One MC draw: resample epsilon and lambda, run the remaining layers on
    /// the mixed feature.
    #[allow(clippy::too_many_arguments)]
    pub fn perturbed_draw(
        &mut self,
        tape: &mut Tape,
        ctx: &mut ForwardCtx,
        setup: &PerturbSetup,
        y: &Array2<f64>,
        label_smooth_eps: f64,
        perturb_rng: &mut Pcg64,
        mixup_rng: &mut Pcg64,
        overrides: &GenOverrides,
    ) -> Result<PerturbedDraw> {
        let shape = tape.value(setup.h).shape().to_vec();
        let eps = sample_epsilon(&shape, perturb_rng, overrides.force_epsilon_zero);
        let h_plus = perturb(tape, setup.style, setup.params, eps);
        let draw = sample_mix_draw(&setup.head_values, mixup_rng, overrides)?;
        let (h_mixed, y_plus) =
            learnable_mixup(tape, setup.style, h_plus, y, &draw, label_smooth_eps)?;
        let (pooled, logits) = self.backbone.forward_from_tap(tape, ctx, h_mixed);
        let z_plus = self.projection.forward(tape, ctx, pooled);
        Ok(PerturbedDraw {
            logits,
            pooled,
            z_plus,
            y_plus,
            lambda: draw.lambda,
        })
    }

    /// Mode-selected forward: clean passes the tapped feature straight through;
    /// perturbed swaps in one generator draw before the remaining layers.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        ctx: &mut ForwardCtx,
        x: &Arr,
        y: &Array2<f64>,
        mode: ForwardMode,
        mix_c: f64,
        label_smooth_eps: f64,
        style_rng: &mut Pcg64,
        perturb_rng: &mut Pcg64,
        mixup_rng: &mut Pcg64,
        overrides: &GenOverrides,
    ) -> Result<ForwardOutputs> {
        match mode {
            ForwardMode::Clean => Ok(self.forward_clean(tape, ctx, x)),
            ForwardMode::Perturbed => {
                let xv = tape.constant(x.clone());
                let h = self.backbone.forward_to_tap(tape, ctx, xv);
                let batch = x.shape()[0];
                let mut plan = BatchMixPlan::sample(batch.max(1), mix_c, style_rng)?;
                if let Some(d) = overrides.force_d {
                    plan.d = vec![d; batch];
                }
                let setup = self.setup_perturbation(tape, ctx, h, plan, true)?;
                let draw = self.perturbed_draw(
                    tape,
                    ctx,
                    &setup,
                    y,
                    label_smooth_eps,
                    perturb_rng,
                    mixup_rng,
                    overrides,
                )?;
                Ok(ForwardOutputs {
                    logits: draw.logits,
                    h,
                    pooled: draw.pooled,
                    z: draw.z_plus,
                })
            }
        }
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.backbone.collect(out);
        self.projection.collect(out);
        self.generator.collect(out);
        self.mixup_head.collect(out);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.backbone.collect_mut(out);
        self.projection.collect_mut(out);
        self.generator.collect_mut(out);
        self.mixup_head.collect_mut(out);
    }

    pub fn buffers(&self) -> Vec<(String, &Arr)> {
        self.backbone.buffers()
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Arr)> {
        self.backbone.buffers_mut()
    }

    /// Parameters of one adversarial group, by prefix list.
    pub fn group_params_mut<'a>(&'a mut self, prefixes: &[&str]) -> Vec<&'a mut Param> {
        let mut all = Vec::new();
        self.collect_mut(&mut all);
        all.into_iter()
            .filter(|p| prefixes.iter().any(|pre| p.name.starts_with(pre)))
            .collect()
    }
}
