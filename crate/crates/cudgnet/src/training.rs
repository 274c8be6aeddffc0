//! The alternating adversarial training loop.
//!
//! Per batch iteration: a maximization phase updates the generator and mixup
//! head on the adversarial objective (task model frozen), then a minimization
//! phase updates the task model and projection head on the MC task loss plus
//! the weighted contrastive loss (generator frozen). The Transformation
//! Component runs on inputs in both phases. Every step appends one JSON line
//! to the metrics log; checkpoints are written per epoch.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint_into, read_meta, save_checkpoint, CheckpointMeta};
use crate::data::{
    aggregate_requested, onehot_labels, CorruptionSpec, Dataset, EvalReport, EvalRow,
    Normalization,
};
use crate::error::{Error, Result};
use crate::generator::GenOverrides;
use crate::models::{CudgNetModel, TaskModelConfig, GEN_PREFIXES, TASK_PREFIXES};
use crate::nn::{ForwardCtx, Trainable};
use crate::objectives::{
    generator_adv_loss, info_nce, mc_task_loss, total_loss, LossWeights, NceDenominator,
};
use crate::optim::{cosine_lr, Adam, SgdMomentum};
use crate::rng::RngBundle;
use crate::style_ops::BatchMixPlan;
use crate::tape::{Arr, Tape};
use crate::transform::{apply_tc, FractalSource, TcConfig};

/// Which components are active; the ablation ladder toggles these
/// cumulatively.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComponentToggles {
    pub generator: bool,
    pub tc: bool,
    pub style: bool,
    pub contrastive: bool,
}

impl Default for ComponentToggles {
    fn default() -> Self {
        Self {
            generator: true,
            tc: true,
            style: true,
            contrastive: true,
        }
    }
}

impl ComponentToggles {
    pub fn baseline() -> Self {
        Self {
            generator: false,
            tc: false,
            style: false,
            contrastive: false,
        }
    }

    /// The cumulative ladder: Baseline, +G, +TC, +Style, +Contrastive.
    pub fn ladder() -> Vec<(&'static str, Self)> {
        let mut rows = Vec::new();
        let mut t = Self::baseline();
        rows.push(("baseline", t.clone()));
        t.generator = true;
        rows.push(("+G", t.clone()));
        t.tc = true;
        rows.push(("+TC", t.clone()));
        t.style = true;
        rows.push(("+Style", t.clone()));
        t.contrastive = true;
        rows.push(("+Contrastive", t));
        rows
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub subset_size: Option<usize>,
    pub lr_m: f64,
    pub lr_g: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_phase_steps: usize,
    pub min_phase_steps: usize,
    pub loss: LossWeights,
    pub nce_denominator: NceDenominator,
    /// Beta concentration for the style-mix weight d.
    pub mix_c: f64,
    pub label_smooth_eps: f64,
    pub model: TaskModelConfig,
    pub tc: TcConfig,
    pub normalization: Normalization,
    pub components: ComponentToggles,
    pub data_root: Option<PathBuf>,
    pub fractal_bank: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 20,
            batch_size: 64,
            subset_size: Some(5000),
            lr_m: 0.1,
            lr_g: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            max_phase_steps: 1,
            min_phase_steps: 1,
            loss: LossWeights::default(),
            nce_denominator: NceDenominator::AllOthers,
            mix_c: 0.1,
            label_smooth_eps: 0.1,
            model: TaskModelConfig::default(),
            tc: TcConfig::default(),
            normalization: Normalization::default(),
            components: ComponentToggles::default(),
            data_root: None,
            fractal_bank: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::InvalidParam(
                "epochs must be >= 1 and batch_size >= 2".into(),
            ));
        }
        if self.max_phase_steps == 0 || self.min_phase_steps == 0 {
            return Err(Error::InvalidParam("phase step counts must be >= 1".into()));
        }
        if self.lr_m <= 0.0 || self.lr_g <= 0.0 {
            return Err(Error::InvalidParam("learning rates must be > 0".into()));
        }
        if self.mix_c <= 0.0 {
            return Err(Error::InvalidParam("mix_c must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.label_smooth_eps) {
            return Err(Error::InvalidParam("label_smooth_eps must be in [0,1)".into()));
        }
        self.loss.validate()?;
        self.model.validate()?;
        self.tc.validate()?;
        Ok(())
    }
}

/// One JSON line per optimization step.
#[derive(Debug, Clone, Serialize)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: usize,
    pub phase: &'static str,
    pub ce: Option<f64>,
    pub kl: Option<f64>,
    pub nce: Option<f64>,
    pub adv: Option<f64>,
    pub safety: Option<f64>,
    pub total: f64,
    pub mu_mean: Option<f64>,
    pub mu_absmax: Option<f64>,
    pub sigma_mean: Option<f64>,
    pub sigma_max: Option<f64>,
    pub lambda_mean: Option<f64>,
    pub lr: f64,
}

/// Newline-delimited JSON metrics sink; keeps lines in memory (for the
/// determinism checks) and optionally streams them to disk.
pub struct MetricsLog {
    pub lines: Vec<String>,
    writer: Option<BufWriter<File>>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self {
            lines: Vec::new(),
            writer: None,
        }
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(Self {
            lines: Vec::new(),
            writer: Some(BufWriter::new(File::create(path)?)),
        })
    }

    fn log(&mut self, record: &MetricRecord) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Other(format!("metrics serialize: {e}")))?;
        if let Some(w) = &mut self.writer {
            writeln!(w, "{line}")?;
        }
        self.lines.push(line);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush()?;
        }
        Ok(())
    }
}

struct SigmaStats {
    mu_mean: f64,
    mu_absmax: f64,
    sigma_mean: f64,
    sigma_max: f64,
}

fn sigma_stats(tape: &Tape, mu: crate::tape::Var, sigma: crate::tape::Var) -> SigmaStats {
    let mv = tape.value(mu);
    let sv = tape.value(sigma);
    SigmaStats {
        mu_mean: mv.mean().unwrap_or(0.0),
        mu_absmax: mv.iter().fold(0.0f64, |a, &b| a.max(b.abs())),
        sigma_mean: sv.mean().unwrap_or(0.0),
        sigma_max: sv.iter().fold(0.0f64, |a, &b| a.max(b)),
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: CudgNetModel,
    pub opt_task: SgdMomentum,
    pub opt_gen: Adam,
    pub rngs: RngBundle,
    pub epoch: usize,
    pub sigma_s_ref: Option<f64>,
    min_steps_done: usize,
    global_step: usize,
    fractals: FractalSource,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = crate::rng::stream_rng(cfg.seed, crate::rng::Stream::Init);
        let model = CudgNetModel::new(cfg.model.clone(), &mut init_rng)?;
        let fractals = match &cfg.fractal_bank {
            Some(dir) => FractalSource::from_bank_dir(dir, (32, 32))?,
            None => FractalSource::Generated,
        };
        Ok(Self {
            opt_task: SgdMomentum::new(cfg.momentum, cfg.weight_decay),
            opt_gen: Adam::new(),
            rngs: RngBundle::from_seed(cfg.seed),
            epoch: 0,
            sigma_s_ref: None,
            min_steps_done: 0,
            global_step: 0,
            model,
            fractals,
            cfg,
        })
    }

    /// Rebuild a trainer from a checkpoint (weights, optimizer state, RNG
    /// streams, epoch counter).
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let meta = read_meta(path)?;
        let cfg: TrainConfig = serde_json::from_value(meta.config.clone())
            .map_err(|e| Error::Checkpoint(format!("config in checkpoint: {e}")))?;
        let mut trainer = Self::new(cfg)?;
        let meta = load_checkpoint_into(path, &mut trainer.model)?;
        trainer.opt_task.restore(&meta.opt_task);
        trainer.opt_gen.restore(&meta.opt_gen);
        trainer.rngs = meta.rng;
        trainer.epoch = meta.epoch as usize;
        trainer.sigma_s_ref = meta.sigma_s_ref;
        trainer.min_steps_done = trainer.opt_task.step_count() as usize;
        trainer.global_step = trainer.min_steps_done + trainer.opt_gen.export().step as usize;
        Ok(trainer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            config: serde_json::to_value(&self.cfg)
                .map_err(|e| Error::Checkpoint(format!("config: {e}")))?,
            epoch: self.epoch as u64,
            rng: self.rngs.clone(),
            sigma_s_ref: self.sigma_s_ref,
            opt_task: self.opt_task.export(),
            opt_gen: self.opt_gen.export(),
        };
        save_checkpoint(path, &self.model, &meta)
    }

    fn steps_per_epoch(&self, n: usize) -> usize {
        n / self.cfg.batch_size + usize::from(n % self.cfg.batch_size >= 2)
    }

    /// Apply TC per image (when enabled), then normalize.
    fn prepare_batch(&mut self, x_raw: &Arr) -> Result<Arr> {
        let mut x = if self.cfg.components.tc {
            let b = x_raw.shape()[0];
            let mut out = Arr::zeros(x_raw.raw_dim());
            for i in 0..b {
                let img = x_raw.index_axis(ndarray::Axis(0), i).to_owned().into_dyn();
                let transformed =
                    apply_tc(&img, &self.cfg.tc, &mut self.rngs.transform, &self.fractals)?;
                out.index_axis_mut(ndarray::Axis(0), i)
                    .assign(&transformed.view());
            }
            out
        } else {
            x_raw.clone()
        };
        self.cfg.normalization.apply(&mut x);
        Ok(x)
    }

    fn check_finite(&self, tape: &Tape, loss: crate::tape::Var, setup: Option<&crate::models::PerturbSetup>, lambda_mean: Option<f64>) -> Result<f64> {
        let v = tape.scalar_value(loss);
        if v.is_finite() {
            return Ok(v);
        }
        let diag = match setup {
            Some(s) => {
                let st = sigma_stats(tape, s.params.mu, s.params.sigma);
                format!(
                    "mu_mean={:.4e} mu_absmax={:.4e} sigma_mean={:.4e} sigma_max={:.4e} lambda_mean={:?}",
                    st.mu_mean, st.mu_absmax, st.sigma_mean, st.sigma_max, lambda_mean
                )
            }
            None => "generator inactive".to_string(),
        };
        Err(Error::Diverged(format!(
            "non-finite loss {v} at step {} (epoch {}); {diag}",
            self.global_step, self.epoch
        )))
    }

    /// Maximization phase: freeze M and P, ascend the adversarial objective
    /// on the generator and mixup head.
    fn step_max(&mut self, x_raw: &Arr, labels: &[u8], log: &mut MetricsLog) -> Result<()> {
        let x = self.prepare_batch(x_raw)?;
        let y = onehot_labels(labels, self.cfg.model.num_classes);
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(
            true,
            false,
            Trainable::Prefixes(GEN_PREFIXES.iter().map(|s| s.to_string()).collect()),
        );
        let clean = self.model.forward_clean(&mut tape, &mut ctx, &x);
        let batch = x.shape()[0];
        let plan = BatchMixPlan::sample(batch, self.cfg.mix_c, &mut self.rngs.style_mix)?;
        let setup = self.model.setup_perturbation(
            &mut tape,
            &mut ctx,
            clean.h,
            plan,
            self.cfg.components.style,
        )?;
        let draw = self.model.perturbed_draw(
            &mut tape,
            &mut ctx,
            &setup,
            &y,
            self.cfg.label_smooth_eps,
            &mut self.rngs.perturbation,
            &mut self.rngs.mixup,
            &GenOverrides::default(),
        )?;
        let adv = generator_adv_loss(
            &mut tape,
            draw.logits,
            &draw.y_plus,
            clean.z,
            draw.z_plus,
            self.cfg.loss.beta,
        );
        let lambda_mean =
            draw.lambda.iter().sum::<f64>() / draw.lambda.len().max(1) as f64;
        let total = self.check_finite(&tape, adv, Some(&setup), Some(lambda_mean))?;

        let safety = {
            let d = tape.value(clean.z) - tape.value(draw.z_plus);
            let d2 = d.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            d2.rows()
                .into_iter()
                .map(|r| r.iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                / d2.nrows() as f64
        };

        let mut grads = tape.backward(adv);
        let by_name = ctx.grads_by_name(&mut grads);
        let mut params = self.model.group_params_mut(&GEN_PREFIXES);
        self.opt_gen.step(&mut params, &by_name, self.cfg.lr_g);

        let st = sigma_stats(&tape, setup.params.mu, setup.params.sigma);
        self.global_step += 1;
        log.log(&MetricRecord {
            step: self.global_step,
            epoch: self.epoch,
            phase: "max",
            ce: None,
            kl: None,
            nce: None,
            adv: Some(total),
            safety: Some(safety),
            total,
            mu_mean: Some(st.mu_mean),
            mu_absmax: Some(st.mu_absmax),
            sigma_mean: Some(st.sigma_mean),
            sigma_max: Some(st.sigma_max),
            lambda_mean: Some(lambda_mean),
            lr: self.cfg.lr_g,
        })
    }

    /// Minimization phase: freeze the generator, descend the MC task loss
    /// plus the weighted contrastive loss on M and P.
    fn step_min(
        &mut self,
        x_raw: &Arr,
        labels: &[u8],
        total_min_steps: usize,
        log: &mut MetricsLog,
    ) -> Result<()> {
        let x = self.prepare_batch(x_raw)?;
        let y = onehot_labels(labels, self.cfg.model.num_classes);
        let lr = cosine_lr(self.cfg.lr_m, self.min_steps_done, total_min_steps);

        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(
            true,
            true,
            Trainable::Prefixes(TASK_PREFIXES.iter().map(|s| s.to_string()).collect()),
        );
        let clean = self.model.forward_clean(&mut tape, &mut ctx, &x);

        let record;
        let loss_var;
        if self.cfg.components.generator {
            ctx.update_bn_stats = false; // only the clean pass above updates stats
            let batch = x.shape()[0];
            let plan = BatchMixPlan::sample(batch, self.cfg.mix_c, &mut self.rngs.style_mix)?;
            let setup = self.model.setup_perturbation(
                &mut tape,
                &mut ctx,
                clean.h,
                plan,
                self.cfg.components.style,
            )?;
            let mut z_plus_first = None;
            let mut lambda_sum = 0.0;
            let mut lambda_n = 0usize;
            let k = self.cfg.loss.k_samples;
            let model = &mut self.model;
            let rngs = &mut self.rngs;
            let eps_ls = self.cfg.label_smooth_eps;
            let task = mc_task_loss(
                &mut tape,
                k,
                setup.params.mu,
                setup.params.sigma,
                |tape, _k| {
                    let draw = model.perturbed_draw(
                        tape,
                        &mut ctx,
                        &setup,
                        &y,
                        eps_ls,
                        &mut rngs.perturbation,
                        &mut rngs.mixup,
                        &GenOverrides::default(),
                    )?;
                    if z_plus_first.is_none() {
                        z_plus_first = Some(draw.z_plus);
                    }
                    lambda_sum += draw.lambda.iter().sum::<f64>();
                    lambda_n += draw.lambda.len();
                    Ok((draw.logits, draw.y_plus))
                },
            )?;
            let nce = if self.cfg.components.contrastive {
                Some(info_nce(
                    &mut tape,
                    clean.z,
                    z_plus_first.expect("at least one MC draw"),
                    self.cfg.loss.temperature,
                    self.cfg.nce_denominator,
                )?)
            } else {
                None
            };
            let total = total_loss(&mut tape, task, nce, self.cfg.loss.w1);
            let lambda_mean = lambda_sum / lambda_n.max(1) as f64;
            let total_v = self.check_finite(&tape, total, Some(&setup), Some(lambda_mean))?;
            let st = sigma_stats(&tape, setup.params.mu, setup.params.sigma);
            let kl_v = {
                let mu = tape.value(setup.params.mu);
                let sg = tape.value(setup.params.sigma);
                crate::objectives::kl_diag_gaussian_value(mu, sg)?
            };
            record = MetricRecord {
                step: self.global_step + 1,
                epoch: self.epoch,
                phase: "min",
                ce: Some(tape.scalar_value(task) - kl_v),
                kl: Some(kl_v),
                nce: nce.map(|n| tape.scalar_value(n)),
                adv: None,
                safety: None,
                total: total_v,
                mu_mean: Some(st.mu_mean),
                mu_absmax: Some(st.mu_absmax),
                sigma_mean: Some(st.sigma_mean),
                sigma_max: Some(st.sigma_max),
                lambda_mean: Some(lambda_mean),
                lr,
            };
            loss_var = total;
        } else {
            // ERM baseline: plain soft-label cross-entropy on the clean pass
            let ce = tape.softmax_cross_entropy(clean.logits, y.clone().into_dyn());
            let total_v = self.check_finite(&tape, ce, None, None)?;
            record = MetricRecord {
                step: self.global_step + 1,
                epoch: self.epoch,
                phase: "min",
                ce: Some(total_v),
                kl: None,
                nce: None,
                adv: None,
                safety: None,
                total: total_v,
                mu_mean: None,
                mu_absmax: None,
                sigma_mean: None,
                sigma_max: None,
                lambda_mean: None,
                lr,
            };
            loss_var = ce;
        }

        let mut grads = tape.backward(loss_var);
        let by_name = ctx.grads_by_name(&mut grads);
        let mut params = self.model.group_params_mut(&TASK_PREFIXES);
        self.opt_task.step(&mut params, &by_name, lr);
        self.min_steps_done += 1;
        self.global_step += 1;
        log.log(&record)
    }

    /// Train from the current epoch up to `cfg.epochs`. Writes one checkpoint
    /// per epoch into `ckpt_dir` when given.
    pub fn run(
        &mut self,
        source: &Dataset,
        ckpt_dir: Option<&Path>,
        log: &mut MetricsLog,
    ) -> Result<()> {
        self.run_until(source, ckpt_dir, log, self.cfg.epochs)
    }

    /// Train up to `stop_epoch` (inclusive upper bound, capped by
    /// `cfg.epochs`). The cosine schedule always spans the full configured
    /// horizon, so an interrupted-then-resumed run retraces the same path.
    pub fn run_until(
        &mut self,
        source: &Dataset,
        ckpt_dir: Option<&Path>,
        log: &mut MetricsLog,
        stop_epoch: usize,
    ) -> Result<()> {
        use rand::Rng;
        let n = source.len();
        if n < 2 {
            return Err(Error::Dataset("need at least 2 training images".into()));
        }
        let total_min_steps =
            self.cfg.epochs * self.steps_per_epoch(n) * self.cfg.min_phase_steps;
        let stop = stop_epoch.min(self.cfg.epochs);
        while self.epoch < stop {
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = self.rngs.data_order.gen_range(0..=i);
                order.swap(i, j);
            }
            for chunk in order.chunks(self.cfg.batch_size) {
                if chunk.len() < 2 {
                    continue; // no style partner and BN stats degenerate
                }
                let (x_raw, labels) = source.batch(chunk);
                if self.cfg.components.generator {
                    for _ in 0..self.cfg.max_phase_steps {
                        self.step_max(&x_raw, &labels, log)?;
                    }
                }
                for _ in 0..self.cfg.min_phase_steps {
                    self.step_min(&x_raw, &labels, total_min_steps, log)?;
                }
            }
            self.epoch += 1;
            if let Some(dir) = ckpt_dir {
                std::fs::create_dir_all(dir)?;
                self.save(&dir.join(format!("epoch_{:03}.ckpt", self.epoch)))?;
                self.save(&dir.join("last.ckpt"))?;
            }
        }
        log.flush()
    }
}

/// Deterministic clean-mode accuracy (percent) over a dataset.
pub fn evaluate_dataset(
    model: &mut CudgNetModel,
    norm: &Normalization,
    ds: &Dataset,
    batch_size: usize,
) -> f64 {
    let n = ds.len();
    let mut correct = 0usize;
    let idxs: Vec<usize> = (0..n).collect();
    for chunk in idxs.chunks(batch_size) {
        let (mut x, labels) = ds.batch(chunk);
        norm.apply(&mut x);
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval();
        let out = model.forward_clean(&mut tape, &mut ctx, &x);
        let logits = tape.value(out.logits);
        let l2 = logits.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        for (row, &label) in l2.rows().into_iter().zip(labels.iter()) {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (k, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            if best == label as usize {
                correct += 1;
            }
        }
    }
    100.0 * correct as f64 / n.max(1) as f64
}

/// Evaluate a model on corruption slices loaded from `data_root`.
/// `rows_per_severity` follows the published 10000-row layout unless a
/// subsampled mirror is in use.
pub fn evaluate_corruptions(
    model: &mut CudgNetModel,
    norm: &Normalization,
    data_root: &Path,
    specs: &[CorruptionSpec],
    batch_size: usize,
    rows_per_severity: usize,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for spec in specs {
        let ds = crate::data::load_cifar10c_slice_rows(
            data_root,
            &spec.name,
            spec.severity,
            rows_per_severity,
        )?;
        let acc = evaluate_dataset(model, norm, &ds, batch_size);
        rows.push(EvalRow {
            corruption: spec.name.clone(),
            category: spec.category,
            severity: spec.severity,
            accuracy: acc,
        });
    }
    aggregate_requested(rows, specs)
}

/// Train the five cumulative ablation variants under identical seeds and
/// config, evaluating each with the supplied closure (corruption slices at
/// desk scale, synthetic stand-ins in tests).
pub fn ablation_ladder(
    base_cfg: &TrainConfig,
    source: &Dataset,
    log_dir: Option<&Path>,
    mut evaluate: impl FnMut(&mut Trainer) -> Result<EvalReport>,
) -> Result<Vec<(String, EvalReport)>> {
    let mut out = Vec::new();
    for (name, toggles) in ComponentToggles::ladder() {
        let mut cfg = base_cfg.clone();
        cfg.components = toggles;
        let mut trainer = Trainer::new(cfg)?;
        let mut log = match log_dir {
            Some(dir) => MetricsLog::to_file(&dir.join(format!(
                "ablation_{}.ndjson",
                name.replace('+', "plus_")
            )))?,
            None => MetricsLog::in_memory(),
        };
        trainer.run(source, None, &mut log)?;
        let report = evaluate(&mut trainer)?;
        out.push((name.to_string(), report));
    }
    Ok(out)
}

/// Render the ladder as an aligned text table (category columns + Avg).
pub fn ladder_table(rows: &[(String, EvalReport)]) -> String {
    let mut s = String::from(
        "variant        weather    blur     noise    digital  avg\n",
    );
    for (name, report) in rows {
        let get = |c: &str| report.per_category.get(c).copied().unwrap_or(f64::NAN);
        s.push_str(&format!(
            "{:<14} {:>7.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
            name,
            get("weather"),
            get("blur"),
            get("noise"),
            get("digital"),
            report.overall
        ));
    }
    s
}
