//! Optimizers: momentum SGD with cosine decay for the task model, Adam for
//! the generator subnetwork. State is exportable so checkpoints can resume
//! bit-compatibly.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::nn::Param;
use crate::tape::Arr;

/// Cosine-annealed learning rate over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct OptimStateDump {
    pub step: u64,
    pub slots: BTreeMap<String, SlotDump>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlotDump {
    pub shape: Vec<usize>,
    pub data: Vec<Vec<f64>>,
}

fn dump_map(maps: &[&BTreeMap<String, Arr>]) -> BTreeMap<String, SlotDump> {
    let mut out = BTreeMap::new();
    if maps.is_empty() {
        return out;
    }
    for name in maps[0].keys() {
        let shape = maps[0][name].shape().to_vec();
        let data = maps
            .iter()
            .map(|m| m[name].iter().copied().collect())
            .collect();
        out.insert(name.clone(), SlotDump { shape, data });
    }
    out
}

fn restore_map(dump: &BTreeMap<String, SlotDump>, slot: usize) -> BTreeMap<String, Arr> {
    dump.iter()
        .map(|(name, s)| {
            let arr = ArrayD::from_shape_vec(IxDyn(&s.shape), s.data[slot].clone())
                .expect("optimizer slot shape");
            (name.clone(), arr)
        })
        .collect()
}

pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Arr>,
    step: u64,
}

impl SgdMomentum {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(
        &mut self,
        params: &mut [&mut Param],
        grads: &std::collections::HashMap<String, Arr>,
        lr: f64,
    ) {
        for p in params.iter_mut() {
            let Some(g) = grads.get(&p.name) else {
                continue;
            };
            let mut g = g.clone();
            if p.decay && self.weight_decay > 0.0 {
                g = &g + &(&p.value * self.weight_decay);
            }
            let vel = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            *vel = &*vel * self.momentum + &g;
            p.value = &p.value - &(&*vel * lr);
        }
        self.step += 1;
    }

    pub fn export(&self) -> OptimStateDump {
        OptimStateDump {
            step: self.step,
            slots: dump_map(&[&self.velocity]),
        }
    }

    pub fn restore(&mut self, dump: &OptimStateDump) {
        self.step = dump.step;
        self.velocity = restore_map(&dump.slots, 0);
    }
}

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<String, Arr>,
    v: BTreeMap<String, Arr>,
    step: u64,
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step(
        &mut self,
        params: &mut [&mut Param],
        grads: &std::collections::HashMap<String, Arr>,
        lr: f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params.iter_mut() {
            let Some(g) = grads.get(&p.name) else {
                continue;
            };
            let m = self
                .m
                .entry(p.name.clone())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            *m = &*m * self.beta1 + &(g * (1.0 - self.beta1));
            let v = self
                .v
                .entry(p.name.clone())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            *v = &*v * self.beta2 + &(&g.mapv(|x| x * x) * (1.0 - self.beta2));
            let mhat = &*m / bc1;
            let vhat = v.mapv(|x| (x / bc2).sqrt() + self.eps);
            p.value = &p.value - &(&(mhat / vhat) * lr);
        }
    }

    pub fn export(&self) -> OptimStateDump {
        OptimStateDump {
            step: self.step,
            slots: dump_map(&[&self.m, &self.v]),
        }
    }

    pub fn restore(&mut self, dump: &OptimStateDump) {
        self.step = dump.step;
        if dump.slots.is_empty() {
            self.m.clear();
            self.v.clear();
        } else {
            self.m = restore_map(&dump.slots, 0);
            self.v = restore_map(&dump.slots, 1);
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}
