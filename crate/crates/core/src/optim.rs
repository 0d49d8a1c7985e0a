//! First-order optimizers with an inverse-square-root learning-rate schedule.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Param, ParamGroup, ParamId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    Constant,
    #[default]
    InverseSqrt,
}

/// Linear ramp over `warmup_steps`, then either flat or decaying as `1/√step`.
/// The multiplier peaks at exactly 1 when the ramp ends.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub decay: Decay,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            warmup_steps: 50,
            decay: Decay::InverseSqrt,
        }
    }
}

impl LrSchedule {
    /// Multiplier for the 1-based `step`.
    pub fn factor(&self, step: u64) -> f64 {
        let step = step.max(1) as f64;
        let warm = self.warmup_steps.max(1) as f64;
        let ramp = (step / warm).min(1.0);
        match self.decay {
            Decay::Constant => ramp,
            Decay::InverseSqrt => ramp.min((warm / step).sqrt()),
        }
    }
}

/// Per-parameter first and second moment buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Slot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    /// Update rule for gate logits; `kind` when unset.
    pub gate_kind: Option<OptimizerKind>,
    pub schedule: LrSchedule,
    /// Schedule for gate logits; `schedule` when unset.
    pub gate_schedule: Option<LrSchedule>,
    pub lr: f64,
    pub gate_lr: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    slots: HashMap<ParamId, Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, gate_lr: f64, schedule: LrSchedule) -> Self {
        Optimizer {
            kind,
            gate_kind: None,
            schedule,
            gate_schedule: None,
            lr,
            gate_lr,
            weight_decay: 0.0,
            clip_norm: None,
            step: 0,
            slots: HashMap::new(),
        }
    }

    pub fn with_gate_kind(mut self, kind: Option<OptimizerKind>) -> Self {
        self.gate_kind = kind;
        self
    }

    pub fn with_gate_schedule(mut self, schedule: Option<LrSchedule>) -> Self {
        self.gate_schedule = schedule;
        self
    }

    pub fn with_clip_norm(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_steps_taken(&mut self, step: u64) {
        self.step = step;
    }

    pub fn current_lr(&self, group: ParamGroup) -> f64 {
        let (base, schedule) = match group {
            ParamGroup::Weight => (self.lr, self.schedule),
            ParamGroup::Gate => (self.gate_lr, self.gate_schedule.unwrap_or(self.schedule)),
        };
        base * schedule.factor(self.step.max(1))
    }

    pub fn slot(&self, id: ParamId) -> Option<&Slot> {
        self.slots.get(&id)
    }

    pub fn set_slot(&mut self, id: ParamId, slot: Slot) {
        self.slots.insert(id, slot);
    }

    /// Applies one update using the gradients held by `graph`. Parameters
    /// without a gradient are left untouched. Clipping acts on the weight
    /// group only; the returned norm is that of the weight gradients before
    /// clipping.
    pub fn step(&mut self, params: &mut [&mut Param], graph: &Graph) -> f64 {
        self.step += 1;
        let mut sq = 0.0;
        for p in params.iter().filter(|p| p.group == ParamGroup::Weight) {
            if let Some(g) = graph.param_grad(p.id()).filter(|_| p.trainable) {
                sq += g.data().iter().map(|x| x * x).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let t = self.step as f64;
        for p in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(g) = graph.param_grad(p.id()) else { continue };
            let lr = self.current_lr(p.group);
            let (kind, clip) = match p.group {
                ParamGroup::Weight => (self.kind, clip),
                ParamGroup::Gate => (self.gate_kind.unwrap_or(self.kind), 1.0),
            };
            let n = p.value.numel();
            let slot = self.slots.entry(p.id()).or_insert_with(|| Slot {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let wd = self.weight_decay;
            let values = p.value.data_mut();
            match kind {
                OptimizerKind::Sgd { momentum } => {
                    for ((w, &gw), m) in values.iter_mut().zip(g.data()).zip(&mut slot.m) {
                        *m = momentum * *m + gw * clip + wd * *w;
                        *w -= lr * *m;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powf(t);
                    let bc2 = 1.0 - beta2.powf(t);
                    for (((w, &gw), m), v) in values.iter_mut().zip(g.data()).zip(&mut slot.m).zip(&mut slot.v) {
                        let gi = gw * clip + wd * *w;
                        *m = beta1 * *m + (1.0 - beta1) * gi;
                        *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                        *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    }
                }
            }
        }
        norm
    }
}
