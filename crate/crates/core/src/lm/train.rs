//! Warmup-then-prune training of a [`RecurrentLM`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Batcher, CharCorpus, Split};
use super::model::{Method, RecurrentLM};
use crate::config::RunConfig;
use crate::controller::{fixed_l0_penalty, AgpScheduler, LagrangianController, Violation};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{MaskMode, RngNoise};
use crate::metrics::Record;
use crate::optim::{Decay, LrSchedule, Optimizer, OptimizerKind, Slot};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Total batches, warmup included.
    pub steps: u64,
    pub batch_size: usize,
    pub unroll: usize,
    pub warmup_fraction: f64,
    pub optimizer: OptimizerKind,
    /// Update rule for gate logits.
    pub gate_optimizer: OptimizerKind,
    pub lr: f64,
    pub gate_lr: f64,
    pub schedule: LrSchedule,
    pub gate_schedule: LrSchedule,
    /// Global gradient-norm clip on the weights; 0 disables clipping.
    pub clip_norm: f64,
    /// Box that gate logits are projected into after every step; keeps
    /// settled gates responsive to the size penalty. `[-inf, inf]` disables it.
    pub gate_logit_range: [f64; 2],
    /// Validation interval in steps; 0 evaluates only when asked.
    pub eval_every: u64,
    pub eval_chunk: usize,
}

impl TrainConfig {
    pub fn build_optimizer(&self) -> Optimizer {
        Optimizer::new(self.optimizer, self.lr, self.gate_lr, self.schedule)
            .with_gate_kind(Some(self.gate_optimizer))
            .with_gate_schedule(Some(self.gate_schedule))
            .with_clip_norm((self.clip_norm > 0.0).then_some(self.clip_norm))
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            unroll: 64,
            warmup_fraction: 0.1,
            optimizer: OptimizerKind::default(),
            gate_optimizer: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr: 0.1,
            gate_lr: 0.05,
            schedule: LrSchedule::default(),
            gate_schedule: LrSchedule {
                warmup_steps: 0,
                decay: Decay::Constant,
            },
            clip_norm: 1.0,
            gate_logit_range: [-7.4, 7.0],
            eval_every: 0,
            eval_chunk: 256,
        }
    }
}

/// Whose size a compression fraction refers to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetBasis {
    /// All model parameters.
    #[default]
    Total,
    /// Only parameters covered by gates.
    Prunable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub target_compression: f64,
    pub basis: TargetBasis,
    /// Length of the target annealing as a fraction of the pruning steps.
    pub anneal_fraction: f64,
    pub lr_lambda: f64,
    /// Decay the multiplier rate with the model's learning-rate schedule.
    pub lambda_schedule: bool,
    pub violation: Violation,
    /// Use a fixed-coefficient L0 term instead of the Lagrangian controller.
    pub fixed_l0: Option<f64>,
    pub agp_initial_sparsity: f64,
    pub agp_frequency: u64,
    pub agp_l1: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            target_compression: 0.5,
            basis: TargetBasis::Total,
            anneal_fraction: 0.3,
            lr_lambda: 1.0,
            lambda_schedule: false,
            violation: Violation::Normalized,
            fixed_l0: None,
            agp_initial_sparsity: 0.0,
            agp_frequency: 10,
            agp_l1: 1e-4,
        }
    }
}

impl PruneConfig {
    /// Kept-size target over gated blocks for a model with the given sizes.
    pub fn kept_target(&self, prunable: usize, reference_total: usize) -> Result<f64> {
        let c = self.target_compression;
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Config(format!("target compression {c} outside [0, 1]")));
        }
        let prunable = prunable as f64;
        match self.basis {
            TargetBasis::Prunable => Ok((1.0 - c) * prunable),
            TargetBasis::Total => {
                let removal = c * reference_total as f64;
                if removal > prunable {
                    return Err(Error::Config(format!(
                        "removing {c} of {reference_total} parameters exceeds the {prunable} prunable ones"
                    )));
                }
                Ok(prunable - removal)
            }
        }
    }
}

/// The size objective active during pruning.
#[derive(Clone, Debug, PartialEq)]
pub enum SizeControl {
    None,
    Lagrangian(LagrangianController),
    FixedL0 { coeff: f64, prunable_total: f64 },
    Agp(AgpScheduler),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Pruning,
    Done,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Pruning => "pruning",
            Phase::Done => "done",
        }
    }
}

/// Per-batch observations.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub phase: Phase,
    /// Cross-entropy in nats per symbol.
    pub loss: f64,
    pub penalty: f64,
    /// Expected kept size of the gated blocks.
    pub expected_size: f64,
    pub target_size: Option<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub grad_norm: f64,
    pub sparsity: Option<f64>,
    pub kept_ranks: Vec<(String, usize)>,
}

impl StepMetrics {
    pub fn to_record(&self) -> Result<Record> {
        let mut r = Record::new();
        r.int("step", self.step);
        r.int("epoch", self.epoch);
        r.text("phase", self.phase.as_str());
        r.num("loss", self.loss)?;
        r.num("bpc", self.loss / std::f64::consts::LN_2)?;
        r.num("penalty", self.penalty)?;
        r.num("s", self.expected_size)?;
        if let Some(t) = self.target_size {
            r.num("t", t)?;
        }
        r.num("lambda1", self.lambda1)?;
        r.num("lambda2", self.lambda2)?;
        r.num("grad_norm", self.grad_norm)?;
        if let Some(s) = self.sparsity {
            r.num("sparsity", s)?;
        }
        for (name, k) in &self.kept_ranks {
            r.int(&format!("kept.{name}"), *k as u64);
        }
        Ok(r)
    }
}

/// Serializable training progress.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub method: Method,
    pub step: u64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batcher: Batcher,
    pub state: Vec<Tensor>,
    pub optimizer_steps: u64,
    pub slots: Vec<Option<Slot>>,
    pub control: SizeControl,
    pub rng: ChaCha8Rng,
    pub best_valid: Option<f64>,
}

pub struct Trainer {
    pub method: Method,
    pub model: RecurrentLM,
    pub optimizer: Optimizer,
    pub control: SizeControl,
    pub batcher: Batcher,
    /// Recurrent state carried between batches.
    pub state: Vec<Tensor>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub best_valid: Option<f64>,
    pub eval_chunk: usize,
    pub gate_logit_range: [f64; 2],
    graph: Graph,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, corpus: &CharCorpus) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let classes = corpus.vocab.num_classes();
        let model = match cfg.method {
            Method::Fac => {
                let shape = RecurrentLM::new(&cfg.model, classes, Method::FlopL0, cfg.gate, &mut ChaCha8Rng::seed_from_u64(0))?;
                let prunable = shape.prunable_total();
                let kept = cfg.prune.kept_target(prunable, shape.reference_total)?;
                RecurrentLM::reduced(&cfg.model, classes, kept / prunable as f64, &mut rng)?
            }
            method => RecurrentLM::new(&cfg.model, classes, method, cfg.gate, &mut rng)?,
        };
        let t = &cfg.train;
        let optimizer = t.build_optimizer();
        let warmup_steps = match cfg.method {
            Method::Fac => t.steps,
            _ => (t.steps as f64 * t.warmup_fraction).round() as u64,
        };
        let control = Self::size_control(cfg, &model, warmup_steps)?;
        Ok(Trainer {
            method: cfg.method,
            state: model.zero_state(t.batch_size),
            model,
            optimizer,
            control,
            batcher: Batcher::new(t.batch_size, t.unroll)?,
            rng,
            step: 0,
            warmup_steps,
            total_steps: t.steps,
            best_valid: None,
            eval_chunk: t.eval_chunk,
            gate_logit_range: t.gate_logit_range,
            graph: Graph::new(),
        })
    }

    fn size_control(cfg: &RunConfig, model: &RecurrentLM, warmup: u64) -> Result<SizeControl> {
        let p = &cfg.prune;
        let prunable = model.prunable_total();
        let pruning_steps = cfg.train.steps.saturating_sub(warmup);
        let anneal = ((pruning_steps as f64 * p.anneal_fraction).round() as u64).max(1);
        Ok(match cfg.method {
            Method::Fac => SizeControl::None,
            Method::FlopAgp => {
                let kept = p.kept_target(prunable, model.reference_total)?;
                let sched = AgpScheduler {
                    initial_sparsity: p.agp_initial_sparsity,
                    final_sparsity: 1.0 - kept / prunable as f64,
                    begin_step: warmup,
                    end_step: warmup + anneal,
                    prune_frequency: p.agp_frequency,
                    l1_coeff: p.agp_l1,
                };
                sched.validate()?;
                SizeControl::Agp(sched)
            }
            Method::FlopL0 | Method::NpL0 => match p.fixed_l0 {
                Some(coeff) => SizeControl::FixedL0 {
                    coeff,
                    prunable_total: prunable as f64,
                },
                None => {
                    let mut c = LagrangianController::new(
                        prunable as f64,
                        p.kept_target(prunable, model.reference_total)?,
                        anneal,
                        p.lr_lambda,
                        p.violation,
                    )?;
                    c.follow_schedule = p.lambda_schedule;
                    SizeControl::Lagrangian(c)
                }
            },
        })
    }

    /// Re-derives the size objective and step budget from `cfg` before
    /// pruning has started, e.g. to resume a warmup checkpoint at a new target.
    pub fn retarget(&mut self, cfg: &RunConfig) -> Result<()> {
        cfg.validate()?;
        if cfg.method != self.method {
            return Err(Error::Config(format!("checkpoint was trained as {}, not {}", self.method, cfg.method)));
        }
        if self.step > self.warmup_steps {
            return Err(Error::Config("pruning has already started; the target can no longer change".into()));
        }
        if cfg.train.steps < self.warmup_steps {
            return Err(Error::Config(format!("steps {} end before warmup ({})", cfg.train.steps, self.warmup_steps)));
        }
        self.total_steps = cfg.train.steps;
        self.control = Self::size_control(cfg, &self.model, self.warmup_steps)?;
        Ok(())
    }

    pub fn phase(&self) -> Phase {
        if self.step >= self.total_steps {
            Phase::Done
        } else if self.step < self.warmup_steps {
            Phase::Warmup
        } else {
            Phase::Pruning
        }
    }

    pub fn lagrangian(&self) -> Option<&LagrangianController> {
        match &self.control {
            SizeControl::Lagrangian(c) => Some(c),
            _ => None,
        }
    }

    /// One batch: shared-mask forward, loss plus size penalty, backward,
    /// parameter step, then the multiplier or pruning step.
    pub fn train_step(&mut self, corpus: &CharCorpus) -> Result<StepMetrics> {
        let batch = self.batcher.next_batch(&corpus.train)?;
        if batch.epoch_start {
            self.state = self.model.zero_state(batch.batch_size);
        }
        let pruning = self.step >= self.warmup_steps && self.control != SizeControl::None;
        let step = self.step;
        let diverged = |e: Error| match e {
            Error::NonFinite { op } => Error::Diverged {
                step,
                detail: format!("non-finite value in {op}"),
            },
            other => other,
        };
        let g = &mut self.graph;
        g.reset();
        let mut noise = RngNoise(&mut self.rng);
        let mut mode = if pruning { MaskMode::Sample(&mut noise) } else { MaskMode::Open };
        let bound = self.model.bind(g, &mut mode).map_err(diverged)?;
        let logits = self
            .model
            .forward(g, &bound, &batch.inputs, batch.batch_size, &mut self.state)
            .map_err(diverged)?;
        let ce = g.softmax_cross_entropy(logits, &batch.targets).map_err(diverged)?;
        let mut total = ce;
        let mut s_value = self.model.expected_kept_prunable();
        let mut penalty: Option<Var> = None;
        if pruning {
            match &self.control {
                SizeControl::Lagrangian(c) => {
                    if let Some(s) = self.model.expected_size(g)? {
                        s_value = g.value(s).item();
                        penalty = Some(c.penalty(g, s)?);
                    }
                }
                SizeControl::FixedL0 { coeff, prunable_total } => {
                    if let Some(s) = self.model.expected_size(g)? {
                        s_value = g.value(s).item();
                        penalty = Some(fixed_l0_penalty(g, s, *coeff, *prunable_total)?);
                    }
                }
                SizeControl::Agp(a) => penalty = a.l1_penalty(g, &self.model.magnitude_masks())?,
                SizeControl::None => {}
            }
        }
        let penalty_value = penalty.map_or(0.0, |p| g.value(p).item());
        if let Some(p) = penalty {
            total = g.add(total, p)?;
        }
        let loss = g.value(ce).item();
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {loss}"),
            });
        }
        g.backward(total)?;
        let grad_norm = self.optimizer.step(&mut self.model.params_mut(), g);
        let [lo, hi] = self.gate_logit_range;
        for mask in self.model.masks_mut() {
            if let Some(gate) = mask.gate_mut() {
                gate.alpha.value.data_mut().iter_mut().for_each(|a| *a = a.clamp(lo, hi));
            }
        }
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("gradient norm {grad_norm}"),
            });
        }
        let mut target_size = None;
        let mut sparsity = None;
        if pruning {
            match &mut self.control {
                SizeControl::Lagrangian(c) => {
                    target_size = Some(c.current_target());
                    c.update_multipliers_scaled(s_value, self.optimizer.schedule.factor(self.optimizer.steps_taken().max(1)));
                }
                SizeControl::Agp(a) => {
                    let mut masks = self.model.magnitude_masks_mut();
                    masks.iter_mut().for_each(|m| m.enforce());
                    if a.is_prune_step(step) {
                        a.prune(&mut masks, step);
                    }
                    let total: usize = masks.iter().map(|m| m.len()).sum();
                    let pruned: usize = masks.iter().map(|m| m.pruned.iter().filter(|p| **p).count()).sum();
                    sparsity = Some(pruned as f64 / total.max(1) as f64);
                    target_size = Some(a.sparsity(step));
                }
                _ => {}
            }
        }
        let (lambda1, lambda2) = self.lagrangian().map_or((0.0, 0.0), |c| (c.lambda1, c.lambda2));
        self.step += 1;
        Ok(StepMetrics {
            step,
            epoch: self.batcher.epoch,
            phase: if pruning { Phase::Pruning } else { Phase::Warmup },
            loss,
            penalty: penalty_value,
            expected_size: s_value,
            target_size,
            lambda1,
            lambda2,
            grad_norm,
            sparsity,
            kept_ranks: self.model.layer_ranks().into_iter().map(|r| (r.name, r.kept)).collect(),
        })
    }

    /// Trains until `end_step` (capped at the configured total), handing
    /// every step's metrics to `on_step`.
    pub fn run_until<F>(&mut self, corpus: &CharCorpus, end_step: u64, mut on_step: F) -> Result<()>
    where
        F: FnMut(&StepMetrics) -> Result<()>,
    {
        while self.step < end_step.min(self.total_steps) {
            let m = self.train_step(corpus)?;
            on_step(&m)?;
        }
        Ok(())
    }

    pub fn evaluate(&self, corpus: &CharCorpus, split: Split) -> Result<f64> {
        self.model.bpc(corpus.split(split), self.eval_chunk)
    }

    /// Everything besides the model needed to continue training exactly.
    pub fn snapshot(&self) -> TrainState {
        TrainState {
            method: self.method,
            step: self.step,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            batcher: self.batcher.clone(),
            state: self.state.clone(),
            optimizer_steps: self.optimizer.steps_taken(),
            slots: self.model.params().iter().map(|p| self.optimizer.slot(p.id()).cloned()).collect(),
            control: self.control.clone(),
            rng: self.rng.clone(),
            best_valid: self.best_valid,
        }
    }

    /// Rebuilds a trainer around `model` from a snapshot; `slots` follow
    /// the model's canonical parameter order.
    pub fn restore(cfg: &RunConfig, model: RecurrentLM, snap: TrainState) -> Result<Self> {
        let t = &cfg.train;
        let mut optimizer = t.build_optimizer();
        optimizer.set_steps_taken(snap.optimizer_steps);
        let params = model.params();
        if snap.slots.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "{} optimizer slots for {} parameters",
                snap.slots.len(),
                params.len()
            )));
        }
        for (p, slot) in params.iter().zip(snap.slots) {
            if let Some(slot) = slot {
                optimizer.set_slot(p.id(), slot);
            }
        }
        Ok(Trainer {
            method: snap.method,
            model,
            optimizer,
            control: snap.control,
            batcher: snap.batcher,
            state: snap.state,
            rng: snap.rng,
            step: snap.step,
            warmup_steps: snap.warmup_steps,
            total_steps: snap.total_steps,
            best_valid: snap.best_valid,
            eval_chunk: t.eval_chunk,
            gate_logit_range: t.gate_logit_range,
            graph: Graph::new(),
        })
    }
}
