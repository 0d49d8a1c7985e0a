//! Model-size control: an augmented Lagrangian on the expected kept size,
//! a fixed-coefficient L0 alternative, and gradual magnitude pruning (AGP)
//! of plain diagonal masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::MagnitudeMask;

/// How the constraint violation `s − t` enters the penalty and the multiplier step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    /// `(s − t) / prunable_total`
    #[default]
    Normalized,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangianController {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Parameters covered by gates when fully open.
    pub prunable_total: f64,
    /// Kept-size target once the schedule saturates.
    pub target_kept: f64,
    /// Annealing length in pruning steps.
    pub anneal_steps: u64,
    /// Pruning steps taken so far.
    pub step: u64,
    pub lr_lambda: f64,
    pub violation: Violation,
    /// Scale `lr_lambda` by the model's learning-rate schedule.
    #[serde(default)]
    pub follow_schedule: bool,
}

impl LagrangianController {
    pub fn new(prunable_total: f64, target_kept: f64, anneal_steps: u64, lr_lambda: f64, violation: Violation) -> Result<Self> {
        if prunable_total.is_nan() || prunable_total <= 0.0 {
            return Err(Error::Config("no prunable parameters to control".into()));
        }
        if !(0.0..=prunable_total).contains(&target_kept) {
            return Err(Error::Config(format!(
                "kept target {target_kept} outside [0, {prunable_total}]"
            )));
        }
        if anneal_steps == 0 {
            return Err(Error::Config("annealing length must be at least one step".into()));
        }
        Ok(LagrangianController {
            lambda1: 0.0,
            lambda2: 0.0,
            prunable_total,
            target_kept,
            anneal_steps,
            step: 0,
            lr_lambda,
            violation,
            follow_schedule: false,
        })
    }

    /// Total removal the schedule asks for once saturated.
    pub fn max_removal(&self) -> f64 {
        self.prunable_total - self.target_kept
    }

    /// `min(1, k/m) · max_removal`
    pub fn scheduled_removal(&self, k: u64) -> f64 {
        (k as f64 / self.anneal_steps as f64).min(1.0) * self.max_removal()
    }

    /// Kept-size target `t` at pruning step `k`.
    pub fn target_size(&self, k: u64) -> f64 {
        if k >= self.anneal_steps {
            self.target_kept
        } else {
            self.prunable_total - self.scheduled_removal(k)
        }
    }

    pub fn current_target(&self) -> f64 {
        self.target_size(self.step)
    }

    fn scale(&self) -> f64 {
        match self.violation {
            Violation::Normalized => 1.0 / self.prunable_total,
            Violation::Raw => 1.0,
        }
    }

    pub fn violation_of(&self, s: f64) -> f64 {
        (s - self.current_target()) * self.scale()
    }

    /// `λ₁·v + λ₂·v²` for `v` the (scaled) violation of `s`; the multipliers enter as constants.
    pub fn penalty(&self, g: &mut Graph, s: Var) -> Result<Var> {
        let t = self.current_target();
        let v = g.affine(s, self.scale(), -t * self.scale())?;
        let linear = g.scale(v, self.lambda1)?;
        let sq = g.square(v)?;
        let quad = g.scale(sq, self.lambda2)?;
        g.add(linear, quad)
    }

    pub fn penalty_value(&self, s: f64) -> f64 {
        let v = self.violation_of(s);
        self.lambda1 * v + self.lambda2 * v * v
    }

    /// Gradient ascent on both multipliers at the current target, then advances the schedule.
    pub fn update_multipliers(&mut self, s: f64) {
        self.update_multipliers_scaled(s, 1.0);
    }

    /// As [`update_multipliers`](Self::update_multipliers) with the rate
    /// multiplied by `schedule_factor` when `follow_schedule` is set.
    pub fn update_multipliers_scaled(&mut self, s: f64, schedule_factor: f64) {
        let lr = if self.follow_schedule { self.lr_lambda * schedule_factor } else { self.lr_lambda };
        let v = self.violation_of(s);
        self.lambda1 += lr * v;
        self.lambda2 += lr * v * v;
        self.step += 1;
    }
}

/// `coeff · s / prunable_total`, the classic fixed-weight expected-L0 term.
pub fn fixed_l0_penalty(g: &mut Graph, s: Var, coeff: f64, prunable_total: f64) -> Result<Var> {
    g.scale(s, coeff / prunable_total.max(1.0))
}

/// Cubic gradual-pruning schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgpScheduler {
    pub initial_sparsity: f64,
    pub final_sparsity: f64,
    pub begin_step: u64,
    pub end_step: u64,
    pub prune_frequency: u64,
    pub l1_coeff: f64,
}

/// What one pruning event did.
#[derive(Clone, Debug, PartialEq)]
pub struct AgpOutcome {
    pub sparsity_target: f64,
    /// Indices newly zeroed, as `(mask, entry)`.
    pub zeroed: Vec<(usize, usize)>,
    pub pruned_entries: usize,
    pub total_entries: usize,
}

impl AgpOutcome {
    pub fn achieved_sparsity(&self) -> f64 {
        if self.total_entries == 0 {
            0.0
        } else {
            self.pruned_entries as f64 / self.total_entries as f64
        }
    }
}

impl AgpScheduler {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.initial_sparsity) || !unit.contains(&self.final_sparsity) {
            return Err(Error::Config("AGP sparsities must lie in [0, 1]".into()));
        }
        if self.initial_sparsity > self.final_sparsity {
            return Err(Error::Config("AGP initial sparsity exceeds final sparsity".into()));
        }
        if self.begin_step > self.end_step {
            return Err(Error::Config("AGP begin step is after end step".into()));
        }
        if self.prune_frequency == 0 {
            return Err(Error::Config("AGP prune frequency must be positive".into()));
        }
        Ok(())
    }

    /// `s_f + (s_i − s_f)·(1 − progress)³`, constant outside `[begin, end]`.
    pub fn sparsity(&self, step: u64) -> f64 {
        if step <= self.begin_step {
            return self.initial_sparsity;
        }
        if step >= self.end_step {
            return self.final_sparsity;
        }
        let progress = (step - self.begin_step) as f64 / (self.end_step - self.begin_step) as f64;
        let s = self.final_sparsity + (self.initial_sparsity - self.final_sparsity) * (1.0 - progress).powi(3);
        s.clamp(self.initial_sparsity, self.final_sparsity)
    }

    pub fn is_prune_step(&self, step: u64) -> bool {
        (self.begin_step..=self.end_step).contains(&step)
            && ((step - self.begin_step).is_multiple_of(self.prune_frequency) || step == self.end_step)
    }

    /// Zeroes the smallest-magnitude surviving entries across all masks until
    /// `round(sparsity · entries)` are pruned. Earlier prunes are never undone.
    pub fn prune(&self, masks: &mut [&mut MagnitudeMask], step: u64) -> AgpOutcome {
        let total_entries: usize = masks.iter().map(|m| m.len()).sum();
        let sparsity_target = self.sparsity(step);
        let goal = (sparsity_target * total_entries as f64).round() as usize;
        let mut pruned_entries: usize = masks.iter().map(|m| m.pruned.iter().filter(|p| **p).count()).sum();
        let mut zeroed = Vec::new();
        if pruned_entries < goal {
            let mut candidates: Vec<(f64, usize, usize)> = masks
                .iter()
                .enumerate()
                .flat_map(|(mi, m)| {
                    m.active()
                        .into_iter()
                        .map(move |e| (m.values.value.data()[e].abs(), mi, e))
                })
                .collect();
            candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            for (_, mi, e) in candidates.into_iter().take(goal - pruned_entries) {
                masks[mi].prune(e);
                zeroed.push((mi, e));
                pruned_entries += 1;
            }
        }
        AgpOutcome {
            sparsity_target,
            zeroed,
            pruned_entries,
            total_entries,
        }
    }

    /// `l1_coeff · Σ|m|` over every mask, recorded on the graph.
    pub fn l1_penalty(&self, g: &mut Graph, masks: &[&MagnitudeMask]) -> Result<Option<Var>> {
        if self.l1_coeff == 0.0 || masks.is_empty() {
            return Ok(None);
        }
        let mut acc: Option<Var> = None;
        for m in masks {
            let v = g.param(&m.values)?;
            let a = g.abs(v)?;
            let s = g.sum(a)?;
            acc = Some(match acc {
                Some(prev) => g.add(prev, s)?,
                None => s,
            });
        }
        acc.map(|v| g.scale(v, self.l1_coeff)).transpose()
    }
}
