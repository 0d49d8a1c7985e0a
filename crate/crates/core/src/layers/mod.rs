//! Gated layer parameterizations and their compaction to plain dense factors.
//!
//! Every prunable layer is a product `left · diag(z) · right` where the gate
//! `z` selects rank-1 components (factorized layers, embedding clusters) or
//! input columns (column-gated layers). During a batch only the components
//! with `z ≠ 0` take part in the matrix products.

pub mod embedding;
pub mod linear;

use rand::RngCore;

use crate::error::Result;
use crate::gate::{DeterministicMask, HardConcreteGate};
use crate::graph::{Graph, Param, Var};
use crate::tensor::Tensor;

pub use embedding::{AdaptiveEmbedding, Cluster, Embedding};
pub use linear::{starting_rank, ColumnGatedLinear, CompactedColumns, CompactedLinear, FactorizedLinear, Linear};

/// Supplier of uniform noise for gate sampling.
pub trait NoiseSource {
    fn uniforms(&mut self, n: usize) -> Vec<f64>;
}

/// Draws from any random generator.
pub struct RngNoise<'a, R: RngCore>(pub &'a mut R);

impl<R: RngCore> NoiseSource for RngNoise<'_, R> {
    fn uniforms(&mut self, n: usize) -> Vec<f64> {
        use rand::Rng;
        (0..n).map(|_| self.0.gen::<f64>()).collect()
    }
}

/// Replays pre-drawn noise vectors in order, e.g. to freeze `u` for gradient checks.
pub struct FixedNoise {
    queue: std::collections::VecDeque<Vec<f64>>,
}

impl FixedNoise {
    pub fn new(draws: Vec<Vec<f64>>) -> Self {
        FixedNoise { queue: draws.into() }
    }
}

impl NoiseSource for FixedNoise {
    fn uniforms(&mut self, n: usize) -> Vec<f64> {
        match self.queue.pop_front() {
            Some(u) if u.len() == n => u,
            Some(u) => panic!("fixed noise of length {} requested as {n}", u.len()),
            None => panic!("fixed noise exhausted"),
        }
    }
}

/// How gates are turned into masks when a layer is bound to a graph.
pub enum MaskMode<'a> {
    /// All gates fully open and not differentiated (warmup).
    Open,
    /// All gates closed.
    Closed,
    /// Top-k deterministic inference masks.
    Deterministic,
    /// One stochastic sample per gate, shared by every row and time step
    /// that uses the binding.
    Sample(&'a mut dyn NoiseSource),
}

/// Learnable diagonal mask pruned by magnitude; pruned entries stay zero.
#[derive(Clone, Debug)]
pub struct MagnitudeMask {
    pub values: Param,
    pub pruned: Vec<bool>,
    pub block_sizes: Vec<usize>,
}

impl MagnitudeMask {
    pub fn new(name: impl Into<String>, n: usize, block_size: usize) -> Self {
        MagnitudeMask {
            values: Param::gate(name, Tensor::ones(&[n])),
            pruned: vec![false; n],
            block_sizes: vec![block_size; n],
        }
    }

    pub fn len(&self) -> usize {
        self.pruned.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pruned.is_empty()
    }

    pub fn active(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.pruned[i]).collect()
    }

    pub fn prune(&mut self, index: usize) {
        self.pruned[index] = true;
        self.values.value.data_mut()[index] = 0.0;
    }

    /// Re-zeroes pruned entries after an optimizer step.
    pub fn enforce(&mut self) {
        for (i, &p) in self.pruned.iter().enumerate() {
            if p {
                self.values.value.data_mut()[i] = 0.0;
            }
        }
    }

    pub fn kept_size(&self) -> usize {
        self.block_sizes
            .iter()
            .zip(&self.pruned)
            .filter(|(_, p)| !**p)
            .map(|(b, _)| *b)
            .sum()
    }
}

/// The gate attached to a prunable layer.
#[derive(Clone, Debug)]
pub enum Mask {
    HardConcrete(HardConcreteGate),
    Magnitude(MagnitudeMask),
    /// Ungated; every component always active.
    None,
}

impl Mask {
    pub fn components(&self) -> Option<usize> {
        match self {
            Mask::HardConcrete(g) => Some(g.len()),
            Mask::Magnitude(m) => Some(m.len()),
            Mask::None => None,
        }
    }

    pub fn is_gated(&self) -> bool {
        !matches!(self, Mask::None)
    }

    pub fn gate(&self) -> Option<&HardConcreteGate> {
        match self {
            Mask::HardConcrete(g) => Some(g),
            _ => None,
        }
    }

    pub fn gate_mut(&mut self) -> Option<&mut HardConcreteGate> {
        match self {
            Mask::HardConcrete(g) => Some(g),
            _ => None,
        }
    }

    pub fn magnitude(&self) -> Option<&MagnitudeMask> {
        match self {
            Mask::Magnitude(m) => Some(m),
            _ => None,
        }
    }

    pub fn magnitude_mut(&mut self) -> Option<&mut MagnitudeMask> {
        match self {
            Mask::Magnitude(m) => Some(m),
            _ => None,
        }
    }

    pub fn param(&self) -> Option<&Param> {
        match self {
            Mask::HardConcrete(g) => Some(&g.alpha),
            Mask::Magnitude(m) => Some(&m.values),
            Mask::None => None,
        }
    }

    pub fn param_mut(&mut self) -> Option<&mut Param> {
        match self {
            Mask::HardConcrete(g) => Some(&mut g.alpha),
            Mask::Magnitude(m) => Some(&mut m.values),
            Mask::None => None,
        }
    }

    /// Total parameter cost of all gated blocks.
    pub fn prunable(&self) -> usize {
        match self {
            Mask::HardConcrete(g) => g.total_block_size(),
            Mask::Magnitude(m) => m.block_sizes.iter().sum(),
            Mask::None => 0,
        }
    }

    pub fn expected_kept(&self) -> f64 {
        match self {
            Mask::HardConcrete(g) => g.expected_l0_value(),
            Mask::Magnitude(m) => m.kept_size() as f64,
            Mask::None => 0.0,
        }
    }

    /// Inference mask: top-k by open probability for Hard Concrete gates,
    /// surviving entries with their learned values for magnitude masks.
    pub fn deterministic(&self) -> Option<DeterministicMask> {
        match self {
            Mask::HardConcrete(g) => Some(
                g.deterministic_mask(g.compute_keep_count())
                    .expect("computed keep count is within range"),
            ),
            Mask::Magnitude(m) => {
                let kept = m.active();
                let mut values = vec![0.0; m.len()];
                for &i in &kept {
                    values[i] = m.values.value.data()[i];
                }
                Some(DeterministicMask { kept, values })
            }
            Mask::None => None,
        }
    }

    pub fn kept_actual(&self) -> usize {
        match (self, self.deterministic()) {
            (Mask::HardConcrete(g), Some(d)) => d.kept.iter().map(|&i| g.block_sizes[i]).sum(),
            (Mask::Magnitude(m), _) => m.kept_size(),
            _ => 0,
        }
    }

    /// Resolves the gate into the active component set and (optionally) a
    /// graph node holding the active mask values.
    pub fn resolve(&self, g: &mut Graph, mode: &mut MaskMode<'_>) -> Result<ResolvedMask> {
        let n = match self.components() {
            Some(n) => n,
            None => return Ok(ResolvedMask::open()),
        };
        match (self, mode) {
            (_, MaskMode::Open) => Ok(ResolvedMask::open()),
            (_, MaskMode::Closed) => Ok(ResolvedMask {
                active: Some(Vec::new()),
                z: None,
                sampled: None,
            }),
            (mask, MaskMode::Deterministic) => {
                let d = mask.deterministic().expect("gated mask");
                let vals: Vec<f64> = d.kept.iter().map(|&i| d.values[i]).collect();
                let z = g.constant(Tensor::vector(vals))?;
                Ok(ResolvedMask {
                    active: Some(d.kept),
                    z: Some(z),
                    sampled: None,
                })
            }
            (Mask::HardConcrete(gate), MaskMode::Sample(noise)) => {
                let u = noise.uniforms(n);
                let full = gate.sample_mask(g, &u)?;
                let values = g.value(full).data().to_vec();
                let active: Vec<usize> = (0..n).filter(|&i| values[i] != 0.0).collect();
                let z = g.index_rows(full, &active)?;
                Ok(ResolvedMask {
                    active: Some(active),
                    z: Some(z),
                    sampled: Some(values),
                })
            }
            (Mask::Magnitude(m), MaskMode::Sample(_)) => {
                let active = m.active();
                let full = g.param(&m.values)?;
                let z = g.index_rows(full, &active)?;
                Ok(ResolvedMask {
                    active: Some(active),
                    z: Some(z),
                    sampled: None,
                })
            }
            (Mask::None, _) => unreachable!("ungated masks return early"),
        }
    }
}

/// A gate bound to one graph: which components participate and their mask values.
#[derive(Clone, Debug)]
pub struct ResolvedMask {
    /// `None` means every component is active.
    pub active: Option<Vec<usize>>,
    /// Mask values of the active components, in `active` order.
    pub z: Option<Var>,
    /// Full sampled mask, kept for instrumentation.
    pub sampled: Option<Vec<f64>>,
}

impl ResolvedMask {
    pub fn open() -> Self {
        ResolvedMask {
            active: None,
            z: None,
            sampled: None,
        }
    }
}

/// Input-side factor of a bound projection.
#[derive(Clone, Debug)]
pub enum InputFactor {
    /// `x · rightᵀ`
    Matrix(Var),
    /// Plain selection of input columns.
    Columns(Vec<usize>),
    /// Every input column, unchanged.
    Identity,
}

/// A projection bound to a graph for one batch: `y = ((x ⋅ R) ∘ z) · Lᵀ + b`.
#[derive(Clone, Debug)]
pub struct BoundProjection {
    pub left: Var,
    pub right: InputFactor,
    pub z: Option<Var>,
    pub bias: Option<Var>,
    pub inner_dim: usize,
}

impl BoundProjection {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = match &self.right {
            InputFactor::Matrix(q) => g.matmul_nt(x, *q)?,
            InputFactor::Columns(c) => g.select_cols(x, c)?,
            InputFactor::Identity => x,
        };
        let h = match self.z {
            Some(z) => g.mul(h, z)?,
            None => h,
        };
        let y = g.matmul_nt(h, self.left)?;
        match self.bias {
            Some(b) => g.add(y, b),
            None => Ok(y),
        }
    }
}

/// Parameter accounting for a layer or a whole model.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ParamCount {
    /// Every weight currently stored.
    pub total: usize,
    /// Weights covered by a gate.
    pub prunable: usize,
    /// `total − prunable + Σ P(z>0)·block_size`
    pub kept_expected: f64,
    /// `total − prunable + Σ kept blocks` under the deterministic masks.
    pub kept_actual: usize,
}

impl ParamCount {
    pub fn ungated(total: usize) -> Self {
        ParamCount {
            total,
            prunable: 0,
            kept_expected: total as f64,
            kept_actual: total,
        }
    }

    pub fn for_mask(total: usize, mask: &Mask) -> Self {
        let prunable = mask.prunable();
        let fixed = total - prunable;
        ParamCount {
            total,
            prunable,
            kept_expected: fixed as f64 + mask.expected_kept(),
            kept_actual: fixed + mask.kept_actual(),
        }
    }

    pub fn compression(&self, original_total: usize) -> f64 {
        1.0 - self.kept_actual as f64 / original_total as f64
    }
}

impl std::ops::Add for ParamCount {
    type Output = ParamCount;
    fn add(self, o: ParamCount) -> ParamCount {
        ParamCount {
            total: self.total + o.total,
            prunable: self.prunable + o.prunable,
            kept_expected: self.kept_expected + o.kept_expected,
            kept_actual: self.kept_actual + o.kept_actual,
        }
    }
}

impl std::iter::Sum for ParamCount {
    fn sum<I: Iterator<Item = ParamCount>>(iter: I) -> Self {
        iter.fold(ParamCount::default(), |a, b| a + b)
    }
}

/// Scales column `j` of a matrix by `scale[j]`.
pub(crate) fn scale_columns(mut m: Tensor, scale: &[f64]) -> Tensor {
    let cols = scale.len();
    for row in m.data_mut().chunks_mut(cols.max(1)) {
        row.iter_mut().zip(scale).for_each(|(x, s)| *x *= s);
    }
    m
}
