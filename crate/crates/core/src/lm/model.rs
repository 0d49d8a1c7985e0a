//! A stacked Elman-style recurrent language model whose projections are
//! gated (or fixed) factorized layers.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{GateConfig, HardConcreteGate};
use crate::graph::{Graph, Param, Var};
use crate::layers::embedding::{default_layout, BoundEmbedding};
use crate::layers::linear::GateKind;
use crate::layers::{
    starting_rank, AdaptiveEmbedding, BoundProjection, ColumnGatedLinear, Embedding, FactorizedLinear, Linear,
    MagnitudeMask, Mask, MaskMode, ParamCount,
};
use crate::tensor::Tensor;

/// Pruning method a model is built for.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Factorized layers with Hard Concrete gates on rank-1 components.
    #[default]
    FlopL0,
    /// Factorized layers with magnitude-pruned diagonal masks.
    FlopAgp,
    /// Unfactorized layers with Hard Concrete gates on input columns.
    NpL0,
    /// Uniformly reduced ranks trained without gates.
    Fac,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::FlopL0, Method::FlopAgp, Method::NpL0, Method::Fac];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::FlopL0 => "flop-l0",
            Method::FlopAgp => "flop-agp",
            Method::NpL0 => "np-l0",
            Method::Fac => "fac",
        }
    }

    fn gate_kind(self, cfg: GateConfig) -> GateKind {
        match self {
            Method::FlopL0 | Method::NpL0 => GateKind::HardConcrete(cfg),
            Method::FlopAgp => GateKind::Magnitude,
            Method::Fac => GateKind::None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}, expected one of flop-l0, flop-agp, np-l0, fac")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Rank of every factorized projection; the parity rank when absent.
    pub rank: Option<usize>,
    pub adaptive_embedding: bool,
    /// `[end, reduced_dim]` per cluster; a 20%/50% split when absent.
    pub cluster_layout: Option<Vec<[usize; 2]>>,
    /// Reuse the (plain) embedding table as the output projection.
    pub tie_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 256,
            hidden: 256,
            layers: 2,
            rank: None,
            adaptive_embedding: true,
            cluster_layout: None,
            tie_output: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config("model dimensions and layer count must be positive".into()));
        }
        if self.tie_output && (self.adaptive_embedding || self.embed_dim != self.hidden) {
            return Err(Error::Config(
                "tied output needs a plain embedding with embed_dim == hidden".into(),
            ));
        }
        Ok(())
    }

    fn layout(&self, classes: usize) -> Vec<(usize, usize)> {
        match &self.cluster_layout {
            Some(l) => l.iter().map(|&[end, d]| (end, d)).collect(),
            None => default_layout(classes, self.embed_dim),
        }
    }
}

/// Input and recurrent projections of one layer: `h' = tanh(W_x·x + W_h·h + b)`.
#[derive(Clone, Debug)]
pub struct Cell {
    pub input: Linear,
    pub recurrent: Linear,
}

/// A model bound to one graph with one mask per gate.
pub struct BoundModel {
    embedding: BoundEmbedding,
    cells: Vec<(BoundProjection, BoundProjection)>,
    out_w: Var,
    out_b: Var,
}

impl BoundModel {
    /// Inner dimensions of the executed projection products, per cell.
    pub fn inner_dims(&self) -> Vec<(usize, usize)> {
        self.cells.iter().map(|(i, r)| (i.inner_dim, r.inner_dim)).collect()
    }
}

/// Rank bookkeeping for one prunable layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRank {
    pub name: String,
    pub full: usize,
    pub kept: usize,
}

#[derive(Clone, Debug)]
pub struct RecurrentLM {
    pub embedding: Embedding,
    pub cells: Vec<Cell>,
    /// `classes × hidden`; absent when tied to the embedding.
    pub output: Option<Param>,
    pub output_bias: Param,
    pub hidden: usize,
    /// Parameter count of the unpruned model of the same configuration.
    pub reference_total: usize,
}

fn scaled(n: usize, keep: f64, what: &str) -> usize {
    let r = (n as f64 * keep).round() as usize;
    if r == 0 {
        warn!("{what}: reduced size rounds to 0, using 1");
        1
    } else {
        r
    }
}

impl RecurrentLM {
    pub fn new<R: Rng>(cfg: &ModelConfig, classes: usize, method: Method, gate: GateConfig, rng: &mut R) -> Result<Self> {
        let mut model = Self::build(cfg, classes, method, gate, 1.0, rng)?;
        model.reference_total = model.count().total;
        Ok(model)
    }

    /// Ungated model whose ranks and cluster dimensions are scaled by
    /// `keep_fraction` (rounded, at least 1).
    pub fn reduced<R: Rng>(cfg: &ModelConfig, classes: usize, keep_fraction: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&keep_fraction) {
            return Err(Error::Config(format!("keep fraction {keep_fraction} outside [0, 1]")));
        }
        let reference = Self::build(cfg, classes, Method::Fac, GateConfig::default(), 1.0, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut model = Self::build(cfg, classes, Method::Fac, GateConfig::default(), keep_fraction, rng)?;
        model.reference_total = reference.count().total;
        Ok(model)
    }

    fn build<R: Rng>(cfg: &ModelConfig, classes: usize, method: Method, gate: GateConfig, keep: f64, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let kind = method.gate_kind(gate);
        let embedding = if cfg.adaptive_embedding {
            let layout: Vec<(usize, usize)> = cfg
                .layout(classes)
                .into_iter()
                .enumerate()
                .map(|(i, (end, d))| (end, scaled(d, keep, &format!("embedding cluster {i}"))))
                .collect();
            if layout.last().map(|c| c.0) != Some(classes) {
                return Err(Error::Config(format!(
                    "cluster layout must end at the class count {classes}, got {layout:?}"
                )));
            }
            Embedding::Adaptive(AdaptiveEmbedding::new("embedding", &layout, cfg.embed_dim, kind, rng)?)
        } else {
            Embedding::plain("embedding", classes, cfg.embed_dim, rng)
        };
        let mut cells = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let d_in = if l == 0 { cfg.embed_dim } else { cfg.hidden };
            let proj = |name: String, d_in: usize, bias: bool, rng: &mut R| -> Result<Linear> {
                if method == Method::NpL0 {
                    return Ok(Linear::Column(ColumnGatedLinear::new(&name, d_in, cfg.hidden, bias, kind, rng)?));
                }
                let full = cfg.rank.unwrap_or_else(|| starting_rank(d_in, cfg.hidden));
                let rank = scaled(full, keep, &name);
                Ok(Linear::Factorized(FactorizedLinear::new(&name, d_in, cfg.hidden, rank, bias, kind, rng)?))
            };
            let input = proj(format!("cell{l}.input"), d_in, true, rng)?;
            let recurrent = proj(format!("cell{l}.recurrent"), cfg.hidden, false, rng)?;
            cells.push(Cell { input, recurrent });
        }
        let output = (!cfg.tie_output).then(|| Param::new("output.w", Tensor::zeros(&[classes, cfg.hidden])));
        Ok(RecurrentLM {
            embedding,
            cells,
            output,
            output_bias: Param::new("output.b", Tensor::zeros(&[classes])),
            hidden: cfg.hidden,
            reference_total: 0,
        })
    }

    pub fn classes(&self) -> usize {
        self.output_bias.value.numel()
    }

    pub fn zero_state(&self, batch: usize) -> Vec<Tensor> {
        vec![Tensor::zeros(&[batch, self.hidden]); self.cells.len()]
    }

    /// Binds every layer with one mask per gate, shared by all rows and time steps.
    pub fn bind(&self, g: &mut Graph, mode: &mut MaskMode<'_>) -> Result<BoundModel> {
        let embedding = self.embedding.bind(g, mode)?;
        let mut cells = Vec::with_capacity(self.cells.len());
        for c in &self.cells {
            cells.push((c.input.bind(g, mode)?, c.recurrent.bind(g, mode)?));
        }
        let out_w = match (&self.output, &embedding) {
            (Some(w), _) => g.param(w)?,
            (None, BoundEmbedding::Plain { table, .. }) => *table,
            (None, _) => return Err(Error::Invalid("tied output needs a plain embedding".into())),
        };
        let out_b = g.param(&self.output_bias)?;
        Ok(BoundModel {
            embedding,
            cells,
            out_w,
            out_b,
        })
    }

    /// Logits for time-major `inputs` of `batch` lanes; `state` carries the
    /// hidden values in and out (detached from the graph).
    pub fn forward(&self, g: &mut Graph, bound: &BoundModel, inputs: &[usize], batch: usize, state: &mut [Tensor]) -> Result<Var> {
        if batch == 0 || !inputs.len().is_multiple_of(batch) || inputs.is_empty() {
            return Err(Error::Invalid(format!("{} inputs do not form lanes of {batch}", inputs.len())));
        }
        if state.len() != self.cells.len() || state.iter().any(|s| s.shape() != [batch, self.hidden]) {
            return Err(Error::Invalid("recurrent state does not match the model".into()));
        }
        let steps = inputs.len() / batch;
        let mut x = bound.embedding.lookup(g, inputs)?;
        for (l, (input, recurrent)) in bound.cells.iter().enumerate() {
            let xa = input.forward(g, x)?;
            let mut h = g.constant(state[l].clone())?;
            let mut outs = Vec::with_capacity(steps);
            for t in 0..steps {
                let xt = g.slice_rows(xa, t * batch, batch)?;
                let ht = recurrent.forward(g, h)?;
                let a = g.add(xt, ht)?;
                h = g.tanh(a)?;
                outs.push(h);
            }
            state[l] = g.value(h).clone();
            x = if steps == 1 { outs[0] } else { g.concat_rows(&outs)? };
        }
        let logits = g.matmul_nt(x, bound.out_w)?;
        g.add(logits, bound.out_b)
    }

    /// Summed negative log-likelihood (nats) of predicting `ids[i+1]` from
    /// `ids[..=i]`, one lane, deterministic masks, in windows of `chunk`.
    pub fn nll(&self, ids: &[usize], chunk: usize, state: &mut [Tensor]) -> Result<(f64, usize)> {
        let chunk = chunk.max(1);
        let mut g = Graph::new();
        let (mut total, mut count) = (0.0, 0);
        let n = ids.len().saturating_sub(1);
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            g.reset();
            let bound = self.bind(&mut g, &mut MaskMode::Deterministic)?;
            let logits = self.forward(&mut g, &bound, &ids[start..end], 1, state)?;
            let ce = g.softmax_cross_entropy(logits, &ids[start + 1..end + 1])?;
            total += g.value(ce).item() * (end - start) as f64;
            count += end - start;
            start = end;
        }
        Ok((total, count))
    }

    /// Bits per character over a whole stream, starting from a zero state.
    pub fn bpc(&self, ids: &[usize], chunk: usize) -> Result<f64> {
        let mut state = self.zero_state(1);
        let (nll, count) = self.nll(ids, chunk, &mut state)?;
        if count == 0 {
            return Err(Error::Corpus("split has fewer than two symbols".into()));
        }
        Ok(nll / count as f64 / std::f64::consts::LN_2)
    }

    fn named_linears(&self) -> impl Iterator<Item = (String, &Linear)> {
        self.cells.iter().enumerate().flat_map(|(l, c)| {
            [(format!("cell{l}.input"), &c.input), (format!("cell{l}.recurrent"), &c.recurrent)]
        })
    }

    /// Every gated mask with its layer name, embedding clusters first.
    pub fn named_masks(&self) -> Vec<(String, &Mask)> {
        let mut out: Vec<(String, &Mask)> = match &self.embedding {
            Embedding::Adaptive(a) => a
                .clusters
                .iter()
                .enumerate()
                .filter(|(_, c)| c.mask.is_gated())
                .map(|(i, c)| (format!("embedding.c{i}"), &c.mask))
                .collect(),
            Embedding::Plain(_) => Vec::new(),
        };
        for (name, lin) in self.named_linears() {
            if let Some(m) = lin.mask().filter(|m| m.is_gated()) {
                out.push((name, m));
            }
        }
        out
    }

    pub fn masks_mut(&mut self) -> Vec<&mut Mask> {
        let mut out = self.embedding.masks_mut();
        for c in &mut self.cells {
            for lin in [&mut c.input, &mut c.recurrent] {
                if let Some(m) = lin.mask_mut().filter(|m| m.is_gated()) {
                    out.push(m);
                }
            }
        }
        out
    }

    pub fn gates(&self) -> Vec<&HardConcreteGate> {
        self.named_masks().into_iter().filter_map(|(_, m)| m.gate()).collect()
    }

    pub fn magnitude_masks(&self) -> Vec<&MagnitudeMask> {
        self.named_masks().into_iter().filter_map(|(_, m)| m.magnitude()).collect()
    }

    pub fn magnitude_masks_mut(&mut self) -> Vec<&mut MagnitudeMask> {
        self.masks_mut().into_iter().filter_map(Mask::magnitude_mut).collect()
    }

    /// Differentiable expected kept size over all Hard Concrete gates.
    pub fn expected_size(&self, g: &mut Graph) -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for gate in self.gates() {
            let s = gate.expected_l0(g)?;
            acc = Some(match acc {
                Some(a) => g.add(a, s)?,
                None => s,
            });
        }
        Ok(acc)
    }

    pub fn prunable_total(&self) -> usize {
        self.named_masks().iter().map(|(_, m)| m.prunable()).sum()
    }

    pub fn expected_kept_prunable(&self) -> f64 {
        self.named_masks().iter().map(|(_, m)| m.expected_kept()).sum()
    }

    pub fn kept_prunable(&self) -> usize {
        self.named_masks().iter().map(|(_, m)| m.kept_actual()).sum()
    }

    pub fn layer_ranks(&self) -> Vec<LayerRank> {
        let mut out = Vec::new();
        if let Embedding::Adaptive(a) = &self.embedding {
            for (i, c) in a.clusters.iter().enumerate() {
                out.push(LayerRank {
                    name: format!("embedding.c{i}"),
                    full: c.reduced_dim(),
                    kept: c.kept_rank(),
                });
            }
        }
        for (name, lin) in self.named_linears() {
            let full = match lin {
                Linear::Factorized(l) => l.rank(),
                Linear::Column(l) => l.d_in(),
                Linear::Compact(l) => l.rank(),
                Linear::CompactColumns(l) => l.cols.len(),
            };
            out.push(LayerRank {
                name,
                full,
                kept: lin.kept_rank(),
            });
        }
        out
    }

    /// Canonical parameter order: embedding, cells, output.
    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.embedding.params();
        for c in &self.cells {
            v.extend(c.input.params());
            v.extend(c.recurrent.params());
        }
        v.extend(self.output.as_ref());
        v.push(&self.output_bias);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.embedding.params_mut();
        for c in &mut self.cells {
            v.extend(c.input.params_mut());
            v.extend(c.recurrent.params_mut());
        }
        v.extend(self.output.as_mut());
        v.push(&mut self.output_bias);
        v
    }

    pub fn count(&self) -> ParamCount {
        let out = self.output.as_ref().map_or(0, |w| w.value.numel()) + self.output_bias.value.numel();
        self.embedding.count()
            + self
                .cells
                .iter()
                .map(|c| c.input.count() + c.recurrent.count())
                .sum::<ParamCount>()
            + ParamCount::ungated(out)
    }

    /// Dense model with unkept components removed and mask values absorbed.
    pub fn compact(&self) -> RecurrentLM {
        RecurrentLM {
            embedding: self.embedding.compact(),
            cells: self
                .cells
                .iter()
                .map(|c| Cell {
                    input: c.input.compact(),
                    recurrent: c.recurrent.compact(),
                })
                .collect(),
            ..self.clone()
        }
    }
}
