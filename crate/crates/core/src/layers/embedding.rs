//! Input embeddings: a plain lookup table, or frequency-clustered adaptive
//! embeddings `Ẽᵢ = Eᵢ·diag(zᵢ)·Oᵢ` with one gate per cluster.

use log::warn;
use rand::Rng;

use super::linear::{normal_tensor, GateKind};
use super::{scale_columns, Mask, MaskMode, ParamCount};
use crate::error::{Error, Result};
use crate::graph::{Graph, Param, Var};
use crate::tensor::Tensor;

/// Token ids `[start, end)` embedded in `d_i` dimensions and projected to the shared width.
#[derive(Clone, Debug)]
pub struct Cluster {
    pub start: usize,
    pub end: usize,
    /// `n_i × d_i`
    pub e: Param,
    /// `d_i × d`
    pub o: Param,
    pub mask: Mask,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn reduced_dim(&self) -> usize {
        self.e.value.shape()[1]
    }

    pub fn kept_rank(&self) -> usize {
        self.mask.deterministic().map_or(self.reduced_dim(), |d| d.kept.len())
    }

    pub fn count(&self) -> ParamCount {
        ParamCount::for_mask(self.e.value.numel() + self.o.value.numel(), &self.mask)
    }
}

/// Default cluster layout: splits at 20% and 50% of the (frequency-sorted)
/// vocabulary with the reduced dimension halving per cluster.
pub fn default_layout(vocab: usize, dim: usize) -> Vec<(usize, usize)> {
    let b1 = ((vocab as f64 * 0.2).round() as usize).clamp(1, vocab.saturating_sub(2).max(1));
    let b2 = ((vocab as f64 * 0.5).round() as usize).clamp(b1 + 1, vocab.saturating_sub(1).max(b1 + 1));
    let dims = [dim.max(1), (dim / 2).max(1), (dim / 4).max(1)];
    let mut out = vec![(b1, dims[0]), (b2, dims[1]), (vocab, dims[2])];
    out.retain(|&(end, _)| end <= vocab);
    out.dedup_by_key(|c| c.0);
    if out.last().map(|c| c.0) != Some(vocab) {
        out.push((vocab, dims[2]));
    }
    out
}

#[derive(Clone, Debug)]
pub struct AdaptiveEmbedding {
    pub clusters: Vec<Cluster>,
    pub dim: usize,
}

impl AdaptiveEmbedding {
    /// `layout` lists `(end, d_i)` per cluster; ends must increase, the last
    /// one being the vocabulary size.
    pub fn new<R: Rng>(name: &str, layout: &[(usize, usize)], dim: usize, gate: GateKind, rng: &mut R) -> Result<Self> {
        let mut clusters = Vec::with_capacity(layout.len());
        let mut start = 0;
        for (i, &(end, d_i)) in layout.iter().enumerate() {
            if end <= start || d_i == 0 {
                return Err(Error::Invalid(format!("bad cluster layout {layout:?}")));
            }
            let n_i = end - start;
            let e = Param::new(format!("{name}.c{i}.e"), normal_tensor(&[n_i, d_i], 1.0, rng));
            let o = Param::new(
                format!("{name}.c{i}.o"),
                normal_tensor(&[d_i, dim], 1.0 / (d_i as f64).sqrt(), rng),
            );
            let mask = gate.build(format!("{name}.c{i}.gate"), d_i, n_i + dim, rng)?;
            clusters.push(Cluster { start, end, e, o, mask });
            start = end;
        }
        Ok(AdaptiveEmbedding { clusters, dim })
    }

    pub fn vocab(&self) -> usize {
        self.clusters.last().map_or(0, |c| c.end)
    }

    pub fn bind(&self, g: &mut Graph, mode: &mut MaskMode<'_>) -> Result<BoundEmbedding> {
        let mut parts = Vec::with_capacity(self.clusters.len());
        for c in &self.clusters {
            let resolved = c.mask.resolve(g, mode)?;
            let e = g.param(&c.e)?;
            let o = g.param(&c.o)?;
            let (e, o) = match &resolved.active {
                None => (e, o),
                Some(a) => (g.select_cols(e, a)?, g.index_rows(o, a)?),
            };
            parts.push(BoundCluster {
                start: c.start,
                end: c.end,
                e,
                o,
                z: resolved.z,
            });
        }
        Ok(BoundEmbedding::Adaptive {
            clusters: parts,
            dim: self.dim,
        })
    }

    pub fn count(&self) -> ParamCount {
        self.clusters.iter().map(Cluster::count).sum()
    }

    /// Dense `n_i × d` table of one cluster for explicit mask values.
    pub fn dense_cluster(&self, i: usize, z: &[f64]) -> Result<Tensor> {
        let c = &self.clusters[i];
        crate::tensor::matmul(&scale_columns(c.e.value.clone(), z), &c.o.value)
    }

    pub fn compact(&self) -> AdaptiveEmbedding {
        let clusters = self
            .clusters
            .iter()
            .map(|c| {
                let Some(det) = c.mask.deterministic() else {
                    return Cluster {
                        mask: Mask::None,
                        ..c.clone()
                    };
                };
                if det.kept.is_empty() {
                    warn!("{}: cluster keeps no dimensions", c.e.name);
                }
                let scale: Vec<f64> = det.kept.iter().map(|&i| det.values[i]).collect();
                let e = scale_columns(c.e.value.select_cols(&det.kept), &scale);
                let o = c
                    .o
                    .value
                    .select_rows(&det.kept)
                    .reshape(&[det.kept.len(), self.dim])
                    .expect("row selection of a matrix");
                Cluster {
                    start: c.start,
                    end: c.end,
                    e: Param::new(c.e.name.clone(), e),
                    o: Param::new(c.o.name.clone(), o),
                    mask: Mask::None,
                }
            })
            .collect();
        AdaptiveEmbedding {
            clusters,
            dim: self.dim,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundCluster {
    start: usize,
    end: usize,
    e: Var,
    o: Var,
    z: Option<Var>,
}

/// An embedding bound to a graph for one batch.
#[derive(Clone, Debug)]
pub enum BoundEmbedding {
    Plain { table: Var, vocab: usize },
    Adaptive { clusters: Vec<BoundCluster>, dim: usize },
}

impl BoundEmbedding {
    /// Embeds `ids` into a `len × d` matrix.
    pub fn lookup(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        match self {
            BoundEmbedding::Plain { table, vocab } => {
                if let Some(&bad) = ids.iter().find(|&&i| i >= *vocab) {
                    return Err(Error::Index { index: bad, len: *vocab });
                }
                g.index_rows(*table, ids)
            }
            BoundEmbedding::Adaptive { clusters, dim } => {
                let vocab = clusters.last().map_or(0, |c| c.end);
                if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
                    return Err(Error::Index { index: bad, len: vocab });
                }
                let mut acc: Option<Var> = None;
                for c in clusters {
                    let (pos, local): (Vec<usize>, Vec<usize>) = ids
                        .iter()
                        .enumerate()
                        .filter(|(_, &id)| id >= c.start && id < c.end)
                        .map(|(p, &id)| (p, id - c.start))
                        .unzip();
                    if pos.is_empty() {
                        continue;
                    }
                    let rows = g.index_rows(c.e, &local)?;
                    let rows = match c.z {
                        Some(z) => g.mul(rows, z)?,
                        None => rows,
                    };
                    let proj = g.matmul(rows, c.o)?;
                    let placed = g.scatter_rows(proj, &pos, ids.len())?;
                    acc = Some(match acc {
                        Some(a) => g.add(a, placed)?,
                        None => placed,
                    });
                }
                match acc {
                    Some(a) => Ok(a),
                    None => g.constant(Tensor::zeros(&[ids.len(), *dim])),
                }
            }
        }
    }
}

/// Input embedding of a language model.
#[derive(Clone, Debug)]
pub enum Embedding {
    Plain(Param),
    Adaptive(AdaptiveEmbedding),
}

impl Embedding {
    pub fn plain<R: Rng>(name: &str, vocab: usize, dim: usize, rng: &mut R) -> Self {
        Embedding::Plain(Param::new(format!("{name}.table"), normal_tensor(&[vocab, dim], 1.0, rng)))
    }

    pub fn dim(&self) -> usize {
        match self {
            Embedding::Plain(t) => t.value.shape()[1],
            Embedding::Adaptive(a) => a.dim,
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            Embedding::Plain(t) => t.value.shape()[0],
            Embedding::Adaptive(a) => a.vocab(),
        }
    }

    pub fn bind(&self, g: &mut Graph, mode: &mut MaskMode<'_>) -> Result<BoundEmbedding> {
        match self {
            Embedding::Plain(t) => Ok(BoundEmbedding::Plain {
                table: g.param(t)?,
                vocab: self.vocab(),
            }),
            Embedding::Adaptive(a) => a.bind(g, mode),
        }
    }

    pub fn masks(&self) -> Vec<&Mask> {
        match self {
            Embedding::Plain(_) => vec![],
            Embedding::Adaptive(a) => a.clusters.iter().map(|c| &c.mask).filter(|m| m.is_gated()).collect(),
        }
    }

    pub fn masks_mut(&mut self) -> Vec<&mut Mask> {
        match self {
            Embedding::Plain(_) => vec![],
            Embedding::Adaptive(a) => a.clusters.iter_mut().map(|c| &mut c.mask).filter(|m| m.is_gated()).collect(),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Embedding::Plain(t) => vec![t],
            Embedding::Adaptive(a) => a
                .clusters
                .iter()
                .flat_map(|c| [Some(&c.e), Some(&c.o), c.mask.param()])
                .flatten()
                .collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Embedding::Plain(t) => vec![t],
            Embedding::Adaptive(a) => a
                .clusters
                .iter_mut()
                .flat_map(|c| [Some(&mut c.e), Some(&mut c.o), c.mask.param_mut()])
                .flatten()
                .collect(),
        }
    }

    pub fn count(&self) -> ParamCount {
        match self {
            Embedding::Plain(t) => ParamCount::ungated(t.value.numel()),
            Embedding::Adaptive(a) => a.count(),
        }
    }

    pub fn compact(&self) -> Embedding {
        match self {
            Embedding::Plain(_) => self.clone(),
            Embedding::Adaptive(a) => Embedding::Adaptive(a.compact()),
        }
    }
}
