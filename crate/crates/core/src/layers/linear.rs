use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{scale_columns, BoundProjection, InputFactor, MagnitudeMask, Mask, MaskMode, ParamCount};
use crate::error::{Error, Result};
use crate::gate::{GateConfig, HardConcreteGate};
use crate::graph::{Graph, Param};
use crate::tensor::{matmul, Tensor};

/// Starting rank at which a factorized `d1×d2` matrix has no more
/// parameters than the dense one: `⌊d1·d2 / (d1 + d2)⌋`, at least 1.
pub fn starting_rank(d1: usize, d2: usize) -> usize {
    (d1 * d2 / (d1 + d2).max(1)).max(1)
}

/// Which gate a new layer carries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateKind {
    HardConcrete(GateConfig),
    Magnitude,
    None,
}

impl GateKind {
    pub(crate) fn build<R: Rng>(&self, name: String, n: usize, block: usize, rng: &mut R) -> Result<Mask> {
        Ok(match self {
            GateKind::HardConcrete(cfg) => Mask::HardConcrete(HardConcreteGate::init(name, n, block, *cfg, rng)?),
            GateKind::Magnitude => Mask::Magnitude(MagnitudeMask::new(name, n, block)),
            GateKind::None => Mask::None,
        })
    }
}

pub(crate) fn normal_tensor<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("sized from shape")
}

/// `W = P · diag(z) · Q` with a gate on the `r` rank-1 components.
#[derive(Clone, Debug)]
pub struct FactorizedLinear {
    /// `d_out × r`
    pub p: Param,
    /// `r × d_in`
    pub q: Param,
    pub bias: Option<Param>,
    pub mask: Mask,
}

impl FactorizedLinear {
    /// Factors are drawn so that `Var(PQ)` matches a dense `1/d_in` initialization.
    pub fn new<R: Rng>(
        name: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        bias: bool,
        gate: GateKind,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 || d_in == 0 || d_out == 0 {
            return Err(Error::Invalid(format!("factorized layer {name} needs positive dims")));
        }
        let std = (1.0 / (d_in as f64 * rank as f64)).powf(0.25);
        let p = Param::new(format!("{name}.p"), normal_tensor(&[d_out, rank], std, rng));
        let q = Param::new(format!("{name}.q"), normal_tensor(&[rank, d_in], std, rng));
        let mask = gate.build(format!("{name}.gate"), rank, d_in + d_out, rng)?;
        Ok(FactorizedLinear {
            p,
            q,
            bias: bias.then(|| Param::new(format!("{name}.b"), Tensor::zeros(&[d_out]))),
            mask,
        })
    }

    /// Builds from explicit factors; the gate (if any) has one component per rank.
    pub fn from_factors(p: Param, q: Param, bias: Option<Param>, mask: Mask) -> Result<Self> {
        let (d_out, r) = p.value.dims2();
        let (r2, _) = q.value.dims2();
        if p.value.rank() != 2 || q.value.rank() != 2 || r != r2 {
            return Err(Error::shape("FactorizedLinear", p.value.shape(), q.value.shape()));
        }
        if let Some(n) = mask.components() {
            if n != r {
                return Err(Error::shape("FactorizedLinear gate", &[r], &[n]));
            }
        }
        if let Some(b) = &bias {
            if b.value.shape() != [d_out] {
                return Err(Error::shape("FactorizedLinear bias", &[d_out], b.value.shape()));
            }
        }
        Ok(FactorizedLinear { p, q, bias, mask })
    }

    pub fn rank(&self) -> usize {
        self.q.value.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.q.value.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.p.value.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph, mode: &mut MaskMode<'_>) -> Result<BoundProjection> {
        let resolved = self.mask.resolve(g, mode)?;
        let p = g.param(&self.p)?;
        let q = g.param(&self.q)?;
        let bias = self.bias.as_ref().map(|b| g.param(b)).transpose()?;
        let (left, right, inner_dim) = match &resolved.active {
            None => (p, q, self.rank()),
            Some(a) => (g.select_cols(p, a)?, g.index_rows(q, a)?, a.len()),
        };
        Ok(BoundProjection {
            left,
            right: InputFactor::Matrix(right),
            z: resolved.z,
            bias,
            inner_dim,
        })
    }

    /// Dense `P·diag(z)·Q` for explicit mask values.
    pub fn masked_weight(&self, z: &[f64]) -> Result<Tensor> {
        let pz = scale_columns(self.p.value.clone(), z);
        matmul(&pz, &self.q.value)
    }

    pub fn count(&self) -> ParamCount {
        let total = self.p.value.numel() + self.q.value.numel() + self.bias.as_ref().map_or(0, |b| b.value.numel());
        ParamCount::for_mask(total, &self.mask)
    }

    /// Drops unkept components and absorbs kept mask values into `P`.
    pub fn compact(&self) -> CompactedLinear {
        let bias = self.bias.as_ref().map(|b| b.value.clone());
        let Some(det) = self.mask.deterministic() else {
            return CompactedLinear::new(self.p.name.clone(), self.p.value.clone(), self.q.value.clone(), bias);
        };
        if det.kept.is_empty() {
            warn!("{}: no components kept, layer reduces to its bias", self.p.name);
        }
        let scale: Vec<f64> = det.kept.iter().map(|&i| det.values[i]).collect();
        let p = scale_columns(self.p.value.select_cols(&det.kept), &scale);
        let q = self.q.value.select_rows(&det.kept);
        let q = q.reshape(&[det.kept.len(), self.d_in()]).expect("row selection of a matrix");
        CompactedLinear::new(self.p.name.trim_end_matches(".p").to_string(), p, q, bias)
    }
}

/// Column (input feature) gating of an unfactorized matrix: `W · diag(z)`.
#[derive(Clone, Debug)]
pub struct ColumnGatedLinear {
    /// `d_out × d_in`
    pub w: Param,
    pub bias: Option<Param>,
    pub mask: Mask,
}

impl ColumnGatedLinear {
    pub fn new<R: Rng>(name: &str, d_in: usize, d_out: usize, bias: bool, gate: GateKind, rng: &mut R) -> Result<Self> {
        let std = (1.0 / d_in as f64).sqrt();
        Ok(ColumnGatedLinear {
            w: Param::new(format!("{name}.w"), normal_tensor(&[d_out, d_in], std, rng)),
            bias: bias.then(|| Param::new(format!("{name}.b"), Tensor::zeros(&[d_out]))),
            mask: gate.build(format!("{name}.gate"), d_in, d_out, rng)?,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.w.value.shape()[0]
    }

    /// The equivalent factorized layer `P = W`, `Q = I` sharing this gate.
    pub fn as_factorized(&self) -> FactorizedLinear {
        FactorizedLinear {
            p: self.w.clone(),
            q: Param::new("identity", Tensor::eye(self.d_in())),
            bias: self.bias.clone(),
            mask: self.mask.clone(),
        }
    }

    pub fn bind(&self, g: &mut Graph, mode: &mut MaskMode<'_>) -> Result<BoundProjection> {
        let resolved = self.mask.resolve(g, mode)?;
        let w = g.param(&self.w)?;
        let bias = self.bias.as_ref().map(|b| g.param(b)).transpose()?;
        let (left, right, inner_dim) = match resolved.active {
            None => (w, InputFactor::Identity, self.d_in()),
            Some(a) => {
                let k = a.len();
                (g.select_cols(w, &a)?, InputFactor::Columns(a), k)
            }
        };
        Ok(BoundProjection {
            left,
            right,
            z: resolved.z,
            bias,
            inner_dim,
        })
    }

    pub fn count(&self) -> ParamCount {
        let total = self.w.value.numel() + self.bias.as_ref().map_or(0, |b| b.value.numel());
        ParamCount::for_mask(total, &self.mask)
    }

    pub fn compact(&self) -> CompactedColumns {
        let bias = self.bias.as_ref().map(|b| b.value.clone());
        let name = self.w.name.trim_end_matches(".w").to_string();
        let Some(det) = self.mask.deterministic() else {
            let cols = (0..self.d_in()).collect();
            return CompactedColumns::new(name, self.w.value.clone(), cols, self.d_in(), bias);
        };
        if det.kept.is_empty() {
            warn!("{name}: no input columns kept, layer reduces to its bias");
        }
        let scale: Vec<f64> = det.kept.iter().map(|&i| det.values[i]).collect();
        let w = scale_columns(self.w.value.select_cols(&det.kept), &scale);
        CompactedColumns::new(name, w, det.kept, self.d_in(), bias)
    }
}

/// Dense factors `P′ (d_out×k)`, `Q′ (k×d_in)` left after pruning.
#[derive(Clone, Debug)]
pub struct CompactedLinear {
    pub p: Param,
    pub q: Param,
    pub bias: Option<Param>,
}

impl CompactedLinear {
    pub fn new(name: String, p: Tensor, q: Tensor, bias: Option<Tensor>) -> Self {
        CompactedLinear {
            p: Param::new(format!("{name}.p"), p),
            q: Param::new(format!("{name}.q"), q),
            bias: bias.map(|b| Param::new(format!("{name}.b"), b)),
        }
    }

    pub fn rank(&self) -> usize {
        self.q.value.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph) -> Result<BoundProjection> {
        Ok(BoundProjection {
            left: g.param(&self.p)?,
            right: InputFactor::Matrix(g.param(&self.q)?),
            z: None,
            bias: self.bias.as_ref().map(|b| g.param(b)).transpose()?,
            inner_dim: self.rank(),
        })
    }

    pub fn count(&self) -> ParamCount {
        ParamCount::ungated(self.p.value.numel() + self.q.value.numel() + self.bias.as_ref().map_or(0, |b| b.value.numel()))
    }
}

/// Surviving input columns `cols` of a column-gated matrix, already scaled.
#[derive(Clone, Debug)]
pub struct CompactedColumns {
    /// `d_out × k`
    pub w: Param,
    pub cols: Vec<usize>,
    pub d_in: usize,
    pub bias: Option<Param>,
}

impl CompactedColumns {
    pub fn new(name: String, w: Tensor, cols: Vec<usize>, d_in: usize, bias: Option<Tensor>) -> Self {
        CompactedColumns {
            w: Param::new(format!("{name}.w"), w),
            cols,
            d_in,
            bias: bias.map(|b| Param::new(format!("{name}.b"), b)),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Result<BoundProjection> {
        Ok(BoundProjection {
            left: g.param(&self.w)?,
            right: InputFactor::Columns(self.cols.clone()),
            z: None,
            bias: self.bias.as_ref().map(|b| g.param(b)).transpose()?,
            inner_dim: self.cols.len(),
        })
    }

    pub fn count(&self) -> ParamCount {
        ParamCount::ungated(self.w.value.numel() + self.bias.as_ref().map_or(0, |b| b.value.numel()))
    }
}

/// Any projection a recurrent cell can use.
#[derive(Clone, Debug)]
pub enum Linear {
    Factorized(FactorizedLinear),
    Column(ColumnGatedLinear),
    Compact(CompactedLinear),
    CompactColumns(CompactedColumns),
}

impl Linear {
    pub fn bind(&self, g: &mut Graph, mode: &mut MaskMode<'_>) -> Result<BoundProjection> {
        match self {
            Linear::Factorized(l) => l.bind(g, mode),
            Linear::Column(l) => l.bind(g, mode),
            Linear::Compact(l) => l.bind(g),
            Linear::CompactColumns(l) => l.bind(g),
        }
    }

    pub fn mask(&self) -> Option<&Mask> {
        match self {
            Linear::Factorized(l) => Some(&l.mask),
            Linear::Column(l) => Some(&l.mask),
            _ => None,
        }
    }

    pub fn mask_mut(&mut self) -> Option<&mut Mask> {
        match self {
            Linear::Factorized(l) => Some(&mut l.mask),
            Linear::Column(l) => Some(&mut l.mask),
            _ => None,
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = match self {
            Linear::Factorized(l) => vec![&l.p, &l.q],
            Linear::Column(l) => vec![&l.w],
            Linear::Compact(l) => vec![&l.p, &l.q],
            Linear::CompactColumns(l) => vec![&l.w],
        };
        if let Some(b) = self.bias() {
            v.push(b);
        }
        if let Some(m) = self.mask().and_then(Mask::param) {
            v.push(m);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Linear::Factorized(l) => {
                let mut v = vec![&mut l.p, &mut l.q];
                v.extend(l.bias.as_mut());
                v.extend(l.mask.param_mut());
                v
            }
            Linear::Column(l) => {
                let mut v = vec![&mut l.w];
                v.extend(l.bias.as_mut());
                v.extend(l.mask.param_mut());
                v
            }
            Linear::Compact(l) => {
                let mut v = vec![&mut l.p, &mut l.q];
                v.extend(l.bias.as_mut());
                v
            }
            Linear::CompactColumns(l) => {
                let mut v = vec![&mut l.w];
                v.extend(l.bias.as_mut());
                v
            }
        }
    }

    fn bias(&self) -> Option<&Param> {
        match self {
            Linear::Factorized(l) => l.bias.as_ref(),
            Linear::Column(l) => l.bias.as_ref(),
            Linear::Compact(l) => l.bias.as_ref(),
            Linear::CompactColumns(l) => l.bias.as_ref(),
        }
    }

    pub fn count(&self) -> ParamCount {
        match self {
            Linear::Factorized(l) => l.count(),
            Linear::Column(l) => l.count(),
            Linear::Compact(l) => l.count(),
            Linear::CompactColumns(l) => l.count(),
        }
    }

    /// Current (or, for gated layers, deterministic kept) inner dimension.
    pub fn kept_rank(&self) -> usize {
        match self {
            Linear::Factorized(l) => l.mask.deterministic().map_or(l.rank(), |d| d.kept.len()),
            Linear::Column(l) => l.mask.deterministic().map_or(l.d_in(), |d| d.kept.len()),
            Linear::Compact(l) => l.rank(),
            Linear::CompactColumns(l) => l.cols.len(),
        }
    }

    pub fn compact(&self) -> Linear {
        match self {
            Linear::Factorized(l) => Linear::Compact(l.compact()),
            Linear::Column(l) => Linear::CompactColumns(l.compact()),
            other => other.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::FixedNoise;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn starting_rank_examples() {
        assert_eq!(starting_rank(512, 512), 256);
        assert_eq!(starting_rank(1024, 4096), 819);
        assert_eq!(starting_rank(1, 1), 1);
        for (a, b) in [(3, 7), (100, 33), (64, 64)] {
            let r = starting_rank(a, b);
            assert!(r * (a + b) <= a * b);
        }
    }

    fn forward_with(layer: &FactorizedLinear, x: &Tensor, mode: &mut MaskMode<'_>) -> (Tensor, usize) {
        let mut g = Graph::new();
        let b = layer.bind(&mut g, mode).unwrap();
        let xv = g.constant(x.clone()).unwrap();
        let y = b.forward(&mut g, xv).unwrap();
        (g.value(y).clone(), b.inner_dim)
    }

    fn dense_oracle(layer: &FactorizedLinear, x: &Tensor, z: &[f64]) -> Tensor {
        let w = layer.masked_weight(z).unwrap();
        let mut y = matmul(x, &w.transpose()).unwrap();
        if let Some(b) = &layer.bias {
            let cols = b.value.numel();
            for row in y.data_mut().chunks_mut(cols.max(1)) {
                row.iter_mut().zip(b.value.data()).for_each(|(v, bb)| *v += bb);
            }
        }
        y
    }

    #[test]
    fn open_gates_equal_unfactorized_product() {
        let mut r = rng();
        let mut layer = FactorizedLinear::new("l", 6, 4, 3, true, GateKind::HardConcrete(GateConfig::default()), &mut r).unwrap();
        layer.bias.as_mut().unwrap().value = Tensor::vector(vec![0.1, -0.2, 0.3, 0.0]);
        let x = normal_tensor(&[5, 6], 1.0, &mut r);
        let (y, inner) = forward_with(&layer, &x, &mut MaskMode::Open);
        assert_eq!(inner, 3);
        assert!(y.max_abs_diff(&dense_oracle(&layer, &x, &[1.0; 3])) < 1e-12);
    }

    #[test]
    fn closed_gates_leave_bias_only() {
        let mut r = rng();
        let mut layer = FactorizedLinear::new("l", 6, 4, 3, true, GateKind::HardConcrete(GateConfig::default()), &mut r).unwrap();
        layer.bias.as_mut().unwrap().value = Tensor::vector(vec![0.1, -0.2, 0.3, 0.0]);
        let x = normal_tensor(&[2, 6], 1.0, &mut r);
        let (y, inner) = forward_with(&layer, &x, &mut MaskMode::Closed);
        assert_eq!(inner, 0);
        assert_eq!(y.data(), &[0.1, -0.2, 0.3, 0.0, 0.1, -0.2, 0.3, 0.0]);
    }

    #[test]
    fn active_subset_matches_full_masked_product() {
        let mut r = rng();
        let cfg = GateConfig {
            init_alpha: 0.0,
            init_jitter: 1.0,
            ..Default::default()
        };
        let layer = FactorizedLinear::new("l", 6, 4, 4, true, GateKind::HardConcrete(cfg), &mut r).unwrap();
        let x = normal_tensor(&[3, 6], 1.0, &mut r);
        let u = vec![0.02, 0.7, 0.04, 0.95];
        let z = layer.mask.gate().unwrap().sample_values(&u).unwrap();
        let nonzero = z.iter().filter(|v| **v != 0.0).count();
        assert!(nonzero < 4, "test needs at least one closed gate: {z:?}");
        let mut noise = FixedNoise::new(vec![u]);
        let (y, inner) = forward_with(&layer, &x, &mut MaskMode::Sample(&mut noise));
        assert_eq!(inner, nonzero);
        assert!(y.max_abs_diff(&dense_oracle(&layer, &x, &z)) < 1e-12);
    }

    #[test]
    fn compact_two_by_two_by_hand() {
        // P = [[1,2],[3,4]], Q = I, z = (1, 0)
        let p = Param::new("p", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let q = Param::new("q", Tensor::eye(2));
        let gate = HardConcreteGate::with_alpha("g", vec![50.0, -50.0], vec![4, 4], GateConfig::default()).unwrap();
        let layer = FactorizedLinear::from_factors(p, q, None, Mask::HardConcrete(gate)).unwrap();
        let c = layer.compact();
        assert_eq!(c.p.value.shape(), &[2, 1]);
        assert_eq!(c.q.value.shape(), &[1, 2]);
        let w = matmul(&c.p.value, &c.q.value).unwrap();
        assert_eq!(w.data(), &[1.0, 0.0, 3.0, 0.0]);
        assert_eq!(w, layer.masked_weight(&[1.0, 0.0]).unwrap());
        assert_eq!(c.count().total, 4);
    }

    #[test]
    fn compact_all_kept_is_identity_on_factors() {
        let mut r = rng();
        let cfg = GateConfig {
            init_alpha: 50.0,
            init_jitter: 0.0,
            ..Default::default()
        };
        let layer = FactorizedLinear::new("l", 5, 3, 2, false, GateKind::HardConcrete(cfg), &mut r).unwrap();
        let c = layer.compact();
        assert_eq!(c.p.value, layer.p.value);
        assert_eq!(c.q.value, layer.q.value);
    }

    #[test]
    fn compacted_matches_deterministic_masked_forward() {
        let mut r = rng();
        let cfg = GateConfig {
            init_alpha: 0.0,
            init_jitter: 2.0,
            ..Default::default()
        };
        let layer = FactorizedLinear::new("l", 16, 12, 10, true, GateKind::HardConcrete(cfg), &mut r).unwrap();
        let gate = layer.mask.gate().unwrap();
        let k = gate.compute_keep_count();
        let x = normal_tensor(&[7, 16], 1.0, &mut r);
        let (masked, inner) = forward_with(&layer, &x, &mut MaskMode::Deterministic);
        assert_eq!(inner, k);
        let compact = layer.compact();
        let mut g = Graph::new();
        let b = compact.bind(&mut g).unwrap();
        let xv = g.constant(x.clone()).unwrap();
        let y = b.forward(&mut g, xv).unwrap();
        assert!(g.value(y).max_abs_diff(&masked) < 1e-10);
        assert_eq!(compact.count().total, k * 28 + 12);
    }

    #[test]
    fn kept_actual_counts_component_cost() {
        let p = Param::new("p", Tensor::zeros(&[8, 4]));
        let q = Param::new("q", Tensor::zeros(&[4, 8]));
        let b = Param::new("b", Tensor::zeros(&[8]));
        let gate = HardConcreteGate::with_alpha("g", vec![50.0, 50.0, -50.0, -50.0], vec![16; 4], GateConfig::default())
            .unwrap();
        let layer = FactorizedLinear::from_factors(p, q, Some(b), Mask::HardConcrete(gate)).unwrap();
        let c = layer.count();
        assert_eq!(c.total, 72);
        assert_eq!(c.prunable, 64);
        assert_eq!(c.kept_actual, 2 * 16 + 8);
    }

    #[test]
    fn column_gating_is_factorization_with_identity() {
        let mut r = rng();
        let cfg = GateConfig {
            init_alpha: 0.5,
            init_jitter: 1.0,
            ..Default::default()
        };
        let col = ColumnGatedLinear::new("c", 5, 3, true, GateKind::HardConcrete(cfg), &mut r).unwrap();
        let fac = col.as_factorized();
        let x = normal_tensor(&[4, 5], 1.0, &mut r);
        let u = vec![0.3, 0.01, 0.8, 0.5, 0.99];
        let run = |lin: Linear| {
            let mut g = Graph::new();
            let mut noise = FixedNoise::new(vec![u.clone()]);
            let b = lin.bind(&mut g, &mut MaskMode::Sample(&mut noise)).unwrap();
            let xv = g.constant(x.clone()).unwrap();
            let y = b.forward(&mut g, xv).unwrap();
            let t = g.tanh(y).unwrap();
            let loss = g.sum(t).unwrap();
            let out = g.value(y).clone();
            g.backward(loss).unwrap();
            let params = lin.params();
            let w_grad = g.param_grad(params[0].id()).unwrap().clone();
            let a_grad = g.param_grad(lin.mask().unwrap().param().unwrap().id()).unwrap().clone();
            (out, w_grad, a_grad)
        };
        let (y1, gw1, ga1) = run(Linear::Column(col));
        let (y2, gw2, ga2) = run(Linear::Factorized(fac));
        assert_eq!(y1, y2);
        assert_eq!(gw1, gw2);
        assert_eq!(ga1, ga2);
    }
}
