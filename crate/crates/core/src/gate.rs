//! Hard Concrete gates: a stretched and rectified logistic relaxation of
//! Bernoulli variables with point masses at exactly 0 and 1.
//!
//! For logits `α`, uniform noise `u` and constants `l < 0 < 1 < r`:
//!
//! ```text
//! s = sigmoid((ln u − ln(1 − u) + α) / β)
//! z = clamp(s·(r − l) + l, 0, 1)
//! P(z > 0) = sigmoid(α − β·ln(−l / r))
//! ```

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, Param, Var};
use crate::tensor::Tensor;

/// Lower clamp applied to injected uniforms; the upper clamp is `1 − U_EPS`.
pub const U_EPS: f64 = 1e-8;

/// Value a kept component carries into the deterministic mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeptValue {
    /// `clamp(sigmoid(α/β)·(r − l) + l, 0, 1)`
    #[default]
    RectifiedMean,
    /// The open probability `P(z > 0)` itself.
    OpenProbability,
    One,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub l: f64,
    pub r: f64,
    pub beta: f64,
    pub init_alpha: f64,
    pub init_jitter: f64,
    pub kept_value: KeptValue,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            l: -0.1,
            r: 1.1,
            beta: 1.0,
            init_alpha: 2.2,
            init_jitter: 0.01,
            kept_value: KeptValue::RectifiedMean,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l < 0.0 && self.r > 1.0) {
            return Err(Error::Invalid(format!(
                "stretch constants must satisfy l < 0 < 1 < r, got l={} r={}",
                self.l, self.r
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Invalid(format!("temperature must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    /// `β·ln(−l/r)`, the logit shift between `α` and the open probability.
    pub fn log_ratio(&self) -> f64 {
        self.beta * (-self.l / self.r).ln()
    }
}

/// Result of [`HardConcreteGate::deterministic_mask`].
#[derive(Clone, Debug, PartialEq)]
pub struct DeterministicMask {
    /// Kept component indices in ascending order.
    pub kept: Vec<usize>,
    /// One value per component; exactly zero for dropped components.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct HardConcreteGate {
    pub alpha: Param,
    pub config: GateConfig,
    pub block_sizes: Vec<usize>,
}

impl HardConcreteGate {
    pub fn with_alpha(name: impl Into<String>, alpha: Vec<f64>, block_sizes: Vec<usize>, config: GateConfig) -> Result<Self> {
        config.validate()?;
        if alpha.len() != block_sizes.len() {
            return Err(Error::shape("HardConcreteGate", &[alpha.len()], &[block_sizes.len()]));
        }
        if block_sizes.contains(&0) {
            return Err(Error::Invalid("gate block sizes must be at least 1".into()));
        }
        Ok(HardConcreteGate {
            alpha: Param::gate(name, Tensor::vector(alpha)),
            config,
            block_sizes,
        })
    }

    /// `n` gates of equal block size, logits drawn around `config.init_alpha`.
    pub fn init<R: Rng>(name: impl Into<String>, n: usize, block_size: usize, config: GateConfig, rng: &mut R) -> Result<Self> {
        let alpha = if config.init_jitter > 0.0 {
            let normal = Normal::new(config.init_alpha, config.init_jitter)
                .map_err(|e| Error::Invalid(e.to_string()))?;
            (0..n).map(|_| normal.sample(rng)).collect()
        } else {
            vec![config.init_alpha; n]
        };
        Self::with_alpha(name, alpha, vec![block_size; n], config)
    }

    pub fn len(&self) -> usize {
        self.block_sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.block_sizes.is_empty()
    }

    pub fn alphas(&self) -> &[f64] {
        self.alpha.value.data()
    }

    pub fn total_block_size(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    fn noise_logits(&self, u: &[f64]) -> Result<Tensor> {
        if u.len() != self.len() {
            return Err(Error::shape("sample_mask", &[self.len()], &[u.len()]));
        }
        Ok(Tensor::vector(
            u.iter()
                .map(|&x| {
                    let x = x.clamp(U_EPS, 1.0 - U_EPS);
                    x.ln() - (1.0 - x).ln()
                })
                .collect(),
        ))
    }

    /// Relaxed mask for injected uniforms, recorded on `g` as a function of `α`.
    pub fn sample_mask(&self, g: &mut Graph, u: &[f64]) -> Result<Var> {
        let noise = self.noise_logits(u)?;
        let alpha = g.param(&self.alpha)?;
        let noise = g.constant(noise)?;
        let pre = g.add(alpha, noise)?;
        let pre = g.scale(pre, 1.0 / self.config.beta)?;
        let s = g.sigmoid(pre)?;
        let stretched = g.affine(s, self.config.r - self.config.l, self.config.l)?;
        g.clamp(stretched, 0.0, 1.0)
    }

    /// Off-graph evaluation of [`HardConcreteGate::sample_mask`].
    pub fn sample_values(&self, u: &[f64]) -> Result<Vec<f64>> {
        let noise = self.noise_logits(u)?;
        let c = &self.config;
        Ok(self
            .alphas()
            .iter()
            .zip(noise.data())
            .map(|(a, n)| (sigmoid((n + a) / c.beta) * (c.r - c.l) + c.l).clamp(0.0, 1.0))
            .collect())
    }

    pub fn draw_uniforms<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.len()).map(|_| rng.gen::<f64>()).collect()
    }

    pub fn open_probability(&self) -> Vec<f64> {
        let shift = self.config.log_ratio();
        self.alphas().iter().map(|a| sigmoid(a - shift)).collect()
    }

    pub fn open_probability_var(&self, g: &mut Graph) -> Result<Var> {
        let alpha = g.param(&self.alpha)?;
        let shifted = g.add_scalar(alpha, -self.config.log_ratio())?;
        g.sigmoid(shifted)
    }

    /// Expected number of kept parameters: open probabilities weighted by block size.
    pub fn expected_l0(&self, g: &mut Graph) -> Result<Var> {
        let p = self.open_probability_var(g)?;
        let sizes = g.constant(Tensor::vector(self.block_sizes.iter().map(|&b| b as f64).collect()))?;
        let weighted = g.mul(p, sizes)?;
        g.sum(weighted)
    }

    pub fn expected_l0_value(&self) -> f64 {
        self.open_probability()
            .iter()
            .zip(&self.block_sizes)
            .map(|(p, &b)| p * b as f64)
            .sum()
    }

    /// Value each component takes if it is kept at inference time.
    pub fn kept_values(&self) -> Vec<f64> {
        let c = &self.config;
        match c.kept_value {
            KeptValue::RectifiedMean => self
                .alphas()
                .iter()
                .map(|a| (sigmoid(a / c.beta) * (c.r - c.l) + c.l).clamp(0.0, 1.0))
                .collect(),
            KeptValue::OpenProbability => self.open_probability(),
            KeptValue::One => vec![1.0; self.len()],
        }
    }

    /// Component indices by descending open probability, ties to the lower index.
    pub fn ranking(&self) -> Vec<usize> {
        rank_descending(&self.open_probability())
    }

    pub fn deterministic_mask(&self, keep_count: usize) -> Result<DeterministicMask> {
        if keep_count > self.len() {
            return Err(Error::Invalid(format!(
                "keep count {keep_count} exceeds gate size {}",
                self.len()
            )));
        }
        let mut kept: Vec<usize> = self.ranking().into_iter().take(keep_count).collect();
        kept.sort_unstable();
        let kv = self.kept_values();
        let mut values = vec![0.0; self.len()];
        for &i in &kept {
            values[i] = kv[i];
        }
        Ok(DeterministicMask { kept, values })
    }

    /// Number of components to keep so the kept size matches the expected L0.
    pub fn compute_keep_count(&self) -> usize {
        let p = self.open_probability();
        let uniform = self.block_sizes.windows(2).all(|w| w[0] == w[1]);
        if uniform {
            let total: f64 = p.iter().sum();
            return (total.round() as usize).min(self.len());
        }
        let expected = self.expected_l0_value();
        let mut acc = 0.0;
        for (k, i) in self.ranking().into_iter().enumerate() {
            if acc >= expected {
                return k;
            }
            acc += self.block_sizes[i] as f64;
        }
        self.len()
    }
}

pub(crate) fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}
