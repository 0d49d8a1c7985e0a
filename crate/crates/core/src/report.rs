//! Size reports for pruned models and summary tables over finished runs.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lm::RecurrentLM;
use crate::metrics::Record;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub full_rank: usize,
    pub kept_rank: usize,
    pub prunable: usize,
    pub kept_expected: f64,
    pub kept_actual: usize,
}

/// Snapshot of a model's size under its current gates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub layers: Vec<LayerReport>,
    /// Size of the unpruned model of the same configuration.
    pub original_total: usize,
    pub total: usize,
    pub prunable: usize,
    pub kept_expected: f64,
    pub kept_actual: usize,
    /// `1 − kept_actual / original_total`
    pub compression: f64,
    /// Removed share of the gated blocks under the deterministic masks.
    pub compression_prunable: f64,
    /// Gates whose open probability lies strictly inside (0.1, 0.9).
    pub undecided_gate_fraction: f64,
}

impl PruneReport {
    pub fn from_model(model: &RecurrentLM) -> Self {
        let masks = model.named_masks();
        let ranks = model.layer_ranks();
        let layers = ranks
            .into_iter()
            .map(|r| {
                let mask = masks.iter().find(|(n, _)| *n == r.name).map(|(_, m)| *m);
                LayerReport {
                    prunable: mask.map_or(0, |m| m.prunable()),
                    kept_expected: mask.map_or(0.0, |m| m.expected_kept()),
                    kept_actual: mask.map_or(0, |m| m.kept_actual()),
                    name: r.name,
                    full_rank: r.full,
                    kept_rank: r.kept,
                }
            })
            .collect();
        let count = model.count();
        let prunable = model.prunable_total();
        let kept_prunable = model.kept_prunable();
        let probs: Vec<f64> = model.gates().iter().flat_map(|g| g.open_probability()).collect();
        let undecided = probs.iter().filter(|&&p| p > 0.1 && p < 0.9).count();
        PruneReport {
            layers,
            original_total: model.reference_total,
            total: count.total,
            prunable,
            kept_expected: count.kept_expected,
            kept_actual: count.kept_actual,
            compression: count.compression(model.reference_total),
            compression_prunable: if prunable == 0 { 0.0 } else { 1.0 - kept_prunable as f64 / prunable as f64 },
            undecided_gate_fraction: if probs.is_empty() { 0.0 } else { undecided as f64 / probs.len() as f64 },
        }
    }

    pub fn to_record(&self) -> Result<Record> {
        let mut r = Record::new();
        r.int("original_total", self.original_total as u64);
        r.int("total", self.total as u64);
        r.int("prunable", self.prunable as u64);
        r.num("kept_expected", self.kept_expected)?;
        r.int("kept_actual", self.kept_actual as u64);
        r.num("compression", self.compression)?;
        r.num("compression_prunable", self.compression_prunable)?;
        for l in &self.layers {
            r.int(&format!("kept.{}", l.name), l.kept_rank as u64);
        }
        Ok(r)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<20} {:>6} {:>6} {:>10} {:>12} {:>10}\n", "layer", "rank", "kept", "prunable", "expected", "actual");
        for l in &self.layers {
            out.push_str(&format!(
                "{:<20} {:>6} {:>6} {:>10} {:>12.1} {:>10}\n",
                l.name, l.full_rank, l.kept_rank, l.prunable, l.kept_expected, l.kept_actual
            ));
        }
        out.push_str(&format!(
            "total {} of {} parameters kept, compression {}\n",
            self.kept_actual,
            self.original_total,
            percent(self.compression)
        ));
        out
    }
}

pub fn percent(x: f64) -> String {
    format!("{:.0}%", x * 100.0)
}

/// One line of a results table.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub run: String,
    pub method: String,
    pub size: u64,
    pub compression: f64,
    pub bpc: Option<f64>,
}

impl SummaryRow {
    /// Reads the size columns of a run from its final metrics record.
    pub fn from_record(run: &str, rec: &Record) -> Self {
        SummaryRow {
            run: run.to_string(),
            method: rec.get_str("method").unwrap_or("?").to_string(),
            size: rec.get_f64("kept_actual").unwrap_or(0.0) as u64,
            compression: rec.get_f64("compression").unwrap_or(0.0),
            bpc: rec.get_f64("valid_bpc").or_else(|| rec.get_f64("eval_bpc")),
        }
    }
}

pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut out = format!("{:<24} {:<10} {:>10} {:>9} {:>8}\n", "run", "method", "size", "compress", "bpc");
    for r in rows {
        let bpc = r.bpc.map_or("-".to_string(), |b| format!("{b:.3}"));
        out.push_str(&format!(
            "{:<24} {:<10} {:>10} {:>9} {:>8}\n",
            r.run,
            r.method,
            r.size,
            percent(r.compression),
            bpc
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::GateConfig;
    use crate::lm::{Method, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> RecurrentLM {
        let cfg = ModelConfig {
            embed_dim: 8,
            hidden: 8,
            layers: 1,
            ..ModelConfig::default()
        };
        RecurrentLM::new(&cfg, 12, Method::FlopL0, GateConfig::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
    }

    #[test]
    fn fresh_model_keeps_everything_and_expects_most() {
        let r = PruneReport::from_model(&model());
        assert_eq!(r.kept_actual, r.total);
        assert_eq!(r.compression, 0.0);
        let p = crate::graph::sigmoid(2.2 - GateConfig::default().log_ratio());
        let fixed = (r.total - r.prunable) as f64;
        assert!((r.kept_expected - fixed - p * r.prunable as f64).abs() < 0.01 * r.prunable as f64);
        assert_eq!(r.undecided_gate_fraction, 0.0);
    }

    #[test]
    fn closed_gates_remove_all_prunable() {
        let mut m = model();
        for mask in m.masks_mut() {
            let g = mask.gate_mut().unwrap();
            g.alpha.value = g.alpha.value.map(|_| -20.0);
        }
        let r = PruneReport::from_model(&m);
        assert_eq!(r.kept_actual, r.total - r.prunable);
        assert_eq!(r.compression_prunable, 1.0);
        assert!(r.layers.iter().all(|l| l.kept_rank == 0));
        let c = PruneReport::from_model(&m.compact());
        assert_eq!(c.total, r.kept_actual);
        assert_eq!(c.compression, r.compression);
    }

    #[test]
    fn summary_shows_percent() {
        let mut rec = Record::new();
        rec.text("method", "flop-l0");
        rec.num("compression", 0.4996).unwrap();
        rec.int("kept_actual", 1234);
        let row = SummaryRow::from_record("a", &rec);
        let t = summary_table(&[row]);
        assert!(t.contains("50%"), "{t}");
        assert!(t.contains("1234"));
    }
}
