use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{attn_std, branch_ratio, cos_sim, nonlocality, AttentionTrace};
use crate::Result;

pub const CSV_HEADER: &str =
    "layer,cos_sim,attn_std,attn_ratio,ffn_ratio,nonlocality_mean,nonlocality_per_head";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub cos_sim: f64,
    /// Population std (denominator n) of attention rows, mean over rows and heads.
    pub attn_std: f64,
    pub attn_ratio: f64,
    pub ffn_ratio: f64,
    pub nonlocality_mean: f64,
    pub nonlocality_per_head: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub layers: Vec<LayerReport>,
}

impl DiagnosticsReport {
    /// One row per layer; per-head nonlocality is `;`-joined.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(CSV_HEADER);
        out.push('\n');
        for l in &self.layers {
            let heads: Vec<String> = l.nonlocality_per_head.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                l.layer,
                l.cos_sim,
                l.attn_std,
                l.attn_ratio,
                l.ffn_ratio,
                l.nonlocality_mean,
                heads.join(";")
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

pub fn diagnose(trace: &AttentionTrace) -> Result<DiagnosticsReport> {
    trace.validate()?;
    let mut layers = Vec::with_capacity(trace.layers.len());
    for (i, layer) in trace.layers.iter().enumerate() {
        let nl = nonlocality(&layer.attention, trace.grid, trace.cls_present)?;
        layers.push(LayerReport {
            layer: i,
            cos_sim: cos_sim(&layer.tokens_in)?,
            attn_std: attn_std(&layer.attention),
            attn_ratio: branch_ratio(&layer.attn_branch, &layer.tokens_in)?,
            ffn_ratio: branch_ratio(&layer.ffn_branch, &layer.ffn_input)?,
            nonlocality_mean: nl.mean,
            nonlocality_per_head: nl.per_head,
        });
    }
    Ok(DiagnosticsReport { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{GridShape, LayerTrace};
    use crate::Matrix;

    fn uniform_trace() -> AttentionTrace {
        let t = Matrix::filled(4, 3, 1.0);
        AttentionTrace {
            layers: vec![LayerTrace {
                tokens_in: t.clone(),
                attention: vec![Matrix::filled(4, 4, 0.25); 2],
                attn_branch: t.scale(0.5),
                ffn_input: t.clone(),
                ffn_branch: t.scale(2.0),
            }],
            grid: GridShape::new(2, 2),
            cls_present: false,
        }
    }

    #[test]
    fn uniform_identical_tokens() {
        let r = diagnose(&uniform_trace()).unwrap();
        let l = &r.layers[0];
        assert!((l.cos_sim - 1.0).abs() < 1e-15);
        assert_eq!(l.attn_std, 0.0);
        assert!((l.attn_ratio - 0.5).abs() < 1e-15);
        assert!((l.ffn_ratio - 2.0).abs() < 1e-15);
        let want = (2.0 + 2f64.sqrt()) / 4.0;
        assert!((l.nonlocality_mean - want).abs() < 1e-15);
    }

    #[test]
    fn csv_layout() {
        let csv = diagnose(&uniform_trace()).unwrap().to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 7);
        assert_eq!(row[6].split(';').count(), 2);
    }

    #[test]
    fn bad_grid_is_rejected() {
        let mut t = uniform_trace();
        t.grid = GridShape::new(3, 3);
        assert!(diagnose(&t).is_err());
    }

    #[test]
    fn json_round_trip() {
        let r = diagnose(&uniform_trace()).unwrap();
        let back: DiagnosticsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
