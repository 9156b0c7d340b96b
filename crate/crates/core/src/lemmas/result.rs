use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub const SWEEP_CSV_HEADER: &str = "sweep_value,mean,std,trials,criterion,pass";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep_value: f64,
    pub mean: f64,
    /// Population std over trials.
    pub std: f64,
    pub trials: usize,
    /// Human-readable criterion; never contains commas.
    pub criterion: String,
    pub pass: bool,
}

/// One CSV worth of rows sharing a sweep variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaTable {
    /// File stem, e.g. `lemma3_error_sigma_1`.
    pub name: String,
    /// Name of the swept variable (`k`, `d_m`, ...).
    pub sweep: String,
    pub rows: Vec<SweepRow>,
}

impl LemmaTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(SWEEP_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.sweep_value,
                r.mean,
                r.std,
                r.trials,
                r.criterion.replace(',', ";"),
                r.pass
            );
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaResult {
    pub lemma: u8,
    pub tables: Vec<LemmaTable>,
    pub pass: bool,
    /// The criterion held trivially (e.g. every patch relevant).
    pub vacuous: bool,
    /// One line per checked criterion.
    pub summary: Vec<String>,
}

/// Fraction of consecutive batches of `batch` trials where
/// `pred(batch_mean(a), batch_mean(b))` holds. A trailing partial batch is
/// ignored when at least one full batch exists.
pub fn batch_fraction(a: &[f64], b: &[f64], batch: usize, pred: impl Fn(f64, f64) -> bool) -> f64 {
    assert_eq!(a.len(), b.len());
    let batch = batch.max(1);
    let full = a.len() / batch;
    let count = if full == 0 { 1 } else { full };
    let width = if full == 0 { a.len() } else { batch };
    let mut hits = 0;
    for c in 0..count {
        let range = c * width..(c + 1) * width;
        let ma = crate::numerics::mean(&a[range.clone()]);
        let mb = crate::numerics::mean(&b[range]);
        if pred(ma, mb) {
            hits += 1;
        }
    }
    hits as f64 / count as f64
}
