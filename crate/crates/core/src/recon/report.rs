//! Per-block calibration reports: JSON lines and loss-trace CSV.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    /// 1-based hardening iteration.
    pub iteration: usize,
    /// 1-based Adam step within the iteration.
    pub step: usize,
    pub hard_percent: f64,
    /// Minibatch reconstruction loss.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFlips {
    pub layer: String,
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub block: usize,
    /// Full-capture loss of round-to-nearest codes with unit scale factors.
    pub initial_loss: f64,
    /// Full-capture loss after every rounding variable is hard.
    pub final_loss: f64,
    /// The learned rounding lost to round-to-nearest and was discarded.
    #[serde(default)]
    pub fell_back: bool,
    pub loss_trace: Vec<LossPoint>,
    /// Codes that differ from round-to-nearest, per projection.
    pub flips: Vec<LayerFlips>,
    pub seconds: f64,
}

/// One JSON object per block, each carrying `config`.
pub fn write_reports_jsonl(path: impl AsRef<Path>, reports: &[ReconReport], config: &Value) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in reports {
        let line = json!({
            "block": r.block,
            "initial_loss": r.initial_loss,
            "final_loss": r.final_loss,
            "fell_back": r.fell_back,
            "flips": r.flips,
            "seconds": r.seconds,
            "config": config,
        });
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_loss_trace_csv(path: impl AsRef<Path>, report: &ReconReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "block,iteration,step,hard_percent,loss")?;
    for p in &report.loss_trace {
        writeln!(w, "{},{},{},{},{}", report.block, p.iteration, p.step, p.hard_percent, p.loss)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_lines_and_csv() {
        let r = ReconReport {
            block: 1,
            initial_loss: 2.0,
            final_loss: 1.0,
            fell_back: false,
            loss_trace: vec![LossPoint { iteration: 1, step: 10, hard_percent: 18.5, loss: 1.5 }],
            flips: vec![LayerFlips { layer: "q_proj".into(), count: 3, percent: 0.5 }],
            seconds: 0.25,
        };
        let dir = tempfile::tempdir().unwrap();
        let jl = dir.path().join("r.jsonl");
        write_reports_jsonl(&jl, &[r.clone(), r.clone()], &json!({"seed": 9})).unwrap();
        let text = std::fs::read_to_string(&jl).unwrap();
        assert_eq!(text.lines().count(), 2);
        let v: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["config"]["seed"], 9);
        assert_eq!(v["flips"][0]["count"], 3);
        let csv = dir.path().join("t.csv");
        write_loss_trace_csv(&csv, &r).unwrap();
        assert_eq!(std::fs::read_to_string(&csv).unwrap(), "block,iteration,step,hard_percent,loss\n1,1,10,18.5,1.5\n");
    }
}
