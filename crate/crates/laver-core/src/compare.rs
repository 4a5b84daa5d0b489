//! Comparison of two metrics logs: per-step deltas and a final-value
//! table. Logs must cover the same step sequence; a metric present in
//! one log but not the other at a shared step is rejected.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::train::MetricRecord;

#[derive(Clone, Debug, Serialize)]
pub struct MetricDelta {
    pub metric: String,
    pub final_a: f64,
    pub final_b: f64,
    pub final_delta: f64,
    pub mean_delta: f64,
    pub max_abs_delta: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareReport {
    pub steps: Vec<usize>,
    pub deltas: Vec<MetricDelta>,
}

impl CompareReport {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<22} {:>14} {:>14} {:>14} {:>14}\n",
            "metric", "final a", "final b", "final delta", "mean delta"
        ));
        for d in &self.deltas {
            out.push_str(&format!(
                "{:<22} {:>14.6} {:>14.6} {:>+14.6} {:>+14.6}\n",
                d.metric, d.final_a, d.final_b, d.final_delta, d.mean_delta
            ));
        }
        out
    }
}

pub fn parse_metrics(text: &str, path: &str) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: MetricRecord = serde_json::from_str(line).map_err(|e| Error::BadFormat {
            path: path.to_string(),
            details: format!("line {}: {e}", lineno + 1),
        })?;
        out.push(record);
    }
    if out.is_empty() {
        return Err(Error::BadFormat {
            path: path.to_string(),
            details: "no metric records".to_string(),
        });
    }
    Ok(out)
}

pub fn load_metrics(path: impl AsRef<std::path::Path>) -> Result<Vec<MetricRecord>> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_metrics(&text, &path.display().to_string())
}

/// Scalar series exposed for comparison, in a fixed order. Diagnostics
/// profiles contribute their mean and (for the cosine profile) the
/// deepest layer.
fn series(records: &[MetricRecord]) -> Vec<(&'static str, Vec<Option<f64>>)> {
    let get = |f: &dyn Fn(&MetricRecord) -> Option<f64>| records.iter().map(f).collect::<Vec<_>>();
    vec![
        ("lm", get(&|r| Some(r.lm))),
        ("mim", get(&|r| Some(r.mim))),
        ("ga", get(&|r| Some(r.ga))),
        ("cga", get(&|r| Some(r.cga))),
        ("total", get(&|r| Some(r.total))),
        ("mask_ratio", get(&|r| Some(r.mask_ratio))),
        ("ema_decay", get(&|r| Some(r.ema_decay))),
        ("lr", get(&|r| Some(r.lr))),
        (
            "probe_accuracy",
            get(&|r| r.probe_accuracy),
        ),
        (
            "cosine_deep",
            get(&|r| r.cosine_profile.as_ref().and_then(|p| p.last().copied())),
        ),
        (
            "attention_allocation_mean",
            get(&|r| {
                r.attention_allocation
                    .as_ref()
                    .map(|p| p.iter().sum::<f64>() / p.len().max(1) as f64)
            }),
        ),
    ]
}

/// Compare two runs. Steps must align exactly; every metric that appears
/// at any shared step must appear in both logs there.
pub fn compare(a: &[MetricRecord], b: &[MetricRecord]) -> Result<CompareReport> {
    let steps_a: Vec<usize> = a.iter().map(|r| r.step).collect();
    let steps_b: Vec<usize> = b.iter().map(|r| r.step).collect();
    if steps_a != steps_b {
        return Err(Error::invalid(
            "compare",
            format!("misaligned step sequences: {steps_a:?} vs {steps_b:?}"),
        ));
    }
    let sa = series(a);
    let sb = series(b);
    let mut deltas = Vec::new();
    for ((name, va), (_, vb)) in sa.into_iter().zip(sb) {
        let mut diffs = Vec::new();
        let mut finals = None;
        for (i, (x, y)) in va.iter().zip(&vb).enumerate() {
            match (x, y) {
                (Some(x), Some(y)) => {
                    diffs.push(y - x);
                    finals = Some((*x, *y));
                }
                (None, None) => {}
                _ => {
                    return Err(Error::invalid(
                        "compare",
                        format!("metric '{name}' missing on one side at step {}", steps_a[i]),
                    ));
                }
            }
        }
        if let Some((fa, fb)) = finals {
            let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
            let max_abs = diffs.iter().fold(0.0f64, |m, d| m.max(d.abs()));
            deltas.push(MetricDelta {
                metric: name.to_string(),
                final_a: fa,
                final_b: fb,
                final_delta: fb - fa,
                mean_delta: mean,
                max_abs_delta: max_abs,
            });
        }
    }
    Ok(CompareReport {
        steps: steps_a,
        deltas,
    })
}
