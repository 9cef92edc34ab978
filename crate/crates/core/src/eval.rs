//! Metric evaluation over a test manifest with mean and 95% confidence
//! intervals.
//!
//! SI-SDR is built in; PESQ, ESTOI, DNSMOS, and WER are external adapters
//! configured by name plus an executable (two WAV paths in, one float on
//! stdout). Per-utterance evaluator failures are recorded and excluded from
//! the aggregates, never aborting the run.
//!
//! The CI halfwidth is `1.96 * std / sqrt(n)` with the population (1/n)
//! standard deviation, a normal approximation.

use std::collections::{BTreeMap, BTreeSet};
use std::process::Command;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aux::si_sdr_loss;
use crate::data::CorpusManifest;
use crate::error::{Error, Result};
use crate::spectral::{Waveform, PIPELINE_RATE};

/// A metric scored per utterance: enhanced estimate against the clean
/// reference. Values are reported as-is; `higher_is_better` drives the
/// best-marking in comparisons.
pub trait MetricEvaluator: Send + Sync {
    fn name(&self) -> &str;
    fn higher_is_better(&self) -> bool;
    fn score(&self, estimate: &Waveform, reference: &Waveform) -> Result<f64>;
}

/// Built-in SI-SDR in dB (negated SI-SDR loss).
pub struct SiSdrMetric;

impl MetricEvaluator for SiSdrMetric {
    fn name(&self) -> &str {
        "si_sdr"
    }
    fn higher_is_better(&self) -> bool {
        true
    }
    fn score(&self, estimate: &Waveform, reference: &Waveform) -> Result<f64> {
        Ok(-si_sdr_loss(estimate, reference)?)
    }
}

/// External evaluator: `program [args...] <estimate.wav> <reference.wav>`
/// printing one float on stdout.
pub struct CommandMetric {
    pub name: String,
    pub program: String,
    pub args: Vec<String>,
    pub higher_is_better: bool,
}

impl MetricEvaluator for CommandMetric {
    fn name(&self) -> &str {
        &self.name
    }
    fn higher_is_better(&self) -> bool {
        self.higher_is_better
    }
    fn score(&self, estimate: &Waveform, reference: &Waveform) -> Result<f64> {
        let dir = tempfile::Builder::new()
            .prefix("fmse-metric")
            .tempdir()
            .map_err(|e| Error::Evaluator {
                name: self.name.clone(),
                detail: format!("tempdir: {e}"),
            })?;
        let est_path = dir.path().join("estimate.wav");
        let ref_path = dir.path().join("reference.wav");
        crate::audio::write_wav_f32(&est_path, estimate)?;
        crate::audio::write_wav_f32(&ref_path, reference)?;
        let output = Command::new(&self.program)
            .args(&self.args)
            .arg(&est_path)
            .arg(&ref_path)
            .output()
            .map_err(|e| Error::Evaluator {
                name: self.name.clone(),
                detail: format!("spawn {}: {e}", self.program),
            })?;
        if !output.status.success() {
            return Err(Error::Evaluator {
                name: self.name.clone(),
                detail: format!(
                    "exit {}: {}",
                    output.status,
                    String::from_utf8_lossy(&output.stderr)
                ),
            });
        }
        let text = String::from_utf8_lossy(&output.stdout);
        text.trim()
            .parse::<f64>()
            .map_err(|e| Error::Evaluator {
                name: self.name.clone(),
                detail: format!("unparsable output '{}': {e}", text.trim()),
            })
    }
}

/// Per-utterance enhancement seed: `base ^ first-8-bytes(sha256(utt_id))`.
/// This is the documented policy that makes evaluation runs reproducible.
pub fn utterance_seed(base: u64, utterance_id: &str) -> u64 {
    let digest = Sha256::digest(utterance_id.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    base ^ u64::from_le_bytes(bytes)
}

/// Produces an enhanced waveform for a named utterance. Implementations own
/// the seeding policy (see [`utterance_seed`]).
pub trait Enhancer {
    fn enhance(&self, utterance_id: &str, noisy: &Waveform) -> Result<Waveform>;
}

impl<F> Enhancer for F
where
    F: Fn(&str, &Waveform) -> Result<Waveform>,
{
    fn enhance(&self, utterance_id: &str, noisy: &Waveform) -> Result<Waveform> {
        self(utterance_id, noisy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateStat {
    pub mean: f64,
    pub ci95_halfwidth: f64,
    pub count: usize,
    pub higher_is_better: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricFailure {
    pub utterance_id: String,
    pub metric: String,
    pub error: String,
}

/// Per-utterance and aggregate metric values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    pub per_utterance: BTreeMap<String, BTreeMap<String, f64>>,
    pub aggregate: BTreeMap<String, AggregateStat>,
    pub failures: Vec<MetricFailure>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidInput(format!("report parse: {e}")))
    }
}

fn aggregate_stats(values: &[f64], higher_is_better: bool) -> AggregateStat {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    AggregateStat {
        mean,
        ci95_halfwidth: 1.96 * var.sqrt() / (n as f64).sqrt(),
        count: n,
        higher_is_better,
    }
}

/// Enhance and score every utterance in the manifest.
pub fn evaluate(
    manifest: &CorpusManifest,
    enhancer: &dyn Enhancer,
    metrics: &[&dyn MetricEvaluator],
) -> Result<MetricsReport> {
    if manifest.is_empty() {
        return Err(Error::InvalidInput("manifest is empty".into()));
    }
    if metrics.is_empty() {
        return Err(Error::InvalidInput("no metrics registered".into()));
    }
    let mut report = MetricsReport::default();
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for entry in &manifest.entries {
        let (clean, noisy) = crate::data::load_pair(entry, PIPELINE_RATE)?;
        let enhanced = match enhancer.enhance(&entry.utterance_id, &noisy) {
            Ok(w) => w,
            Err(e) => {
                for m in metrics {
                    report.failures.push(MetricFailure {
                        utterance_id: entry.utterance_id.clone(),
                        metric: m.name().to_string(),
                        error: format!("enhancement failed: {e}"),
                    });
                }
                continue;
            }
        };
        let row = report
            .per_utterance
            .entry(entry.utterance_id.clone())
            .or_default();
        for m in metrics {
            match m.score(&enhanced, &clean) {
                Ok(v) => {
                    row.insert(m.name().to_string(), v);
                    columns.entry(m.name().to_string()).or_default().push(v);
                }
                Err(e) => report.failures.push(MetricFailure {
                    utterance_id: entry.utterance_id.clone(),
                    metric: m.name().to_string(),
                    error: e.to_string(),
                }),
            }
        }
    }
    for m in metrics {
        if let Some(values) = columns.get(m.name()) {
            report
                .aggregate
                .insert(m.name().to_string(), aggregate_stats(values, m.higher_is_better()));
        }
    }
    Ok(report)
}

/// Side-by-side comparison of named runs over a shared metric set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub metrics: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    pub cells: Vec<ComparisonCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonCell {
    pub metric: String,
    pub mean: f64,
    pub ci95_halfwidth: f64,
    pub best: bool,
}

pub fn compare_runs(reports: &[(String, MetricsReport)]) -> Result<ComparisonTable> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no reports to compare".into()));
    }
    let reference: BTreeSet<&String> = reports[0].1.aggregate.keys().collect();
    for (name, report) in reports.iter().skip(1) {
        let keys: BTreeSet<&String> = report.aggregate.keys().collect();
        if keys != reference {
            let missing: Vec<_> = reference.difference(&keys).collect();
            let extra: Vec<_> = keys.difference(&reference).collect();
            return Err(Error::InvalidInput(format!(
                "run '{name}' has a different metric set (missing {missing:?}, extra {extra:?})"
            )));
        }
    }
    let metrics: Vec<String> = reference.into_iter().cloned().collect();

    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for metric in &metrics {
        let hib = reports[0].1.aggregate[metric].higher_is_better;
        let best_val = reports
            .iter()
            .map(|(_, r)| r.aggregate[metric].mean)
            .fold(if hib { f64::NEG_INFINITY } else { f64::INFINITY }, |a, b| {
                if hib {
                    a.max(b)
                } else {
                    a.min(b)
                }
            });
        best.insert(metric.as_str(), best_val);
    }

    let rows = reports
        .iter()
        .map(|(name, report)| ComparisonRow {
            run: name.clone(),
            cells: metrics
                .iter()
                .map(|metric| {
                    let stat = &report.aggregate[metric];
                    ComparisonCell {
                        metric: metric.clone(),
                        mean: stat.mean,
                        ci95_halfwidth: stat.ci95_halfwidth,
                        best: stat.mean == best[metric.as_str()],
                    }
                })
                .collect(),
        })
        .collect();
    Ok(ComparisonTable { metrics, rows })
}

impl ComparisonTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// Aligned text rendering; the best value per metric is starred.
    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.metrics.iter().map(|m| m.len().max(14)).collect();
        let run_width = self
            .rows
            .iter()
            .map(|r| r.run.len())
            .chain(std::iter::once(3))
            .max()
            .unwrap();
        let fmt_cell = |c: &ComparisonCell| {
            format!(
                "{}{:.2} ± {:.2}",
                if c.best { "*" } else { "" },
                c.mean,
                c.ci95_halfwidth
            )
        };
        for (i, m) in self.metrics.iter().enumerate() {
            for row in &self.rows {
                widths[i] = widths[i].max(fmt_cell(&row.cells[i]).len());
            }
            widths[i] = widths[i].max(m.len());
        }
        let mut out = String::new();
        out.push_str(&format!("{:run_width$}", "run"));
        for (m, w) in self.metrics.iter().zip(&widths) {
            out.push_str(&format!("  {m:>w$}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:run_width$}", row.run));
            for (c, w) in row.cells.iter().zip(&widths) {
                out.push_str(&format!("  {:>w$}", fmt_cell(c)));
            }
            out.push('\n');
        }
        out
    }
}
