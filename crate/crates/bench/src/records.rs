//! Trial records and their CSV and plot-data persistence.

use std::collections::BTreeMap;
use std::path::Path;

use mpklink::mpk::RightsPolicy;
use mpklink::transport::TransportKind;
use serde::{Deserialize, Serialize};

use crate::BenchError;

/// How a trial ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    Error(String),
}

impl Outcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, Outcome::Ok)
    }
}

/// One timed trial.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub transport: TransportKind,
    pub n_words: u64,
    pub trial: u32,
    pub signed: bool,
    /// Rights policy; only meaningful for the mpk transport.
    pub policy: Option<RightsPolicy>,
    /// Monotonic-clock seconds; 0 for failed trials.
    pub elapsed_s: f64,
    pub outcome: Outcome,
}

/// Flat row shape for the CSV file; field order is the header order.
#[derive(Serialize, Deserialize)]
struct Row {
    transport: String,
    n_words: u64,
    trial: u32,
    signed: bool,
    policy: String,
    elapsed_s: f64,
    outcome: String,
}

impl From<&BenchRecord> for Row {
    fn from(r: &BenchRecord) -> Self {
        Row {
            transport: r.transport.as_str().to_string(),
            n_words: r.n_words,
            trial: r.trial,
            signed: r.signed,
            policy: r.policy.map(|p| p.as_str().to_string()).unwrap_or_default(),
            elapsed_s: r.elapsed_s,
            outcome: match &r.outcome {
                Outcome::Ok => "ok".to_string(),
                Outcome::Error(text) => format!("error: {text}"),
            },
        }
    }
}

impl Row {
    fn into_record(self) -> Result<BenchRecord, BenchError> {
        let transport = self
            .transport
            .parse::<TransportKind>()
            .map_err(BenchError::Csv)?;
        let policy = match self.policy.as_str() {
            "" => None,
            p => Some(p.parse::<RightsPolicy>().map_err(BenchError::Csv)?),
        };
        let outcome = match self.outcome.as_str() {
            "ok" => Outcome::Ok,
            other => match other.strip_prefix("error: ") {
                Some(text) => Outcome::Error(text.to_string()),
                None => return Err(BenchError::Csv(format!("bad outcome '{other}'"))),
            },
        };
        Ok(BenchRecord {
            transport,
            n_words: self.n_words,
            trial: self.trial,
            signed: self.signed,
            policy,
            elapsed_s: self.elapsed_s,
            outcome,
        })
    }
}

/// Write records with the header
/// `transport,n_words,trial,signed,policy,elapsed_s,outcome`.
pub fn export_csv(records: &[BenchRecord], path: &Path) -> Result<(), BenchError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| BenchError::Csv(e.to_string()))?;
    for record in records {
        writer
            .serialize(Row::from(record))
            .map_err(|e| BenchError::Csv(e.to_string()))?;
    }
    // an empty record list still gets the header line
    if records.is_empty() {
        writer
            .write_record(["transport", "n_words", "trial", "signed", "policy", "elapsed_s", "outcome"])
            .map_err(|e| BenchError::Csv(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// Inverse of [`export_csv`].
pub fn import_csv(path: &Path) -> Result<Vec<BenchRecord>, BenchError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| BenchError::Csv(e.to_string()))?;
    let mut records = Vec::new();
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(|e| BenchError::Csv(e.to_string()))?;
        records.push(row.into_record()?);
    }
    Ok(records)
}

/// Median of a non-empty sample; the mean of the two middles for even sizes.
pub fn median(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = sorted.len() / 2;
    Some(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    })
}

/// Per-transport `(n_words, median)` series over successful trials.
pub fn median_series(records: &[BenchRecord]) -> BTreeMap<(TransportKind, u64), f64> {
    let mut samples: BTreeMap<(TransportKind, u64), Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.outcome.is_ok()) {
        samples.entry((r.transport, r.n_words)).or_default().push(r.elapsed_s);
    }
    samples
        .into_iter()
        .filter_map(|(key, vals)| median(&vals).map(|m| (key, m)))
        .collect()
}

/// Write per-transport median series as `transport,n_words,median_s` lines
/// for external plotting.
pub fn render_plot_data(records: &[BenchRecord], path: &Path) -> Result<(), BenchError> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "transport,n_words,median_s")?;
    for ((transport, n_words), median) in median_series(records) {
        writeln!(out, "{},{},{}", transport.as_str(), n_words, median)?;
    }
    out.flush()?;
    Ok(())
}
