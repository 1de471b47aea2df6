//! Experiment result rows and their CSV/JSON serializations.
//!
//! One `MetricsRecord` is one (variant, λ, seed) cell of an experiment.
//! The CSV form exists for determinism checks and external tooling, so it
//! deliberately omits `wall_time_s` — the only nondeterministic field —
//! and `records_from_csv` restores it as 0. The JSON form keeps
//! everything. Both serializations round-trip every remaining field
//! bit-exactly: floats are written in shortest-round-trip form and the
//! two structured columns are embedded JSON.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::EvalReport;

/// Column order of the CSV form.
pub const CSV_COLUMNS: [&str; 12] = [
    "variant",
    "lambda",
    "seed",
    "accuracy",
    "f1_micro",
    "f1_macro",
    "mae",
    "mean_madds_per_sample",
    "madds_reduction_vs_static",
    "selection_ratio",
    "gate_entropy",
    "degenerate_gate",
];

/// One experiment cell: a trained-and-evaluated model under one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Method name for this row: `dynamic`, a static baseline such as
    /// `static_cheap`, or an ablation variant.
    pub variant: String,
    pub lambda: f64,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub f1_micro: Option<f64>,
    pub f1_macro: Option<f64>,
    pub mae: Option<f64>,
    pub mean_madds_per_sample: f64,
    /// Relative saving versus the paired always-everything static
    /// baseline: `1 − mean/static_mean`. Zero when no baseline applies.
    pub madds_reduction_vs_static: f64,
    /// Selection frequency per named branch (or per cell.op), keys sorted.
    pub selection_ratio: BTreeMap<String, f64>,
    /// Per-slot selection entropy in nats.
    pub gate_entropy: Vec<f64>,
    /// Training + evaluation wall time. Nondeterministic; JSON only.
    pub wall_time_s: f64,
    pub degenerate_gate: bool,
}

impl MetricsRecord {
    /// Assemble a record from an evaluation report. `labels` names each
    /// slot's branches (from the model); slot names are prefixed only
    /// when there are several slots.
    pub fn from_eval(
        variant: impl Into<String>,
        lambda: f64,
        seed: u64,
        report: &EvalReport,
        static_mean_madds: Option<f64>,
        wall_time_s: f64,
        labels: &[Vec<String>],
    ) -> Self {
        let reduction = match static_mean_madds {
            Some(s) if s > 0.0 => 1.0 - report.mean_madds / s,
            _ => 0.0,
        };
        MetricsRecord {
            variant: variant.into(),
            lambda,
            seed,
            accuracy: report.accuracy,
            f1_micro: report.f1_micro,
            f1_macro: report.f1_macro,
            mae: report.mae,
            mean_madds_per_sample: report.mean_madds,
            madds_reduction_vs_static: reduction,
            selection_ratio: selection_map(labels, &report.selection_ratio),
            gate_entropy: report.gate_entropy.clone(),
            wall_time_s,
            degenerate_gate: report.degenerate_gate,
        }
    }
}

/// Flatten per-slot selection frequencies into a named map. Single-slot
/// models use the branch label alone; multi-slot models prefix it with
/// `cell{j}.`.
pub fn selection_map(labels: &[Vec<String>], ratios: &[Vec<f64>]) -> BTreeMap<String, f64> {
    let mut map = BTreeMap::new();
    for (slot, row) in ratios.iter().enumerate() {
        for (branch, &r) in row.iter().enumerate() {
            let label = labels
                .get(slot)
                .and_then(|l| l.get(branch))
                .cloned()
                .unwrap_or_else(|| format!("branch{branch}"));
            let key = if ratios.len() == 1 { label } else { format!("cell{slot}.{label}") };
            map.insert(key, r);
        }
    }
    map
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(cell: &str, what: &str) -> Result<Option<f64>> {
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse::<f64>()
        .map(Some)
        .map_err(|e| Error::Config(format!("csv field {what}: {e}")))
}

fn parse_req<T: std::str::FromStr>(cell: &str, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    cell.parse::<T>().map_err(|e| Error::Config(format!("csv field {what}: {e}")))
}

/// CSV with one row per record, deterministic byte-for-byte for equal
/// records. `wall_time_s` is intentionally not a column.
pub fn records_to_csv(records: &[MetricsRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in records {
        w.write_record(&[
            r.variant.clone(),
            r.lambda.to_string(),
            r.seed.to_string(),
            opt_cell(r.accuracy),
            opt_cell(r.f1_micro),
            opt_cell(r.f1_macro),
            opt_cell(r.mae),
            r.mean_madds_per_sample.to_string(),
            r.madds_reduction_vs_static.to_string(),
            serde_json::to_string(&r.selection_ratio)?,
            serde_json::to_string(&r.gate_entropy)?,
            r.degenerate_gate.to_string(),
        ])
        .map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Config(e.to_string()))?)
        .map_err(|e| Error::Config(e.to_string()))
}

/// Parse `records_to_csv` output back into records (`wall_time_s` = 0).
pub fn records_from_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().map_err(csv_err)?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(Error::Config(format!(
            "unexpected csv columns {:?}, want {CSV_COLUMNS:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(csv_err)?;
        if row.len() != CSV_COLUMNS.len() {
            return Err(Error::Config(format!(
                "csv row has {} fields, want {}",
                row.len(),
                CSV_COLUMNS.len()
            )));
        }
        out.push(MetricsRecord {
            variant: row[0].to_string(),
            lambda: parse_req(&row[1], "lambda")?,
            seed: parse_req(&row[2], "seed")?,
            accuracy: parse_opt(&row[3], "accuracy")?,
            f1_micro: parse_opt(&row[4], "f1_micro")?,
            f1_macro: parse_opt(&row[5], "f1_macro")?,
            mae: parse_opt(&row[6], "mae")?,
            mean_madds_per_sample: parse_req(&row[7], "mean_madds_per_sample")?,
            madds_reduction_vs_static: parse_req(&row[8], "madds_reduction_vs_static")?,
            selection_ratio: serde_json::from_str(&row[9])?,
            gate_entropy: serde_json::from_str(&row[10])?,
            wall_time_s: 0.0,
            degenerate_gate: parse_req(&row[11], "degenerate_gate")?,
        });
    }
    Ok(out)
}

/// Pretty JSON with every field, `wall_time_s` included.
pub fn records_to_json(records: &[MetricsRecord]) -> Result<String> {
    Ok(serde_json::to_string_pretty(records)?)
}

pub fn records_from_json(text: &str) -> Result<Vec<MetricsRecord>> {
    Ok(serde_json::from_str(text)?)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_records() -> Vec<MetricsRecord> {
        vec![
            MetricsRecord {
                variant: "dynamic".into(),
                lambda: 0.1,
                seed: 3,
                accuracy: Some(0.96484375),
                f1_micro: Some(0.96484375),
                f1_macro: Some(0.9647058823529412),
                mae: None,
                mean_madds_per_sample: 1234.5,
                madds_reduction_vs_static: 0.3330078125,
                selection_ratio: [("expert1[m1]".to_string(), 0.9), ("expert2[m1+m2]".to_string(), 0.1)]
                    .into_iter()
                    .collect(),
                gate_entropy: vec![0.3250829733914482],
                wall_time_s: 12.25,
                degenerate_gate: false,
            },
            MetricsRecord {
                variant: "static_full".into(),
                lambda: 0.1,
                seed: 3,
                accuracy: None,
                f1_micro: None,
                f1_macro: None,
                mae: Some(0.07177734375),
                mean_madds_per_sample: 1852.0,
                madds_reduction_vs_static: 0.0,
                selection_ratio: [("expert2[m1+m2]".to_string(), 1.0)].into_iter().collect(),
                gate_entropy: vec![0.0],
                wall_time_s: 3.5,
                degenerate_gate: false,
            },
        ]
    }

    #[test]
    fn csv_round_trips_everything_but_wall_time() {
        let records = sample_records();
        let text = records_to_csv(&records).unwrap();
        let back = records_from_csv(&text).unwrap();
        let mut expect = records;
        for r in &mut expect {
            r.wall_time_s = 0.0;
        }
        assert_eq!(back, expect);
    }

    #[test]
    fn csv_bytes_are_deterministic() {
        let a = records_to_csv(&sample_records()).unwrap();
        let b = records_to_csv(&sample_records()).unwrap();
        assert_eq!(a, b);
        assert!(!a.contains("wall_time"), "wall time must stay out of the csv");
    }

    #[test]
    fn json_round_trips_everything() {
        let records = sample_records();
        let text = records_to_json(&records).unwrap();
        let back = records_from_json(&text).unwrap();
        assert_eq!(back, records);
        assert!(text.contains("wall_time_s"));
    }

    #[test]
    fn unexpected_columns_are_rejected() {
        assert!(records_from_csv("a,b,c\n1,2,3\n").is_err());
    }

    #[test]
    fn selection_maps_prefix_slots_only_when_plural() {
        let one = selection_map(&[vec!["e1".into(), "e2".into()]], &[vec![0.75, 0.25]]);
        assert_eq!(one.get("e1"), Some(&0.75));
        let two = selection_map(
            &[vec!["identity".into()], vec!["identity".into()]],
            &[vec![1.0], vec![1.0]],
        );
        assert!(two.contains_key("cell0.identity") && two.contains_key("cell1.identity"));
    }
}
