use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use super::{CurvePoint, LabError, LambdaStar, LambdaStarResult, PerturbationType};

/// λ* distribution of one perturbation type.
///
/// `count` is every result of the type, `not_reached_count` the subset whose
/// threshold was never crossed. Quantiles use only the reached values and are
/// absent when there are none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeSummary {
    #[serde(rename = "type")]
    pub kind: PerturbationType,
    pub median: Option<f64>,
    pub q25: Option<f64>,
    pub q75: Option<f64>,
    #[serde(rename = "n")]
    pub count: usize,
    #[serde(rename = "not_reached")]
    pub not_reached_count: usize,
}

/// Quantile of `values` with linear interpolation between order statistics
/// (position `q * (n - 1)` in the sorted sample).
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi || frac == 0.0 {
        return Some(sorted[lo]);
    }
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Groups results by perturbation type and summarizes their λ* values,
/// sorted by ascending median (types without a median last, then by tag).
///
/// Results whose `lambda_star` is unset are skipped.
pub fn aggregate_by_type(results: &[LambdaStarResult]) -> Vec<TypeSummary> {
    let mut groups: BTreeMap<PerturbationType, (Vec<f64>, usize, usize)> = BTreeMap::new();
    for r in results {
        let Some(star) = r.lambda_star else { continue };
        let entry = groups.entry(r.pair.kind.clone()).or_default();
        entry.2 += 1;
        match star {
            LambdaStar::Reached(v) => entry.0.push(v),
            LambdaStar::NotReached => entry.1 += 1,
        }
    }
    let mut summaries: Vec<TypeSummary> = groups
        .into_iter()
        .map(|(kind, (values, not_reached, count))| TypeSummary {
            kind,
            median: quantile(&values, 0.5),
            q25: quantile(&values, 0.25),
            q75: quantile(&values, 0.75),
            count,
            not_reached_count: not_reached,
        })
        .collect();
    summaries.sort_by(|a, b| match (a.median, b.median) {
        (Some(x), Some(y)) => x.total_cmp(&y).then_with(|| a.kind.cmp(&b.kind)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.kind.cmp(&b.kind),
    });
    summaries
}

fn csv_err(e: csv::Error) -> LabError {
    LabError::Format(e.to_string())
}

pub fn write_summary_csv<W: Write>(writer: W, summaries: &[TypeSummary]) -> Result<(), LabError> {
    let mut w = csv::Writer::from_writer(writer);
    for s in summaries {
        w.serialize(s).map_err(csv_err)?;
    }
    if summaries.is_empty() {
        w.write_record(["type", "median", "q25", "q75", "n", "not_reached"]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| LabError::Io(e.to_string()))
}

pub fn read_summary_csv<R: Read>(reader: R) -> Result<Vec<TypeSummary>, LabError> {
    csv::Reader::from_reader(reader).deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn write_curve_csv<W: Write>(writer: W, curve: &[CurvePoint]) -> Result<(), LabError> {
    let mut w = csv::Writer::from_writer(writer);
    for p in curve {
        w.serialize(p).map_err(csv_err)?;
    }
    if curve.is_empty() {
        w.write_record(["lambda", "mean_similarity"]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| LabError::Io(e.to_string()))
}

pub fn read_curve_csv<R: Read>(reader: R) -> Result<Vec<CurvePoint>, LabError> {
    csv::Reader::from_reader(reader).deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// One JSON object per line.
pub fn write_results_jsonl<W: Write>(mut writer: W, results: &[LambdaStarResult]) -> Result<(), LabError> {
    for r in results {
        let line = serde_json::to_string(r).map_err(|e| LabError::Format(e.to_string()))?;
        writeln!(writer, "{line}").map_err(|e| LabError::Io(e.to_string()))?;
    }
    writer.flush().map_err(|e| LabError::Io(e.to_string()))
}

pub fn read_results_jsonl<R: BufRead>(reader: R) -> Result<Vec<LambdaStarResult>, LabError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| LabError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| LabError::Format(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}
