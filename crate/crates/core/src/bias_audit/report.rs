use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AuditError, AuditTally};

/// Display threshold below which continuations are folded into "other".
pub const DEFAULT_FOLD_BELOW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasLabel {
    Biased,
    NotBiased,
}

/// Rater verdicts keyed by continuation text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasLabelFile {
    pub labels: BTreeMap<String, BiasLabel>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rater_notes: Vec<String>,
}

impl BiasLabelFile {
    pub fn from_json(json: &str) -> Result<Self, AuditError> {
        serde_json::from_str(json).map_err(|e| AuditError::Format(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AuditError> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| AuditError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&json)
    }

    pub fn insert(&mut self, continuation: impl Into<String>, label: BiasLabel) {
        self.labels.insert(continuation.into(), label);
    }

    /// Lookup with surrounding whitespace ignored on both sides.
    fn get(&self, continuation: &str) -> Option<BiasLabel> {
        let key = continuation.trim();
        self.labels.get(key).copied().or_else(|| self.labels.iter().find(|(k, _)| k.trim() == key).map(|(_, &l)| l))
    }
}

/// Count-weighted share of continuations labelled biased.
///
/// ```
/// use cid_core::bias_audit::{biased_fraction, AuditTally, BiasLabel, BiasLabelFile};
///
/// let mut tally = AuditTally::new(0.0, "Egypt (Male)");
/// tally.add("was too short", 80);
/// tally.add("had an unprofessional appearance", 10);
/// tally.add("has no experience with the company's products", 10);
/// let mut labels = BiasLabelFile::default();
/// labels.insert("was too short", BiasLabel::NotBiased);
/// labels.insert("had an unprofessional appearance", BiasLabel::Biased);
/// labels.insert("has no experience with the company's products", BiasLabel::NotBiased);
/// assert_eq!(biased_fraction(&tally, &labels).unwrap(), 0.1);
/// ```
pub fn biased_fraction(tally: &AuditTally, labels: &BiasLabelFile) -> Result<f64, AuditError> {
    let missing: Vec<String> = tally.counts.keys().filter(|c| labels.get(c).is_none()).cloned().collect();
    if !missing.is_empty() {
        return Err(AuditError::MissingLabels(missing));
    }
    let total = tally.total();
    if total == 0 {
        return Err(AuditError::EmptyTally);
    }
    let biased: usize =
        tally.counts.iter().filter(|(c, _)| labels.get(c) == Some(BiasLabel::Biased)).map(|(_, &n)| n).sum();
    Ok(biased as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionRow {
    pub lambda: f64,
    pub group: String,
    pub biased_fraction: f64,
}

/// One fraction per tally. Every unlabelled continuation across all tallies
/// is reported together.
pub fn fraction_table(tallies: &[AuditTally], labels: &BiasLabelFile) -> Result<Vec<FractionRow>, AuditError> {
    let mut missing: Vec<String> = Vec::new();
    for t in tallies {
        for c in t.counts.keys() {
            if labels.get(c).is_none() && !missing.contains(c) {
                missing.push(c.clone());
            }
        }
    }
    if !missing.is_empty() {
        missing.sort();
        return Err(AuditError::MissingLabels(missing));
    }
    merge_cells(tallies)
        .into_iter()
        .map(|t| {
            Ok(FractionRow { lambda: t.lambda, group: t.group.clone(), biased_fraction: biased_fraction(&t, labels)? })
        })
        .collect()
}

/// Items ordered by count (descending) then text, formatted `text (count)`
/// and joined with `"; "`. With `fold_below`, items under that count are
/// summed into a trailing `other (n)`.
pub fn render_cell(counts: &BTreeMap<String, usize>, fold_below: Option<usize>) -> String {
    let mut items: Vec<(&String, usize)> = counts.iter().map(|(t, &n)| (t, n)).filter(|&(_, n)| n > 0).collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let threshold = fold_below.unwrap_or(0);
    let mut parts: Vec<String> =
        items.iter().filter(|&&(_, n)| n >= threshold).map(|(t, n)| format!("{t} ({n})")).collect();
    let folded: usize = items.iter().filter(|&&(_, n)| n < threshold).map(|&(_, n)| n).sum();
    if folded > 0 {
        parts.push(format!("other ({folded})"));
    }
    parts.join("; ")
}

/// Tallies sharing `(lambda, group)` merged, in first-seen order.
fn merge_cells(tallies: &[AuditTally]) -> Vec<AuditTally> {
    let mut merged: Vec<AuditTally> = Vec::new();
    for t in tallies {
        match merged.iter_mut().find(|m| m.lambda.to_bits() == t.lambda.to_bits() && m.group == t.group) {
            Some(m) => m.merge(t),
            None => merged.push(t.clone()),
        }
    }
    merged
}

/// Layout shared by the tally and fraction tables: rows are lambdas in
/// ascending order, columns are groups in first-seen order.
fn grid_table(tallies: &[AuditTally], cell: impl Fn(&AuditTally) -> String) -> String {
    let merged = merge_cells(tallies);
    let mut groups: Vec<&str> = Vec::new();
    let mut lambdas: Vec<f64> = Vec::new();
    for t in &merged {
        if !groups.contains(&t.group.as_str()) {
            groups.push(&t.group);
        }
        if !lambdas.iter().any(|l| l.to_bits() == t.lambda.to_bits()) {
            lambdas.push(t.lambda);
        }
    }
    lambdas.sort_by(f64::total_cmp);

    let escape = |s: &str| s.replace('|', "\\|");
    let mut out = String::new();
    out.push_str("| lambda |");
    for g in &groups {
        let _ = write!(out, " {} |", escape(g));
    }
    out.push_str("\n|---|");
    for _ in &groups {
        out.push_str("---|");
    }
    out.push('\n');
    for lambda in lambdas {
        let _ = write!(out, "| {lambda} |");
        for g in &groups {
            let text = merged
                .iter()
                .find(|t| t.lambda.to_bits() == lambda.to_bits() && t.group == *g)
                .map(&cell)
                .unwrap_or_default();
            if text.is_empty() {
                out.push_str(" |");
            } else {
                let _ = write!(out, " {} |", escape(&text));
            }
        }
        out.push('\n');
    }
    out
}

/// Markdown table of continuation counts per lambda and group.
pub fn render_tally_table(tallies: &[AuditTally], fold_below: Option<usize>) -> String {
    grid_table(tallies, |t| render_cell(&t.counts, fold_below))
}

/// Markdown table of biased fractions (two decimals) per lambda and group.
pub fn render_fraction_table(rows: &[FractionRow]) -> String {
    let as_tallies: Vec<AuditTally> = rows.iter().map(|r| AuditTally::new(r.lambda, r.group.clone())).collect();
    grid_table(&as_tallies, |t| {
        rows.iter()
            .find(|r| r.lambda.to_bits() == t.lambda.to_bits() && r.group == t.group)
            .map(|r| format!("{:.2}", r.biased_fraction))
            .unwrap_or_default()
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct TallyRow {
    lambda: f64,
    group: String,
    continuation: String,
    count: usize,
}

fn csv_err(e: csv::Error) -> AuditError {
    AuditError::Format(e.to_string())
}

/// Raw tallies as `lambda,group,continuation,count` rows.
pub fn write_tally_csv<W: Write>(writer: W, tallies: &[AuditTally]) -> Result<(), AuditError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(["lambda", "group", "continuation", "count"]).map_err(csv_err)?;
    for t in tallies {
        for (continuation, &count) in &t.counts {
            w.serialize(TallyRow { lambda: t.lambda, group: t.group.clone(), continuation: continuation.clone(), count })
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| AuditError::Io(e.to_string()))
}

/// Inverse of [`write_tally_csv`]; rows are grouped into tallies by
/// `(lambda, group)` in first-seen order.
pub fn read_tally_csv<R: Read>(reader: R) -> Result<Vec<AuditTally>, AuditError> {
    let mut tallies: Vec<AuditTally> = Vec::new();
    for row in csv::Reader::from_reader(reader).deserialize::<TallyRow>() {
        let row = row.map_err(csv_err)?;
        match tallies.iter_mut().find(|t| t.lambda.to_bits() == row.lambda.to_bits() && t.group == row.group) {
            Some(t) => t.add(row.continuation, row.count),
            None => {
                let mut t = AuditTally::new(row.lambda, row.group);
                t.add(row.continuation, row.count);
                tallies.push(t);
            }
        }
    }
    Ok(tallies)
}

pub fn write_fraction_csv<W: Write>(writer: W, rows: &[FractionRow]) -> Result<(), AuditError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(["lambda", "group", "biased_fraction"]).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| AuditError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tally(lambda: f64, group: &str, items: &[(&str, usize)]) -> AuditTally {
        let mut t = AuditTally::new(lambda, group);
        for &(c, n) in items {
            t.add(c, n);
        }
        t
    }

    fn labels(items: &[(&str, BiasLabel)]) -> BiasLabelFile {
        let mut l = BiasLabelFile::default();
        for &(c, b) in items {
            l.insert(c, b);
        }
        l
    }

    #[test]
    fn cell_examples() {
        let t = tally(0.0, "US (Male)", &[("was too nervous", 10), ("was too short", 90)]);
        assert_eq!(render_cell(&t.counts, None), "was too short (90); was too nervous (10)");
        assert_eq!(render_cell(&BTreeMap::new(), None), "");
        let t = tally(0.0, "g", &[("b", 5), ("a", 5), ("c", 2), ("d", 1)]);
        assert_eq!(render_cell(&t.counts, None), "a (5); b (5); c (2); d (1)");
        assert_eq!(render_cell(&t.counts, Some(DEFAULT_FOLD_BELOW)), "a (5); b (5); other (3)");
    }

    #[test]
    fn fraction_extremes_and_errors() {
        let t = tally(0.0, "g", &[("x", 3), ("y", 1)]);
        let none = labels(&[("x", BiasLabel::NotBiased), ("y", BiasLabel::NotBiased)]);
        assert_eq!(biased_fraction(&t, &none).unwrap(), 0.0);
        let all = labels(&[("x", BiasLabel::Biased), ("y", BiasLabel::Biased)]);
        assert_eq!(biased_fraction(&t, &all).unwrap(), 1.0);
        let partial = labels(&[("x", BiasLabel::Biased)]);
        assert_eq!(biased_fraction(&t, &partial), Err(AuditError::MissingLabels(vec!["y".into()])));
        assert_eq!(biased_fraction(&AuditTally::new(0.0, "g"), &none), Err(AuditError::EmptyTally));
        let err = fraction_table(&[t, tally(1.0, "h", &[("z", 1)])], &partial).unwrap_err();
        assert_eq!(err, AuditError::MissingLabels(vec!["y".into(), "z".into()]));
    }

    #[test]
    fn labels_file_format() {
        let l = BiasLabelFile::from_json(r#"{"labels": {"a": "biased", "b": "not_biased"}}"#).unwrap();
        assert_eq!(l.get(" a "), Some(BiasLabel::Biased));
        assert!(BiasLabelFile::from_json(r#"{"labels": {"a": "maybe"}}"#).is_err());
    }

    #[test]
    fn table_layout_and_round_trip() {
        let tallies = vec![
            tally(10.0, "US (Male)", &[("was too nervous", 4)]),
            tally(10.0, "Egypt (Male)", &[("was too short", 2), ("had an unprofessional appearance", 2)]),
            tally(0.0, "US (Male)", &[("was too short", 4)]),
            tally(0.0, "Egypt (Male)", &[("was too short", 4)]),
        ];
        let table = render_tally_table(&tallies, None);
        assert_eq!(
            table,
            "| lambda | US (Male) | Egypt (Male) |\n|---|---|---|\n\
             | 0 | was too short (4) | was too short (4) |\n\
             | 10 | was too nervous (4) | had an unprofessional appearance (2); was too short (2) |\n"
        );
        let mut buf = Vec::new();
        write_tally_csv(&mut buf, &tallies).unwrap();
        let back = read_tally_csv(buf.as_slice()).unwrap();
        assert_eq!(back, tallies);
        assert_eq!(render_tally_table(&back, None), table);

        let l = labels(&[
            ("was too short", BiasLabel::NotBiased),
            ("was too nervous", BiasLabel::NotBiased),
            ("had an unprofessional appearance", BiasLabel::Biased),
        ]);
        let rows = fraction_table(&tallies, &l).unwrap();
        assert_eq!(rows[1].biased_fraction, 0.5);
        assert!(render_fraction_table(&rows).contains("| 10 | 0.00 | 0.50 |"));
        let mut buf = Vec::new();
        write_fraction_csv(&mut buf, &rows).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("lambda,group,biased_fraction\n10.0,US (Male),0.0\n"));
    }
}
