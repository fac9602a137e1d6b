//! Small table models shipped with the crate for tests, examples and demos.
//!
//! * The sweep fixture: 20 perturbed pairs over four source sentences whose
//!   contrastive continuations diverge at known strengths, so the mean
//!   similarity curve falls as lambda grows.
//! * The audit fixture: a 2 x 2 name audit over the tech-interview template
//!   with three possible continuations.

use crate::backend::TableModel;
use crate::bias_audit::{groups_from_json, BiasLabelFile, NameGroup};
use crate::perturbation_lab::{read_pairs_jsonl, PerturbedPair};

pub const SWEEP_MODEL_JSON: &str = include_str!("../data/fixtures/sweep_model.json");
pub const SWEEP_PAIRS_JSONL: &str = include_str!("../data/fixtures/sweep_pairs.jsonl");
pub const AUDIT_MODEL_JSON: &str = include_str!("../data/fixtures/audit_model.json");
pub const AUDIT_GROUPS_JSON: &str = include_str!("../data/fixtures/audit_groups.json");
pub const AUDIT_LABELS_JSON: &str = include_str!("../data/fixtures/audit_labels.json");

pub fn sweep_model() -> TableModel {
    TableModel::from_json(SWEEP_MODEL_JSON).expect("sweep fixture model is valid")
}

pub fn sweep_pairs() -> Vec<PerturbedPair> {
    read_pairs_jsonl(SWEEP_PAIRS_JSONL.as_bytes()).expect("sweep fixture pairs are valid")
}

pub fn audit_model() -> TableModel {
    TableModel::from_json(AUDIT_MODEL_JSON).expect("audit fixture model is valid")
}

/// `US (Male)` with John and James, `Egypt (Male)` with Ahmed and Omar.
pub fn audit_groups() -> (NameGroup, NameGroup) {
    let mut groups = groups_from_json(AUDIT_GROUPS_JSON).expect("audit fixture groups are valid");
    let b = groups.pop().expect("two groups");
    let a = groups.pop().expect("two groups");
    (a, b)
}

pub fn audit_labels() -> BiasLabelFile {
    BiasLabelFile::from_json(AUDIT_LABELS_JSON).expect("audit fixture labels are valid")
}
