use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::LabError;

/// Kind of input perturbation. Unknown tags are kept as [`PerturbationType::Other`]
/// so that pairs files may carry custom categories through to aggregation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PerturbationType {
    Synonym,
    IrrelevantInfo,
    SemanticChange,
    GenderSwap,
    LetterDuplication,
    Punctuation,
    Typo,
    Other(String),
}

impl PerturbationType {
    pub const BUILTIN: [PerturbationType; 7] = [
        PerturbationType::Synonym,
        PerturbationType::IrrelevantInfo,
        PerturbationType::SemanticChange,
        PerturbationType::GenderSwap,
        PerturbationType::LetterDuplication,
        PerturbationType::Punctuation,
        PerturbationType::Typo,
    ];

    pub fn tag(&self) -> &str {
        match self {
            PerturbationType::Synonym => "synonym",
            PerturbationType::IrrelevantInfo => "irrelevant_info",
            PerturbationType::SemanticChange => "semantic_change",
            PerturbationType::GenderSwap => "gender_swap",
            PerturbationType::LetterDuplication => "letter_duplication",
            PerturbationType::Punctuation => "punctuation",
            PerturbationType::Typo => "typo",
            PerturbationType::Other(tag) => tag,
        }
    }
}

impl fmt::Display for PerturbationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for PerturbationType {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let tag = s.trim();
        if tag.is_empty() {
            return Err(LabError::UnknownType(String::new()));
        }
        Ok(Self::BUILTIN
            .iter()
            .find(|t| t.tag() == tag)
            .cloned()
            .unwrap_or_else(|| PerturbationType::Other(tag.to_string())))
    }
}

impl Serialize for PerturbationType {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.tag())
    }
}

impl<'de> Deserialize<'de> for PerturbationType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let tag = String::deserialize(deserializer)?;
        tag.parse().map_err(serde::de::Error::custom)
    }
}

/// An original input and its perturbed variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPair")]
pub struct PerturbedPair {
    pub original: String,
    pub perturbed: String,
    #[serde(rename = "type")]
    pub kind: PerturbationType,
}

#[derive(Deserialize)]
struct RawPair {
    original: String,
    perturbed: String,
    #[serde(rename = "type")]
    kind: PerturbationType,
}

impl TryFrom<RawPair> for PerturbedPair {
    type Error = LabError;

    fn try_from(raw: RawPair) -> Result<Self, Self::Error> {
        PerturbedPair::new(raw.original, raw.perturbed, raw.kind)
    }
}

impl PerturbedPair {
    pub fn new(
        original: impl Into<String>,
        perturbed: impl Into<String>,
        kind: PerturbationType,
    ) -> Result<Self, LabError> {
        let (original, perturbed) = (original.into(), perturbed.into());
        if original == perturbed {
            return Err(LabError::IdenticalPair(original));
        }
        Ok(Self { original, perturbed, kind })
    }
}

/// Lookup tables driving the word-level perturbations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerturbationTables {
    #[serde(default)]
    pub synonyms: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub gender_map: BTreeMap<String, String>,
    #[serde(default)]
    pub irrelevant_clauses: Vec<String>,
    #[serde(default)]
    pub semantic_swaps: BTreeMap<String, Vec<String>>,
}

impl PerturbationTables {
    /// Tables shipped with the crate.
    pub fn builtin() -> Self {
        serde_json::from_str(include_str!("../../data/perturbation_tables.json"))
            .expect("bundled perturbation tables are valid JSON")
    }

    pub fn from_json(json: &str) -> Result<Self, LabError> {
        serde_json::from_str(json).map_err(|e| LabError::Format(format!("perturbation tables: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LabError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Byte span of a word: a maximal run of alphanumerics and apostrophes.
fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        let in_word = ch.is_alphanumeric() || ch == '\'';
        match (in_word, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Copies the capitalization of `model`'s first letter onto `word`.
fn match_case(model: &str, word: &str) -> String {
    let upper = model.chars().next().is_some_and(char::is_uppercase);
    if !upper {
        return word.to_string();
    }
    let mut chars = word.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn splice(text: &str, start: usize, end: usize, replacement: &str) -> String {
    let mut out = String::with_capacity(text.len() + replacement.len());
    out.push_str(&text[..start]);
    out.push_str(replacement);
    out.push_str(&text[end..]);
    out
}

fn table_substitution(
    text: &str,
    table: &BTreeMap<String, Vec<String>>,
    rng: &mut ChaCha8Rng,
) -> Option<String> {
    let sites: Vec<((usize, usize), Vec<&String>)> = word_spans(text)
        .into_iter()
        .filter_map(|(s, e)| {
            let word = &text[s..e];
            let lower = word.to_lowercase();
            let options: Vec<&String> =
                table.get(&lower)?.iter().filter(|r| r.to_lowercase() != lower && !r.is_empty()).collect();
            (!options.is_empty()).then_some(((s, e), options))
        })
        .collect();
    if sites.is_empty() {
        return None;
    }
    let ((s, e), options) = &sites[rng.random_range(0..sites.len())];
    let pick = options[rng.random_range(0..options.len())];
    Some(splice(text, *s, *e, &match_case(&text[*s..*e], pick)))
}

/// Applies one perturbation of type `kind` to `text`.
///
/// Site and replacement choices are drawn from a ChaCha8 stream seeded with
/// `seed`, so the output is reproducible across platforms. Gender swap is
/// the exception: it is deterministic and rewrites every gendered word.
pub fn perturb(
    text: &str,
    kind: &PerturbationType,
    tables: &PerturbationTables,
    seed: u64,
) -> Result<PerturbedPair, LabError> {
    if text.trim().is_empty() {
        return Err(LabError::EmptyText);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let not_applicable = || LabError::NotApplicable { kind: kind.clone(), text: text.to_string() };

    let perturbed = match kind {
        PerturbationType::Synonym => table_substitution(text, &tables.synonyms, &mut rng),
        PerturbationType::SemanticChange => table_substitution(text, &tables.semantic_swaps, &mut rng),
        PerturbationType::GenderSwap => {
            let mut out = String::with_capacity(text.len());
            let mut last = 0;
            let mut changed = false;
            for (s, e) in word_spans(text) {
                let word = &text[s..e];
                if let Some(swap) = tables.gender_map.get(&word.to_lowercase()) {
                    out.push_str(&text[last..s]);
                    out.push_str(&match_case(word, swap));
                    last = e;
                    changed |= !swap.eq_ignore_ascii_case(word);
                }
            }
            out.push_str(&text[last..]);
            changed.then_some(out)
        }
        PerturbationType::LetterDuplication => {
            let sites: Vec<(usize, char)> = text.char_indices().filter(|(_, c)| c.is_alphabetic()).collect();
            (!sites.is_empty()).then(|| {
                let (i, ch) = sites[rng.random_range(0..sites.len())];
                let mut out = text.to_string();
                out.insert(i, ch);
                out
            })
        }
        PerturbationType::Typo => {
            // Adjacent, distinct letters inside one word.
            let chars: Vec<(usize, char)> = text.char_indices().collect();
            let sites: Vec<usize> = chars
                .windows(2)
                .enumerate()
                .filter(|(_, w)| w[0].1.is_alphabetic() && w[1].1.is_alphabetic() && w[0].1 != w[1].1)
                .map(|(i, _)| i)
                .collect();
            (!sites.is_empty()).then(|| {
                let i = sites[rng.random_range(0..sites.len())];
                let ((a_pos, a), (b_pos, b)) = (chars[i], chars[i + 1]);
                let end = b_pos + b.len_utf8();
                debug_assert_eq!(a_pos + a.len_utf8(), b_pos);
                splice(text, a_pos, end, &format!("{b}{a}"))
            })
        }
        PerturbationType::Punctuation => {
            // A comma after any word that is not last and not already
            // followed by punctuation.
            let spans = word_spans(text);
            let sites: Vec<usize> = spans
                .iter()
                .take(spans.len().saturating_sub(1))
                .map(|&(_, e)| e)
                .filter(|&e| text[e..].chars().next().is_some_and(char::is_whitespace))
                .collect();
            (!sites.is_empty()).then(|| {
                let e = sites[rng.random_range(0..sites.len())];
                splice(text, e, e, ",")
            })
        }
        PerturbationType::IrrelevantInfo => {
            let clauses: Vec<&String> = tables.irrelevant_clauses.iter().filter(|c| !c.trim().is_empty()).collect();
            (!clauses.is_empty()).then(|| {
                let clause = clauses[rng.random_range(0..clauses.len())];
                format!("{} {}", clause.trim(), text)
            })
        }
        PerturbationType::Other(tag) => return Err(LabError::UnknownType(tag.clone())),
    };

    let perturbed = perturbed.ok_or_else(not_applicable)?;
    PerturbedPair::new(text, perturbed, kind.clone())
}
