use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, BackendDescriptor, BackendError, BackendKind, ContextQuery, ModelBackend};
use crate::distribution::{ProbDist, TokenId};

pub const DEFAULT_TABLE_ORDER: usize = 3;
const DEFAULT_CONTEXT_LIMIT: usize = 1024;

/// On-disk form of a [`TableModel`].
///
/// ```json
/// {"order": 3, "vocab": ["</s>", "a", "b"], "eos": 0,
///  "entries": {"1,2": [0.1, 0.8, 0.1], "2": [0.5, 0.25, 0.25]}}
/// ```
///
/// Keys are comma-separated token ids of a context suffix (at most `order`
/// long, `""` for the empty suffix). Values are dense probability vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableModelFile {
    pub order: usize,
    pub vocab: Vec<String>,
    pub eos: u32,
    pub entries: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_limit: Option<usize>,
}

/// Deterministic n-gram table model.
///
/// Lookups use the longest stored suffix of the context (up to `order`
/// tokens) and fall back to the uniform distribution, so every query is
/// answerable.
///
/// Tokenization is greedy longest-match over the vocabulary strings; the EOS
/// string is never produced by the tokenizer and detokenizes to nothing. With
/// a vocabulary of single characters this is a character-level tokenizer.
#[derive(Debug, Clone)]
pub struct TableModel {
    order: usize,
    vocab: Vec<String>,
    pieces: HashMap<String, TokenId>,
    max_piece_len: usize,
    table: HashMap<Vec<TokenId>, ProbDist>,
    fallback: ProbDist,
    descriptor: BackendDescriptor,
}

impl TableModel {
    pub fn new(vocab: Vec<String>, eos: TokenId, order: usize) -> Result<Self, BackendError> {
        let descriptor = BackendDescriptor {
            kind: BackendKind::Table,
            model_id: "table".to_string(),
            vocab_size: vocab.len(),
            eos_token: eos,
            context_limit: DEFAULT_CONTEXT_LIMIT,
            architecture: Architecture::DecoderOnly,
        };
        descriptor.validate()?;
        if order == 0 {
            return Err(BackendError::Config("table order must be >= 1".into()));
        }

        let mut pieces = HashMap::new();
        let mut max_piece_len = 0;
        for (i, piece) in vocab.iter().enumerate() {
            if i == eos.index() || piece.is_empty() {
                continue;
            }
            pieces.entry(piece.clone()).or_insert(TokenId(i as u32));
            max_piece_len = max_piece_len.max(piece.len());
        }
        let fallback = ProbDist::uniform(vocab.len())?;
        Ok(Self { order, vocab, pieces, max_piece_len, table: HashMap::new(), fallback, descriptor })
    }

    /// Character-level model over printable ASCII plus `\n` and `\t`, with
    /// `</s>` as the final (EOS) token.
    pub fn ascii(order: usize) -> Result<Self, BackendError> {
        let mut vocab: Vec<String> = ['\t', '\n']
            .into_iter()
            .chain((0x20u8..0x7f).map(char::from))
            .map(String::from)
            .collect();
        vocab.push("</s>".into());
        let eos = TokenId(vocab.len() as u32 - 1);
        Self::new(vocab, eos, order)
    }

    pub fn with_model_id(mut self, model_id: impl Into<String>) -> Self {
        self.descriptor.model_id = model_id.into();
        self
    }

    pub fn with_context_limit(mut self, limit: usize) -> Self {
        self.descriptor.context_limit = limit;
        self
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn token_id(&self, piece: &str) -> Option<TokenId> {
        self.pieces.get(piece).copied()
    }

    /// Stores the distribution for a context suffix. Normalization is
    /// checked to 1e-6.
    pub fn insert(&mut self, key: &[TokenId], probs: Vec<f64>) -> Result<(), BackendError> {
        if key.len() > self.order {
            return Err(BackendError::Config(format!(
                "key of length {} exceeds table order {}",
                key.len(),
                self.order
            )));
        }
        if let Some(bad) = key.iter().find(|t| t.index() >= self.vocab.len()) {
            return Err(BackendError::Config(format!("key token {bad} outside vocabulary")));
        }
        if probs.len() != self.vocab.len() {
            return Err(BackendError::Config(format!(
                "distribution has {} entries, vocabulary has {}",
                probs.len(),
                self.vocab.len()
            )));
        }
        self.table.insert(key.to_vec(), ProbDist::normalized(probs)?);
        Ok(())
    }

    pub fn from_file(file: TableModelFile) -> Result<Self, BackendError> {
        let mut model = Self::new(file.vocab, TokenId(file.eos), file.order)?;
        if let Some(id) = file.model_id {
            model.descriptor.model_id = id;
        }
        if let Some(limit) = file.context_limit {
            model.descriptor.context_limit = limit;
        }
        for (key, probs) in file.entries {
            let ids = parse_key(&key)?;
            model.insert(&ids, probs)?;
        }
        Ok(model)
    }

    pub fn from_json(json: &str) -> Result<Self, BackendError> {
        let file: TableModelFile = serde_json::from_str(json)
            .map_err(|e| BackendError::Config(format!("table model file: {e}")))?;
        Self::from_file(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_file(&self) -> TableModelFile {
        let entries = self
            .table
            .iter()
            .map(|(key, dist)| (format_key(key), dist.as_slice().to_vec()))
            .collect();
        TableModelFile {
            order: self.order,
            vocab: self.vocab.clone(),
            eos: self.descriptor.eos_token.0,
            entries,
            model_id: Some(self.descriptor.model_id.clone()),
            context_limit: Some(self.descriptor.context_limit),
        }
    }

    fn lookup(&self, context: &[TokenId]) -> &ProbDist {
        let longest = context.len().min(self.order);
        (0..=longest)
            .rev()
            .find_map(|n| self.table.get(&context[context.len() - n..]))
            .unwrap_or(&self.fallback)
    }
}

fn parse_key(key: &str) -> Result<Vec<TokenId>, BackendError> {
    if key.trim().is_empty() {
        return Ok(Vec::new());
    }
    key.split(',')
        .map(|part| {
            part.trim()
                .parse::<u32>()
                .map(TokenId)
                .map_err(|_| BackendError::Config(format!("bad table key {key:?}")))
        })
        .collect()
}

fn format_key(key: &[TokenId]) -> String {
    key.iter().map(|t| t.0.to_string()).collect::<Vec<_>>().join(",")
}

impl ModelBackend for TableModel {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        let mut tokens = Vec::new();
        let mut pos = 0;
        while pos < text.len() {
            let rest = &text[pos..];
            let max = self.max_piece_len.min(rest.len());
            let hit = (1..=max)
                .rev()
                .filter(|&n| rest.is_char_boundary(n))
                .find_map(|n| self.pieces.get(&rest[..n]).map(|&id| (id, n)));
            match hit {
                Some((id, n)) => {
                    tokens.push(id);
                    pos += n;
                }
                None => {
                    let ch = rest.chars().next().unwrap_or_default();
                    return Err(BackendError::Tokenize(format!(
                        "no vocabulary entry matches {ch:?} at byte {pos}"
                    )));
                }
            }
        }
        if tokens.len() > self.descriptor.context_limit {
            return Err(BackendError::ContextOverflow {
                len: tokens.len(),
                limit: self.descriptor.context_limit,
            });
        }
        Ok(tokens)
    }

    fn detokenize(&self, tokens: &[TokenId]) -> Result<String, BackendError> {
        let mut text = String::new();
        for &t in tokens {
            if t == self.descriptor.eos_token {
                continue;
            }
            let piece = self
                .vocab
                .get(t.index())
                .ok_or_else(|| BackendError::Tokenize(format!("token {t} outside vocabulary")))?;
            text.push_str(piece);
        }
        Ok(text)
    }

    fn next_token_distribution(&self, query: &ContextQuery) -> Result<ProbDist, BackendError> {
        query.check_limit(self.descriptor.context_limit)?;
        let context: Vec<TokenId> = query.concatenated().collect();
        Ok(self.lookup(&context).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_token_model() -> TableModel {
        let vocab = (0..8).map(|i| format!("t{i}")).collect();
        let mut probs = vec![0.0; 8];
        probs[0] = 0.9;
        probs[1] = 0.1;
        let mut m = TableModel::new(vocab, TokenId(0), 3).unwrap();
        m.insert(&[TokenId(7)], probs).unwrap();
        m
    }

    #[test]
    fn direct_lookup_and_backoff() {
        let m = two_token_model();
        let q = ContextQuery::new(vec![TokenId(3), TokenId(7)], vec![]);
        let d = m.next_token_distribution(&q).unwrap();
        assert_eq!(&d.as_slice()[..2], &[0.9, 0.1]);

        // Longer context still ends in 7: backs off to the length-1 key.
        let q = ContextQuery::new(vec![TokenId(1)], vec![TokenId(2), TokenId(7)]);
        assert_eq!(m.next_token_distribution(&q).unwrap().as_slice()[0], 0.9);
    }

    #[test]
    fn unseen_suffix_is_uniform() {
        let m = two_token_model();
        let q = ContextQuery::new(vec![TokenId(2)], vec![]);
        let d = m.next_token_distribution(&q).unwrap();
        assert!(d.as_slice().iter().all(|&p| (p - 0.125).abs() < 1e-15));
    }

    #[test]
    fn empty_key_acts_as_default() {
        let mut m = two_token_model();
        let mut probs = vec![0.0; 8];
        probs[5] = 1.0;
        m.insert(&[], probs).unwrap();
        let q = ContextQuery::new(vec![TokenId(2)], vec![]);
        assert_eq!(m.next_token_distribution(&q).unwrap().prob(TokenId(5)), 1.0);
    }

    #[test]
    fn ascii_round_trip() {
        let m = TableModel::ascii(3).unwrap();
        assert_eq!(m.tokenize("").unwrap(), vec![]);
        let text = "John, a software developer";
        let ids = m.tokenize(text).unwrap();
        assert_eq!(ids.len(), text.len());
        assert_eq!(m.detokenize(&ids).unwrap(), text);
        assert!(m.tokenize("caf\u{e9}").is_err());
    }

    #[test]
    fn longest_match_tokenization() {
        let vocab = vec!["</s>", "a", "ab", " was too short", " "]
            .into_iter()
            .map(String::from)
            .collect();
        let m = TableModel::new(vocab, TokenId(0), 2).unwrap();
        assert_eq!(m.tokenize("aba").unwrap(), vec![TokenId(2), TokenId(1)]);
        assert_eq!(m.tokenize(" was too short").unwrap(), vec![TokenId(3)]);
        assert_eq!(m.detokenize(&[TokenId(3), TokenId(0)]).unwrap(), " was too short");
        // The EOS string is not a tokenizer piece.
        assert!(m.tokenize("</s>").is_err());
    }

    #[test]
    fn insert_validation() {
        let mut m = two_token_model();
        assert!(m.insert(&[TokenId(1); 4], vec![0.125; 8]).is_err());
        assert!(m.insert(&[TokenId(9)], vec![0.125; 8]).is_err());
        assert!(m.insert(&[TokenId(1)], vec![0.5; 2]).is_err());
        assert!(m.insert(&[TokenId(1)], vec![0.5; 8]).is_err());
    }

    #[test]
    fn context_overflow() {
        let m = two_token_model().with_context_limit(2);
        let q = ContextQuery::new(vec![TokenId(1), TokenId(2)], vec![TokenId(3)]);
        assert!(matches!(
            m.next_token_distribution(&q),
            Err(BackendError::ContextOverflow { len: 3, limit: 2 })
        ));
    }

    #[test]
    fn file_round_trip() {
        let m = two_token_model().with_model_id("fixture");
        let json = serde_json::to_string(&m.to_file()).unwrap();
        let back = TableModel::from_json(&json).unwrap();
        assert_eq!(back.descriptor(), m.descriptor());
        assert_eq!(back.to_file(), m.to_file());
    }

    #[test]
    fn file_format_parses() {
        let json = r#"{"order": 2, "vocab": ["</s>", "a", "b"], "eos": 0,
                       "entries": {"1,2": [0.1, 0.8, 0.1], "": [0.5, 0.25, 0.25]}}"#;
        let m = TableModel::from_json(json).unwrap();
        let q = ContextQuery::new(vec![TokenId(1)], vec![TokenId(2)]);
        assert_eq!(m.next_token_distribution(&q).unwrap().as_slice(), &[0.1, 0.8, 0.1]);
        let q = ContextQuery::new(vec![TokenId(2)], vec![]);
        assert_eq!(m.next_token_distribution(&q).unwrap().as_slice(), &[0.5, 0.25, 0.25]);
        assert!(TableModel::from_json(r#"{"order": 2, "vocab": ["a"], "eos": 0, "entries": {}}"#).is_err());
    }
}
