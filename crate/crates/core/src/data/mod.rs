//! Corpora: the synthetic paired generator, CoNLL-style text ingestion,
//! JSON-lines persistence, vocabularies and batching.

mod batch;
mod conll;
mod jsonl;
mod synthetic;

pub use batch::{batch_iter, Batch, IGNORE_TAG};
pub use conll::{load_conll, parse_conll};
pub use jsonl::{example_from_json_line, example_to_json_line, read_jsonl, write_jsonl};
pub use synthetic::{
    ambiguity_ceiling, generate_synthetic_corpus, type_proportions, CeilingReport, Corpus,
    FormEntry, Manifest, SyntheticSchema,
};

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::crf::{validate_bio, LabelSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const UNK: &str = "[UNK]";

/// Token inventory. Ids 0–3 are `[PAD]`, `[CLS]`, `[SEP]`, `[UNK]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Specials followed by every distinct token of `examples`, sorted.
    pub fn build<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Self {
        let words: BTreeSet<&str> = examples
            .into_iter()
            .flat_map(|e| e.tokens.iter().map(String::as_str))
            .collect();
        let mut tokens: Vec<String> = [PAD, CLS, SEP, UNK].iter().map(|s| s.to_string()).collect();
        tokens.extend(
            words
                .into_iter()
                .filter(|w| ![PAD, CLS, SEP, UNK].contains(w))
                .map(str::to_string),
        );
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn cls(&self) -> usize {
        1
    }

    pub fn sep(&self) -> usize {
        2
    }

    pub fn unk(&self) -> usize {
        3
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.unk())
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// A sentence with gold tags and an optional raw patch matrix, as stored on
/// disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    pub patches: Option<Vec<Vec<f64>>>,
    pub has_image: bool,
}

impl Example {
    pub fn text(tokens: Vec<String>, tags: Vec<String>) -> Self {
        Self {
            tokens,
            tags,
            patches: None,
            has_image: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.tags.len() {
            return Err(Error::Mismatch(format!(
                "{} tokens but {} tags",
                self.tokens.len(),
                self.tags.len()
            )));
        }
        if self.has_image != self.patches.is_some() {
            return Err(Error::invalid(
                "has_image must be true exactly when patches are present",
            ));
        }
        if let Some(p) = &self.patches {
            let w = p.first().map_or(0, Vec::len);
            if p.is_empty()
                || w == 0
                || p.iter()
                    .any(|r| r.len() != w || r.iter().any(|v| !v.is_finite()))
            {
                return Err(Error::invalid(
                    "patch matrix must be non-empty, rectangular and finite",
                ));
            }
        }
        validate_bio(&self.tags).map_err(|(i, msg)| Error::invalid(format!("token {i}: {msg}")))
    }
}

/// An example encoded against a vocabulary and label set.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedExample {
    pub ids: Vec<usize>,
    pub tags: Vec<usize>,
    pub patches: Option<Tensor>,
    pub has_image: bool,
}

impl PairedExample {
    pub fn encode(example: &Example, vocab: &Vocab, labels: &LabelSet) -> Result<Self> {
        example.validate()?;
        let patches = match &example.patches {
            Some(rows) => Some(Tensor::from_rows(rows)?),
            None => None,
        };
        Ok(Self {
            ids: vocab.encode(&example.tokens),
            tags: labels.encode(&example.tags)?,
            patches,
            has_image: example.has_image,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn encode_all(
    examples: &[Example],
    vocab: &Vocab,
    labels: &LabelSet,
) -> Result<Vec<PairedExample>> {
    examples
        .iter()
        .map(|e| PairedExample::encode(e, vocab, labels))
        .collect()
}

/// Entity types mentioned by any tag, sorted.
pub fn entity_types(examples: &[Example]) -> Vec<String> {
    let set: BTreeSet<&str> = examples
        .iter()
        .flat_map(|e| e.tags.iter())
        .filter_map(|t| t.split_once('-').map(|(_, k)| k))
        .collect();
    set.into_iter().map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(tokens: &[&str], tags: &[&str]) -> Example {
        Example::text(
            tokens.iter().map(|s| s.to_string()).collect(),
            tags.iter().map(|s| s.to_string()).collect(),
        )
    }

    #[test]
    fn vocab_reserves_specials_and_maps_unknowns() {
        let v = Vocab::build(&[ex(&["b", "a", "b"], &["O", "O", "O"])]);
        assert_eq!(v.tokens(), [PAD, CLS, SEP, UNK, "a", "b"]);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("zzz"), v.unk());
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
    }

    #[test]
    fn encoding_checks_alignment_and_image_flag() {
        let labels = LabelSet::bio(&["PER"]).unwrap();
        let v = Vocab::build(&[]);
        assert!(PairedExample::encode(&ex(&["x"], &["O", "O"]), &v, &labels).is_err());
        let mut e = ex(&["x"], &["B-PER"]);
        e.has_image = true;
        assert!(PairedExample::encode(&e, &v, &labels).is_err());
        e.patches = Some(vec![vec![0.5; 3]]);
        let p = PairedExample::encode(&e, &v, &labels).unwrap();
        assert_eq!(p.tags, vec![1]);
        assert_eq!(p.patches.unwrap().shape(), [1, 3]);
        assert_eq!(
            entity_types(&[ex(&["a", "b"], &["B-PER", "B-LOC"])]),
            ["LOC", "PER"]
        );
    }
}
