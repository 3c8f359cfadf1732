use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The BIO label inventory: `O`, then `B-T`/`I-T` for each entity type.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    types: Vec<String>,
    labels: Vec<String>,
}

impl LabelSet {
    pub fn bio<S: AsRef<str>>(types: &[S]) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut labels = vec!["O".to_string()];
        for t in types {
            let t = t.as_ref();
            if t.is_empty() || t.contains(char::is_whitespace) || !seen.insert(t.to_string()) {
                return Err(Error::invalid(format!(
                    "bad or duplicate entity type {t:?}"
                )));
            }
            labels.push(format!("B-{t}"));
            labels.push(format!("I-{t}"));
        }
        Ok(Self {
            types: types.iter().map(|t| t.as_ref().to_string()).collect(),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn name(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn encode<S: AsRef<str>>(&self, tags: &[S]) -> Result<Vec<usize>> {
        tags.iter().map(|t| self.index(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.labels[i].clone()).collect()
    }
}

/// An entity mention over token positions `start..=end`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: String,
}

enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(tag: &str) -> Result<Tag<'_>> {
    if tag == "O" {
        return Ok(Tag::Outside);
    }
    match tag.split_once('-') {
        Some(("B", t)) if !t.is_empty() => Ok(Tag::Begin(t)),
        Some(("I", t)) if !t.is_empty() => Ok(Tag::Inside(t)),
        _ => Err(Error::UnknownLabel(tag.to_string())),
    }
}

/// Spans of a BIO sequence. An `I-X` that does not continue an `X` span
/// opens a new one, as if it were `B-X`.
pub fn bio_spans<S: AsRef<str>>(tags: &[S]) -> Result<BTreeSet<Span>> {
    let mut spans = BTreeSet::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = parse_tag(tag.as_ref())?;
        let (start_new, kind) = match tag {
            Tag::Outside => (false, ""),
            Tag::Begin(t) => (true, t),
            Tag::Inside(t) => (!matches!(open, Some((_, k)) if k == t), t),
        };
        if matches!(tag, Tag::Outside) || start_new {
            if let Some((s, k)) = open.take() {
                spans.insert(Span {
                    start: s,
                    end: i - 1,
                    kind: k.to_string(),
                });
            }
        }
        if start_new {
            open = Some((i, kind));
        }
    }
    if let Some((s, k)) = open {
        spans.insert(Span {
            start: s,
            end: tags.len() - 1,
            kind: k.to_string(),
        });
    }
    Ok(spans)
}

/// Strict BIO check: every `I-X` must follow `B-X` or `I-X`. Returns the
/// offending position on failure.
pub fn validate_bio<S: AsRef<str>>(tags: &[S]) -> std::result::Result<(), (usize, String)> {
    let mut prev: Option<&str> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        match parse_tag(tag) {
            Err(_) => return Err((i, format!("unknown tag {tag:?}"))),
            Ok(Tag::Outside) => prev = None,
            Ok(Tag::Begin(t)) => prev = Some(t),
            Ok(Tag::Inside(t)) => {
                if prev != Some(t) {
                    return Err((i, format!("{tag} does not continue an entity of type {t}")));
                }
            }
        }
    }
    Ok(())
}
