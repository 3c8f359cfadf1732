use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::bio::{bio_spans, Span};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

/// True positive, false positive and false negative span counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// Undefined ratios are 0, except that no predictions and no gold spans
    /// at all scores a perfect 1.
    pub fn prf(&self) -> Prf {
        if self.tp + self.fp + self.fn_ == 0 {
            return Prf {
                p: 1.0,
                r: 1.0,
                f1: 1.0,
            };
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f1 = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        Prf { p, r, f1 }
    }
}

fn count_sets(pred: &BTreeSet<Span>, gold: &BTreeSet<Span>) -> Counts {
    let tp = pred.intersection(gold).count();
    Counts {
        tp,
        fp: pred.len() - tp,
        fn_: gold.len() - tp,
    }
}

/// Exact-match span counts, optionally restricted to one entity type.
pub fn span_counts<S: AsRef<str>>(
    pred: &[Vec<S>],
    gold: &[Vec<S>],
    kind: Option<&str>,
) -> Result<Counts> {
    if pred.len() != gold.len() {
        return Err(Error::Mismatch(format!(
            "{} predicted sequences vs {} gold",
            pred.len(),
            gold.len()
        )));
    }
    let mut total = Counts::default();
    for (p, g) in pred.iter().zip(gold) {
        if p.len() != g.len() {
            return Err(Error::Mismatch(format!(
                "sequence lengths {} vs {}",
                p.len(),
                g.len()
            )));
        }
        let keep = |s: &Span| kind.is_none_or(|k| s.kind == k);
        let ps: BTreeSet<Span> = bio_spans(p)?.into_iter().filter(keep).collect();
        let gs: BTreeSet<Span> = bio_spans(g)?.into_iter().filter(keep).collect();
        total.add(count_sets(&ps, &gs));
    }
    Ok(total)
}

/// Corpus-level micro precision, recall and F1 over exact span matches.
pub fn span_micro_f1<S: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<S>]) -> Result<Prf> {
    Ok(span_counts(pred, gold, None)?.prf())
}
