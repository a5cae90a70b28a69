//! Word error rates with entity attribution.
//!
//! Errors are split into a biased class (named-entity words) and an
//! unbiased class. Substitutions and deletions follow the reference word,
//! insertions follow the inserted hypothesis word.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Edit {
    Match { r: usize, h: usize },
    Substitute { r: usize, h: usize },
    Delete { r: usize },
    Insert { h: usize },
}

impl Edit {
    pub fn cost(self) -> usize {
        match self {
            Edit::Match { .. } => 0,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub edits: Vec<Edit>,
}

impl Alignment {
    pub fn distance(&self) -> usize {
        self.edits.iter().map(|e| e.cost()).sum()
    }
}

/// Minimum edit-distance alignment with unit costs. On ties the backtrace
/// prefers a diagonal step, then a deletion, then an insertion.
pub fn align<S: AsRef<str>, T: AsRef<str>>(reference: &[S], hypothesis: &[T]) -> Alignment {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut dist = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dist[i * w] = i;
    }
    for j in 0..=m {
        dist[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            let diag = dist[(i - 1) * w + j - 1] + usize::from(!same);
            let del = dist[(i - 1) * w + j] + 1;
            let ins = dist[i * w + j - 1] + 1;
            dist[i * w + j] = diag.min(del).min(ins);
        }
    }
    let mut edits = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dist[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            if dist[(i - 1) * w + j - 1] + usize::from(!same) == here {
                edits.push(if same {
                    Edit::Match { r: i - 1, h: j - 1 }
                } else {
                    Edit::Substitute { r: i - 1, h: j - 1 }
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dist[(i - 1) * w + j] + 1 == here {
            edits.push(Edit::Delete { r: i - 1 });
            i -= 1;
        } else {
            edits.push(Edit::Insert { h: j - 1 });
            j -= 1;
        }
    }
    edits.reverse();
    Alignment { edits }
}

/// Error counts for one class of words.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl ErrorCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    fn add(&mut self, other: &ErrorCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub biased: ErrorCounts,
    pub unbiased: ErrorCounts,
    pub biased_ref_words: usize,
    pub unbiased_ref_words: usize,
    pub utterances: usize,
}

fn rate(errors: usize, words: usize) -> Option<f64> {
    (words > 0).then(|| 100.0 * errors as f64 / words as f64)
}

impl EvalReport {
    pub fn errors(&self) -> usize {
        self.biased.total() + self.unbiased.total()
    }

    pub fn ref_words(&self) -> usize {
        self.biased_ref_words + self.unbiased_ref_words
    }

    /// Percentages; `None` when the class has no reference words.
    pub fn wer(&self) -> Option<f64> {
        rate(self.errors(), self.ref_words())
    }

    pub fn b_wer(&self) -> Option<f64> {
        rate(self.biased.total(), self.biased_ref_words)
    }

    pub fn u_wer(&self) -> Option<f64> {
        rate(self.unbiased.total(), self.unbiased_ref_words)
    }

    pub fn summary(&self) -> RateSummary {
        RateSummary {
            wer: self.wer(),
            b_wer: self.b_wer(),
            u_wer: self.u_wer(),
        }
    }

    /// `WER (B-WER/U-WER)` with two decimals.
    pub fn cell(&self) -> String {
        self.summary().to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub wer: Option<f64>,
    pub b_wer: Option<f64>,
    pub u_wer: Option<f64>,
}

impl fmt::Display for RateSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |r: Option<f64>| r.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        write!(f, "{} ({}/{})", show(self.wer), show(self.b_wer), show(self.u_wer))
    }
}

/// Attributes the errors of `alignment` to the biased or unbiased class.
pub fn biased_wer<S: AsRef<str>, T: AsRef<str>>(
    reference: &[S],
    hypothesis: &[T],
    alignment: &Alignment,
    bias_words: &HashSet<String>,
) -> Result<EvalReport> {
    if reference.is_empty() {
        return Err(Error::Validation("empty reference transcript".into()));
    }
    let is_bias = |w: &str| bias_words.contains(w);
    let mut report = EvalReport {
        utterances: 1,
        ..EvalReport::default()
    };
    for w in reference {
        if is_bias(w.as_ref()) {
            report.biased_ref_words += 1;
        } else {
            report.unbiased_ref_words += 1;
        }
    }
    for e in &alignment.edits {
        let (class, biased) = match *e {
            Edit::Match { .. } => continue,
            Edit::Substitute { r, .. } | Edit::Delete { r } => (e, is_bias(reference[r].as_ref())),
            Edit::Insert { h } => (e, is_bias(hypothesis[h].as_ref())),
        };
        let counts = if biased { &mut report.biased } else { &mut report.unbiased };
        match class {
            Edit::Substitute { .. } => counts.substitutions += 1,
            Edit::Delete { .. } => counts.deletions += 1,
            Edit::Insert { .. } => counts.insertions += 1,
            Edit::Match { .. } => unreachable!(),
        }
    }
    Ok(report)
}

/// Aligns and scores one utterance.
pub fn score_utterance<S: AsRef<str>, T: AsRef<str>>(
    reference: &[S],
    hypothesis: &[T],
    bias_words: &HashSet<String>,
) -> Result<EvalReport> {
    let a = align(reference, hypothesis);
    biased_wer(reference, hypothesis, &a, bias_words)
}

/// Micro-average: counts are summed before any division.
pub fn aggregate<'a, I: IntoIterator<Item = &'a EvalReport>>(reports: I) -> EvalReport {
    let mut total = EvalReport::default();
    for r in reports {
        total.biased.add(&r.biased);
        total.unbiased.add(&r.unbiased);
        total.biased_ref_words += r.biased_ref_words;
        total.unbiased_ref_words += r.unbiased_ref_words;
        total.utterances += r.utterances;
    }
    total
}

/// Exhaustive references for testing the aligner.
pub mod oracle {
    /// Edit distance by enumerating every alignment path recursively.
    pub fn edit_distance<S: AsRef<str>, T: AsRef<str>>(reference: &[S], hypothesis: &[T]) -> usize {
        match (reference.split_first(), hypothesis.split_first()) {
            (None, _) => hypothesis.len(),
            (_, None) => reference.len(),
            (Some((r, rs)), Some((h, hs))) => {
                let diag = edit_distance(rs, hs) + usize::from(r.as_ref() != h.as_ref());
                let del = edit_distance(rs, hypothesis) + 1;
                let ins = edit_distance(reference, hs) + 1;
                diag.min(del).min(ins)
            }
        }
    }
}
