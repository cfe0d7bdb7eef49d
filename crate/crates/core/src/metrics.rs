//! Word error rate with substitution / deletion / insertion attribution.

use crate::ctc::TokenSequence;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("corpus report needs at least one pair")]
    EmptyCorpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub hits: usize,
    pub ref_len: usize,
    pub wer: f64,
    pub sub_rate: f64,
    pub del_rate: f64,
    pub ins_rate: f64,
}

impl ErrorBreakdown {
    /// Builds the rates from counts. With an empty reference the rates are 0
    /// when there are no insertions and `+inf` otherwise.
    pub fn from_counts(substitutions: usize, deletions: usize, insertions: usize, hits: usize) -> Self {
        let ref_len = hits + substitutions + deletions;
        let rate = |n: usize| {
            if ref_len > 0 {
                n as f64 / ref_len as f64
            } else if n == 0 {
                0.0
            } else {
                f64::INFINITY
            }
        };
        Self {
            substitutions,
            deletions,
            insertions,
            hits,
            ref_len,
            wer: rate(substitutions + deletions + insertions),
            sub_rate: rate(substitutions),
            del_rate: rate(deletions),
            ins_rate: rate(insertions),
        }
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Diag,
    Del,
    Ins,
}

/// Minimum edit distance alignment with unit costs.
///
/// The backtrace prefers a diagonal step (hit or substitution), then a
/// deletion, then an insertion, so attribution is deterministic.
pub fn align(reference: &TokenSequence, hypothesis: &TokenSequence) -> ErrorBreakdown {
    let r = reference.tokens();
    let h = hypothesis.tokens();
    let (n, m) = (r.len(), h.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        cost[i * w] = i;
    }
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = cost[(i - 1) * w + j - 1] + usize::from(r[i - 1] != h[j - 1]);
            let del = cost[(i - 1) * w + j] + 1;
            let ins = cost[i * w + j - 1] + 1;
            cost[i * w + j] = sub.min(del).min(ins);
        }
    }
    let (mut i, mut j) = (n, m);
    let (mut s, mut d, mut ins, mut hits) = (0, 0, 0, 0);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        let step = if i > 0 && j > 0 && here == cost[(i - 1) * w + j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            Step::Diag
        } else if i > 0 && here == cost[(i - 1) * w + j] + 1 {
            Step::Del
        } else {
            Step::Ins
        };
        match step {
            Step::Diag => {
                if r[i - 1] == h[j - 1] {
                    hits += 1;
                } else {
                    s += 1;
                }
                i -= 1;
                j -= 1;
            }
            Step::Del => {
                d += 1;
                i -= 1;
            }
            Step::Ins => {
                ins += 1;
                j -= 1;
            }
        }
    }
    ErrorBreakdown::from_counts(s, d, ins, hits)
}

/// Micro-averaged breakdown: counts summed over pairs, then divided.
pub fn corpus_report<'a, I>(pairs: I) -> Result<ErrorBreakdown, MetricsError>
where
    I: IntoIterator<Item = (&'a TokenSequence, &'a TokenSequence)>,
{
    let mut any = false;
    let (mut s, mut d, mut i, mut h) = (0, 0, 0, 0);
    for (r, hyp) in pairs {
        any = true;
        let b = align(r, hyp);
        s += b.substitutions;
        d += b.deletions;
        i += b.insertions;
        h += b.hits;
    }
    if !any {
        return Err(MetricsError::EmptyCorpus);
    }
    Ok(ErrorBreakdown::from_counts(s, d, i, h))
}

/// One scored utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub reference: TokenSequence,
    pub hypothesis: TokenSequence,
    pub breakdown: ErrorBreakdown,
}

pub const REPORT_HEADER: &str = "utt_id,ref_len,subs,dels,inss,wer";

fn fmt_rate(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        "inf".to_string()
    }
}

/// Comma-separated report: header, one row per utterance, then a `corpus`
/// summary row.
pub fn format_report(records: &[UtteranceRecord], corpus: &ErrorBreakdown) -> String {
    let mut out = String::new();
    writeln!(out, "{REPORT_HEADER}").unwrap();
    let mut row = |id: &str, b: &ErrorBreakdown| {
        writeln!(
            out,
            "{id},{},{},{},{},{}",
            b.ref_len,
            b.substitutions,
            b.deletions,
            b.insertions,
            fmt_rate(b.wer)
        )
        .unwrap();
    };
    for r in records {
        row(&r.utt_id, &r.breakdown);
    }
    row("corpus", corpus);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(v: &[usize]) -> TokenSequence {
        TokenSequence::new(v.to_vec()).unwrap()
    }

    #[test]
    fn exact_match() {
        let b = align(&seq(&[1, 2, 3]), &seq(&[1, 2, 3]));
        assert_eq!(b.errors(), 0);
        assert_eq!(b.hits, 3);
        assert_eq!(b.wer, 0.0);
    }

    #[test]
    fn single_deletion() {
        let b = align(&seq(&[1, 2, 3]), &seq(&[1, 3]));
        assert_eq!((b.substitutions, b.deletions, b.insertions), (0, 1, 0));
        assert!((b.wer - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn substitution_preferred_over_del_ins() {
        let b = align(&seq(&[1, 2]), &seq(&[1, 3]));
        assert_eq!((b.substitutions, b.deletions, b.insertions), (1, 0, 0));
    }

    #[test]
    fn empty_reference() {
        let b = align(&seq(&[]), &seq(&[1, 2]));
        assert_eq!(b.insertions, 2);
        assert_eq!(b.wer, f64::INFINITY);
        let b = align(&seq(&[]), &seq(&[]));
        assert_eq!(b.wer, 0.0);
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let b = align(&seq(&[1, 1, 2]), &seq(&[]));
        assert_eq!(b.deletions, 3);
        assert_eq!(b.wer, 1.0);
    }

    #[test]
    fn corpus_micro_average() {
        let a = (seq(&[1, 2, 3]), seq(&[1, 2, 3]));
        let b = (seq(&[1, 2, 3]), seq(&[1, 3]));
        let rep = corpus_report([(&a.0, &a.1), (&b.0, &b.1)]).unwrap();
        assert!((rep.wer - 1.0 / 6.0).abs() < 1e-15);
        let single = corpus_report([(&b.0, &b.1)]).unwrap();
        assert_eq!(single, align(&b.0, &b.1));
        let twice = corpus_report([(&b.0, &b.1), (&b.0, &b.1)]).unwrap();
        assert_eq!(twice.wer, single.wer);
        assert_eq!(twice.del_rate, single.del_rate);
        assert_eq!(
            corpus_report(std::iter::empty::<(&TokenSequence, &TokenSequence)>()),
            Err(MetricsError::EmptyCorpus)
        );
    }

    #[test]
    fn report_format() {
        let r = seq(&[1, 2, 3]);
        let h = seq(&[1, 3]);
        let b = align(&r, &h);
        let recs = vec![UtteranceRecord {
            utt_id: "u1".into(),
            reference: r,
            hypothesis: h,
            breakdown: b,
        }];
        let text = format_report(&recs, &b);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], REPORT_HEADER);
        assert_eq!(lines[1], "u1,3,0,1,0,0.333333");
        assert_eq!(lines[2], "corpus,3,0,1,0,0.333333");
    }
}
