//! Randomized self-checks against brute-force references.
//!
//! Each property draws `cases` random inputs from a seeded stream and
//! compares the fast implementation with an exhaustive one. The first failing
//! input is kept as JSON so it can be replayed.

use crate::augment::{self, MaskWidth};
use crate::ctc::{self, AlignmentPath, TokenSequence};
use crate::diffgraph::Tensor;
use crate::encoder::FeatureSequence;
use crate::metrics;
use crate::rng::SeededRng;
use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};

pub const CTC_TOLERANCE: f64 = 1e-9;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct PropertyReport {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_failure: Option<Value>,
}

impl PropertyReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn check<F>(name: &'static str, cases: usize, rng: &SeededRng, mut case: F) -> PropertyReport
where
    F: FnMut(&mut SeededRng) -> Option<Value>,
{
    let mut r = rng.derive(&[name]);
    let mut failures = 0;
    let mut first_failure = None;
    for _ in 0..cases {
        if let Some(v) = case(&mut r) {
            failures += 1;
            first_failure.get_or_insert(v);
        }
    }
    PropertyReport {
        name,
        cases,
        failures,
        first_failure,
    }
}

/// Random `frames × classes` matrix with entries in `[0.05, 1)`, rows
/// normalised when `normalise` is set.
pub fn random_grid(frames: usize, classes: usize, normalise: bool, rng: &mut SeededRng) -> Tensor {
    let mut v: Vec<f64> = (0..frames * classes).map(|_| rng.gen_range(0.05..1.0)).collect();
    if normalise {
        for row in v.chunks_mut(classes) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
    }
    Tensor::matrix(frames, classes, v).expect("sized by construction")
}

pub fn random_tokens(max_len: usize, vocab: usize, rng: &mut SeededRng) -> TokenSequence {
    let len = rng.gen_range(0..=max_len);
    TokenSequence::new((0..len).map(|_| rng.gen_range(1..=vocab)).collect()).expect("in range")
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a.is_infinite() && b.is_infinite()) || (a - b).abs() <= tol
}

/// Minimum edit cost and every `(subs, dels, ins)` triple reaching it, by
/// enumerating all alignments.
pub fn exhaustive_alignments(r: &[usize], h: &[usize]) -> (usize, Vec<(usize, usize, usize)>) {
    fn walk(r: &[usize], h: &[usize], acc: (usize, usize, usize), out: &mut Vec<(usize, usize, usize)>) {
        if r.is_empty() && h.is_empty() {
            out.push(acc);
            return;
        }
        if !r.is_empty() && !h.is_empty() {
            let sub = usize::from(r[0] != h[0]);
            walk(&r[1..], &h[1..], (acc.0 + sub, acc.1, acc.2), out);
        }
        if !r.is_empty() {
            walk(&r[1..], h, (acc.0, acc.1 + 1, acc.2), out);
        }
        if !h.is_empty() {
            walk(r, &h[1..], (acc.0, acc.1, acc.2 + 1), out);
        }
    }
    let mut all = Vec::new();
    walk(r, h, (0, 0, 0), &mut all);
    let best = all.iter().map(|(s, d, i)| s + d + i).min().unwrap_or(0);
    let mut optimal: Vec<_> = all.into_iter().filter(|(s, d, i)| s + d + i == best).collect();
    optimal.sort_unstable();
    optimal.dedup();
    (best, optimal)
}

/// Runs every property with `cases` inputs each.
pub fn run_all(cases: usize, seed: u64) -> Vec<PropertyReport> {
    let root = SeededRng::new(seed).derive(&["oracle"]);
    vec![
        check("ctc_forward_vs_bruteforce", cases, &root, |rng| {
            let t = rng.gen_range(1..=5);
            let k = rng.gen_range(2..=4);
            let grid = random_grid(t, k, true, rng);
            let y = random_tokens(3, k - 1, rng);
            let z = ctc::PosteriorGrid::new(grid.clone()).expect("normalised");
            let fast = ctc::ctc_loss(&z, &y).expect("valid").loss;
            let slow = ctc::ctc_loss_bruteforce(&z, &y).expect("small");
            (!close(fast, slow, CTC_TOLERANCE))
                .then(|| json!({"grid": grid.values(), "frames": t, "classes": k, "target": y, "fast": fast, "brute": slow}))
        }),
        check("ctc_gradient_vs_finite_difference", cases, &root, |rng| {
            let t = rng.gen_range(1..=4);
            let k = rng.gen_range(2..=3);
            let grid = random_grid(t, k, false, rng);
            let y = random_tokens(2, k - 1, rng);
            let out = ctc::ctc_loss_unnormalized(&grid, &y).expect("valid");
            if !out.feasible {
                return None;
            }
            for i in 0..grid.len() {
                let mut plus = grid.clone();
                plus.values_mut()[i] += FD_STEP;
                let mut minus = grid.clone();
                minus.values_mut()[i] -= FD_STEP;
                let fd = (ctc::ctc_loss_bruteforce_unnormalized(&plus, &y).expect("small")
                    - ctc::ctc_loss_bruteforce_unnormalized(&minus, &y).expect("small"))
                    / (2.0 * FD_STEP);
                let a = out.grad[i];
                if (a - fd).abs() > GRAD_TOLERANCE * a.abs().max(fd.abs()).max(1e-3) {
                    return Some(json!({"grid": grid.values(), "frames": t, "classes": k, "target": y, "index": i, "analytic": a, "finite_difference": fd}));
                }
            }
            None
        }),
        check("collapse_idempotent_on_repeat_free_output", cases, &root, |rng| {
            let t = rng.gen_range(0..=12);
            let k = rng.gen_range(2..=5);
            let path = AlignmentPath::new((0..t).map(|_| rng.gen_range(0..k)).collect());
            let once = ctc::collapse(&path, k).expect("in range");
            let repeat_free = once.tokens().windows(2).all(|w| w[0] != w[1]);
            if !repeat_free {
                return None;
            }
            let twice = ctc::collapse(&once.as_path(), k).expect("in range");
            (twice != once).then(|| json!({"path": path.labels(), "classes": k}))
        }),
        check("wer_vs_exhaustive_alignment", cases, &root, |rng| {
            let r = random_tokens(6, 3, rng);
            let h = random_tokens(6, 3, rng);
            let b = metrics::align(&r, &h);
            let (best, optimal) = exhaustive_alignments(r.tokens(), h.tokens());
            let triple = (b.substitutions, b.deletions, b.insertions);
            let ok = b.errors() == best && optimal.contains(&triple) && b.hits + b.substitutions + b.deletions == r.len();
            (!ok).then(|| json!({"reference": r, "hypothesis": h, "errors": b.errors(), "exhaustive": best}))
        }),
        check("zero_rate_masks_are_identity", cases, &root, |rng| {
            let t = rng.gen_range(1..=10);
            let d = rng.gen_range(1..=6);
            let c = FeatureSequence::new(random_grid(t, d, false, rng)).expect("finite");
            let mut r = rng.clone();
            let tm = augment::time_mask(&c, MaskWidth::Frames(t), 0.0, &mut r).expect("fits");
            let fm = augment::feature_mask(&c, d, 0.0, &mut r).expect("fits");
            (tm != c || fm != c).then(|| json!({"features": c.tensor().values(), "frames": t, "dim": d}))
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exhaustive_alignment_small_cases() {
        assert_eq!(exhaustive_alignments(&[], &[]), (0, vec![(0, 0, 0)]));
        let (best, opt) = exhaustive_alignments(&[1, 2], &[2]);
        assert_eq!(best, 1);
        assert_eq!(opt, vec![(0, 1, 0)]);
    }

    #[test]
    fn all_properties_pass() {
        for r in run_all(30, 3) {
            assert!(r.passed(), "{} failed: {:?}", r.name, r.first_failure);
            assert_eq!(r.cases, 30);
        }
    }
}
