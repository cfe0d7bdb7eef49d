//! CTC alignment machinery: collapsing, forward-backward loss with its
//! gradient, greedy decoding, and a brute-force enumeration reference.
//!
//! Label index 0 is the blank in the extended vocabulary; real tokens use
//! indices `1..=|V|`.

use crate::diffgraph::{GraphError, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BLANK: usize = 0;

/// Largest `|V'|^T` the enumeration reference will attempt.
pub const BRUTEFORCE_LIMIT: u128 = 10_000_000;

const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CtcError {
    #[error("label {label} outside extended vocabulary of size {size}")]
    Vocabulary { label: usize, size: usize },
    #[error("target sequence contains the blank label at position {0}")]
    BlankInTarget(usize),
    #[error("row {row} is not a probability simplex (sum {sum}, min {min})")]
    NotSimplex { row: usize, sum: f64, min: f64 },
    #[error("posterior grid must be 2-D, got shape {0:?}")]
    GridShape(Vec<usize>),
    #[error("enumeration over {paths} paths exceeds the limit of {BRUTEFORCE_LIMIT}")]
    TooLarge { paths: u128 },
    #[error("path length {path} does not match grid frame count {frames}")]
    LengthMismatch { path: usize, frames: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, CtcError>;

/// Token inventory `V`; the blank is implicit at index 0 of `V'`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Names must be unique and must not collide with the blank's name `"<b>"`.
    pub fn new(tokens: Vec<String>) -> Option<Self> {
        let mut seen = std::collections::HashSet::new();
        if tokens.iter().any(|t| t == "<b>" || !seen.insert(t.clone())) {
            return None;
        }
        Some(Self { tokens })
    }

    /// `n` tokens named `t1..tn`.
    pub fn numbered(n: usize) -> Self {
        Self {
            tokens: (1..=n).map(|i| format!("t{i}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn extended_len(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn name(&self, label: usize) -> Option<&str> {
        match label {
            BLANK => Some("<b>"),
            l => self.tokens.get(l - 1).map(String::as_str),
        }
    }
}

/// Label sequence `Y`; entries are extended-vocabulary indices, never blank.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TokenSequence(Vec<usize>);

impl TryFrom<Vec<usize>> for TokenSequence {
    type Error = CtcError;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TokenSequence> for Vec<usize> {
    fn from(s: TokenSequence) -> Self {
        s.0
    }
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if let Some(pos) = tokens.iter().position(|&t| t == BLANK) {
            return Err(CtcError::BlankInTarget(pos));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Fewest frames any alignment path for this sequence can have.
    pub fn min_frames(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// The sequence re-embedded as a blank-free path of its own length.
    pub fn as_path(&self) -> AlignmentPath {
        AlignmentPath(self.0.clone())
    }
}

impl std::fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(" "))
    }
}

/// Frame-level labels `π` over `V'`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct AlignmentPath(Vec<usize>);

impl AlignmentPath {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn blank_count(&self) -> usize {
        self.0.iter().filter(|&&l| l == BLANK).count()
    }

    /// `T×|V'|` one-hot matrix.
    pub fn one_hot(&self, classes: usize) -> Result<Tensor> {
        let mut v = vec![0.0; self.0.len() * classes];
        for (t, &l) in self.0.iter().enumerate() {
            if l >= classes {
                return Err(CtcError::Vocabulary {
                    label: l,
                    size: classes,
                });
            }
            v[t * classes + l] = 1.0;
        }
        Ok(Tensor::matrix(self.0.len(), classes, v)?)
    }
}

impl std::fmt::Display for AlignmentPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|&l| if l == BLANK { "-".into() } else { l.to_string() })
            .collect();
        f.write_str(&parts.join(" "))
    }
}

/// Per-frame distributions `Z` over `V'`; rows are probability simplices.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrid(Tensor);

impl PosteriorGrid {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.shape().len() != 2 {
            return Err(CtcError::GridShape(probs.shape().to_vec()));
        }
        for r in 0..probs.rows() {
            let row = probs.row(r);
            let sum: f64 = row.iter().sum();
            let min = row.iter().copied().fold(f64::INFINITY, f64::min);
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE || min < 0.0 || !sum.is_finite() {
                return Err(CtcError::NotSimplex { row: r, sum, min });
            }
        }
        Ok(Self(probs))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Collapsing function: merge adjacent repeats, then drop blanks.
pub fn collapse(path: &AlignmentPath, classes: usize) -> Result<TokenSequence> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in path.labels() {
        if l >= classes {
            return Err(CtcError::Vocabulary {
                label: l,
                size: classes,
            });
        }
        if Some(l) != prev && l != BLANK {
            out.push(l);
        }
        prev = Some(l);
    }
    Ok(TokenSequence(out))
}

pub fn argmax_path(z: &PosteriorGrid) -> AlignmentPath {
    AlignmentPath((0..z.frames()).map(|t| argmax(z.row(t))).collect())
}

/// Per-frame argmax followed by collapsing.
pub fn greedy_decode(z: &PosteriorGrid) -> TokenSequence {
    collapse(&argmax_path(z), z.classes()).expect("argmax labels are in range")
}

/// Loss value with its gradient w.r.t. every grid entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcLoss {
    pub loss: f64,
    /// `dL/dz_{t,k}`, row-major `T×|V'|`.
    pub grad: Vec<f64>,
    /// False when the frame count is below the target's minimum path length.
    pub feasible: bool,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn check_labels(y: &TokenSequence, classes: usize) -> Result<()> {
    match y.tokens().iter().find(|&&l| l >= classes) {
        Some(&label) => Err(CtcError::Vocabulary {
            label,
            size: classes,
        }),
        None => Ok(()),
    }
}

/// CTC negative log-likelihood over a validated posterior grid.
pub fn ctc_loss(z: &PosteriorGrid, y: &TokenSequence) -> Result<CtcLoss> {
    ctc_loss_unnormalized(z.tensor(), y)
}

/// Forward-backward quantities of one utterance.
struct Lattice {
    /// Blank-interleaved target `l'`.
    ext: Vec<usize>,
    /// `ln P(y | z)`; `-inf` when no path has mass.
    log_p: f64,
    /// `ln(alpha_pre_t(s) · beta_post_t(s) / P)`, row-major `T×|l'|`.
    log_occ: Vec<f64>,
}

/// Forward-backward over the blank-interleaved lattice, in log space.
///
/// `logz(t, k)` is the log of the (possibly unnormalised) grid entry.
/// `alpha_pre` holds forward mass before emitting at frame `t` and
/// `beta_post` the backward mass after it, so
/// `dP/dz_{t,k} = Σ_{s: l_s = k} alpha_pre_t(s) · beta_post_t(s)`.
/// Returns `None` when the frame count cannot fit the target.
fn forward_backward(frames: usize, y: &TokenSequence, logz: impl Fn(usize, usize) -> f64) -> Option<Lattice> {
    if frames < y.min_frames() || frames == 0 {
        return None;
    }
    let mut ext = Vec::with_capacity(2 * y.len() + 1);
    ext.push(BLANK);
    for &l in y.tokens() {
        ext.push(l);
        ext.push(BLANK);
    }
    let states = ext.len();
    let skip_ok: Vec<bool> = (0..states)
        .map(|s| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2])
        .collect();
    let ninf = f64::NEG_INFINITY;
    let emit = |t: usize, s: usize| logz(t, ext[s]);

    let mut alpha_pre = vec![ninf; frames * states];
    let mut alpha = vec![ninf; frames * states];
    alpha_pre[0] = 0.0;
    if states > 1 {
        alpha_pre[1] = 0.0;
    }
    for t in 0..frames {
        if t > 0 {
            for s in 0..states {
                let prev = &alpha[(t - 1) * states..t * states];
                let mut v = prev[s];
                if s >= 1 {
                    v = log_add(v, prev[s - 1]);
                }
                if skip_ok[s] {
                    v = log_add(v, prev[s - 2]);
                }
                alpha_pre[t * states + s] = v;
            }
        }
        for s in 0..states {
            alpha[t * states + s] = alpha_pre[t * states + s] + emit(t, s);
        }
    }

    let mut beta_post = vec![ninf; frames * states];
    let last = (frames - 1) * states;
    beta_post[last + states - 1] = 0.0;
    if states > 1 {
        beta_post[last + states - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let next = |sp: usize| emit(t + 1, sp) + beta_post[(t + 1) * states + sp];
            let mut v = next(s);
            if s + 1 < states {
                v = log_add(v, next(s + 1));
            }
            if s + 2 < states && skip_ok[s + 2] {
                v = log_add(v, next(s + 2));
            }
            beta_post[t * states + s] = v;
        }
    }

    let mut log_p = alpha[last + states - 1];
    if states > 1 {
        log_p = log_add(log_p, alpha[last + states - 2]);
    }
    let log_occ = alpha_pre
        .iter()
        .zip(&beta_post)
        .map(|(a, b)| a + b - log_p)
        .collect();
    Some(Lattice { ext, log_p, log_occ })
}

/// CTC loss over raw grid entries; rows of `probs` need not sum to one, so
/// the gradient is w.r.t. the raw entries.
pub fn ctc_loss_unnormalized(probs: &Tensor, y: &TokenSequence) -> Result<CtcLoss> {
    if probs.shape().len() != 2 {
        return Err(CtcError::GridShape(probs.shape().to_vec()));
    }
    let (frames, classes) = (probs.rows(), probs.cols());
    check_labels(y, classes)?;
    let mut grad = vec![0.0; frames * classes];
    let Some(lat) = forward_backward(frames, y, |t, k| probs.get(t, k).ln()) else {
        return Ok(CtcLoss {
            loss: f64::INFINITY,
            grad,
            feasible: false,
        });
    };
    if lat.log_p == f64::NEG_INFINITY {
        return Ok(CtcLoss {
            loss: f64::INFINITY,
            grad,
            feasible: true,
        });
    }
    let states = lat.ext.len();
    for t in 0..frames {
        for s in 0..states {
            let w = lat.log_occ[t * states + s];
            if w > f64::NEG_INFINITY {
                grad[t * classes + lat.ext[s]] -= w.exp();
            }
        }
    }
    Ok(CtcLoss {
        loss: -lat.log_p,
        grad,
        feasible: true,
    })
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let (rows, cols) = (logits.rows(), logits.cols());
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = logits.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    Tensor::matrix(rows, cols, out).expect("same shape")
}

/// CTC loss of `softmax(logits)` with the gradient w.r.t. the logits,
/// `softmax_{t,k} - γ_{t,k}`, where `γ` is the posterior occupancy of label
/// `k` at frame `t`. Unlike going through probabilities, this stays finite
/// when posteriors underflow.
pub fn ctc_loss_logits(logits: &Tensor, y: &TokenSequence) -> Result<CtcLoss> {
    if logits.shape().len() != 2 {
        return Err(CtcError::GridShape(logits.shape().to_vec()));
    }
    let (frames, classes) = (logits.rows(), logits.cols());
    check_labels(y, classes)?;
    let logp = log_softmax_rows(logits);
    let Some(lat) = forward_backward(frames, y, |t, k| logp.get(t, k)) else {
        return Ok(CtcLoss {
            loss: f64::INFINITY,
            grad: vec![0.0; frames * classes],
            feasible: false,
        });
    };
    let mut grad: Vec<f64> = logp.values().iter().map(|v| v.exp()).collect();
    let states = lat.ext.len();
    for t in 0..frames {
        for s in 0..states {
            let k = lat.ext[s];
            let w = lat.log_occ[t * states + s] + logp.get(t, k);
            if w > f64::NEG_INFINITY {
                grad[t * classes + k] -= w.exp();
            }
        }
    }
    Ok(CtcLoss {
        loss: -lat.log_p,
        grad,
        feasible: true,
    })
}

/// Literal sum over every path whose collapse equals `y`.
pub fn ctc_loss_bruteforce(z: &PosteriorGrid, y: &TokenSequence) -> Result<f64> {
    ctc_loss_bruteforce_unnormalized(z.tensor(), y)
}

pub fn ctc_loss_bruteforce_unnormalized(probs: &Tensor, y: &TokenSequence) -> Result<f64> {
    if probs.shape().len() != 2 {
        return Err(CtcError::GridShape(probs.shape().to_vec()));
    }
    let (frames, classes) = (probs.rows(), probs.cols());
    check_labels(y, classes)?;
    let paths = (classes as u128).checked_pow(frames as u32).unwrap_or(u128::MAX);
    if paths > BRUTEFORCE_LIMIT {
        return Err(CtcError::TooLarge { paths });
    }
    let mut labels = vec![0usize; frames];
    let mut total = 0.0;
    for _ in 0..paths {
        let path = AlignmentPath(labels.clone());
        if collapse(&path, classes)? == *y {
            total += labels
                .iter()
                .enumerate()
                .map(|(t, &l)| probs.get(t, l))
                .product::<f64>();
        }
        for slot in labels.iter_mut() {
            *slot += 1;
            if *slot < classes {
                break;
            }
            *slot = 0;
        }
    }
    Ok(-total.ln())
}

/// Registers the CTC loss of the grid held in `probs` on the tape.
pub fn ctc_loss_on_tape(tape: &mut Tape, probs: Var, y: &TokenSequence) -> Result<(Var, CtcLoss)> {
    let out = ctc_loss_unnormalized(tape.value(probs), y)?;
    let v = tape.external_scalar(probs, out.loss, out.grad.clone())?;
    Ok((v, out))
}

/// Registers the CTC loss of `softmax(logits)` on the tape, differentiating
/// w.r.t. the logits.
pub fn ctc_loss_logits_on_tape(tape: &mut Tape, logits: Var, y: &TokenSequence) -> Result<(Var, CtcLoss)> {
    let out = ctc_loss_logits(tape.value(logits), y)?;
    let v = tape.external_scalar(logits, out.loss, out.grad.clone())?;
    Ok((v, out))
}
