//! Synthetic corpus generation and corpus file I/O.
//!
//! Each token emits a run of frames around its class mean plus Gaussian
//! noise; silence frames sit around the origin. Three distortions make the
//! task hard in targeted ways:
//!
//! - `frame_drop_rate` removes emission frames (a token can vanish entirely);
//! - `spurious_frame_rate` inserts a single frame of a random token after an
//!   emitted frame;
//! - `confusion_rate` makes a token's frames a 50/50 blend of its mean and
//!   another class mean.
//!
//! With `successors > 0` label sequences follow a sparse bigram grammar: each
//! token can only be followed by a fixed random subset of the vocabulary.
//!
//! Binary corpus layout (all integers little-endian):
//!
//! ```text
//! magic   b"IACP"
//! version u32 (= 1)
//! count   u64
//! count × {
//!     id_len u32, id bytes (UTF-8)
//!     frames u32, dim u32, frames*dim × f64 (row-major)
//!     label_len u32, label_len × u32 token ids
//! }
//! ```

use crate::ctc::TokenSequence;
use crate::diffgraph::Tensor;
use crate::rng::SeededRng;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CORPUS_MAGIC: &[u8; 4] = b"IACP";
pub const CORPUS_VERSION: u32 = 1;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synth spec: {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("utterance {index}: no feasible sample after {attempts} attempts")]
    Exhausted { index: usize, attempts: usize },
    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: u64, reason: String },
    #[error("label file line {line}: {reason}")]
    Labels { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionProfile {
    pub frame_drop_rate: f64,
    pub spurious_frame_rate: f64,
    pub confusion_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Inclusive `[min, max]` emission frames per token.
    pub frames_per_token: (usize, usize),
    /// Inclusive `[min, max]` silence frames before, between and after tokens.
    /// Repeated tokens always get at least one.
    pub gap_frames: (usize, usize),
    pub noise_sigma: f64,
    pub distortion: DistortionProfile,
    pub utterances: usize,
    /// Inclusive `[min, max]` label length.
    pub label_length: (usize, usize),
    /// Tokens allowed to follow each token, drawn once per seed; `0` draws
    /// every token independently.
    #[serde(default)]
    pub successors: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            feature_dim: 16,
            frames_per_token: (2, 4),
            gap_frames: (0, 2),
            noise_sigma: 0.3,
            distortion: DistortionProfile {
                frame_drop_rate: 0.15,
                spurious_frame_rate: 0.05,
                confusion_rate: 0.1,
            },
            utterances: 2000,
            label_length: (3, 12),
            successors: 0,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| {
            Err(DataError::Config {
                field,
                reason: reason.to_string(),
            })
        };
        if self.vocab_size == 0 {
            return bad("vocab_size", "must be at least 1");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim", "must be at least 1");
        }
        let (fmin, fmax) = self.frames_per_token;
        if fmin < 1 || fmin > fmax {
            return bad("frames_per_token", "need 1 <= min <= max");
        }
        if self.gap_frames.0 > self.gap_frames.1 {
            return bad("gap_frames", "need min <= max");
        }
        if self.label_length.0 > self.label_length.1 {
            return bad("label_length", "need min <= max");
        }
        if self.successors > self.vocab_size {
            return bad("successors", "must not exceed vocab_size");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", "must be finite and non-negative");
        }
        let d = &self.distortion;
        for (field, r) in [
            ("frame_drop_rate", d.frame_drop_rate),
            ("spurious_frame_rate", d.spurious_frame_rate),
            ("confusion_rate", d.confusion_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(field, "must be in [0, 1]");
            }
        }
        Ok(())
    }

    /// Unit-norm class means for tokens `1..=vocab_size`; depends only on the seed.
    /// Allowed successors of token `k` at index `k - 1`, or `None` when
    /// tokens are independent.
    pub fn successor_table(&self) -> Option<Vec<Vec<usize>>> {
        if self.successors == 0 {
            return None;
        }
        let mut rng = SeededRng::new(self.seed).derive(&["successors"]);
        let all: Vec<usize> = (1..=self.vocab_size).collect();
        Some(
            (0..self.vocab_size)
                .map(|_| {
                    let mut next: Vec<usize> = all.choose_multiple(&mut rng, self.successors).copied().collect();
                    next.sort_unstable();
                    next
                })
                .collect(),
        )
    }

    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let mut rng = SeededRng::new(self.seed).derive(&["class_means"]);
        (0..self.vocab_size)
            .map(|_| {
                let v: Vec<f64> = (0..self.feature_dim).map(|_| gaussian(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T×D_in`.
    pub features: Tensor,
    pub label: TokenSequence,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn is_feasible(&self) -> bool {
        self.frames() >= 1 && self.frames() >= self.label.min_frames()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GenerationStats {
    /// Samples discarded because they were empty or too short for their label.
    pub rejected: usize,
}

fn gaussian(rng: &mut SeededRng) -> f64 {
    // Box-Muller; one draw per call keeps stream consumption simple.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

struct Emitter<'a> {
    spec: &'a SynthSpec,
    means: &'a [Vec<f64>],
    rows: Vec<f64>,
    frames: usize,
}

impl Emitter<'_> {
    fn push(&mut self, mean: Option<&[f64]>, rng: &mut SeededRng) {
        for d in 0..self.spec.feature_dim {
            let m = mean.map_or(0.0, |m| m[d]);
            self.rows.push(m + self.spec.noise_sigma * gaussian(rng));
        }
        self.frames += 1;
    }

    fn silence(&mut self, n: usize, rng: &mut SeededRng) {
        for _ in 0..n {
            self.push(None, rng);
        }
    }
}

fn sample_utterance(
    spec: &SynthSpec,
    means: &[Vec<f64>],
    successors: Option<&[Vec<usize>]>,
    rng: &mut SeededRng,
) -> (Vec<f64>, usize, Vec<usize>) {
    let v = spec.vocab_size;
    let len = rng.gen_range(spec.label_length.0..=spec.label_length.1);
    let mut label: Vec<usize> = Vec::with_capacity(len);
    for _ in 0..len {
        let tok = match (successors, label.last()) {
            (Some(table), Some(&prev)) => *table[prev - 1].choose(rng).expect("successors is non-zero"),
            _ => rng.gen_range(1..=v),
        };
        label.push(tok);
    }
    let mut em = Emitter {
        spec,
        means,
        rows: Vec::new(),
        frames: 0,
    };
    let gap = |rng: &mut SeededRng| rng.gen_range(spec.gap_frames.0..=spec.gap_frames.1);
    let d = &spec.distortion;
    let g = gap(rng);
    em.silence(g, rng);
    for (i, &tok) in label.iter().enumerate() {
        if i > 0 {
            let mut g = gap(rng);
            if label[i - 1] == tok {
                g = g.max(1);
            }
            em.silence(g, rng);
        }
        let mut mean = em.means[tok - 1].clone();
        if v > 1 && rng.gen::<f64>() < d.confusion_rate {
            let mut other = rng.gen_range(1..v);
            if other >= tok {
                other += 1;
            }
            for (m, o) in mean.iter_mut().zip(&em.means[other - 1]) {
                *m = 0.5 * (*m + o);
            }
        }
        let n = rng.gen_range(spec.frames_per_token.0..=spec.frames_per_token.1);
        for _ in 0..n {
            if rng.gen::<f64>() < d.frame_drop_rate {
                continue;
            }
            em.push(Some(&mean), rng);
            if rng.gen::<f64>() < d.spurious_frame_rate {
                let k = rng.gen_range(1..=v);
                let spurious = em.means[k - 1].clone();
                em.push(Some(&spurious), rng);
            }
        }
    }
    let g = gap(rng);
    em.silence(g, rng);
    (em.rows, em.frames, label)
}

/// Generates `spec.utterances` utterances with ids `{prefix}-{index:05}`.
///
/// Samples with no frames, or too few frames for their label, are re-rolled.
pub fn generate_split(spec: &SynthSpec, prefix: &str, count: usize) -> Result<(Vec<Utterance>, GenerationStats)> {
    spec.validate()?;
    let means = spec.class_means();
    let successors = spec.successor_table();
    let root = SeededRng::new(spec.seed).derive(&["split", prefix]);
    let mut stats = GenerationStats::default();
    let mut out = Vec::with_capacity(count);
    for index in 0..count {
        let mut rng = root.derive(&["utt", &index.to_string()]);
        let mut attempts = 0;
        let utt = loop {
            if attempts == MAX_ATTEMPTS {
                return Err(DataError::Exhausted { index, attempts });
            }
            attempts += 1;
            let (rows, frames, label) = sample_utterance(spec, &means, successors.as_deref(), &mut rng);
            let label = TokenSequence::new(label).expect("labels are drawn from 1..=V");
            if frames == 0 || frames < label.min_frames() {
                stats.rejected += 1;
                continue;
            }
            break Utterance {
                id: format!("{prefix}-{index:05}"),
                features: Tensor::matrix(frames, spec.feature_dim, rows).expect("sized by construction"),
                label,
            };
        };
        out.push(utt);
    }
    if stats.rejected > 0 {
        log::info!("{prefix}: rejected {} infeasible samples", stats.rejected);
    }
    Ok((out, stats))
}

/// `spec.utterances` training utterances.
pub fn generate(spec: &SynthSpec) -> Result<Vec<Utterance>> {
    Ok(generate_split(spec, "train", spec.utterances)?.0)
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.offset += n as u64;
        Ok(n)
    }
}

pub fn write_corpus<W: Write>(w: &mut W, corpus: &[Utterance]) -> Result<()> {
    w.write_all(CORPUS_MAGIC)?;
    w.write_u32::<LittleEndian>(CORPUS_VERSION)?;
    w.write_u64::<LittleEndian>(corpus.len() as u64)?;
    for u in corpus {
        w.write_u32::<LittleEndian>(u.id.len() as u32)?;
        w.write_all(u.id.as_bytes())?;
        w.write_u32::<LittleEndian>(u.features.rows() as u32)?;
        w.write_u32::<LittleEndian>(u.features.cols() as u32)?;
        for v in u.features.values() {
            w.write_f64::<LittleEndian>(*v)?;
        }
        w.write_u32::<LittleEndian>(u.label.len() as u32)?;
        for t in u.label.tokens() {
            w.write_u32::<LittleEndian>(*t as u32)?;
        }
    }
    Ok(())
}

pub fn read_corpus<R: Read>(r: R) -> Result<Vec<Utterance>> {
    let mut r = CountingReader { inner: r, offset: 0 };
    let parse = |offset: u64, reason: String| DataError::Parse { offset, reason };
    let eof = |r: &CountingReader<R>, e: io::Error| parse(r.offset, format!("truncated payload ({e})"));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| eof(&r, e))?;
    if &magic != CORPUS_MAGIC {
        return Err(parse(0, format!("bad magic bytes {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| eof(&r, e))?;
    if version != CORPUS_VERSION {
        return Err(parse(4, format!("unsupported version {version}")));
    }
    let count = r.read_u64::<LittleEndian>().map_err(|e| eof(&r, e))?;
    let mut out = Vec::new();
    let mut dim_seen: Option<usize> = None;
    for _ in 0..count {
        let at = r.offset;
        let id_len = r.read_u32::<LittleEndian>().map_err(|e| eof(&r, e))? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id).map_err(|e| eof(&r, e))?;
        let id = String::from_utf8(id).map_err(|_| parse(at + 4, "utterance id is not UTF-8".into()))?;
        let dims_at = r.offset;
        let frames = r.read_u32::<LittleEndian>().map_err(|e| eof(&r, e))? as usize;
        let dim = r.read_u32::<LittleEndian>().map_err(|e| eof(&r, e))? as usize;
        if frames == 0 || dim == 0 {
            return Err(parse(dims_at, format!("empty feature matrix {frames}x{dim}")));
        }
        if let Some(prev) = dim_seen {
            if prev != dim {
                return Err(parse(dims_at, format!("dimension mismatch: {dim} after {prev}")));
            }
        }
        dim_seen = Some(dim);
        let mut vals = vec![0.0; frames * dim];
        r.read_f64_into::<LittleEndian>(&mut vals).map_err(|e| eof(&r, e))?;
        let label_at = r.offset;
        let label_len = r.read_u32::<LittleEndian>().map_err(|e| eof(&r, e))? as usize;
        let mut toks = vec![0u32; label_len];
        r.read_u32_into::<LittleEndian>(&mut toks).map_err(|e| eof(&r, e))?;
        let label = TokenSequence::new(toks.into_iter().map(|t| t as usize).collect())
            .map_err(|e| parse(label_at, e.to_string()))?;
        out.push(Utterance {
            id,
            features: Tensor::matrix(frames, dim, vals).expect("sized by construction"),
            label,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(parse(r.offset - 1, "trailing bytes after last utterance".into()));
    }
    Ok(out)
}

pub fn save_corpus(path: &Path, corpus: &[Utterance]) -> Result<()> {
    let mut w = io::BufWriter::new(std::fs::File::create(path)?);
    write_corpus(&mut w, corpus)?;
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<Utterance>> {
    read_corpus(io::BufReader::new(std::fs::File::open(path)?))
}

/// Plain-text labels: `utt_id tok tok ...` per line.
pub fn format_labels<'a, I>(items: I) -> String
where
    I: IntoIterator<Item = (&'a str, &'a TokenSequence)>,
{
    let mut s = String::new();
    for (id, label) in items {
        s.push_str(id);
        for t in label.tokens() {
            s.push(' ');
            s.push_str(&t.to_string());
        }
        s.push('\n');
    }
    s
}

pub fn parse_labels(text: &str) -> Result<Vec<(String, TokenSequence)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(id) = parts.next() else { continue };
        let toks = parts
            .map(|p| p.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| DataError::Labels {
                line: i + 1,
                reason: e.to_string(),
            })?;
        let seq = TokenSequence::new(toks).map_err(|e| DataError::Labels {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push((id.to_string(), seq));
    }
    Ok(out)
}
