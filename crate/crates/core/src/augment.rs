//! Corruption of intermediate predictions before they condition the next
//! layer.
//!
//! Feature-space operators (time and feature masking) act on the projected
//! conditioning sequence `C`. Token-space operators (deletion, insertion,
//! substitution) turn the posterior grid `Z` into a hard label path whose
//! one-hot rows go through the shared conditioning projection.
//!
//! When a spec lists several operators they run left to right: all token
//! operators first (each later one acting on the one-hot path of the previous
//! one), then projection, then feature operators. A token operator listed
//! after a feature operator is rejected.

use crate::ctc::{self, AlignmentPath, CtcError, PosteriorGrid, BLANK};
use crate::diffgraph::{GraphError, Tape, Tensor, Var};
use crate::encoder::{BoundHeads, FeatureSequence, SharedHeads};
use crate::rng::SeededRng;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid augmentation config: {0}")]
    Config(String),
    #[error("row {row} of the posterior grid is not a probability simplex (sum {sum})")]
    Numeric { row: usize, sum: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugOperator {
    None,
    TimeMask,
    FeatureMask,
    TokenDelete,
    TokenInsert,
    TokenSubstitute,
}

impl AugOperator {
    pub fn is_token(self) -> bool {
        matches!(
            self,
            AugOperator::TokenDelete | AugOperator::TokenInsert | AugOperator::TokenSubstitute
        )
    }

    pub fn is_feature(self) -> bool {
        matches!(self, AugOperator::TimeMask | AugOperator::FeatureMask)
    }

    pub fn name(self) -> &'static str {
        match self {
            AugOperator::None => "none",
            AugOperator::TimeMask => "time_mask",
            AugOperator::FeatureMask => "feature_mask",
            AugOperator::TokenDelete => "token_delete",
            AugOperator::TokenInsert => "token_insert",
            AugOperator::TokenSubstitute => "token_substitute",
        }
    }
}

/// Where feature-space masking is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugPosition {
    /// `X' = X + Aug(C)`.
    ConditioningFeature,
    /// `X' = Aug(X) + C`; feature-space operators only.
    EncoderFeature,
}

/// Maximum mask width: an absolute count, or a fraction of the axis length
/// (floored per utterance). In config files an integer is a count and a
/// float is a fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskWidth {
    Frames(usize),
    Fraction(f64),
}

impl MaskWidth {
    pub fn resolve(self, len: usize) -> Result<usize> {
        match self {
            MaskWidth::Frames(w) if w > len => Err(AugmentError::Config(format!(
                "mask width {w} exceeds axis length {len}"
            ))),
            MaskWidth::Frames(w) => Ok(w),
            MaskWidth::Fraction(f) if (0.0..=1.0).contains(&f) => Ok((f * len as f64).floor() as usize),
            MaskWidth::Fraction(f) => Err(AugmentError::Config(format!(
                "mask width fraction {f} outside [0, 1]"
            ))),
        }
    }
}

/// Which Bernoulli outcome corrupts a frame under token deletion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeletionOrientation {
    /// A frame becomes blank with probability `p_del`.
    #[default]
    CorruptWithProbability,
    /// `π̃ = r · argmax` literally: a frame becomes blank with probability `1 - p_del`.
    KeepWithProbability,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
enum OperatorRepr {
    One(AugOperator),
    Many(Vec<AugOperator>),
}

/// Operator list; a single name or an array in config files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "OperatorRepr", into = "OperatorRepr")]
pub struct Operators(Vec<AugOperator>);

impl From<OperatorRepr> for Operators {
    fn from(r: OperatorRepr) -> Self {
        match r {
            OperatorRepr::One(o) => Operators::single(o),
            OperatorRepr::Many(v) => Operators(v.into_iter().filter(|o| *o != AugOperator::None).collect()),
        }
    }
}

impl From<Operators> for OperatorRepr {
    fn from(o: Operators) -> Self {
        match o.0.as_slice() {
            [] => OperatorRepr::One(AugOperator::None),
            [one] => OperatorRepr::One(*one),
            _ => OperatorRepr::Many(o.0),
        }
    }
}

impl Operators {
    pub fn single(op: AugOperator) -> Self {
        if op == AugOperator::None {
            Operators(vec![])
        } else {
            Operators(vec![op])
        }
    }

    pub fn list(&self) -> &[AugOperator] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    pub operator: Operators,
    pub p_time: f64,
    pub p_feat: f64,
    pub w_tau: MaskWidth,
    pub w_d: usize,
    pub p_del: f64,
    pub p_ins: f64,
    pub position: AugPosition,
    /// Mask blocks per feature-space application.
    #[serde(default = "one")]
    pub num_masks: usize,
    /// Fresh draws at every conditioning layer; when false all layers of an
    /// utterance share one draw sequence.
    #[serde(default = "yes")]
    pub redraw_per_layer: bool,
    #[serde(default)]
    pub deletion_orientation: DeletionOrientation,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            operator: Operators(vec![]),
            p_time: 1.0,
            p_feat: 1.0,
            w_tau: MaskWidth::Fraction(0.1),
            w_d: 4,
            p_del: 0.1,
            p_ins: 0.1,
            position: AugPosition::ConditioningFeature,
            num_masks: 1,
            redraw_per_layer: true,
            deletion_orientation: DeletionOrientation::CorruptWithProbability,
        }
    }
}

impl AugmentationSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_operator(op: AugOperator) -> Self {
        Self {
            operator: Operators::single(op),
            ..Self::default()
        }
    }

    pub fn operators(&self) -> &[AugOperator] {
        self.operator.list()
    }

    pub fn is_none(&self) -> bool {
        self.operator.list().is_empty()
    }

    /// Short label such as `token_delete` or `time_mask@encoder_feature`.
    pub fn label(&self) -> String {
        let mut s = if self.is_none() {
            "none".to_string()
        } else {
            self.operators().iter().map(|o| o.name()).collect::<Vec<_>>().join("+")
        };
        if self.position == AugPosition::EncoderFeature {
            s.push_str("@encoder_feature");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_time", self.p_time),
            ("p_feat", self.p_feat),
            ("p_del", self.p_del),
            ("p_ins", self.p_ins),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if let MaskWidth::Fraction(f) = self.w_tau {
            if !(0.0..=1.0).contains(&f) {
                return Err(AugmentError::Config(format!("w_tau fraction {f} outside [0, 1]")));
            }
        }
        let ops = self.operators();
        if self.position == AugPosition::EncoderFeature && ops.iter().any(|o| o.is_token()) {
            return Err(AugmentError::Config(
                "position encoder_feature only supports feature-space operators".into(),
            ));
        }
        if let Some(first_feature) = ops.iter().position(|o| o.is_feature()) {
            if ops[first_feature..].iter().any(|o| o.is_token()) {
                return Err(AugmentError::Config(
                    "token operators must precede feature operators".into(),
                ));
            }
        }
        Ok(())
    }

    fn layer_rng(&self, layer: usize, rng: &SeededRng) -> SeededRng {
        let label = if self.redraw_per_layer {
            layer.to_string()
        } else {
            "shared".to_string()
        };
        rng.derive(&["layer", &label])
    }

    fn op_rng(layer_rng: &SeededRng, index: usize, op: AugOperator) -> SeededRng {
        layer_rng.derive(&["op", &index.to_string(), op.name()])
    }

    /// The corrupted alignment path the token operators produce from `z` at
    /// `layer`, or `None` when no token operator is configured. Draws the same
    /// random numbers as [`Self::apply_on_tape`].
    pub fn token_path(&self, z: &PosteriorGrid, layer: usize, rng: &SeededRng) -> Result<Option<AlignmentPath>> {
        self.validate()?;
        self.token_path_with(z.tensor(), &self.layer_rng(layer, rng))
    }

    fn token_path_with(&self, z: &Tensor, layer_rng: &SeededRng) -> Result<Option<AlignmentPath>> {
        let mut path: Option<AlignmentPath> = None;
        for (i, op) in self.operators().iter().enumerate() {
            if !op.is_token() {
                continue;
            }
            let mut op_rng = Self::op_rng(layer_rng, i, *op);
            let grid = match &path {
                Some(p) => p.one_hot(z.cols())?,
                None => z.clone(),
            };
            path = Some(match op {
                AugOperator::TokenDelete => token_delete_raw(&grid, self.p_del, self.deletion_orientation, &mut op_rng),
                AugOperator::TokenInsert => token_insert_raw(&grid, self.p_ins, &mut op_rng),
                _ => token_substitute_raw(&grid, &mut op_rng)?,
            });
        }
        Ok(path)
    }

    /// Applies the configured operators at conditioning layer `layer`.
    ///
    /// Returns `(x_out, c_aug)`; the caller forms `x_out + c_aug`.
    pub fn apply_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        z: Var,
        heads: &BoundHeads,
        layer: usize,
        rng: &SeededRng,
    ) -> Result<(Var, Var)> {
        self.validate()?;
        let layer_rng = self.layer_rng(layer, rng);
        let path = self.token_path_with(tape.value(z), &layer_rng)?;
        let mut x_out = x;
        let mut c: Option<Var> = None;
        for (i, op) in self.operators().iter().enumerate() {
            if op.is_token() {
                continue;
            }
            let mut op_rng = Self::op_rng(&layer_rng, i, *op);
            let c_var = match c {
                Some(v) => v,
                None => project_on_tape(tape, z, path.as_ref(), heads)?,
            };
            c = Some(c_var);
            let target = match self.position {
                AugPosition::ConditioningFeature => c_var,
                AugPosition::EncoderFeature => x_out,
            };
            let (frames, dim) = (tape.value(target).rows(), tape.value(target).cols());
            let mask = match op {
                AugOperator::TimeMask => {
                    let w = self.w_tau.resolve(frames)?;
                    let spans = draw_spans(frames, w, self.p_time, self.num_masks, &mut op_rng);
                    row_mask(frames, dim, &spans)
                }
                AugOperator::FeatureMask => {
                    let w = MaskWidth::Frames(self.w_d).resolve(dim)?;
                    let spans = draw_spans(dim, w, self.p_feat, self.num_masks, &mut op_rng);
                    col_mask(frames, dim, &spans)
                }
                _ => unreachable!("token operators handled above"),
            };
            let mask = tape.constant(mask);
            let masked = tape.mul(target, mask)?;
            match self.position {
                AugPosition::ConditioningFeature => c = Some(masked),
                AugPosition::EncoderFeature => x_out = masked,
            }
        }
        let c = match c {
            Some(v) => v,
            None => project_on_tape(tape, z, path.as_ref(), heads)?,
        };
        Ok((x_out, c))
    }
}

fn project_on_tape(tape: &mut Tape, z: Var, path: Option<&AlignmentPath>, heads: &BoundHeads) -> Result<Var> {
    let src = match path {
        Some(p) => {
            let classes = tape.value(z).cols();
            tape.constant(p.one_hot(classes)?)
        }
        None => z,
    };
    heads.project(tape, src).map_err(|e| match e {
        crate::encoder::EncoderError::Graph(g) => AugmentError::Graph(g),
        other => AugmentError::Config(other.to_string()),
    })
}

/// Draws up to `count` spans on an axis of length `len`. Each is present with
/// probability `p`; its width is uniform on `{0..=max_width}` and its start
/// uniform on `{0..=len - width}`.
pub fn draw_spans(len: usize, max_width: usize, p: f64, count: usize, rng: &mut SeededRng) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    for _ in 0..count {
        if rng.gen::<f64>() >= p {
            continue;
        }
        let width = rng.gen_range(0..=max_width.min(len));
        let start = rng.gen_range(0..=len - width);
        spans.push(start..start + width);
    }
    spans
}

fn row_mask(frames: usize, dim: usize, spans: &[Range<usize>]) -> Tensor {
    let mut m = vec![1.0; frames * dim];
    for s in spans {
        for t in s.clone() {
            m[t * dim..(t + 1) * dim].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Tensor::matrix(frames, dim, m).expect("sized by construction")
}

fn col_mask(frames: usize, dim: usize, spans: &[Range<usize>]) -> Tensor {
    let mut m = vec![1.0; frames * dim];
    for s in spans {
        for t in 0..frames {
            for d in s.clone() {
                m[t * dim + d] = 0.0;
            }
        }
    }
    Tensor::matrix(frames, dim, m).expect("sized by construction")
}

fn masked(c: &FeatureSequence, mask: &Tensor) -> FeatureSequence {
    let vals = c
        .tensor()
        .values()
        .iter()
        .zip(mask.values())
        .map(|(v, m)| if *m == 0.0 { 0.0 } else { *v })
        .collect();
    let t = Tensor::matrix(c.frames(), c.dim(), vals).expect("same shape");
    FeatureSequence::new(t).expect("masking keeps values finite")
}

/// Zeroes one block of consecutive frames with probability `p_time`.
pub fn time_mask(c: &FeatureSequence, w_tau: MaskWidth, p_time: f64, rng: &mut SeededRng) -> Result<FeatureSequence> {
    let w = w_tau.resolve(c.frames())?;
    let spans = draw_spans(c.frames(), w, p_time, 1, rng);
    Ok(masked(c, &row_mask(c.frames(), c.dim(), &spans)))
}

/// Zeroes one block of consecutive channels with probability `p_feat`.
pub fn feature_mask(c: &FeatureSequence, w_d: usize, p_feat: f64, rng: &mut SeededRng) -> Result<FeatureSequence> {
    let w = MaskWidth::Frames(w_d).resolve(c.dim())?;
    let spans = draw_spans(c.dim(), w, p_feat, 1, rng);
    Ok(masked(c, &col_mask(c.frames(), c.dim(), &spans)))
}

fn token_delete_raw(z: &Tensor, p_del: f64, orientation: DeletionOrientation, rng: &mut SeededRng) -> AlignmentPath {
    let labels = (0..z.rows())
        .map(|t| {
            let hit = rng.gen::<f64>() < p_del;
            let corrupt = match orientation {
                DeletionOrientation::CorruptWithProbability => hit,
                DeletionOrientation::KeepWithProbability => !hit,
            };
            if corrupt {
                BLANK
            } else {
                ctc::argmax(z.row(t))
            }
        })
        .collect();
    AlignmentPath::new(labels)
}

fn token_insert_raw(z: &Tensor, p_ins: f64, rng: &mut SeededRng) -> AlignmentPath {
    let labels = (0..z.rows())
        .map(|t| {
            let row = z.row(t);
            if rng.gen::<f64>() < p_ins && row.len() > 1 {
                1 + ctc::argmax(&row[1..])
            } else {
                ctc::argmax(row)
            }
        })
        .collect();
    AlignmentPath::new(labels)
}

fn token_substitute_raw(z: &Tensor, rng: &mut SeededRng) -> Result<AlignmentPath> {
    let mut labels = Vec::with_capacity(z.rows());
    for t in 0..z.rows() {
        let row = z.row(t);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || row.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(AugmentError::Numeric { row: t, sum });
        }
        let dist = WeightedIndex::new(row).map_err(|_| AugmentError::Numeric { row: t, sum })?;
        labels.push(dist.sample(rng));
    }
    Ok(AlignmentPath::new(labels))
}

/// Per frame: blank with probability `p_del`, otherwise the argmax label.
pub fn token_delete(z: &PosteriorGrid, p_del: f64, rng: &mut SeededRng) -> AlignmentPath {
    token_delete_raw(z.tensor(), p_del, DeletionOrientation::CorruptWithProbability, rng)
}

/// Per frame: with probability `p_ins` the blank is excluded from the argmax.
pub fn token_insert(z: &PosteriorGrid, p_ins: f64, rng: &mut SeededRng) -> AlignmentPath {
    token_insert_raw(z.tensor(), p_ins, rng)
}

/// Per frame: a label sampled from that frame's posterior.
pub fn token_substitute(z: &PosteriorGrid, rng: &mut SeededRng) -> Result<AlignmentPath> {
    token_substitute_raw(z.tensor(), rng)
}

/// One-hot rows of `path` through the shared conditioning projection.
pub fn project_tokens(path: &AlignmentPath, heads: &SharedHeads) -> Result<FeatureSequence> {
    let onehot = path.one_hot(heads.classes())?;
    let proj = crate::diffgraph::matmul(&onehot, &heads.cond_projection.weight)?;
    let bias = heads.cond_projection.bias.values();
    let mut vals = proj.into_values();
    for row in vals.chunks_mut(bias.len()) {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
    let t = Tensor::matrix(path.len(), bias.len(), vals)?;
    FeatureSequence::new(t).map_err(|e| AugmentError::Config(e.to_string()))
}

/// Value-level dispatch of `spec` on one conditioning layer.
pub fn apply(
    spec: &AugmentationSpec,
    x: &FeatureSequence,
    z: &PosteriorGrid,
    heads: &SharedHeads,
    layer: usize,
    rng: &SeededRng,
) -> Result<(FeatureSequence, FeatureSequence)> {
    let mut tape = Tape::new();
    let bound = heads.bind(&mut tape, false);
    let xv = tape.constant(x.tensor().clone());
    let zv = tape.constant(z.tensor().clone());
    let (xo, c) = spec.apply_on_tape(&mut tape, xv, zv, &bound, layer, rng)?;
    let wrap = |t: &Tensor| FeatureSequence::new(t.clone()).map_err(|e| AugmentError::Config(e.to_string()));
    Ok((wrap(tape.value(xo))?, wrap(tape.value(c))?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: &[Vec<f64>]) -> PosteriorGrid {
        PosteriorGrid::from_rows(rows).unwrap()
    }

    fn seq(rows: usize, cols: usize) -> FeatureSequence {
        let v = (0..rows * cols).map(|i| 1.0 + i as f64).collect();
        FeatureSequence::new(Tensor::matrix(rows, cols, v).unwrap()).unwrap()
    }

    #[test]
    fn rate_zero_is_identity() {
        let mut rng = SeededRng::new(1);
        let c = seq(10, 4);
        assert_eq!(time_mask(&c, MaskWidth::Frames(5), 0.0, &mut rng).unwrap(), c);
        assert_eq!(feature_mask(&c, 3, 0.0, &mut rng).unwrap(), c);
        let z = grid(&[vec![0.2, 0.8], vec![0.7, 0.3]]);
        assert_eq!(token_delete(&z, 0.0, &mut rng).labels(), &[1, 0]);
        assert_eq!(token_insert(&z, 0.0, &mut rng).labels(), &[1, 0]);
    }

    #[test]
    fn full_width_mask_zeroes_everything() {
        // Width T forces start 0.
        let c = seq(6, 3);
        let spans = vec![0..6];
        let out = masked(&c, &row_mask(6, 3, &spans));
        assert!(out.tensor().values().iter().all(|v| *v == 0.0));
        let out = masked(&c, &col_mask(6, 3, &[0..3]));
        assert!(out.tensor().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn oversized_width_is_config_error() {
        let mut rng = SeededRng::new(1);
        let c = seq(4, 3);
        assert!(matches!(
            time_mask(&c, MaskWidth::Frames(5), 1.0, &mut rng),
            Err(AugmentError::Config(_))
        ));
        assert!(matches!(feature_mask(&c, 4, 1.0, &mut rng), Err(AugmentError::Config(_))));
    }

    #[test]
    fn fraction_width_floors() {
        assert_eq!(MaskWidth::Fraction(0.1).resolve(37).unwrap(), 3);
        assert_eq!(MaskWidth::Fraction(0.1).resolve(9).unwrap(), 0);
    }

    #[test]
    fn feature_mask_leaves_other_columns() {
        let c = seq(5, 8);
        for seed in 0..20 {
            let out = feature_mask(&c, 3, 1.0, &mut SeededRng::new(seed)).unwrap();
            for d in 0..8 {
                let col_zero = (0..5).all(|t| out.tensor().get(t, d) == 0.0);
                let col_same = (0..5).all(|t| out.tensor().get(t, d) == c.tensor().get(t, d));
                assert!(col_zero || col_same);
            }
        }
    }

    #[test]
    fn delete_full_rate_is_all_blank() {
        let z = grid(&[vec![0.1, 0.9], vec![0.2, 0.8], vec![0.6, 0.4]]);
        let p = token_delete(&z, 1.0, &mut SeededRng::new(3));
        assert_eq!(p.labels(), &[0, 0, 0]);
    }

    #[test]
    fn literal_orientation_flips_rate() {
        let z = grid(&vec![vec![0.1, 0.9]; 4]);
        let p = token_delete_raw(z.tensor(), 1.0, DeletionOrientation::KeepWithProbability, &mut SeededRng::new(3));
        assert_eq!(p.labels(), &[1, 1, 1, 1]);
    }

    #[test]
    fn insert_examples() {
        let z = grid(&[vec![0.6, 0.4], vec![0.1, 0.9]]);
        let p = token_insert(&z, 1.0, &mut SeededRng::new(0));
        assert_eq!(p.labels(), &[1, 1]);
        let z = grid(&[vec![0.5, 0.2, 0.3], vec![0.9, 0.05, 0.05]]);
        let p = token_insert(&z, 1.0, &mut SeededRng::new(0));
        assert_eq!(p.blank_count(), 0);
        assert_eq!(p.labels(), &[2, 1]);
    }

    #[test]
    fn substitute_one_hot_is_deterministic() {
        let z = grid(&[vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]);
        for s in 0..10 {
            assert_eq!(token_substitute(&z, &mut SeededRng::new(s)).unwrap().labels(), &[2, 0]);
        }
    }

    #[test]
    fn substitute_rejects_bad_rows() {
        let t = Tensor::from_rows(&[vec![0.5, 0.6]]).unwrap();
        assert!(matches!(
            token_substitute_raw(&t, &mut SeededRng::new(0)),
            Err(AugmentError::Numeric { row: 0, .. })
        ));
    }

    #[test]
    fn project_selects_rows() {
        let mut heads = SharedHeads::zeros(2, 3);
        heads.cond_projection.weight = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let p = AlignmentPath::new(vec![2, 0, 1]);
        let c = project_tokens(&p, &heads).unwrap();
        assert_eq!(c.tensor().values(), &[5.0, 6.0, 1.0, 2.0, 3.0, 4.0]);
        let zero = SharedHeads::zeros(2, 3);
        let c = project_tokens(&AlignmentPath::new(vec![0, 0]), &zero).unwrap();
        assert!(c.tensor().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn token_operator_at_encoder_position_rejected() {
        let mut spec = AugmentationSpec::with_operator(AugOperator::TokenDelete);
        spec.position = AugPosition::EncoderFeature;
        assert!(spec.validate().is_err());
        spec.operator = Operators::single(AugOperator::TimeMask);
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn ordering_rule() {
        let mut spec = AugmentationSpec::none();
        spec.operator = Operators(vec![AugOperator::TimeMask, AugOperator::TokenDelete]);
        assert!(spec.validate().is_err());
        spec.operator = Operators(vec![AugOperator::TokenDelete, AugOperator::TimeMask]);
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn spec_serde_forms() {
        let spec: AugmentationSpec = toml::from_str(
            r#"
            operator = "token_delete"
            p_time = 1.0
            p_feat = 1.0
            w_tau = 0.1
            w_d = 4
            p_del = 0.1
            p_ins = 0.1
            position = "conditioning_feature"
            "#,
        )
        .unwrap();
        assert_eq!(spec.operators(), &[AugOperator::TokenDelete]);
        assert_eq!(spec.w_tau, MaskWidth::Fraction(0.1));
        let text = toml::to_string(&spec).unwrap();
        let back: AugmentationSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
        let mut many = spec.clone();
        many.operator = Operators(vec![AugOperator::TokenInsert, AugOperator::FeatureMask]);
        many.w_tau = MaskWidth::Frames(3);
        let back: AugmentationSpec = toml::from_str(&toml::to_string(&many).unwrap()).unwrap();
        assert_eq!(back, many);
    }

    #[test]
    fn defaults_follow_reported_rates() {
        let d = AugmentationSpec::default();
        assert_eq!((d.p_time, d.p_feat), (1.0, 1.0));
        assert_eq!((d.p_del, d.p_ins), (0.1, 0.1));
    }
}
