//! Self-conditioned encoder stack.
//!
//! `N` same-shape residual blocks map the embedded input through the stack.
//! After each layer listed in `intermediate_layers`, the shared output head
//! predicts a posterior grid, the shared conditioning projection maps it back
//! to model space, and the result is added to the layer output before it
//! feeds the next layer. The final layer uses the same output head.
//!
//! Parameter order (used by checkpoints, optimizer state and averaging):
//!
//! 1. `input.weight` `[input_dim, model_dim]`, `input.bias` `[model_dim]`
//! 2. for each layer `i` in `0..num_layers`:
//!    - `layers.{i}.attn.query|key|value|output` `[model_dim, model_dim]`
//!      (only for `mlp_attention` blocks)
//!    - `layers.{i}.ff_in.weight` `[model_dim, hidden_dim]`, `layers.{i}.ff_in.bias`
//!    - `layers.{i}.ff_out.weight` `[hidden_dim, model_dim]`, `layers.{i}.ff_out.bias`
//! 3. `out_projection.weight` `[model_dim, vocab_size_ext]`, `out_projection.bias`
//! 4. `cond_projection.weight` `[vocab_size_ext, model_dim]`, `cond_projection.bias`

use crate::augment::{AugmentError, AugmentationSpec};
use crate::ctc::{self, CtcError, PosteriorGrid, TokenSequence};
use crate::diffgraph::{GraphError, Tape, Tensor, Var};
use crate::rng::SeededRng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("expected a {expected_rows}x{expected_cols} sequence, got shape {got:?}")]
    Shape {
        expected_rows: usize,
        expected_cols: usize,
        got: Vec<usize>,
    },
    #[error("layer index {0} out of range")]
    Layer(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Residual per-frame feed-forward block.
    Mlp,
    /// Residual single-head self-attention followed by the feed-forward block.
    MlpAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub num_layers: usize,
    pub model_dim: usize,
    pub vocab_size_ext: usize,
    /// 1-based layer indices in `[1, num_layers - 1]` that get an
    /// intermediate head and condition the next layer.
    pub intermediate_layers: Vec<usize>,
    pub mix_weight: f64,
    pub block_kind: BlockKind,
    pub hidden_dim: usize,
    /// Frames visible on each side in self-attention; unrestricted when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_window: Option<usize>,
    /// Stop gradients from the conditioning branch into the intermediate posteriors.
    #[serde(default)]
    pub detach_conditioning: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            num_layers: 6,
            model_dim: 32,
            vocab_size_ext: 9,
            intermediate_layers: vec![2, 4],
            mix_weight: 0.5,
            block_kind: BlockKind::MlpAttention,
            hidden_dim: 64,
            attention_window: Some(3),
            detach_conditioning: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.num_layers == 0 {
            return bad("num_layers must be positive".into());
        }
        if self.model_dim == 0 || self.input_dim == 0 || self.hidden_dim == 0 {
            return bad("input_dim, model_dim and hidden_dim must be positive".into());
        }
        if self.vocab_size_ext < 2 {
            return bad("vocab_size_ext must include the blank and at least one token".into());
        }
        if !(self.mix_weight > 0.0 && self.mix_weight < 1.0) {
            return bad(format!("mix_weight {} outside (0, 1)", self.mix_weight));
        }
        let mut prev = 0;
        for &n in &self.intermediate_layers {
            if n <= prev || n >= self.num_layers {
                return bad(format!(
                    "intermediate_layers {:?} must be strictly increasing within [1, {}]",
                    self.intermediate_layers,
                    self.num_layers - 1
                ));
            }
            prev = n;
        }
        Ok(())
    }

    pub fn is_intermediate(&self, layer: usize) -> bool {
        self.intermediate_layers.contains(&layer)
    }
}

/// `T×D` real-valued sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence(Tensor);

impl FeatureSequence {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.shape().len() != 2 {
            return Err(EncoderError::Shape {
                expected_rows: 0,
                expected_cols: 0,
                got: data.shape().to_vec(),
            });
        }
        if !data.is_finite() {
            return Err(GraphError::NonFinite {
                op: "feature_sequence",
            }
            .into());
        }
        Ok(Self(data))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
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

/// Affine map applied to each row: `x · weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Self {
        let mut l = Self::zeros(fan_in, fan_out);
        l.weight = uniform_fan_in(fan_in, fan_out, rng);
        l
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

fn uniform_fan_in(fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let vals = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, vals).expect("sized by construction")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub output: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub attention: Option<Attention>,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

/// The output head (shared by intermediate and final predictions) and the
/// conditioning projection (shared by all intermediate layers). A model holds
/// exactly one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedHeads {
    pub out_projection: Linear,
    pub cond_projection: Linear,
}

impl SharedHeads {
    pub fn zeros(model_dim: usize, classes: usize) -> Self {
        Self {
            out_projection: Linear::zeros(model_dim, classes),
            cond_projection: Linear::zeros(classes, model_dim),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.out_projection.in_dim()
    }

    pub fn classes(&self) -> usize {
        self.out_projection.out_dim()
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> BoundHeads {
        BoundHeads {
            out_weight: tape.leaf(self.out_projection.weight.clone().with_requires_grad(track)),
            out_bias: tape.leaf(self.out_projection.bias.clone().with_requires_grad(track)),
            cond_weight: tape.leaf(self.cond_projection.weight.clone().with_requires_grad(track)),
            cond_bias: tape.leaf(self.cond_projection.bias.clone().with_requires_grad(track)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: EncoderConfig,
    pub input: Linear,
    pub layers: Vec<EncoderBlock>,
    pub heads: SharedHeads,
}

#[derive(Debug, Clone, Copy)]
struct BoundLinear {
    weight: Var,
    bias: Var,
}

#[derive(Debug, Clone)]
struct BoundBlock {
    attention: Option<[Var; 4]>,
    ff_in: BoundLinear,
    ff_out: BoundLinear,
}

/// Model parameters registered on one tape, in canonical order.
#[derive(Debug, Clone)]
pub struct BoundModel {
    input: BoundLinear,
    layers: Vec<BoundBlock>,
    pub heads: BoundHeads,
    params: Vec<Var>,
}

impl BoundModel {
    /// Vars in canonical parameter order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }
}

/// Result of a forward pass on a tape.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub final_probs: Var,
    pub final_logits: Var,
    /// `Z^(n)` for each intermediate layer, in layer order.
    pub intermediate: Vec<Var>,
    /// Logits behind each `Z^(n)`.
    pub intermediate_logits: Vec<Var>,
}

/// Loss terms of one utterance.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    pub total_value: f64,
    pub final_loss: f64,
    pub intermediate_losses: Vec<f64>,
    pub feasible: bool,
}

/// Per-call augmentation state: the spec and the utterance's random stream.
#[derive(Debug, Clone)]
pub struct AugmentRun<'a> {
    pub spec: &'a AugmentationSpec,
    pub rng: SeededRng,
}

/// `(1 - λ)` and `λ / |𝒩|` weights of the mixed objective.
pub fn mix_weights(mix_weight: f64, num_intermediate: usize) -> (f64, f64) {
    if num_intermediate == 0 {
        (1.0, 0.0)
    } else {
        (1.0 - mix_weight, mix_weight / num_intermediate as f64)
    }
}

/// `(1 - λ) L(final) + λ/|𝒩| Σ L(inter)`.
///
/// An empty intermediate list is accepted only with `mix_weight == 0`.
pub fn mixed_loss(
    final_grid: &PosteriorGrid,
    intermediate: &[PosteriorGrid],
    y: &TokenSequence,
    mix_weight: f64,
) -> Result<f64> {
    if intermediate.is_empty() && mix_weight > 0.0 {
        return Err(EncoderError::Config(
            "mixed loss with a positive mix_weight needs intermediate predictions".into(),
        ));
    }
    if !(0.0..1.0).contains(&mix_weight) {
        return Err(EncoderError::Config(format!(
            "mix_weight {mix_weight} outside [0, 1)"
        )));
    }
    let (wf, wi) = mix_weights(mix_weight, intermediate.len());
    let mut total = wf * ctc::ctc_loss(final_grid, y)?.loss;
    for z in intermediate {
        total += wi * ctc::ctc_loss(z, y)?.loss;
    }
    Ok(total)
}

impl Model {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = SeededRng::new(seed).derive(&["init"]);
        let d = config.model_dim;
        let v = config.vocab_size_ext;
        let h = config.hidden_dim;
        let input = Linear::init(config.input_dim, d, &mut root.derive(&["input"]));
        let layers = (0..config.num_layers)
            .map(|i| {
                let idx = i.to_string();
                let mut r = root.derive(&["layer", &idx]);
                let attention = (config.block_kind == BlockKind::MlpAttention).then(|| Attention {
                    query: uniform_fan_in(d, d, &mut r),
                    key: uniform_fan_in(d, d, &mut r),
                    value: uniform_fan_in(d, d, &mut r),
                    output: uniform_fan_in(d, d, &mut r),
                });
                EncoderBlock {
                    attention,
                    ff_in: Linear::init(d, h, &mut r),
                    ff_out: Linear::init(h, d, &mut r),
                }
            })
            .collect();
        let heads = SharedHeads {
            out_projection: Linear::init(d, v, &mut root.derive(&["out_projection"])),
            cond_projection: Linear::init(v, d, &mut root.derive(&["cond_projection"])),
        };
        Ok(Self {
            config,
            input,
            layers,
            heads,
        })
    }

    /// Same architecture with every parameter zero.
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        for (_, t) in m.params_mut() {
            t.values_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        Ok(m)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Canonical-order parameter names and tensors.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("input.weight".to_string(), &self.input.weight),
            ("input.bias".to_string(), &self.input.bias),
        ];
        for (i, b) in self.layers.iter().enumerate() {
            if let Some(a) = &b.attention {
                out.push((format!("layers.{i}.attn.query"), &a.query));
                out.push((format!("layers.{i}.attn.key"), &a.key));
                out.push((format!("layers.{i}.attn.value"), &a.value));
                out.push((format!("layers.{i}.attn.output"), &a.output));
            }
            out.push((format!("layers.{i}.ff_in.weight"), &b.ff_in.weight));
            out.push((format!("layers.{i}.ff_in.bias"), &b.ff_in.bias));
            out.push((format!("layers.{i}.ff_out.weight"), &b.ff_out.weight));
            out.push((format!("layers.{i}.ff_out.bias"), &b.ff_out.bias));
        }
        out.push(("out_projection.weight".into(), &self.heads.out_projection.weight));
        out.push(("out_projection.bias".into(), &self.heads.out_projection.bias));
        out.push(("cond_projection.weight".into(), &self.heads.cond_projection.weight));
        out.push(("cond_projection.bias".into(), &self.heads.cond_projection.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("input.weight".to_string(), &mut self.input.weight),
            ("input.bias".to_string(), &mut self.input.bias),
        ];
        for (i, b) in self.layers.iter_mut().enumerate() {
            if let Some(a) = &mut b.attention {
                out.push((format!("layers.{i}.attn.query"), &mut a.query));
                out.push((format!("layers.{i}.attn.key"), &mut a.key));
                out.push((format!("layers.{i}.attn.value"), &mut a.value));
                out.push((format!("layers.{i}.attn.output"), &mut a.output));
            }
            out.push((format!("layers.{i}.ff_in.weight"), &mut b.ff_in.weight));
            out.push((format!("layers.{i}.ff_in.bias"), &mut b.ff_in.bias));
            out.push((format!("layers.{i}.ff_out.weight"), &mut b.ff_out.weight));
            out.push((format!("layers.{i}.ff_out.bias"), &mut b.ff_out.bias));
        }
        let h = &mut self.heads;
        out.push(("out_projection.weight".into(), &mut h.out_projection.weight));
        out.push(("out_projection.bias".into(), &mut h.out_projection.bias));
        out.push(("cond_projection.weight".into(), &mut h.cond_projection.weight));
        out.push(("cond_projection.bias".into(), &mut h.cond_projection.bias));
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every parameter on `tape`, tracking gradients iff `track`.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> BoundModel {
        let mut params = Vec::new();
        let mut leaf = |tape: &mut Tape, t: &Tensor| {
            let v = tape.leaf(t.clone().with_requires_grad(track));
            params.push(v);
            v
        };
        let lin = |tape: &mut Tape, l: &Linear, leaf: &mut dyn FnMut(&mut Tape, &Tensor) -> Var| {
            BoundLinear {
                weight: leaf(tape, &l.weight),
                bias: leaf(tape, &l.bias),
            }
        };
        let input = lin(tape, &self.input, &mut leaf);
        let layers = self
            .layers
            .iter()
            .map(|b| {
                let attention = b.attention.as_ref().map(|a| {
                    [
                        leaf(tape, &a.query),
                        leaf(tape, &a.key),
                        leaf(tape, &a.value),
                        leaf(tape, &a.output),
                    ]
                });
                BoundBlock {
                    attention,
                    ff_in: lin(tape, &b.ff_in, &mut leaf),
                    ff_out: lin(tape, &b.ff_out, &mut leaf),
                }
            })
            .collect();
        let out = lin(tape, &self.heads.out_projection, &mut leaf);
        let cond = lin(tape, &self.heads.cond_projection, &mut leaf);
        BoundModel {
            input,
            layers,
            heads: BoundHeads {
                out_weight: out.weight,
                out_bias: out.bias,
                cond_weight: cond.weight,
                cond_bias: cond.bias,
            },
            params,
        }
    }

    fn check_input(&self, x: &Tensor, cols: usize) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != cols {
            return Err(EncoderError::Shape {
                expected_rows: x.rows(),
                expected_cols: cols,
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn attention_mask(&self, frames: usize) -> Option<Vec<bool>> {
        let w = self.config.attention_window?;
        Some(
            (0..frames * frames)
                .map(|i| (i / frames).abs_diff(i % frames) <= w)
                .collect(),
        )
    }

    /// One residual block on the tape.
    fn layer_on_tape(&self, tape: &mut Tape, b: &BoundBlock, x: Var) -> Result<Var> {
        let mut x = x;
        if let Some([q, k, v, o]) = b.attention {
            let frames = tape.value(x).rows();
            let qx = tape.matmul(x, q)?;
            let kx = tape.matmul(x, k)?;
            let vx = tape.matmul(x, v)?;
            let scores = tape.matmul_nt(qx, kx)?;
            let scores = tape.scale(scores, 1.0 / (self.config.model_dim as f64).sqrt());
            let weights = match self.attention_mask(frames) {
                Some(mask) => tape.softmax_rows_masked(scores, mask)?,
                None => tape.softmax_rows(scores)?,
            };
            let ctx = tape.matmul(weights, vx)?;
            let out = tape.matmul(ctx, o)?;
            x = tape.add(x, out)?;
        }
        let h = linear_on_tape(tape, x, b.ff_in)?;
        let h = tape.tanh(h);
        let f = linear_on_tape(tape, h, b.ff_out)?;
        Ok(tape.add(x, f)?)
    }

    /// Runs the stack on `x0` (raw `T×input_dim` features already on the tape).
    ///
    /// With `aug` absent this is plain self-conditioning and draws no random
    /// numbers.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        x0: Var,
        mut aug: Option<&mut AugmentRun<'_>>,
    ) -> Result<ForwardPass> {
        self.check_input(tape.value(x0), self.config.input_dim)?;
        let mut x = linear_on_tape(tape, x0, bound.input)?;
        let mut intermediate = Vec::new();
        let mut intermediate_logits = Vec::new();
        for (i, b) in bound.layers.iter().enumerate() {
            let n = i + 1;
            x = self.layer_on_tape(tape, b, x)?;
            if n < self.config.num_layers && self.config.is_intermediate(n) {
                let logits = bound.heads.logits(tape, x)?;
                let z = tape.softmax_rows(logits)?;
                intermediate.push(z);
                intermediate_logits.push(logits);
                let z_cond = if self.config.detach_conditioning {
                    tape.detach(z)
                } else {
                    z
                };
                let (x_out, c) = match aug.as_deref_mut() {
                    Some(run) => run.spec.apply_on_tape(tape, x, z_cond, &bound.heads, n, &run.rng)?,
                    None => (x, bound.heads.project(tape, z_cond)?),
                };
                x = tape.add(x_out, c)?;
            }
        }
        let final_logits = bound.heads.logits(tape, x)?;
        let final_probs = tape.softmax_rows(final_logits)?;
        Ok(ForwardPass {
            final_probs,
            final_logits,
            intermediate,
            intermediate_logits,
        })
    }

    /// Mixed CTC objective of one utterance on the tape.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        x0: Var,
        y: &TokenSequence,
        aug: Option<&mut AugmentRun<'_>>,
    ) -> Result<LossTerms> {
        let pass = self.forward_on_tape(tape, bound, x0, aug)?;
        let (wf, wi) = mix_weights(self.config.mix_weight, pass.intermediate.len());
        let (lf, out) = ctc::ctc_loss_logits_on_tape(tape, pass.final_logits, y)?;
        let mut feasible = out.feasible && out.loss.is_finite();
        let mut total = tape.scale(lf, wf);
        let mut total_value = wf * out.loss;
        let mut intermediate_losses = Vec::new();
        for logits in pass.intermediate_logits {
            let (li, o) = ctc::ctc_loss_logits_on_tape(tape, logits, y)?;
            feasible &= o.feasible && o.loss.is_finite();
            let scaled = tape.scale(li, wi);
            total = tape.add(total, scaled)?;
            total_value += wi * o.loss;
            intermediate_losses.push(o.loss);
        }
        Ok(LossTerms {
            total,
            total_value,
            final_loss: out.loss,
            intermediate_losses,
            feasible,
        })
    }

    /// Applies block `layer` (1-based) to `x`.
    pub fn encode_layer(&self, layer: usize, x: &FeatureSequence) -> Result<FeatureSequence> {
        if layer == 0 || layer > self.config.num_layers {
            return Err(EncoderError::Layer(layer));
        }
        self.check_input(x.tensor(), self.config.model_dim)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.tensor().clone());
        let out = self.layer_on_tape(&mut tape, &bound.layers[layer - 1], xv)?;
        FeatureSequence::new(tape.value(out).clone())
    }

    /// `X'^(n)`: conditioned features for `n ∈ 𝒩`, `x` unchanged otherwise.
    pub fn condition(&self, layer: usize, x: &FeatureSequence, z: &PosteriorGrid) -> Result<FeatureSequence> {
        if !self.config.is_intermediate(layer) {
            return Ok(x.clone());
        }
        condition(x, z, &self.heads)
    }

    /// Inference: no augmentation, no randomness.
    pub fn infer(&self, x0: &Tensor) -> Result<(PosteriorGrid, Vec<PosteriorGrid>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(x0.clone());
        let pass = self.forward_on_tape(&mut tape, &bound, x, None)?;
        grids(&tape, &pass)
    }

    /// Training-mode forward pass with the given augmentation, returning grids.
    pub fn forward_augmented(
        &self,
        x0: &Tensor,
        spec: &AugmentationSpec,
        rng: &SeededRng,
    ) -> Result<(PosteriorGrid, Vec<PosteriorGrid>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(x0.clone());
        let mut run = AugmentRun {
            spec,
            rng: rng.clone(),
        };
        let pass = self.forward_on_tape(&mut tape, &bound, x, Some(&mut run))?;
        grids(&tape, &pass)
    }

    /// Final-layer greedy hypothesis.
    pub fn decode(&self, x0: &Tensor) -> Result<TokenSequence> {
        let (z, _) = self.infer(x0)?;
        Ok(ctc::greedy_decode(&z))
    }
}

fn grids(tape: &Tape, pass: &ForwardPass) -> Result<(PosteriorGrid, Vec<PosteriorGrid>)> {
    let fin = PosteriorGrid::new(tape.value(pass.final_probs).clone())?;
    let inter = pass
        .intermediate
        .iter()
        .map(|v| PosteriorGrid::new(tape.value(*v).clone()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((fin, inter))
}

fn linear_on_tape(tape: &mut Tape, x: Var, l: BoundLinear) -> Result<Var> {
    let h = tape.matmul(x, l.weight)?;
    Ok(tape.add_row(h, l.bias)?)
}

/// [`SharedHeads`] registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundHeads {
    pub out_weight: Var,
    pub out_bias: Var,
    pub cond_weight: Var,
    pub cond_bias: Var,
}

impl BoundHeads {
    /// Softmax of the shared output projection.
    pub fn predict(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let logits = self.logits(tape, x)?;
        Ok(tape.softmax_rows(logits)?)
    }

    /// Pre-softmax output of the shared head.
    pub fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.out_weight)?;
        Ok(tape.add_row(h, self.out_bias)?)
    }

    /// Shared conditioning projection of a `T×|V'|` grid into model space.
    pub fn project(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let h = tape.matmul(z, self.cond_weight)?;
        Ok(tape.add_row(h, self.cond_bias)?)
    }
}

/// Posterior grid of `x` under the shared output head.
pub fn intermediate_predict(x: &FeatureSequence, heads: &SharedHeads) -> Result<PosteriorGrid> {
    let mut tape = Tape::new();
    let b = heads.bind(&mut tape, false);
    let xv = tape.constant(x.tensor().clone());
    let z = b.predict(&mut tape, xv)?;
    Ok(PosteriorGrid::new(tape.value(z).clone())?)
}

/// `x + cond_projection(z)`.
pub fn condition(x: &FeatureSequence, z: &PosteriorGrid, heads: &SharedHeads) -> Result<FeatureSequence> {
    let mut tape = Tape::new();
    let b = heads.bind(&mut tape, false);
    let xv = tape.constant(x.tensor().clone());
    let zv = tape.constant(z.tensor().clone());
    let c = b.project(&mut tape, zv)?;
    let out = tape.add(xv, c)?;
    FeatureSequence::new(tape.value(out).clone())
}
