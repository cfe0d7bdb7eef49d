//! Training loop, evaluation and the variant comparison matrix.
//!
//! Each batch runs one tape per utterance. Per-utterance gradients are
//! computed in parallel and summed in utterance order, so results do not
//! depend on the thread count.

use crate::augment::{AugOperator, AugPosition, AugmentationSpec, MaskWidth};
use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, TrainConfig, TrainingConfig};
use crate::data::{self, DataError, Utterance};
use crate::diffgraph::Tape;
use crate::encoder::{AugmentRun, EncoderError, Model};
use crate::metrics::{self, ErrorBreakdown, MetricsError, UtteranceRecord};
use crate::rng::SeededRng;
use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("learning-rate schedule is undefined at step 0 (steps start at 1)")]
    StepZero,
    #[error("training diverged at step {step}: non-finite loss (last finite loss {last_finite:?})")]
    Diverged { step: usize, last_finite: Option<f64> },
    #[error("{0}")]
    Setup(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Warmup then inverse square root decay:
/// `factor · D^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_schedule(step: usize, model_dim: usize, warmup: usize, factor: f64) -> Result<f64> {
    if step == 0 {
        return Err(TrainError::StepZero);
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(factor * (model_dim as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(model: &Model, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (_, p)) in model.params_mut().into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (j, w) in p.values_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so the global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Loss values and parameter gradients of one utterance.
#[derive(Debug, Clone)]
pub struct UtteranceGrad {
    pub total: f64,
    pub final_loss: f64,
    pub intermediate_losses: Vec<f64>,
    pub grads: Vec<Vec<f64>>,
}

/// Mixed loss and gradients for one utterance. `None` when the target is
/// infeasible for the frame count.
pub fn utterance_grad(
    model: &Model,
    utt: &Utterance,
    aug: &AugmentationSpec,
    rng: &SeededRng,
) -> Result<Option<UtteranceGrad>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let x0 = tape.constant(utt.features.clone());
    let mut run = AugmentRun {
        spec: aug,
        rng: rng.clone(),
    };
    let run = if aug.is_none() { None } else { Some(&mut run) };
    let terms = model.loss_on_tape(&mut tape, &bound, x0, &utt.label, run)?;
    if !terms.feasible {
        return Ok(None);
    }
    tape.backward(terms.total).map_err(EncoderError::from)?;
    let grads = bound
        .params()
        .iter()
        .map(|v| {
            tape.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(*v).len()])
        })
        .collect();
    Ok(Some(UtteranceGrad {
        total: terms.total_value,
        final_loss: terms.final_loss,
        intermediate_losses: terms.intermediate_losses,
        grads,
    }))
}

/// Mean mixed loss over feasible utterances, without augmentation.
pub fn validation_loss(model: &Model, corpus: &[Utterance]) -> Result<f64> {
    let losses: Vec<Option<f64>> = corpus
        .par_iter()
        .map(|u| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let x0 = tape.constant(u.features.clone());
            let t = model.loss_on_tape(&mut tape, &bound, x0, &u.label, None)?;
            Ok(t.feasible.then_some(t.total_value))
        })
        .collect::<Result<_>>()?;
    let kept: Vec<f64> = losses.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(TrainError::Setup("no feasible utterance in the validation set".into()));
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub final_loss: f64,
    pub intermediate_losses: Vec<f64>,
    pub grad_norm: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Average of the top-k checkpoints by validation loss.
    pub model: Model,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Epochs whose checkpoints were averaged, ascending.
    pub averaged_epochs: Vec<usize>,
}

impl TrainOutcome {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min)
    }
}

/// Non-finite values surfacing inside the forward pass.
fn is_non_finite(e: &TrainError) -> bool {
    use crate::augment::AugmentError;
    use crate::diffgraph::GraphError;
    matches!(
        e,
        TrainError::Encoder(EncoderError::Graph(GraphError::NonFinite { .. }))
            | TrainError::Encoder(EncoderError::Augment(AugmentError::Graph(GraphError::NonFinite { .. })))
            | TrainError::Encoder(EncoderError::Augment(AugmentError::Numeric { .. }))
    )
}

/// Trains from `cfg` on the given splits. Every step is also written as one
/// JSON object per line to `log` when given.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[Utterance],
    dev_set: &[Utterance],
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(TrainError::Setup("training and validation sets must be non-empty".into()));
    }
    let tc: &TrainingConfig = &cfg.training;
    let root = SeededRng::new(tc.seed);
    let mut model = Model::new(cfg.encoder.clone(), tc.seed)?;
    let mut opt = Adam::new(&model, tc.beta1, tc.beta2, tc.eps);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut kept: Vec<(f64, usize, Model)> = Vec::new();
    let mut step = 0usize;
    let mut last_finite: Option<f64> = None;

    for epoch in 1..=tc.epochs {
        let mut shuffle = root.derive(&["shuffle", &epoch.to_string()]);
        order.shuffle(&mut shuffle);
        let (mut epoch_sum, mut epoch_n) = (0.0, 0usize);
        for batch in order.chunks(tc.batch_size) {
            step += 1;
            let lr = lr_schedule(step, cfg.encoder.model_dim, tc.warmup_steps, tc.lr_factor)?;
            let step_label = step.to_string();
            let results: Vec<Option<UtteranceGrad>> = batch
                .par_iter()
                .map(|&i| {
                    let rng = root.derive(&["augment", &step_label, &train_set[i].id]);
                    utterance_grad(&model, &train_set[i], &cfg.augmentation, &rng)
                })
                .collect::<Result<_>>()
                .map_err(|e| {
                    if is_non_finite(&e) {
                        TrainError::Diverged { step, last_finite }
                    } else {
                        e
                    }
                })?;
            let skipped = results.iter().filter(|r| r.is_none()).count();
            let done: Vec<UtteranceGrad> = results.into_iter().flatten().collect();
            if done.is_empty() {
                warn!("step {step}: every utterance in the batch is infeasible, skipping");
                continue;
            }
            let n = done.len() as f64;
            let mut grads: Vec<Vec<f64>> = done[0].grads.iter().map(|g| vec![0.0; g.len()]).collect();
            let mut loss = 0.0;
            let mut final_loss = 0.0;
            let mut inter = vec![0.0; done[0].intermediate_losses.len()];
            for u in &done {
                loss += u.total;
                final_loss += u.final_loss;
                inter.iter_mut().zip(&u.intermediate_losses).for_each(|(a, b)| *a += b);
                for (acc, g) in grads.iter_mut().zip(&u.grads) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            loss /= n;
            final_loss /= n;
            inter.iter_mut().for_each(|v| *v /= n);
            grads.iter_mut().flatten().for_each(|g| *g /= n);
            let grad_norm = global_norm(&grads);
            if !loss.is_finite() || !grad_norm.is_finite() {
                return Err(TrainError::Diverged { step, last_finite });
            }
            last_finite = Some(loss);
            clip_global_norm(&mut grads, tc.grad_clip);
            opt.step(&mut model, &grads, lr);
            let rec = StepRecord {
                step,
                epoch,
                lr,
                train_loss: loss,
                final_loss,
                intermediate_losses: inter,
                grad_norm,
                skipped,
            };
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &rec).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
            debug!("step {step} lr {lr:.3e} loss {loss:.4}");
            epoch_sum += loss;
            epoch_n += 1;
            steps.push(rec);
        }
        let val_loss = validation_loss(&model, dev_set)?;
        let train_loss = if epoch_n > 0 { epoch_sum / epoch_n as f64 } else { f64::NAN };
        info!("epoch {epoch}: train {train_loss:.4} val {val_loss:.4}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        kept.push((val_loss, epoch, model.clone()));
        kept.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        kept.truncate(tc.checkpoint_avg_k);
    }

    kept.sort_by_key(|k| k.1);
    let averaged_epochs = kept.iter().map(|k| k.1).collect();
    let models: Vec<Model> = kept.into_iter().map(|k| k.2).collect();
    Ok(TrainOutcome {
        model: checkpoint::average(&models)?,
        epochs,
        steps,
        averaged_epochs,
    })
}

/// Corpus WER breakdown plus per-utterance records from greedy decoding of
/// the final layer.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub corpus: ErrorBreakdown,
    pub records: Vec<UtteranceRecord>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        metrics::format_report(&self.records, &self.corpus)
    }
}

pub fn evaluate(model: &Model, corpus: &[Utterance]) -> Result<EvalReport> {
    let hyps = corpus
        .par_iter()
        .map(|u| model.decode(&u.features))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let records: Vec<UtteranceRecord> = corpus
        .iter()
        .zip(hyps)
        .map(|(u, h)| UtteranceRecord {
            utt_id: u.id.clone(),
            breakdown: metrics::align(&u.label, &h),
            reference: u.label.clone(),
            hypothesis: h,
        })
        .collect();
    let corpus = metrics::corpus_report(records.iter().map(|r| (&r.reference, &r.hypothesis)))?;
    Ok(EvalReport { corpus, records })
}

/// The three splits of an experiment.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Loads the splits named in `cfg.data`, generating any that have no path.
pub fn load_splits(cfg: &TrainConfig) -> Result<Splits> {
    let d = &cfg.data;
    let get = |path: &Option<std::path::PathBuf>, prefix: &str, count: usize| -> Result<Vec<Utterance>> {
        match path {
            Some(p) => Ok(data::load_corpus(p)?),
            None => Ok(data::generate_split(&d.synth, prefix, count)?.0),
        }
    };
    Ok(Splits {
        train: get(&d.train_path, "train", d.synth.utterances)?,
        dev: get(&d.dev_path, "dev", d.dev_utterances)?,
        test: get(&d.test_path, "test", d.test_utterances)?,
    })
}

/// One row of the comparison matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    /// `false` trains plain CTC: no intermediate layers, no conditioning.
    pub self_conditioning: bool,
    pub augmentation: AugmentationSpec,
    /// Overrides `encoder.detach_conditioning` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detach_conditioning: Option<bool>,
}

impl Variant {
    pub fn new(label: &str, self_conditioning: bool, augmentation: AugmentationSpec) -> Self {
        Self {
            label: label.to_string(),
            self_conditioning,
            augmentation,
            detach_conditioning: None,
        }
    }

    /// `base` specialised to this variant.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        if !self.self_conditioning {
            cfg.encoder.intermediate_layers.clear();
        }
        cfg.augmentation = self.augmentation.clone();
        if let Some(d) = self.detach_conditioning {
            cfg.encoder.detach_conditioning = d;
        }
        cfg
    }
}

/// Plain CTC, self-conditioning, and self-conditioning with each single
/// operator at the base augmentation settings.
pub fn standard_variants(base: &AugmentationSpec) -> Vec<Variant> {
    let with = |op| AugmentationSpec {
        operator: crate::augment::Operators::single(op),
        ..base.clone()
    };
    vec![
        Variant::new("ctc", false, AugmentationSpec::none()),
        Variant::new("selfcond", true, AugmentationSpec::none()),
        Variant::new("time_mask", true, with(AugOperator::TimeMask)),
        Variant::new("feature_mask", true, with(AugOperator::FeatureMask)),
        Variant::new("token_delete", true, with(AugOperator::TokenDelete)),
        Variant::new("token_insert", true, with(AugOperator::TokenInsert)),
        Variant::new("token_substitute", true, with(AugOperator::TokenSubstitute)),
    ]
}

/// Time masking applied to the encoder features versus the conditioning
/// features, next to unaugmented self-conditioning.
pub fn position_variants(w_tau: MaskWidth, p_time: f64) -> Vec<Variant> {
    let at = |position| AugmentationSpec {
        operator: crate::augment::Operators::single(AugOperator::TimeMask),
        w_tau,
        p_time,
        position,
        ..AugmentationSpec::none()
    };
    vec![
        Variant::new("selfcond", true, AugmentationSpec::none()),
        Variant::new("time_mask@encoder", true, at(AugPosition::EncoderFeature)),
        Variant::new("time_mask@conditioning", true, at(AugPosition::ConditioningFeature)),
    ]
}

/// Self-conditioning with and without stopping gradients at the
/// conditioning input.
pub fn detach_variants() -> Vec<Variant> {
    vec![
        Variant::new("selfcond", true, AugmentationSpec::none()),
        Variant {
            detach_conditioning: Some(true),
            ..Variant::new("selfcond_detached", true, AugmentationSpec::none())
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub breakdown: ErrorBreakdown,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub label: String,
    pub runs: Vec<SeedResult>,
}

impl MatrixRow {
    fn stat(&self, f: impl Fn(&ErrorBreakdown) -> f64) -> (f64, f64, f64) {
        let v: Vec<f64> = self.runs.iter().map(|r| f(&r.breakdown)).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (mean, lo, hi)
    }

    /// Mean, min and max WER over seeds.
    pub fn wer(&self) -> (f64, f64, f64) {
        self.stat(|b| b.wer)
    }

    pub fn sub_rate(&self) -> f64 {
        self.stat(|b| b.sub_rate).0
    }

    pub fn del_rate(&self) -> f64 {
        self.stat(|b| b.del_rate).0
    }

    pub fn ins_rate(&self) -> f64 {
        self.stat(|b| b.ins_rate).0
    }
}

/// Trains every variant for every seed (the seed replaces
/// `training.seed`) and scores it on the test split. Runs in a thread pool of
/// `jobs` threads; the output does not depend on `jobs`.
pub fn run_matrix(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    splits: &Splits,
    jobs: usize,
) -> Result<Vec<MatrixRow>> {
    if variants.len() < 2 {
        return Err(TrainError::Setup("a comparison needs at least two variants".into()));
    }
    if seeds.is_empty() {
        return Err(TrainError::Setup("at least one seed is required".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| TrainError::Setup(e.to_string()))?;
    let cells: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |s| (v, *s)))
        .collect();
    let results: Vec<SeedResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(v, seed)| {
                let mut cfg = variants[v].apply(base);
                cfg.training.seed = seed;
                info!("training {} seed {seed}", variants[v].label);
                let out = train(&cfg, &splits.train, &splits.dev, None)?;
                let report = evaluate(&out.model, &splits.test)?;
                info!("{} seed {seed}: wer {:.4}", variants[v].label, report.corpus.wer);
                Ok(SeedResult {
                    seed,
                    breakdown: report.corpus,
                    best_val_loss: out.best_val_loss(),
                })
            })
            .collect::<Result<_>>()
    })?;
    let mut it = results.into_iter();
    Ok(variants
        .iter()
        .map(|v| MatrixRow {
            label: v.label.clone(),
            runs: it.by_ref().take(seeds.len()).collect(),
        })
        .collect())
}

/// Plain-text table: WER as mean with min/max over seeds, then the mean
/// substitution, deletion and insertion rates, all in percent.
pub fn format_matrix(rows: &[MatrixRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(7);
    let mut out = String::new();
    writeln!(
        out,
        "{:<width$}  {:>7}  {:>15}  {:>6}  {:>6}  {:>6}",
        "variant", "WER%", "range", "sub%", "del%", "ins%"
    )
    .unwrap();
    for r in rows {
        let (mean, lo, hi) = r.wer();
        writeln!(
            out,
            "{:<width$}  {:>7.2}  {:>15}  {:>6.2}  {:>6.2}  {:>6.2}",
            r.label,
            100.0 * mean,
            format!("[{:.2}, {:.2}]", 100.0 * lo, 100.0 * hi),
            100.0 * r.sub_rate(),
            100.0 * r.del_rate(),
            100.0 * r.ins_rate()
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peak_and_step_zero() {
        assert!(matches!(lr_schedule(0, 256, 25000, 5.0), Err(TrainError::StepZero)));
        let peak = lr_schedule(25000, 256, 25000, 5.0).unwrap();
        let expected = 5.0 / 16.0 / 25000f64.sqrt();
        assert!((peak - expected).abs() < 1e-15);
        let before = lr_schedule(24999, 256, 25000, 5.0).unwrap();
        let after = lr_schedule(25001, 256, 25000, 5.0).unwrap();
        assert!(before < peak && after < peak);
    }

    #[test]
    fn schedule_first_step() {
        let lr = lr_schedule(1, 256, 25000, 5.0).unwrap();
        assert!((lr - 7.905694150420949e-8).abs() < 1e-18);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        let n = clip_global_norm(&mut g, 5.0);
        assert_eq!(n, 5.0);
        assert_eq!(g, vec![vec![3.0], vec![4.0]]);
        let mut g = vec![vec![6.0], vec![8.0]];
        clip_global_norm(&mut g, 5.0);
        assert!((global_norm(&g) - 5.0).abs() < 1e-12);
        assert!((g[0][0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = crate::encoder::EncoderConfig {
            input_dim: 2,
            num_layers: 2,
            model_dim: 2,
            vocab_size_ext: 3,
            intermediate_layers: vec![1],
            hidden_dim: 2,
            ..Default::default()
        };
        let mut m = Model::zeros(cfg).unwrap();
        let grads: Vec<Vec<f64>> = m.params().iter().map(|(_, t)| vec![2.0; t.len()]).collect();
        let mut opt = Adam::new(&m, 0.9, 0.98, 1e-9);
        opt.step(&mut m, &grads, 0.01);
        for (_, t) in m.params() {
            for v in t.values() {
                assert!((v + 0.01).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn variant_sets() {
        let base = AugmentationSpec::default();
        let v = standard_variants(&base);
        assert_eq!(v.len(), 7);
        assert!(!v[0].self_conditioning);
        let cfg = v[0].apply(&TrainConfig::default());
        assert!(cfg.encoder.intermediate_layers.is_empty());
        let p = position_variants(MaskWidth::Fraction(0.1), 0.5);
        assert_eq!(p[1].augmentation.position, AugPosition::EncoderFeature);
        assert_eq!(p[2].augmentation.position, AugPosition::ConditioningFeature);
    }
}
