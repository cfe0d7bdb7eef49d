use interaug::augment::{AugOperator, AugmentationSpec};
use interaug::checkpoint;
use interaug::config::TrainConfig;
use interaug::data::{DistortionProfile, Utterance};
use interaug::diffgraph::{Tape, Tensor};
use interaug::encoder::{EncoderConfig, Model};
use interaug::rng::SeededRng;
use interaug::trainer::{self, Adam, StepRecord, TrainError};

fn tiny() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.encoder = EncoderConfig {
        input_dim: 6,
        num_layers: 3,
        model_dim: 8,
        vocab_size_ext: 4,
        intermediate_layers: vec![1, 2],
        hidden_dim: 8,
        ..EncoderConfig::default()
    };
    c.data.synth.vocab_size = 3;
    c.data.synth.feature_dim = 6;
    c.data.synth.utterances = 40;
    c.data.synth.label_length = (2, 5);
    c.data.dev_utterances = 10;
    c.data.test_utterances = 10;
    c.training.epochs = 3;
    c.training.batch_size = 8;
    c.training.warmup_steps = 10;
    c.augmentation = AugmentationSpec::with_operator(AugOperator::TokenSubstitute);
    c
}

fn train_and_serialize(cfg: &TrainConfig) -> (Vec<u8>, String, Vec<u8>) {
    let s = trainer::load_splits(cfg).unwrap();
    let mut log = Vec::new();
    let out = trainer::train(cfg, &s.train, &s.dev, Some(&mut log)).unwrap();
    let mut ckpt = Vec::new();
    checkpoint::write_checkpoint(&mut ckpt, &out.model).unwrap();
    let report = trainer::evaluate(&out.model, &s.test).unwrap().to_csv();
    (ckpt, report, log)
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let cfg = tiny();
    let a = train_and_serialize(&cfg);
    let b = train_and_serialize(&cfg);
    assert_eq!(a, b);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let c = pool.install(|| train_and_serialize(&cfg));
    assert_eq!(a, c);
    let mut other = cfg.clone();
    other.training.seed = 2;
    assert_ne!(a.0, train_and_serialize(&other).0);
}

#[test]
fn step_log_is_json_lines() {
    let cfg = tiny();
    let (_, _, log) = train_and_serialize(&cfg);
    let text = String::from_utf8(log).unwrap();
    let recs: Vec<StepRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 3 * 5);
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r.step, i + 1);
        assert_eq!(r.intermediate_losses.len(), 2);
        assert!(r.lr > 0.0 && r.train_loss.is_finite());
    }
}

#[test]
fn keeps_the_best_k_epochs() {
    let mut cfg = tiny();
    cfg.training.epochs = 5;
    cfg.training.checkpoint_avg_k = 2;
    let s = trainer::load_splits(&cfg).unwrap();
    let out = trainer::train(&cfg, &s.train, &s.dev, None).unwrap();
    let mut by_loss: Vec<_> = out.epochs.iter().map(|e| (e.val_loss, e.epoch)).collect();
    by_loss.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best: Vec<usize> = by_loss[..2].iter().map(|x| x.1).collect();
    best.sort_unstable();
    assert_eq!(out.averaged_epochs, best);
}

fn flat(model: &Model) -> Vec<f64> {
    model.params().iter().flat_map(|(_, t)| t.values().to_vec()).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn optimizer_step_follows_finite_difference_direction() {
    let cfg = tiny();
    let model = Model::new(cfg.encoder.clone(), 7).unwrap();
    let s = trainer::load_splits(&cfg).unwrap();
    let utt = &s.train[0];
    let none = AugmentationSpec::none();
    let rng = SeededRng::new(1);
    let analytic = trainer::utterance_grad(&model, utt, &none, &rng).unwrap().unwrap();

    let loss = |m: &Model| {
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let x = tape.constant(utt.features.clone());
        m.loss_on_tape(&mut tape, &b, x, &utt.label, None).unwrap().total_value
    };
    let h = 1e-5;
    let mut fd = Vec::new();
    for (pi, g) in analytic.grads.iter().enumerate() {
        let mut row = Vec::with_capacity(g.len());
        for j in 0..g.len() {
            let mut plus = model.clone();
            plus.params_mut()[pi].1.values_mut()[j] += h;
            let mut minus = model.clone();
            minus.params_mut()[pi].1.values_mut()[j] -= h;
            row.push((loss(&plus) - loss(&minus)) / (2.0 * h));
        }
        fd.push(row);
    }
    // Plain gradient descent direction, then one Adam step.
    let ga: Vec<f64> = analytic.grads.concat();
    let gf: Vec<f64> = fd.concat();
    assert!(cosine(&ga, &gf) > 0.99);

    let before = flat(&model);
    let step = |grads: &[Vec<f64>]| {
        let mut m = model.clone();
        Adam::new(&m, 0.9, 0.98, 1e-9).step(&mut m, grads, 1e-3);
        flat(&m).iter().zip(&before).map(|(a, b)| a - b).collect::<Vec<f64>>()
    };
    let c = cosine(&step(&analytic.grads), &step(&fd));
    assert!(c > 0.99, "cosine {c}");
}

#[test]
fn selfcond_validation_loss_decreases_on_default_corpus() {
    let mut cfg = TrainConfig::default();
    cfg.training.epochs = 3;
    let s = trainer::load_splits(&cfg).unwrap();
    let out = trainer::train(&cfg, &s.train, &s.dev, None).unwrap();
    let v: Vec<f64> = out.epochs.iter().map(|e| e.val_loss).collect();
    assert!(v.iter().all(|x| x.is_finite()));
    assert!(v[1] < v[0] && v[2] < v[1], "{v:?}");
}

#[test]
fn separable_corpus_is_learned() {
    let mut cfg = TrainConfig::default();
    cfg.data.synth.noise_sigma = 0.0;
    cfg.data.synth.distortion = DistortionProfile {
        frame_drop_rate: 0.0,
        spurious_frame_rate: 0.0,
        confusion_rate: 0.0,
    };
    cfg.data.synth.utterances = 600;
    cfg.data.dev_utterances = 50;
    cfg.data.test_utterances = 100;
    cfg.training.epochs = 8;
    cfg.training.warmup_steps = 100;
    let s = trainer::load_splits(&cfg).unwrap();
    let out = trainer::train(&cfg, &s.train, &s.dev, None).unwrap();
    let wer = trainer::evaluate(&out.model, &s.test).unwrap().corpus.wer;
    assert!(wer <= 0.02, "wer {wer}");
}

#[test]
fn divergence_reports_step() {
    let cfg = tiny();
    let s = trainer::load_splits(&cfg).unwrap();
    let mut bad: Vec<Utterance> = s.train.clone();
    for u in &mut bad {
        u.features = Tensor::matrix(u.frames(), 6, vec![f64::NAN; u.frames() * 6]).unwrap();
    }
    match trainer::train(&cfg, &bad, &s.dev, None) {
        Err(TrainError::Diverged { step: 1, last_finite: None }) => {}
        other => panic!("unexpected {:?}", other.map(|o| o.epochs)),
    }
}

#[test]
fn checkpoint_file_roundtrip_after_training() {
    let cfg = tiny();
    let s = trainer::load_splits(&cfg).unwrap();
    let out = trainer::train(&cfg, &s.train, &s.dev, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    checkpoint::save(&p, &out.model).unwrap();
    let back = checkpoint::load(&p).unwrap();
    let a = trainer::evaluate(&out.model, &s.test).unwrap().to_csv();
    let b = trainer::evaluate(&back, &s.test).unwrap().to_csv();
    assert_eq!(a, b);
}
