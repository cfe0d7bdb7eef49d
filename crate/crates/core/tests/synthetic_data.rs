use interaug::ctc::{self, AlignmentPath, TokenSequence};
use interaug::data::{self, DistortionProfile, SynthSpec, Utterance};
use proptest::prelude::*;

fn spec(utterances: usize) -> SynthSpec {
    SynthSpec {
        utterances,
        ..SynthSpec::default()
    }
}

fn clean(seed: u64) -> SynthSpec {
    SynthSpec {
        noise_sigma: 0.0,
        distortion: DistortionProfile {
            frame_drop_rate: 0.0,
            spurious_frame_rate: 0.0,
            confusion_rate: 0.0,
        },
        seed,
        ..spec(100)
    }
}

/// Nearest class mean per frame, silence (the origin) as blank.
fn oracle_decode(s: &SynthSpec, u: &Utterance) -> TokenSequence {
    let means = s.class_means();
    let labels = (0..u.frames())
        .map(|t| {
            let x = u.features.row(t);
            let dist = |m: Option<&Vec<f64>>| -> f64 {
                x.iter()
                    .enumerate()
                    .map(|(d, v)| (v - m.map_or(0.0, |m| m[d])).powi(2))
                    .sum()
            };
            let mut best = (dist(None), 0);
            for (k, m) in means.iter().enumerate() {
                let d = dist(Some(m));
                if d < best.0 {
                    best = (d, k + 1);
                }
            }
            best.1
        })
        .collect();
    ctc::collapse(&AlignmentPath::new(labels), s.vocab_size + 1).unwrap()
}

#[test]
fn noiseless_corpus_is_separable() {
    for seed in [1, 2, 3] {
        let s = clean(seed);
        for u in data::generate(&s).unwrap() {
            assert_eq!(oracle_decode(&s, &u), u.label, "{}", u.id);
        }
    }
}

fn mean_frames(s: &SynthSpec) -> f64 {
    let c = data::generate(s).unwrap();
    c.iter().map(Utterance::frames).sum::<usize>() as f64 / c.len() as f64
}

#[test]
fn frame_drop_shortens_utterances() {
    let mut prev = f64::INFINITY;
    for rate in [0.0, 0.15, 0.3, 0.45] {
        let mut s = spec(400);
        s.distortion.frame_drop_rate = rate;
        let m = mean_frames(&s);
        assert!(m < prev, "drop rate {rate}: mean frames {m} not below {prev}");
        prev = m;
    }
}

#[test]
fn spurious_frames_lengthen_utterances() {
    let mut prev = 0.0;
    for rate in [0.0, 0.2, 0.4] {
        let mut s = spec(400);
        s.distortion.spurious_frame_rate = rate;
        let m = mean_frames(&s);
        assert!(m > prev, "spurious rate {rate}: mean frames {m} not above {prev}");
        prev = m;
    }
}

#[test]
fn seed_changes_corpus_but_not_size() {
    let a = data::generate(&spec(50)).unwrap();
    let b = data::generate(&SynthSpec { seed: 2, ..spec(50) }).unwrap();
    assert_eq!(a.len(), b.len());
    assert_ne!(a, b);
    assert_eq!(a, data::generate(&spec(50)).unwrap());
}

#[test]
fn corpus_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let c = data::generate(&spec(30)).unwrap();
    let path = dir.path().join("c.bin");
    data::save_corpus(&path, &c).unwrap();
    assert_eq!(data::load_corpus(&path).unwrap(), c);
    let text = data::format_labels(c.iter().map(|u| (u.id.as_str(), &u.label)));
    let back = data::parse_labels(&text).unwrap();
    assert_eq!(back.len(), c.len());
    for ((id, l), u) in back.iter().zip(&c) {
        assert_eq!((id, l), (&u.id, &u.label));
    }
}

#[test]
fn truncated_corpus_is_rejected() {
    let c = data::generate(&spec(3)).unwrap();
    let mut buf = Vec::new();
    data::write_corpus(&mut buf, &c).unwrap();
    buf.truncate(buf.len() - 5);
    assert!(data::read_corpus(&buf[..]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_utterances_are_feasible_and_in_range(
        seed in any::<u64>(),
        drop in 0.0f64..0.6,
        spurious in 0.0f64..0.3,
        confusion in 0.0f64..0.5,
    ) {
        let s = SynthSpec {
            seed,
            distortion: DistortionProfile {
                frame_drop_rate: drop,
                spurious_frame_rate: spurious,
                confusion_rate: confusion,
            },
            ..spec(20)
        };
        for u in data::generate(&s).unwrap() {
            prop_assert!(u.is_feasible());
            prop_assert!(u.frames() >= u.label.min_frames());
            prop_assert!((s.label_length.0..=s.label_length.1).contains(&u.label.len()));
            prop_assert!(u.label.tokens().iter().all(|&l| (1..=s.vocab_size).contains(&l)));
            prop_assert_eq!(u.features.cols(), s.feature_dim);
            prop_assert!(u.features.is_finite());
        }
    }
}
