use interaug::augment::{self, MaskWidth};
use interaug::ctc::{self, PosteriorGrid, BLANK};
use interaug::diffgraph::Tensor;
use interaug::encoder::FeatureSequence;
use interaug::rng::SeededRng;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const DRAWS: usize = 10_000;

fn ones(rows: usize, cols: usize) -> FeatureSequence {
    FeatureSequence::new(Tensor::matrix(rows, cols, vec![1.0; rows * cols]).unwrap()).unwrap()
}

fn repeated_rows(row: &[f64], n: usize) -> PosteriorGrid {
    PosteriorGrid::from_rows(&vec![row.to_vec(); n]).unwrap()
}

/// Pearson statistic of `counts` against a uniform expectation, and the
/// 0.99 quantile of the matching chi-square distribution.
fn chi_square_uniform(counts: &[usize]) -> (f64, f64) {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let crit = ChiSquared::new((counts.len() - 1) as f64).unwrap().inverse_cdf(0.99);
    (stat, crit)
}

/// Indices whose entries are all zero, asserted to form one contiguous run.
fn zero_block(flags: &[bool]) -> usize {
    let idx: Vec<usize> = flags.iter().enumerate().filter(|(_, z)| **z).map(|(i, _)| i).collect();
    if let (Some(first), Some(last)) = (idx.first(), idx.last()) {
        assert_eq!(last - first + 1, idx.len(), "masked indices {idx:?} are not contiguous");
    }
    idx.len()
}

#[test]
fn all_operators_are_identity_at_rate_zero() {
    let mut rng = SeededRng::new(1);
    let c = ones(20, 6);
    assert_eq!(augment::time_mask(&c, MaskWidth::Frames(8), 0.0, &mut rng).unwrap(), c);
    assert_eq!(augment::feature_mask(&c, 4, 0.0, &mut rng).unwrap(), c);
    let z = repeated_rows(&[0.1, 0.6, 0.3], 50);
    let clean = ctc::argmax_path(&z);
    assert_eq!(augment::token_delete(&z, 0.0, &mut rng), clean);
    assert_eq!(augment::token_insert(&z, 0.0, &mut rng), clean);
    let one_hot = PosteriorGrid::new(clean.one_hot(3).unwrap()).unwrap();
    assert_eq!(augment::token_substitute(&one_hot, &mut rng).unwrap(), clean);
}

#[test]
fn deletion_frequency_matches_rate() {
    let z = repeated_rows(&[0.1, 0.7, 0.2], DRAWS);
    let mut rng = SeededRng::new(2);
    let path = augment::token_delete(&z, 0.1, &mut rng);
    let rate = path.blank_count() as f64 / DRAWS as f64;
    assert!((rate - 0.1).abs() <= 0.01, "deletion rate {rate}");
}

#[test]
fn substitution_frequencies_follow_rows() {
    let mut rng = SeededRng::new(3);
    for row in [vec![0.25; 4], vec![0.1, 0.2, 0.3, 0.4], vec![0.7, 0.05, 0.05, 0.2]] {
        let z = repeated_rows(&row, DRAWS);
        let path = augment::token_substitute(&z, &mut rng).unwrap();
        let mut freq = [0.0; 4];
        for &l in path.labels() {
            freq[l] += 1.0 / DRAWS as f64;
        }
        let tv = 0.5 * freq.iter().zip(&row).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(tv < 0.02, "row {row:?}: total variation {tv}");
        if row[0] == 0.25 {
            assert!(freq.iter().all(|f| (f - 0.25).abs() <= 0.02), "{freq:?}");
        }
    }
}

#[test]
fn time_mask_width_is_uniform_and_contiguous() {
    let (frames, w) = (40, 9);
    let c = ones(frames, 3);
    let mut rng = SeededRng::new(4);
    let mut counts = vec![0usize; w + 1];
    for _ in 0..DRAWS {
        let out = augment::time_mask(&c, MaskWidth::Frames(w), 1.0, &mut rng).unwrap();
        let zero_rows: Vec<bool> = (0..frames).map(|t| out.row(t).iter().all(|v| *v == 0.0)).collect();
        let nonzero_rows_untouched = (0..frames).all(|t| zero_rows[t] || out.row(t).iter().all(|v| *v == 1.0));
        assert!(nonzero_rows_untouched);
        counts[zero_block(&zero_rows)] += 1;
    }
    let (stat, crit) = chi_square_uniform(&counts);
    assert!(stat < crit, "chi-square {stat} >= {crit}: {counts:?}");
}

#[test]
fn feature_mask_width_is_uniform_and_contiguous() {
    let (frames, dim, w) = (6, 12, 5);
    let c = ones(frames, dim);
    let mut rng = SeededRng::new(5);
    let mut counts = vec![0usize; w + 1];
    for _ in 0..DRAWS {
        let out = augment::feature_mask(&c, w, 1.0, &mut rng).unwrap();
        let t = out.tensor();
        let zero_cols: Vec<bool> = (0..dim).map(|d| (0..frames).all(|r| t.get(r, d) == 0.0)).collect();
        assert!((0..frames).all(|r| (0..dim).all(|d| zero_cols[d] || t.get(r, d) == 1.0)));
        counts[zero_block(&zero_cols)] += 1;
    }
    let (stat, crit) = chi_square_uniform(&counts);
    assert!(stat < crit, "chi-square {stat} >= {crit}: {counts:?}");
}

fn grid_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..20, 2usize..6).prop_flat_map(|(t, k)| {
        prop::collection::vec(prop::collection::vec(0.01f64..1.0, k), t).prop_map(|rows| {
            rows.into_iter()
                .map(|r| {
                    let s: f64 = r.iter().sum();
                    r.into_iter().map(|x| x / s).collect()
                })
                .collect()
        })
    })
}

proptest! {
    #[test]
    fn insertion_only_touches_blank_frames(rows in grid_strategy(), p in 0.0f64..=1.0, seed in any::<u64>()) {
        let z = PosteriorGrid::from_rows(&rows).unwrap();
        let clean = ctc::argmax_path(&z);
        let out = augment::token_insert(&z, p, &mut SeededRng::new(seed));
        for (a, b) in clean.labels().iter().zip(out.labels()) {
            if *a != BLANK {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn full_insertion_leaves_no_blanks(rows in grid_strategy(), seed in any::<u64>()) {
        let z = PosteriorGrid::from_rows(&rows).unwrap();
        let out = augment::token_insert(&z, 1.0, &mut SeededRng::new(seed));
        prop_assert_eq!(out.blank_count(), 0);
    }

    #[test]
    fn deletion_only_blanks_frames(rows in grid_strategy(), p in 0.0f64..=1.0, seed in any::<u64>()) {
        let z = PosteriorGrid::from_rows(&rows).unwrap();
        let clean = ctc::argmax_path(&z);
        let out = augment::token_delete(&z, p, &mut SeededRng::new(seed));
        for (a, b) in clean.labels().iter().zip(out.labels()) {
            prop_assert!(b == a || *b == BLANK);
        }
    }

    #[test]
    fn masks_preserve_shape(t in 1usize..30, d in 1usize..10, seed in any::<u64>()) {
        let c = ones(t, d);
        let mut rng = SeededRng::new(seed);
        let tm = augment::time_mask(&c, MaskWidth::Fraction(0.5), 1.0, &mut rng).unwrap();
        prop_assert_eq!((tm.frames(), tm.dim()), (t, d));
        let fm = augment::feature_mask(&c, d, 1.0, &mut rng).unwrap();
        prop_assert_eq!((fm.frames(), fm.dim()), (t, d));
    }
}
