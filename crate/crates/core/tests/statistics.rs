use cutpaste::augment::{sample_cutout, sample_scar, AugmentConfig, CutoutFill, Fill};
use cutpaste::eval::roc_auc;
use cutpaste::localize::{gaussian_upsample, grid_len, ScoreMap};
use cutpaste::rng::substream;
use cutpaste::ImageBuffer;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Upper-tail p-value of Pearson's statistic against a uniform expectation.
fn uniform_chi_square_p(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

#[test]
fn destination_positions_are_uniform() {
    // A near-fixed 16x16 patch on a 64x64 image leaves 49 positions per axis.
    let cfg = AugmentConfig {
        area_ratio: (0.0624, 0.0626),
        aspect_ratio: (0.999, 1.001),
        ..AugmentConfig::default()
    };
    let x = ImageBuffer::from_fn(64, 64, 3, |_, _, _| 0.5);
    let mut rng = substream(5, "chi");
    let mut rows = vec![0usize; 49];
    let mut cols = vec![0usize; 49];
    for _ in 0..20_000 {
        let (_, p) = sample_cutout(&x, CutoutFill::Grey, &cfg, &mut rng).unwrap();
        assert_eq!((p.height, p.width), (16, 16));
        rows[p.dst_top_left.0] += 1;
        cols[p.dst_top_left.1] += 1;
    }
    assert!(uniform_chi_square_p(&rows) > 1e-3);
    assert!(uniform_chi_square_p(&cols) > 1e-3);
}

#[test]
fn random_fill_colors_are_uniform() {
    let x = ImageBuffer::from_fn(64, 64, 3, |_, _, _| 0.5);
    let cfg = AugmentConfig::default();
    let mut rng = substream(6, "chi");
    let mut bins = vec![vec![0usize; 10]; 3];
    for _ in 0..10_000 {
        let (_, p) = sample_scar(&x, &cfg, &mut rng).unwrap();
        let Fill::RandomColor { rgb } = p.fill else {
            panic!("scar fill must be a random color");
        };
        for (ch, v) in rgb.iter().enumerate() {
            bins[ch][((v * 10.0) as usize).min(9)] += 1;
        }
    }
    for b in &bins {
        assert!(uniform_chi_square_p(b) > 1e-3);
    }
}

fn labeled(max_n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2..max_n).prop_flat_map(|n| {
        (
            prop::collection::vec(-50i32..50, n)
                .prop_map(|v| v.into_iter().map(f64::from).collect()),
            prop::collection::vec(0u8..2, n),
        )
    })
}

proptest! {
    #[test]
    fn auc_is_invariant_to_monotone_maps((scores, mut labels) in labeled(60)) {
        labels[0] = 0;
        labels[1] = 1;
        let base = roc_auc(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (s / 10.0).exp() * 3.0 + 1.0).collect();
        prop_assert_eq!(roc_auc(&mapped, &labels).unwrap(), base);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        let flip = roc_auc(&flipped, &labels).unwrap();
        prop_assert!((flip - (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn grid_covers_image_exactly(patch in 1usize..40, stride in 1usize..9, cells in 1usize..30) {
        let side = patch + (cells - 1) * stride;
        let n = grid_len(side, patch, stride).unwrap();
        prop_assert_eq!(n, cells);
        prop_assert_eq!((n - 1) * stride + patch, side);
        if stride > 1 {
            prop_assert!(grid_len(side + 1, patch, stride).is_err());
        }
    }

    #[test]
    fn upsampling_is_linear(
        a in prop::collection::vec(-5.0f64..5.0, 36),
        b in prop::collection::vec(-5.0f64..5.0, 36),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
    ) {
        let map = |values: Vec<f64>| ScoreMap { rows: 6, cols: 6, patch_size: 8, stride: 2, values };
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + beta * y).collect();
        let ua = gaussian_upsample(&map(a), 2.0).unwrap();
        let ub = gaussian_upsample(&map(b), 2.0).unwrap();
        let um = gaussian_upsample(&map(mix), 2.0).unwrap();
        for i in 0..um.values.len() {
            let expect = alpha * ua.values[i] + beta * ub.values[i];
            prop_assert!((um.values[i] - expect).abs() < 1e-8);
        }
    }
}
