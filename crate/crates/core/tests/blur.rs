use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smurf_core::autodiff::{GradCheck, Tensor};
use smurf_core::blur::{composite_blur, composite_blur_batch, softmax, BlurBundle};

#[test]
fn identical_colors_are_a_fixed_point() {
    let c = [0.2, 0.7, 0.4];
    let b = BlurBundle::from_logits(vec![c; 5], &[0.3, -1.0, 2.0, 0.0, 0.5]).unwrap();
    let out = composite_blur(&b);
    for ch in 0..3 {
        assert!((out[ch] - c[ch]).abs() < 1e-15);
    }
}

#[test]
fn midpoint_of_black_and_white() {
    let b = BlurBundle::new(vec![[0.0; 3], [1.0; 3]], vec![0.5, 0.5]).unwrap();
    assert_eq!(composite_blur(&b), [0.5; 3]);
}

#[test]
fn softmax_weighted_primaries() {
    let logits = [0.0, 2f64.ln(), 3f64.ln()];
    let w = softmax(&logits);
    for (a, b) in w.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((a - b).abs() < 1e-15);
    }
    let b = BlurBundle::new(vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], w).unwrap();
    let out = composite_blur(&b);
    for (a, b) in out.iter().zip([1.0 / 6.0, 1.0 / 3.0, 0.5]) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn unnormalized_weights_rejected() {
    assert!(BlurBundle::new(vec![[0.0; 3]; 2], vec![0.5, 0.6]).is_err());
    assert!(BlurBundle::new(vec![[0.0; 3]; 2], vec![1.5, -0.5]).is_err());
    assert!(BlurBundle::new(vec![[0.0; 3]; 2], vec![1.0]).is_err());
}

#[test]
fn gradients_through_colors_and_logits_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, b) = (4, 3);
    let leaves = vec![
        Tensor::new(vec![n * b, 3], (0..n * b * 3).map(|_| rng.gen()).collect()).unwrap(),
        Tensor::new(vec![n, b], (0..n * b).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap(),
    ];
    let w: Vec<f64> = (0..b * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let report = GradCheck { max_coords: usize::MAX, ..GradCheck::default() }
        .run(&leaves, |g, v| {
            let weights = g.softmax(v[1], 0)?;
            let out = composite_blur_batch(g, v[0], weights)?;
            let wv = g.constant(Tensor::new(vec![b, 3], w.clone())?);
            let m = g.mul(out, wv)?;
            g.sum(m)
        })
        .unwrap();
    assert!(report.passed(), "{report:?}");
}

fn bundle_strategy() -> impl Strategy<Value = (Vec<[f64; 3]>, Vec<f64>)> {
    (1usize..10).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::array::uniform3(0.0f64..1.0), n),
            prop::collection::vec(-3.0f64..3.0, n),
        )
    })
}

proptest! {
    #[test]
    fn blur_is_convex((colors, logits) in bundle_strategy()) {
        let b = BlurBundle::from_logits(colors.clone(), &logits).unwrap();
        let out = composite_blur(&b);
        for ch in 0..3 {
            let lo = colors.iter().map(|c| c[ch]).fold(f64::INFINITY, f64::min);
            let hi = colors.iter().map(|c| c[ch]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out[ch] >= lo - 1e-12 && out[ch] <= hi + 1e-12);
        }
    }

    #[test]
    fn blur_is_permutation_invariant((colors, logits) in bundle_strategy(), seed in 0u64..1000) {
        let b = BlurBundle::from_logits(colors.clone(), &logits).unwrap();
        let mut idx: Vec<usize> = (0..colors.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.gen_range(0..=i));
        }
        let shuffled = BlurBundle::new(
            idx.iter().map(|&i| b.colors[i]).collect(),
            idx.iter().map(|&i| b.weights[i]).collect(),
        ).unwrap();
        let (x, y) = (composite_blur(&b), composite_blur(&shuffled));
        for ch in 0..3 {
            prop_assert!((x[ch] - y[ch]).abs() < 1e-12);
        }
    }
}
