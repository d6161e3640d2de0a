mod common;

use ndarray::{array, Array2};
use proptest::prelude::*;
use prunelab::{cka, cka_outputs, lmc_with, ModelConfig, ParamSet, Result, SampleSet};

fn scalar(w: f64) -> ParamSet<f64> {
    ParamSet::from_layers(vec![(array![[w]], array![0.0])]).unwrap()
}

/// Error profile of a 1-parameter model: a bump of height `h` on `(lo, hi)`.
fn bump(lo: f64, hi: f64, h: f64) -> impl Fn(&ParamSet<f64>) -> Result<f64> + Sync {
    move |p| {
        let w = p.layers()[0].weight[[0, 0]];
        Ok(if w > lo && w < hi { h } else { 0.1 * w })
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cka_is_symmetric_and_bounded(seed in 0u64..10_000, s in 3usize..20, d in 1usize..6) {
        let mut rng = common::rng(seed);
        let f: Array2<f64> = common::uniform_matrix(&mut rng, s, d);
        let g: Array2<f64> = common::uniform_matrix(&mut rng, s, d + 1);
        let fg = cka_outputs(f.view(), g.view()).unwrap();
        let gf = cka_outputs(g.view(), f.view()).unwrap();
        prop_assert!((fg - gf).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-9).contains(&fg));
        prop_assert!((fg - common::cka_oracle(&f, &g)).abs() < 1e-10);
    }

    #[test]
    fn cka_ignores_output_offsets(seed in 0u64..10_000, shift in -5.0f64..5.0) {
        let mut rng = common::rng(seed);
        let f: Array2<f64> = common::uniform_matrix(&mut rng, 10, 3);
        let g: Array2<f64> = common::uniform_matrix(&mut rng, 10, 3);
        let moved = f.mapv(|v| v + shift);
        let a = cka_outputs(f.view(), g.view()).unwrap();
        prop_assert!((a - cka_outputs(moved.view(), g.view()).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn lmc_swap_symmetry_and_nesting(lo in 0.0f64..1.0, width in 0.0f64..0.5, h in 0.0f64..1.0, a in -1.0f64..2.0, b in -1.0f64..2.0, k in 1usize..5) {
        let err = bump(lo, lo + width, h);
        let coarse = lmc_with(&scalar(a), &scalar(b), 11, &err).unwrap();
        let swapped = lmc_with(&scalar(b), &scalar(a), 11, &err).unwrap();
        prop_assert_eq!(coarse.value, swapped.value);
        let fine = lmc_with(&scalar(a), &scalar(b), 10 * k + 1, &err).unwrap();
        prop_assert!(fine.value.abs() >= coarse.value.abs());
        prop_assert_eq!(coarse.recompute(), (coarse.value, coarse.t_star));
    }

    #[test]
    fn lmc_of_a_model_with_itself_is_zero(w in -3.0f64..3.0, points in 2usize..30) {
        let r = lmc_with(&scalar(w), &scalar(w), points, bump(0.2, 0.7, 1.0)).unwrap();
        prop_assert_eq!(r.value, 0.0);
    }
}

#[test]
fn network_cka_with_itself_is_one() {
    let config = ModelConfig::new(2, 3).with_base_width(8);
    let a = ParamSet::<f32>::init(&config, 1).unwrap();
    let b = ParamSet::<f32>::init(&config, 2).unwrap();
    let data = prunelab::gen_spirals::<f32>(3, 30, 0.1, 1.0, 0).unwrap();
    let samples = SampleSet::from_train(&data, 0);
    assert_eq!(cka(&a, &a, &samples).unwrap().value, 1.0);
    let ab = cka(&a, &b, &samples).unwrap();
    assert!((0.0..=1.0).contains(&ab.value));
    assert_eq!(ab.sample_count, 90);
}
