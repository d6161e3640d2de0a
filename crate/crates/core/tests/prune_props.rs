mod common;

use proptest::prelude::*;
use prunelab::prune::{apply_mask, kept_count};
use prunelab::{global_mp, prune, uniform_mp, ParamSet, PruneSpec, PruneStrategy};

fn net(seed: u64, width: usize) -> ParamSet<f64> {
    common::random_net(&mut common::rng(seed), &[4, width, width, 3])
}

fn strategy() -> impl Strategy<Value = PruneStrategy> {
    prop_oneof![Just(PruneStrategy::Uniform), Just(PruneStrategy::Global)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kept_weights_dominate_dropped_ones(seed in 0u64..10_000, width in 3usize..30, d in 0.05f64..1.0) {
        let p = net(seed, width);
        let mask = uniform_mp(&p, &PruneSpec::new(PruneStrategy::Uniform, d)).unwrap();
        for (layer, lm) in p.layers().iter().zip(mask.layers()) {
            let Some(lm) = lm else { continue };
            prop_assert_eq!(lm.kept(), kept_count(d, layer.weight.len()));
            let kept_min = layer.weight.iter().zip(lm.keep()).filter(|(_, &k)| k).map(|(w, _)| w.abs()).fold(f64::INFINITY, f64::min);
            let dropped_max = layer.weight.iter().zip(lm.keep()).filter(|(_, &k)| !k).map(|(w, _)| w.abs()).fold(0.0, f64::max);
            prop_assert!(kept_min >= dropped_max);
        }
    }

    #[test]
    fn global_count_is_exact(seed in 0u64..10_000, width in 3usize..30, d in 0.01f64..1.0) {
        let p = net(seed, width);
        let (mask, _) = global_mp(&p, &PruneSpec::new(PruneStrategy::Global, d)).unwrap();
        prop_assert_eq!(mask.kept_prunable(), kept_count(d, mask.prunable_total()));
    }

    #[test]
    fn pruning_twice_changes_nothing(seed in 0u64..10_000, d in 0.05f64..1.0, s in strategy()) {
        let p = net(seed, 12);
        let spec = PruneSpec::new(s, d);
        let (mask, _) = prune(&p, &spec).unwrap();
        let once = apply_mask(&p, &mask).unwrap();
        prop_assert_eq!(apply_mask(&once, &mask).unwrap(), once.clone());
        let (again, _) = prune(&once, &spec).unwrap();
        prop_assert_eq!(again, mask);
    }

    #[test]
    fn denser_masks_contain_sparser_ones(seed in 0u64..10_000, lo in 0.05f64..0.5, extra in 0.0f64..0.5, s in strategy()) {
        let p = net(seed, 10);
        let (small, _) = prune(&p, &PruneSpec::new(s, lo)).unwrap();
        let (large, _) = prune(&p, &PruneSpec::new(s, lo + extra)).unwrap();
        for (a, b) in small.layers().iter().zip(large.layers()) {
            if let (Some(a), Some(b)) = (a, b) {
                prop_assert!(a.keep().iter().zip(b.keep()).all(|(&x, &y)| !x || y));
            }
        }
    }
}

#[test]
fn biases_and_output_layer_are_never_touched() {
    let p = net(3, 8);
    let (mask, _) = prune(&p, &PruneSpec::new(PruneStrategy::Global, 0.1)).unwrap();
    let pruned = apply_mask(&p, &mask).unwrap();
    for (a, b) in p.layers().iter().zip(pruned.layers()) {
        assert_eq!(a.bias, b.bias);
    }
    assert_eq!(p.layers()[2].weight, pruned.layers()[2].weight);
}
