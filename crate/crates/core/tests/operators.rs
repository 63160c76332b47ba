//! Closure of the genetic operators: every composition of operators applied to
//! valid genomes yields valid genomes, and stage-1 operators never change the
//! Normal/Reduction type vector.

use cellevo::evolution::{
    cell_mutation, connect_mutation, crossover, fine_mutation, prune, random_stage1, CrossoverMode,
    FineMutationMode, SearchRng,
};
use cellevo::genome::{expand_to_stage2, validate_stage1, validate_stage2, DepthBounds, Stage2Genome};
use cellevo::search_space::CellLibrary;
use proptest::prelude::*;
use rand::Rng;

fn bounds_strategy() -> impl Strategy<Value = DepthBounds> {
    (1usize..=10, 0usize..=10).prop_map(|(lo, span)| DepthBounds::new(lo, lo + span))
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Crossover(bool),
    Cell,
    Connect,
}

fn op_strategy() -> impl Strategy<Value = Op> {
    prop_oneof![any::<bool>().prop_map(Op::Crossover), Just(Op::Cell), Just(Op::Connect)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn stage1_operators_preserve_validity_and_types(
        bounds in bounds_strategy(),
        seed in any::<u64>(),
        ops in prop::collection::vec(op_strategy(), 1..12),
        rate in 0.0f64..=1.0,
    ) {
        let lib = CellLibrary::default();
        let mut rng = SearchRng::seed_from_u64(seed);
        let mut a = random_stage1(bounds, &mut rng);
        let mut b = random_stage1(bounds, &mut rng);
        for op in ops {
            let (ta, tb) = (a.type_vector(), b.type_vector());
            match op {
                Op::Crossover(single) => {
                    let mode = if single { CrossoverMode::SinglePoint } else { CrossoverMode::MultiPoint };
                    let (qa, qb) = crossover(&a, &b, rate, mode, &mut rng);
                    a = qa;
                    b = qb;
                }
                Op::Cell => a = cell_mutation(&a, rate, &mut rng),
                Op::Connect => b = connect_mutation(&b, rate, &mut rng),
            }
            prop_assert_eq!(a.type_vector(), ta);
            prop_assert_eq!(b.type_vector(), tb);
            prop_assert!(validate_stage1(&a, &lib, bounds).is_ok(), "{:?}", a);
            prop_assert!(validate_stage1(&b, &lib, bounds).is_ok(), "{:?}", b);
        }
    }

    #[test]
    fn stage2_operators_preserve_validity(
        bounds in bounds_strategy(),
        seed in any::<u64>(),
        steps in prop::collection::vec(0u8..4, 1..20),
    ) {
        let lib = CellLibrary::default();
        let mut rng = SearchRng::seed_from_u64(seed);
        let mut g: Stage2Genome = expand_to_stage2(&random_stage1(bounds, &mut rng), &lib, bounds).unwrap();
        let chain = g.chain();
        for step in steps {
            g = match step {
                0 => fine_mutation(&g, FineMutationMode::Both, &mut rng),
                1 => fine_mutation(&g, FineMutationMode::EdgeOnly, &mut rng),
                2 => fine_mutation(&g, FineMutationMode::NodeOnly, &mut rng),
                _ => prune(&g, &mut rng).genome().cloned().unwrap_or(g),
            };
            prop_assert!(validate_stage2(&g, &lib, bounds).is_ok(), "{:?}", g);
            // fine-stage edits never touch the chain
            prop_assert_eq!(g.chain(), chain.clone());
        }
    }

    #[test]
    fn prune_strictly_shrinks_or_is_noop(bounds in bounds_strategy(), seed in any::<u64>()) {
        let lib = CellLibrary::default();
        let mut rng = SearchRng::seed_from_u64(seed);
        let mut g = expand_to_stage2(&random_stage1(bounds, &mut rng), &lib, bounds).unwrap();
        loop {
            let before = g.live_nodes();
            match prune(&g, &mut rng).genome() {
                Some(next) => {
                    prop_assert_eq!(next.live_nodes(), before - 1);
                    g = next.clone();
                }
                None => {
                    prop_assert!(g.genes.iter().all(|c| c.graph.live_count() == 1));
                    break;
                }
            }
        }
    }
}

/// 10,000 random compositions mixing all five operators on fresh random
/// genomes.
#[test]
fn ten_thousand_compositions() {
    let lib = CellLibrary::default();
    let mut rng = SearchRng::seed_from_u64(0x5eed);
    let mut valid = 0;
    for _ in 0..10_000 {
        let bounds = DepthBounds::new(rng.gen_range(1..=6), rng.gen_range(6..=14));
        let mut a = random_stage1(bounds, &mut rng);
        let mut b = random_stage1(bounds, &mut rng);
        let (ta, tb) = (a.type_vector(), b.type_vector());
        for _ in 0..rng.gen_range(1..=4) {
            match rng.gen_range(0..3) {
                0 => (a, b) = crossover(&a, &b, 0.8, CrossoverMode::MultiPoint, &mut rng),
                1 => a = cell_mutation(&a, 0.5, &mut rng),
                _ => b = connect_mutation(&b, 0.5, &mut rng),
            }
        }
        assert_eq!(a.type_vector(), ta);
        assert_eq!(b.type_vector(), tb);
        let mut g = expand_to_stage2(&a, &lib, bounds).unwrap();
        for _ in 0..rng.gen_range(1..=4) {
            g = if rng.gen_bool(0.5) {
                fine_mutation(&g, FineMutationMode::Both, &mut rng)
            } else {
                prune(&g, &mut rng).genome().cloned().unwrap_or(g)
            };
        }
        if validate_stage1(&b, &lib, bounds).is_ok() && validate_stage2(&g, &lib, bounds).is_ok() {
            valid += 1;
        }
    }
    assert_eq!(valid, 10_000);
}
