//! Population initialization: chain shape, reduction cap and a uniform depth
//! distribution.

use cellevo::evolution::{init_population, SearchRng};
use cellevo::genome::{DepthBounds, Genome};
use statrs::distribution::{ChiSquared, ContinuousCDF};

const SAMPLES: usize = 10_000;

fn chains(bounds: DepthBounds, seed: u64) -> Vec<cellevo::genome::Stage1Genome> {
    let mut rng = SearchRng::seed_from_u64(seed);
    init_population(SAMPLES, bounds, &mut rng)
        .unwrap()
        .members
        .into_iter()
        .map(|ind| match ind.genome {
            Genome::Stage1(g) => g,
            other => panic!("initialization produced {other:?}"),
        })
        .collect()
}

#[test]
fn chain_shape_and_reduction_cap() {
    let bounds = DepthBounds::new(3, 12);
    for g in chains(bounds, 42) {
        let n = g.depth();
        assert!(bounds.contains(n));
        for (i, gene) in g.genes.iter().enumerate() {
            let j = i + 1;
            assert_eq!(gene.prev, j - 1);
            if j == 1 {
                assert_eq!(gene.skip, 0);
            } else {
                assert!(gene.skip <= j - 2, "cell {j} skip {}", gene.skip);
            }
            assert!((1..=8).contains(&gene.cell_code));
        }
        let reductions = g.genes.iter().filter(|c| c.cell_code >= 5).count();
        assert!(reductions <= n / 2 + 1, "{reductions} reductions in {n} cells");
    }
}

/// Pearson statistic against the uniform distribution over the bins.
fn uniform_p_value(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

#[test]
fn depth_is_uniform() {
    for (bounds, seed) in [(DepthBounds::new(3, 12), 42), (DepthBounds::new(1, 20), 7), (DepthBounds::new(5, 6), 1)] {
        let mut counts = vec![0usize; bounds.n_max - bounds.n_min + 1];
        for g in chains(bounds, seed) {
            counts[g.depth() - bounds.n_min] += 1;
        }
        let p = uniform_p_value(&counts);
        assert!(p > 0.01, "bounds {bounds:?}: p = {p}, counts {counts:?}");
    }
}

#[test]
fn chi_square_helper_rejects_skew() {
    assert!(uniform_p_value(&[1200, 1000, 800, 1000]) < 0.01);
    assert!(uniform_p_value(&[1000, 1000, 1000, 1000]) > 0.99);
}
