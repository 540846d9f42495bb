//! The assignment solver against exhaustive enumeration.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use soc_core::matching::hungarian;

use common::brute_force_assignment;

fn random_case(rng: &mut ChaCha8Rng, integer: bool) -> (Vec<f64>, usize, usize) {
    let (n, m) = (rng.random_range(1..=7), rng.random_range(1..=7));
    let cost = (0..n * m)
        .map(|_| if integer { f64::from(rng.random_range(0..20u32)) } else { rng.random_range(-5.0..5.0) })
        .collect();
    (cost, n, m)
}

#[test]
fn matches_brute_force_on_1000_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        // Integer costs produce many ties; real costs a unique optimum.
        let (cost, n, m) = random_case(&mut rng, case % 2 == 0);
        let a = hungarian(&cost, n, m).unwrap();
        let oracle = brute_force_assignment(&cost, n, m);
        assert_eq!(a.cost, oracle, "case {case}: {n}x{m} {cost:?}");
        assert_eq!(a.pairs.len(), n.min(m));
        let mut rows: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
        let mut cols: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        assert_eq!((rows.len(), cols.len()), (n.min(m), n.min(m)), "case {case}: not one-to-one");
    }
}

#[test]
fn reported_cost_is_the_sum_of_chosen_entries() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let (cost, n, m) = random_case(&mut rng, false);
        let a = hungarian(&cost, n, m).unwrap();
        let total: f64 = a.pairs.iter().map(|&(i, j)| cost[i * m + j]).sum();
        assert_eq!(a.cost, total);
    }
}

#[test]
fn single_column_picks_the_minimum_row() {
    let a = hungarian(&[3.0, -1.0, 2.0, -1.0], 4, 1).unwrap();
    assert_eq!(a.cost, -1.0);
    assert!(a.pairs == vec![(1, 0)] || a.pairs == vec![(3, 0)]);
}
