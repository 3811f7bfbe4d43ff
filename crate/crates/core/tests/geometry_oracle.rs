mod common;

use common::{chain_soundness, nnh_oracle_mismatches};

#[test]
fn nearest_neighborhoods_match_exhaustive_search() {
    for seed in 0..10 {
        let (bad, total) = nnh_oracle_mismatches(seed);
        assert_eq!(bad, 0, "seed {seed}: {bad} of {total} searches differ");
    }
}

#[test]
fn chain_search_reaches_a_confident_home() {
    for instance in 0..20 {
        chain_soundness(instance).unwrap();
    }
}
