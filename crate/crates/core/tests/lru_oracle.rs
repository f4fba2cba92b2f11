#[path = "support/lru_oracle.rs"]
mod lru_oracle;

#[test]
fn store_matches_reference_lru() {
    let mut total = lru_oracle::RunStats::default();
    for seed in 0..20 {
        let s = lru_oracle::run_seed(seed, 400).unwrap();
        total.evictions += s.evictions;
        total.hits += s.hits;
        total.expired += s.expired;
    }
    // the generator must actually reach every branch
    assert!(total.evictions > 0 && total.hits > 0 && total.expired > 0, "{total:?}");
}
