mod common;

use common::oracle::{self, Shape};
use concept_audit::AuditCorpus;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn corpus(seed: u64, shape: Shape) -> AuditCorpus {
    oracle::random_corpus(&mut ChaCha20Rng::seed_from_u64(seed), shape)
}

#[test]
fn engine_equals_naive_oracle_on_random_corpora() {
    for seed in 0..50 {
        oracle::compare_with_engine(&corpus(seed, Shape::default())).unwrap();
    }
}

#[test]
fn exact_sum_oracle_agrees_with_known_values() {
    assert_eq!(oracle::exact_sum(&[0.1; 10]), 1.0);
    assert_eq!(oracle::exact_sum(&[1e100, 1.0, -1e100]), 1.0);
    assert_eq!(oracle::exact_sum(&[]), 0.0);
    assert_eq!(oracle::exact_sum(&[f64::MIN_POSITIVE / 4.0, -0.5]), -0.5);
    assert_eq!(oracle::exact_sum(&[f64::MAX, -f64::MAX, 5e-324]), 5e-324);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn metric_laws(seed in any::<u64>(), equal_k in any::<bool>()) {
        let shape = Shape { max_images: 60, max_concepts: 10, max_prompts: 6, equal_k };
        let result = oracle::check_laws(&corpus(seed, shape), equal_k);
        prop_assert!(result.is_ok(), "{}", result.unwrap_err());
    }
}
