mod common;

use common::oracle::aggregation_gap;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn aggregation_matches_per_sample_averaging(case in any::<u64>()) {
        let gap = aggregation_gap(case);
        prop_assert!(gap <= 1e-12, "gap {gap:e}");
    }
}
