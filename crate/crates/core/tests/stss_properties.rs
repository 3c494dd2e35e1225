mod common;

use common::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bounded(c in case()) {
        prop_bounded(&c)?;
    }

    #[test]
    fn self_match(c in case()) {
        prop_self_match(&c)?;
    }

    #[test]
    fn reciprocity(c in case()) {
        prop_reciprocity(&c)?;
    }

    #[test]
    fn positive_scale_invariance((c, scales) in scaled_case()) {
        prop_scale_invariance(&c, &scales)?;
    }

    #[test]
    fn static_frames_carry_no_temporal_information(c in static_case()) {
        prop_static_nullity(&c)?;
    }

    #[test]
    fn blocked_matches_oracle(c in case()) {
        prop_oracle(&c)?;
    }
}
