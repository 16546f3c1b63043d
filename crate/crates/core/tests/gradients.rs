//! Finite-difference checks of the engine and concept modules.

use proptest::prelude::*;
use vcr_core::gradcheck::GRAD_TOLERANCE;
use vcr_core::gradsuite::{block_checks, op_checks, vcr_check, vcr_variants};

#[test]
fn every_op_and_block_passes() {
    for rep in op_checks(3).unwrap().into_iter().chain(block_checks(3).unwrap()) {
        assert!(rep.passed(GRAD_TOLERANCE), "{rep:?}");
        assert!(rep.checked > 0, "{}", rep.name);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_variant_and_seed_pass(seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let variants = vcr_variants();
        let (name, settings) = &variants[pick.index(variants.len())];
        let rep = vcr_check(name, settings, seed).unwrap();
        prop_assert!(rep.passed(GRAD_TOLERANCE), "{:?}", rep);
    }
}
