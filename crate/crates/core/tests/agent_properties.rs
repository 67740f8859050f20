use proptest::prelude::*;
use trustshift_core::agents::combine;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn second_response_lies_between_first_and_ai(
        first in 0.0f64..=20.0,
        ai in 0.0f64..=20.0,
        self_sigma in 0.1f64..20.0,
        ai_sigma in 0.1f64..20.0,
        gain in 0.5f64..2.0,
    ) {
        let s = combine(first, ai, self_sigma, ai_sigma, gain);
        prop_assert!(s >= first.min(ai) - 1e-12 && s <= first.max(ai) + 1e-12);
    }

    #[test]
    fn more_trust_in_ai_never_shrinks_the_shift(
        first in 0.0f64..=20.0,
        ai in 0.0f64..=20.0,
        self_sigma in 0.1f64..20.0,
        ai_sigma in 0.2f64..20.0,
        factor in 0.05f64..1.0,
        gain in 0.5f64..2.0,
    ) {
        let shift = |sigma: f64| (combine(first, ai, self_sigma, sigma, gain) - first).abs();
        prop_assert!(shift(ai_sigma * factor) >= shift(ai_sigma) - 1e-12);
        // and a larger explanation gain acts like a smaller AI sigma
        let g = |gain: f64| (combine(first, ai, self_sigma, ai_sigma, gain) - first).abs();
        prop_assert!(g(gain * 1.3) >= g(gain) - 1e-12);
    }
}

#[test]
fn combination_limits() {
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    assert!(close(combine(10.0, 14.0, 3.0, 3.0, 1.0), 12.0));
    assert!(close(combine(10.0, 14.0, 3.0, f64::INFINITY, 1.0), 10.0));
    assert!(close(combine(10.0, 14.0, f64::INFINITY, 3.0, 1.0), 14.0));
}
