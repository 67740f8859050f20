use proptest::prelude::*;
use serde::Deserialize;
use trustshift_core::analysis::stats::{
    bonferroni, mann_whitney_u, paired_t, pearson_r, stars, MwuMethod, StatsError, EXACT_MAX_N,
};

#[derive(Deserialize)]
struct PairedCase {
    x: Vec<f64>,
    y: Vec<f64>,
    t: f64,
    df: f64,
    p: f64,
}

#[derive(Deserialize)]
struct MwuCase {
    x: Vec<f64>,
    y: Vec<f64>,
    u1: f64,
    u2: f64,
    method: String,
    p: f64,
}

#[derive(Deserialize)]
struct PearsonCase {
    x: Vec<f64>,
    y: Vec<f64>,
    r: f64,
    p: f64,
}

#[derive(Deserialize)]
struct Reference {
    paired_t: Vec<PairedCase>,
    mann_whitney: Vec<MwuCase>,
    pearson: Vec<PearsonCase>,
}

fn reference() -> Reference {
    serde_json::from_str(include_str!("fixtures/stats_reference.json")).unwrap()
}

const STAT_TOL: f64 = 1e-9;
const P_TOL: f64 = 1e-6;

#[test]
fn paired_t_matches_reference() {
    for c in reference().paired_t {
        let r = paired_t(&c.x, &c.y).unwrap();
        assert!((r.t - c.t).abs() < STAT_TOL, "t {} vs {}", r.t, c.t);
        assert_eq!(r.df, c.df);
        assert!((r.p - c.p).abs() < P_TOL, "p {} vs {}", r.p, c.p);
    }
}

#[test]
fn mann_whitney_matches_reference() {
    for c in reference().mann_whitney {
        let method = match c.method.as_str() {
            "exact" => MwuMethod::Exact,
            _ => MwuMethod::Asymptotic,
        };
        let r = mann_whitney_u(&c.x, &c.y, method).unwrap();
        assert!((r.u1 - c.u1).abs() < STAT_TOL && (r.u2 - c.u2).abs() < STAT_TOL);
        assert!(
            (r.p - c.p).abs() < P_TOL,
            "p {} vs {} ({})",
            r.p,
            c.p,
            c.method
        );
    }
}

#[test]
fn pearson_matches_reference() {
    for c in reference().pearson {
        let r = pearson_r(&c.x, &c.y).unwrap();
        assert!((r.r - c.r).abs() < STAT_TOL, "r {} vs {}", r.r, c.r);
        assert!((r.p - c.p).abs() < P_TOL, "p {} vs {}", r.p, c.p);
    }
}

/// U of `x` by direct pair counting, ties count one half.
fn pair_count_u(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .flat_map(|a| y.iter().map(move |b| (a, b)))
        .map(|(a, b)| {
            if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            }
        })
        .sum()
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Two-sided permutation p of U over every relabelling of the pooled values.
fn brute_force_exact_p(x: &[f64], y: &[f64]) -> f64 {
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let observed = pair_count_u(x, y);
    let (mut le, mut ge, mut total) = (0usize, 0usize, 0usize);
    for idx in combinations(pooled.len(), x.len()) {
        let a: Vec<f64> = idx.iter().map(|&i| pooled[i]).collect();
        let b: Vec<f64> = (0..pooled.len())
            .filter(|i| !idx.contains(i))
            .map(|i| pooled[i])
            .collect();
        let u = pair_count_u(&a, &b);
        total += 1;
        le += usize::from(u <= observed + 1e-12);
        ge += usize::from(u >= observed - 1e-12);
    }
    (2.0 * le.min(ge) as f64 / total as f64).min(1.0)
}

#[test]
fn exact_rank_sum_matches_brute_force() {
    let cases: Vec<(Vec<f64>, Vec<f64>)> = vec![
        (vec![1.0, 2.0], vec![3.0, 4.0]),
        (vec![1.0, 2.0, 2.0, 5.0], vec![2.0, 3.0, 6.0, 7.0, 7.0]),
        (vec![0.3, 1.7, 2.2], vec![0.1, 0.9, 3.3, 4.0, 5.1, 6.6]),
        (vec![4.0, 4.0, 4.0], vec![4.0, 4.0, 1.0]),
        (
            vec![9.0, 8.0, 7.0, 6.0, 5.0, 4.0],
            vec![3.0, 2.0, 1.0, 0.0, -1.0, -2.0],
        ),
    ];
    for (x, y) in cases {
        let r = mann_whitney_u(&x, &y, MwuMethod::Exact).unwrap();
        assert!((r.u1 - pair_count_u(&x, &y)).abs() < 1e-12);
        let want = brute_force_exact_p(&x, &y);
        assert!((r.p - want).abs() < 1e-12, "{x:?} {y:?}: {} vs {want}", r.p);
    }
}

#[test]
fn two_versus_two_example() {
    let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0], MwuMethod::Auto).unwrap();
    assert!(r.exact);
    assert_eq!(r.u1, 0.0);
    assert!((r.p - 2.0 / 6.0).abs() < 1e-12);
}

#[test]
fn auto_switches_at_twelve() {
    let x: Vec<f64> = (0..6).map(f64::from).collect();
    let y: Vec<f64> = (6..12).map(f64::from).collect();
    assert!(mann_whitney_u(&x, &y, MwuMethod::Auto).unwrap().exact);
    assert_eq!(x.len() + y.len(), EXACT_MAX_N);
    let y13: Vec<f64> = (6..13).map(f64::from).collect();
    assert!(!mann_whitney_u(&x, &y13, MwuMethod::Auto).unwrap().exact);
    let big: Vec<f64> = (0..21).map(f64::from).collect();
    assert!(matches!(
        mann_whitney_u(&big[..10], &big[10..], MwuMethod::Exact),
        Err(StatsError::TooLargeForExact(21))
    ));
}

/// At the switch size the two branches agree within 0.01 wherever the exact
/// p is at most 0.1 and both groups have at least three members. Over the
/// whole range they can differ by up to about 0.016.
#[test]
fn exact_and_asymptotic_agree_at_switch_size() {
    let n = EXACT_MAX_N;
    for n1 in 3..=n - 3 {
        for idx in combinations(n, n1) {
            let x: Vec<f64> = idx.iter().map(|&i| i as f64).collect();
            let y: Vec<f64> = (0..n)
                .filter(|i| !idx.contains(i))
                .map(|i| i as f64)
                .collect();
            let e = mann_whitney_u(&x, &y, MwuMethod::Exact).unwrap();
            if e.p > 0.1 {
                continue;
            }
            let a = mann_whitney_u(&x, &y, MwuMethod::Asymptotic).unwrap();
            assert!(
                (e.p - a.p).abs() <= 0.01,
                "n1={n1} U={}: {} vs {}",
                e.u1,
                e.p,
                a.p
            );
        }
    }
}

#[test]
fn star_thresholds() {
    assert_eq!(stars(0.06), "ns");
    assert_eq!(stars(0.05), "*");
    assert_eq!(stars(0.011), "*");
    assert_eq!(stars(0.01), "**");
    assert_eq!(stars(0.001), "***");
    assert_eq!(stars(1e-4), "****");
    assert_eq!(stars(0.0), "****");
}

fn sample(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    // coarse grid so ties are common
    prop::collection::vec((-20i32..20).prop_map(|v| f64::from(v) / 2.0), 1..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn u_statistics_sum_to_n1_n2(x in sample(40), y in sample(40)) {
        let r = mann_whitney_u(&x, &y, MwuMethod::Asymptotic).unwrap();
        prop_assert!((r.u1 + r.u2 - (x.len() * y.len()) as f64).abs() < 1e-9);
        prop_assert!((r.u1 - pair_count_u(&x, &y)).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&r.p));
    }

    #[test]
    fn bonferroni_is_capped_and_monotone(p in 0.0f64..=1.0, q in 0.0f64..=1.0, m in 1usize..20) {
        let a = bonferroni(p, m);
        prop_assert!(a <= 1.0 && a >= p);
        prop_assert!((a - (p * m as f64).min(1.0)).abs() < 1e-15);
        if p <= q {
            prop_assert!(bonferroni(p, m) <= bonferroni(q, m));
        }
        prop_assert!(bonferroni(p, m) <= bonferroni(p, m + 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_sum_is_symmetric(x in sample(9), y in sample(9)) {
        let a = mann_whitney_u(&x, &y, MwuMethod::Auto).unwrap();
        let b = mann_whitney_u(&y, &x, MwuMethod::Auto).unwrap();
        prop_assert!((a.u1 - b.u2).abs() < 1e-12);
        prop_assert!((a.p - b.p).abs() < 1e-12);
    }

    #[test]
    fn paired_t_flips_sign(x in prop::collection::vec(-10.0f64..10.0, 3..30), shift in -3.0f64..3.0) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + shift + (i % 3) as f64 * 0.1).collect();
        let a = paired_t(&x, &y).unwrap();
        let b = paired_t(&y, &x).unwrap();
        prop_assert!((a.t + b.t).abs() < 1e-9);
        prop_assert!((a.p - b.p).abs() < 1e-12);
    }
}
