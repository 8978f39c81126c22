use std::collections::HashSet;

use proptest::prelude::*;
use zsdistill::prompts::{
    assemble_prompts, build_covering_array, format_weighted, parse_weighted, verify_coverage,
    ClassPrompt, OptionBank, PromptError,
};

/// Every t-subset of factors and every level tuple, counted directly.
fn covered_fraction(rows: &[Vec<usize>], k: usize, v: usize, t: usize) -> (usize, usize) {
    fn subsets(k: usize, t: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == t {
            out.push(cur.clone());
            return;
        }
        for i in start..k {
            cur.push(i);
            subsets(k, t, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut subs = Vec::new();
    subsets(k, t, 0, &mut Vec::new(), &mut subs);
    let mut covered = 0;
    for s in &subs {
        let seen: HashSet<Vec<usize>> = rows
            .iter()
            .map(|r| s.iter().map(|&f| r[f]).collect())
            .collect();
        covered += seen.len();
    }
    (covered, subs.len() * v.pow(t as u32))
}

#[test]
fn strength_three_is_complete() {
    let a = build_covering_array(5, 3, 3, 1).unwrap();
    assert_eq!(covered_fraction(&a.rows, 5, 3, 3), (270, 270));
    assert!(a.len() >= 27);
}

#[test]
fn invalid_parameters_are_rejected() {
    for (k, v, t) in [(1, 3, 2), (4, 1, 2), (4, 3, 1), (2, 3, 3)] {
        assert!(matches!(
            build_covering_array(k, v, t, 0),
            Err(PromptError::CoveringParams { .. })
        ));
    }
}

#[test]
fn builtin_bank_gives_one_prompt_per_row() {
    let bank = OptionBank::builtin(15);
    let a = build_covering_array(bank.dimensions.len(), 15, 2, 3).unwrap();
    let ps = assemble_prompts(
        &ClassPrompt::new("triangle", "polygon"),
        &bank.dimensions,
        &a,
    )
    .unwrap();
    assert_eq!(ps.len(), a.len());
    for (p, row) in ps.iter().zip(&a.rows) {
        assert_eq!(&p.levels(), row);
        let text = p.to_string();
        assert!(text.starts_with("(triangle:1.5), (polygon:1.2), "));
        assert_eq!(parse_weighted(&text).unwrap(), p.segments());
    }
}

#[test]
fn malformed_segments_fail_to_parse() {
    for bad in [
        "(dog:1.2",
        "(dog)",
        "(dog:abc)",
        "(dog:-1.0)",
        "a:b",
        "  ,  ",
    ] {
        assert!(parse_weighted(bad).is_err(), "{bad}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pairwise_arrays_cover_every_pair(k in 2usize..6, v in 2usize..8, seed in 0u64..1000) {
        let a = build_covering_array(k, v, 2, seed).unwrap();
        let (covered, total) = covered_fraction(&a.rows, k, v, 2);
        prop_assert_eq!(covered, total);
        prop_assert!(a.coverage().complete());
        prop_assert!(a.len() >= v * v);
        prop_assert!(a.rows.iter().all(|r| r.len() == k && r.iter().all(|&l| l < v)));
    }

    #[test]
    fn builder_is_deterministic(k in 2usize..5, v in 2usize..6, seed in 0u64..1000) {
        prop_assert_eq!(
            build_covering_array(k, v, 2, seed).unwrap(),
            build_covering_array(k, v, 2, seed).unwrap()
        );
    }

    #[test]
    fn checker_notices_a_missing_pair(k in 2usize..5, v in 2usize..5, seed in 0u64..1000, a0 in 0usize..5, a1 in 0usize..5) {
        let (a0, a1) = (a0 % v, a1 % v);
        let a = build_covering_array(k, v, 2, seed).unwrap();
        let rows: Vec<Vec<usize>> = a.rows.into_iter().filter(|r| !(r[0] == a0 && r[1] == a1)).collect();
        let c = verify_coverage(&rows, k, v, 2);
        prop_assert_eq!(c.total, k * (k - 1) / 2 * v * v);
        prop_assert!(c.covered < c.total);
        prop_assert_eq!(c.covered, covered_fraction(&rows, k, v, 2).0);
    }

    #[test]
    fn weighted_format_round_trips(
        segs in prop::collection::vec(("[a-z][a-z '-]{0,12}[a-z]", 1u32..50), 1..8)
    ) {
        let segs: Vec<(String, f32)> = segs.into_iter().map(|(s, w)| (s, w as f32 / 10.0)).collect();
        let text = format_weighted(&segs);
        let back = parse_weighted(&text).unwrap();
        prop_assert_eq!(back.len(), segs.len());
        for ((s, w), (bs, bw)) in segs.iter().zip(&back) {
            prop_assert_eq!(s, bs);
            prop_assert!((w - bw).abs() < 1e-6);
        }
        prop_assert_eq!(format_weighted(&back), text);
    }
}
