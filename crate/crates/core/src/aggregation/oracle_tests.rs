//! Aggregators against brute-force references and generic properties.

use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;

/// Coordinates on a quarter grid keep every sum and square exact, so
/// ties are common and tie-breaking gets exercised.
fn grid_value() -> impl Strategy<Value = f64> + Clone {
    (-8i32..=8).prop_map(|i| i as f64 * 0.25)
}

fn mixed_value() -> impl Strategy<Value = f64> + Clone {
    prop_oneof![grid_value(), -100.0..100.0f64]
}

fn points(value: impl Strategy<Value = f64> + Clone, max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=4usize, 1..=max).prop_flat_map(move |(d, s)| prop::collection::vec(prop::collection::vec(value.clone(), d), s))
}

fn views(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

/// Rank of each entry, ties broken by position.
fn ranks(column: &[f64]) -> Vec<usize> {
    (0..column.len())
        .map(|i| {
            (0..column.len())
                .filter(|&j| column[j] < column[i] || (column[j] == column[i] && j < i))
                .count()
        })
        .collect()
}

fn by_rank(column: &[f64], r: usize) -> f64 {
    let rk = ranks(column);
    column[rk.iter().position(|&x| x == r).unwrap()]
}

fn median_oracle(inputs: &[Vec<f64>]) -> Vec<f64> {
    let s = inputs.len();
    (0..inputs[0].len())
        .map(|k| {
            let col: Vec<f64> = inputs.iter().map(|v| v[k]).collect();
            if s % 2 == 1 {
                by_rank(&col, s / 2)
            } else {
                0.5 * (by_rank(&col, s / 2 - 1) + by_rank(&col, s / 2))
            }
        })
        .collect()
}

fn trimmed_oracle(inputs: &[Vec<f64>], q: usize) -> Vec<f64> {
    let s = inputs.len();
    (0..inputs[0].len())
        .map(|k| {
            let col: Vec<f64> = inputs.iter().map(|v| v[k]).collect();
            (q..s - q).map(|r| by_rank(&col, r)).sum::<f64>() / (s - 2 * q) as f64
        })
        .collect()
}

/// Krum by enumerating every subset of the other inputs.
fn krum_oracle(inputs: &[Vec<f64>], q: usize) -> usize {
    let s = inputs.len();
    let keep = s - q - 2;
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut best: Option<(f64, usize)> = None;
    for i in 0..s {
        let others: Vec<usize> = (0..s).filter(|&j| j != i).collect();
        let mut score = f64::INFINITY;
        for mask in 0u32..(1 << others.len()) {
            if mask.count_ones() as usize != keep {
                continue;
            }
            let total: f64 = (0..others.len())
                .filter(|b| mask & (1 << b) != 0)
                .map(|b| d2(&inputs[i], &inputs[others[b]]))
                .sum();
            score = score.min(total);
        }
        if best.is_none_or(|(b, _)| score < b) {
            best = Some((score, i));
        }
    }
    best.unwrap().1
}

/// Minimum of a convex function on `[lo, hi]` by ternary search.
fn ternary(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> (f64, f64) {
    for _ in 0..200 {
        let a = lo + (hi - lo) / 3.0;
        let b = hi - (hi - lo) / 3.0;
        if f(a) <= f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    let x = 0.5 * (lo + hi);
    (x, f(x))
}

/// Minimum of the sum-of-distances objective over the bounding box, found
/// by a ternary search in `x` over the ternary-searched minimum in `y`.
/// Partial minimization keeps the outer function convex, and the search
/// does not care how elongated the level sets are.
fn geomed_oracle(inputs: &[Vec<f64>]) -> f64 {
    let refs = views(inputs);
    let lo = |k: usize| inputs.iter().map(|v| v[k]).fold(f64::INFINITY, f64::min);
    let hi = |k: usize| inputs.iter().map(|v| v[k]).fold(f64::NEG_INFINITY, f64::max);
    let inner = |x: f64| ternary(lo(1), hi(1), |y| geo_med_objective(&[x, y], &refs)).1;
    let (_, best) = ternary(lo(0), hi(0), inner);
    let at_inputs = refs.iter().map(|v| geo_med_objective(v, &refs)).fold(f64::INFINITY, f64::min);
    best.min(at_inputs)
}

fn messages(v: &[Vec<f64>]) -> Vec<Message<'_>> {
    v.iter().enumerate().map(|(i, x)| Message { from: i + 1, value: x }).collect()
}

/// Necessary condition for `p ∈ conv(points)`, tested along the axes and a
/// spread of fixed directions.
fn in_hull(p: &[f64], points: &[&[f64]]) -> bool {
    let d = p.len();
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for k in 0..d {
        let mut e = vec![0.0; d];
        e[k] = 1.0;
        dirs.push(e.clone());
        e[k] = -1.0;
        dirs.push(e);
    }
    for t in 0..64 {
        dirs.push((0..d).map(|k| ((t * 7 + k * 13) as f64 * 0.37).sin()).collect());
    }
    let scale = points.iter().flat_map(|v| v.iter()).fold(1.0_f64, |m, x| m.max(x.abs()));
    dirs.iter().all(|u| {
        let dot = |v: &[f64]| v.iter().zip(u).map(|(a, b)| a * b).sum::<f64>();
        let top = points.iter().map(|v| dot(v)).fold(f64::NEG_INFINITY, f64::max);
        dot(p) <= top + 1e-9 * scale
    })
}

fn random_weights(degree: usize, raw: &[f64]) -> NeighborWeights {
    let total: f64 = raw[..=degree].iter().sum();
    NeighborWeights::new((0..=degree).map(|i| (i, raw[i] / total)).collect::<BTreeMap<_, _>>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn coo_med_matches_rank_oracle(inputs in points(mixed_value(), 7)) {
        prop_assert_eq!(coo_med(&views(&inputs)).unwrap(), median_oracle(&inputs));
    }

    #[test]
    fn tri_mean_matches_rank_oracle(inputs in points(mixed_value(), 7), q in 0..4usize) {
        let q = q.min((inputs.len() - 1) / 2);
        prop_assert_eq!(tri_mean(&views(&inputs), q).unwrap(), trimmed_oracle(&inputs, q));
    }

    #[test]
    fn krum_matches_subset_oracle(inputs in points(grid_value(), 7), q in 0..5usize) {
        prop_assume!(inputs.len() >= 3);
        let q = q.min(inputs.len() - 3);
        let want = krum_oracle(&inputs, q);
        prop_assert_eq!(krum_index(&views(&inputs), q).unwrap(), want);
        prop_assert_eq!(krum(&views(&inputs), q).unwrap(), inputs[want].clone());
    }

    #[test]
    fn per_coordinate_rules_stay_in_range(inputs in points(mixed_value(), 7), q in 0..4usize) {
        let q = q.min((inputs.len() - 1) / 2);
        let refs = views(&inputs);
        for out in [coo_med(&refs).unwrap(), tri_mean(&refs, q).unwrap()] {
            for (k, v) in out.iter().enumerate() {
                let lo = inputs.iter().map(|x| x[k]).fold(f64::INFINITY, f64::min);
                let hi = inputs.iter().map(|x| x[k]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo <= *v && *v <= hi);
            }
        }
    }

    #[test]
    fn weighted_rules_stay_in_hull(
        inputs in points(mixed_value(), 8),
        raw in prop::collection::vec(0.01..1.0f64, 8),
        q in 0..7usize,
    ) {
        prop_assume!(inputs.len() >= 2);
        let degree = inputs.len() - 1;
        let q = q.min(degree - 1);
        let w = random_weights(degree, &raw);
        let refs = views(&inputs);
        let input = AggregationInput::new(0, &inputs[0], messages(&inputs[1..])).with_weights(&w);
        prop_assert!(in_hull(&weighted_mean(&input).unwrap(), &refs));
        prop_assert!(in_hull(&ios_with_trace(&input, q).unwrap().0, &refs));
        prop_assert!(in_hull(&faba_with_trace(&input, q).unwrap().0, &refs));
        if inputs.len() >= 3 {
            prop_assert!(refs.contains(&krum(&refs, 0).unwrap().as_slice()));
        }
    }

    #[test]
    fn order_does_not_matter(
        inputs in points(-100.0..100.0f64, 7),
        seed in any::<u64>(),
        q in 0..4usize,
    ) {
        use rand::seq::SliceRandom;
        let mut shuffled = inputs.clone();
        shuffled.shuffle(&mut crate::rng::seeded(seed));
        let (a, b) = (views(&inputs), views(&shuffled));
        prop_assert_eq!(coo_med(&a).unwrap(), coo_med(&b).unwrap());
        let tq = q.min((inputs.len() - 1) / 2);
        prop_assert_eq!(tri_mean(&a, tq).unwrap(), tri_mean(&b, tq).unwrap());
        if inputs.len() >= 3 {
            let kq = q.min(inputs.len() - 3);
            // Ties can pick a different vector; the winning score cannot change.
            let score = |v: &[f64]| {
                let mut d: Vec<f64> = a.iter().map(|x| x.iter().zip(v).map(|(p, q)| (p - q) * (p - q)).sum()).collect();
                d.sort_by(f64::total_cmp);
                d[1..inputs.len() - kq - 1].iter().sum::<f64>()
            };
            prop_assert_eq!(score(&krum(&a, kq).unwrap()), score(&krum(&b, kq).unwrap()));
        }
        let ga = geo_med(&a, GEOMED_TOL, GEOMED_MAX_ITER).unwrap();
        let gb = geo_med(&b, GEOMED_TOL, GEOMED_MAX_ITER).unwrap();
        let scale = inputs.iter().flatten().fold(1.0_f64, |m, x| m.max(x.abs()));
        prop_assert!((geo_med_objective(&ga, &a) - geo_med_objective(&gb, &a)).abs() <= 1e-9 * scale * inputs.len() as f64);
    }

    #[test]
    fn faba_equals_uniform_ios(inputs in points(mixed_value(), 8), q in 0..7usize) {
        prop_assume!(inputs.len() >= 2);
        let degree = inputs.len() - 1;
        let q = q.min(degree - 1);
        let ids: Vec<usize> = (1..=degree).collect();
        let w = NeighborWeights::uniform(0, &ids);
        let input = AggregationInput::new(0, &inputs[0], messages(&inputs[1..])).with_weights(&w);
        prop_assert_eq!(faba_with_trace(&input, q).unwrap(), ios_with_trace(&input, q).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn geo_med_matches_search_oracle(
        inputs in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 2), 2..=7),
    ) {
        let refs = views(&inputs);
        let got = geo_med_objective(&geo_med(&refs, GEOMED_TOL, GEOMED_MAX_ITER).unwrap(), &refs);
        let oracle = geomed_oracle(&inputs);
        prop_assert!((got - oracle).abs() <= 1e-6, "{} vs {}", got, oracle);
        let best_input = refs.iter().map(|v| geo_med_objective(v, &refs)).fold(f64::INFINITY, f64::min);
        prop_assert!(got <= best_input + 1e-6);
    }
}
