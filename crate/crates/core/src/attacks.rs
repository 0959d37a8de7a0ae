//! Byzantine message generation.
//!
//! Attackers are omniscient: they see the post-gradient models of every
//! honest neighbor of their target, the target's own model and its weight
//! row. Messages are crafted per edge `(b, n)`, so a Byzantine worker may
//! tell different neighbors different things.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aggregation::{NeighborWeights, Params};
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AttackSpec {
    /// Byzantine workers behave benignly and send `x̄_n`.
    None,
    Gaussian { var: f64 },
    SignFlip,
    Isolation,
    SampleDuplicate,
    Alie { z: f64 },
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::None => "none",
            AttackSpec::Gaussian { .. } => "gaussian",
            AttackSpec::SignFlip => "signflip",
            AttackSpec::Isolation => "isolation",
            AttackSpec::SampleDuplicate => "dup",
            AttackSpec::Alie { .. } => "alie",
        }
    }

    /// Whether crafting a message consumes randomness.
    pub fn is_random(&self) -> bool {
        matches!(self, AttackSpec::Gaussian { .. } | AttackSpec::SampleDuplicate)
    }
}

impl FromStr for AttackSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, body) = s.split_once(':').unwrap_or((s, ""));
        let mut p = Params::parse(s, body)?;
        let spec = match name.trim().to_ascii_lowercase().as_str() {
            "none" => AttackSpec::None,
            "gaussian" => AttackSpec::Gaussian {
                var: p.take("var")?.unwrap_or(1.0),
            },
            "signflip" => AttackSpec::SignFlip,
            "isolation" => AttackSpec::Isolation,
            "dup" => AttackSpec::SampleDuplicate,
            "alie" => AttackSpec::Alie {
                z: p.take("z")?.unwrap_or(1.0),
            },
            other => return Err(Error::parse(s, format!("unknown attack `{other}`"))),
        };
        p.finish()?;
        match spec {
            AttackSpec::Gaussian { var } if !(var >= 0.0) => Err(Error::parse(s, "var must be non-negative")),
            AttackSpec::Alie { z } if !z.is_finite() => Err(Error::parse(s, "z must be finite")),
            spec => Ok(spec),
        }
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackSpec::Gaussian { var } => write!(f, "gaussian:var={var}"),
            AttackSpec::Alie { z } => write!(f, "alie:z={z}"),
            other => f.write_str(other.name()),
        }
    }
}

/// What an attacker knows about one honest target.
#[derive(Clone, Debug)]
pub struct AttackContext<'a> {
    pub target: usize,
    pub own: &'a [f64],
    /// Honest neighbors of the target and their models, sorted by id.
    pub honest: Vec<(usize, &'a [f64])>,
    /// Byzantine neighbors of the target, sorted by id.
    pub byzantine: Vec<usize>,
    /// The target's weight row `w′_n`.
    pub weights: &'a NeighborWeights,
}

impl AttackContext<'_> {
    fn weight(&self, id: usize) -> Result<f64> {
        self.weights.get(id).ok_or(Error::UnknownWorker(id))
    }
}

/// `x̄_n = Σ_{m∈N_n} w′_nm x_m / Σ_{m∈N_n} w′_nm`.
pub fn honest_weighted_mean(ctx: &AttackContext) -> Result<Vec<f64>> {
    if ctx.honest.is_empty() {
        return Err(Error::NoHonestNeighbors(ctx.target));
    }
    let mut total = 0.0;
    let mut acc = vec![0.0; ctx.own.len()];
    for &(id, v) in &ctx.honest {
        let w = ctx.weight(id)?;
        total += w;
        for (a, x) in acc.iter_mut().zip(v) {
            *a += w * x;
        }
    }
    if !(total > 0.0) {
        return Err(Error::NoHonestNeighbors(ctx.target));
    }
    acc.iter_mut().for_each(|a| *a /= total);
    Ok(acc)
}

pub fn gaussian_attack(ctx: &AttackContext, var: f64, rng: &mut Stream) -> Result<Vec<f64>> {
    let mut out = honest_weighted_mean(ctx)?;
    if var > 0.0 {
        let sd = var.sqrt();
        for v in &mut out {
            let g: f64 = rng.sample(StandardNormal);
            *v += sd * g;
        }
    }
    Ok(out)
}

pub fn sign_flip_attack(ctx: &AttackContext) -> Result<Vec<f64>> {
    Ok(honest_weighted_mean(ctx)?.into_iter().map(|v| -v).collect())
}

/// The message `t` that makes the target's weighted mean equal its own
/// model, assuming every Byzantine neighbor sends `t`.
///
/// `t` is solved for in closed form, then moved through neighboring floats
/// until the weighted mean, evaluated exactly as
/// [`crate::aggregation::weighted_mean`] does, reproduces `x_n` bit for bit.
/// A bitwise hit exists when the centered honest sum `Σ_m w′_nm (x_m − x_n)`
/// is small next to `|x_n|` and the Byzantine mass times the float spacing
/// at `t` stays below the spacing at `x_n`, as near consensus with a modest
/// Byzantine share. Otherwise the `t` landing closest is returned.
pub fn isolation_attack(ctx: &AttackContext) -> Result<Vec<f64>> {
    let mut closed: Vec<(usize, &[f64])> = ctx.honest.clone();
    closed.push((ctx.target, ctx.own));
    closed.sort_by_key(|&(id, _)| id);
    let honest_terms: Vec<(f64, &[f64])> = closed
        .iter()
        .map(|&(id, v)| Ok((ctx.weight(id)?, v)))
        .collect::<Result<_>>()?;
    let byz_w: Vec<f64> = ctx.byzantine.iter().map(|&b| ctx.weight(b)).collect::<Result<_>>()?;
    let mass: f64 = byz_w.iter().sum();
    if !(mass > 0.0) {
        return Err(Error::NoByzantineWeight(ctx.target));
    }
    // Byzantine ids trail honest ids, so the honest part is summed first.
    Ok(ctx
        .own
        .iter()
        .enumerate()
        .map(|(k, &own)| {
            let prefix = honest_terms.iter().fold(0.0, |acc, (w, v)| acc + w * (v[k] - own));
            let finish = |t: f64| own + byz_w.iter().fold(prefix, |acc, w| acc + w * (t - own));
            refine(own, own - prefix / mass, finish)
        })
        .collect())
}

/// Maps floats to integers with the same order, so bisection can walk the
/// representable values between two floats.
fn ordered(x: f64) -> i64 {
    let b = x.to_bits() as i64;
    if b < 0 {
        i64::MIN - b
    } else {
        b
    }
}

fn from_ordered(i: i64) -> f64 {
    f64::from_bits(if i < 0 { (i64::MIN - i) as u64 } else { i as u64 })
}

/// Finds `t` with `finish(t) == target`, where `finish` is non-decreasing.
/// Returns the closest candidate if no float hits the target exactly.
fn refine(target: f64, start: f64, finish: impl Fn(f64) -> f64) -> f64 {
    if !start.is_finite() {
        return start;
    }
    let got = finish(start);
    if got == target {
        return start;
    }
    // Gallop away from `start` until the target is bracketed.
    let s = ordered(start);
    let dir: i64 = if got < target { 1 } else { -1 };
    let mut step: i64 = 1;
    let mut inner = s;
    let outer;
    loop {
        let cand = s.saturating_add(dir * step);
        let v = finish(from_ordered(cand));
        if !v.is_finite() || step > (1 << 52) {
            return start;
        }
        if v == target {
            return from_ordered(cand);
        }
        if (v < target) == (dir > 0) {
            inner = cand;
            step *= 2;
        } else {
            outer = cand;
            break;
        }
    }
    let (mut lo, mut hi) = if dir > 0 { (inner, outer) } else { (outer, inner) };
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let v = finish(from_ordered(mid));
        if v == target {
            return from_ordered(mid);
        }
        if v < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (a, b) = (from_ordered(lo), from_ordered(hi));
    if (finish(a) - target).abs() <= (finish(b) - target).abs() {
        a
    } else {
        b
    }
}

pub fn sample_duplicate_attack(ctx: &AttackContext, rng: &mut Stream) -> Result<Vec<f64>> {
    if ctx.honest.is_empty() {
        return Err(Error::NoHonestNeighbors(ctx.target));
    }
    let pick = rng.random_range(0..ctx.honest.len());
    Ok(ctx.honest[pick].1.to_vec())
}

/// `μ − z·σ` per coordinate, with the unweighted mean and population
/// standard deviation of the honest neighbor models.
pub fn alie_attack(ctx: &AttackContext, z: f64) -> Result<Vec<f64>> {
    if ctx.honest.is_empty() {
        return Err(Error::NoHonestNeighbors(ctx.target));
    }
    let n = ctx.honest.len() as f64;
    Ok((0..ctx.own.len())
        .map(|k| {
            let mu = ctx.honest.iter().map(|(_, v)| v[k]).sum::<f64>() / n;
            let var = ctx.honest.iter().map(|(_, v)| (v[k] - mu).powi(2)).sum::<f64>() / n;
            mu - z * var.sqrt()
        })
        .collect())
}

/// Message from one Byzantine neighbor to the context's target.
pub fn craft(spec: &AttackSpec, ctx: &AttackContext, rng: &mut Stream) -> Result<Vec<f64>> {
    match *spec {
        AttackSpec::None => honest_weighted_mean(ctx),
        AttackSpec::Gaussian { var } => gaussian_attack(ctx, var, rng),
        AttackSpec::SignFlip => sign_flip_attack(ctx),
        AttackSpec::Isolation => isolation_attack(ctx),
        AttackSpec::SampleDuplicate => sample_duplicate_attack(ctx, rng),
        AttackSpec::Alie { z } => alie_attack(ctx, z),
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use rand::Rng;

    use super::*;
    use crate::aggregation::{weighted_mean, AggregationInput, Message};
    use crate::rng::seeded;

    fn weights(pairs: &[(usize, f64)]) -> NeighborWeights {
        NeighborWeights::new(pairs.iter().copied().collect::<BTreeMap<_, _>>())
    }

    #[test]
    fn honest_mean_cases() {
        let own = [0.0];
        let (a, b) = ([1.0], [3.0]);
        let w = weights(&[(0, 0.4), (1, 0.3), (2, 0.3)]);
        let ctx = AttackContext {
            target: 0,
            own: &own,
            honest: vec![(1, &a), (2, &b)],
            byzantine: vec![],
            weights: &w,
        };
        assert!((honest_weighted_mean(&ctx).unwrap()[0] - 2.0).abs() < 1e-15);
        assert!((sign_flip_attack(&ctx).unwrap()[0] + 2.0).abs() < 1e-15);
        let none = AttackContext { honest: vec![], ..ctx.clone() };
        assert!(matches!(honest_weighted_mean(&none), Err(Error::NoHonestNeighbors(0))));
    }

    #[test]
    fn isolation_hand_case() {
        let own = [1.0];
        let h = [3.0];
        let w = weights(&[(0, 0.5), (1, 0.25), (2, 0.25)]);
        let ctx = AttackContext {
            target: 0,
            own: &own,
            honest: vec![(1, &h)],
            byzantine: vec![2],
            weights: &w,
        };
        assert_eq!(isolation_attack(&ctx).unwrap(), vec![-1.0]);
        let none = AttackContext { byzantine: vec![], ..ctx };
        assert!(matches!(isolation_attack(&none), Err(Error::NoByzantineWeight(0))));
    }

    fn isolation_round_trip(rng: &mut crate::rng::Stream, clustered: bool, max_byz: usize) -> (Vec<f64>, Vec<f64>) {
        let n_h = rng.random_range(1..5usize);
        let n_b = rng.random_range(1..=max_byz);
        let d = rng.random_range(1..6usize);
        // Target is honest worker 0, honest neighbors 1..=n_h, Byzantine after.
        let center: Vec<f64> = (0..d)
            .map(|_| rng.random_range(1.0..100.0) * if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let models: Vec<Vec<f64>> = (0..=n_h)
            .map(|_| {
                center
                    .iter()
                    .map(|&c| {
                        if clustered {
                            c * (1.0 + rng.random_range(-0.05..0.05))
                        } else {
                            rng.random_range(-1e3..1e3)
                        }
                    })
                    .collect()
            })
            .collect();
        let mut raw: Vec<f64> = (0..=n_h + n_b).map(|_| rng.random_range(0.05..1.0)).collect();
        if clustered {
            // Near consensus with a modest Byzantine share, as under Metropolis weights.
            let mass = rng.random_range(0.02..0.3);
            let (h, b) = raw.split_at_mut(n_h + 1);
            let (hs, bs): (f64, f64) = (h.iter().sum(), b.iter().sum());
            h.iter_mut().for_each(|v| *v *= (1.0 - mass) / hs);
            b.iter_mut().for_each(|v| *v *= mass / bs);
        }
        let total: f64 = raw.iter().sum();
        let w = NeighborWeights::new(raw.iter().enumerate().map(|(i, v)| (i, v / total)).collect());
        let ctx = AttackContext {
            target: 0,
            own: &models[0],
            honest: (1..=n_h).map(|m| (m, models[m].as_slice())).collect(),
            byzantine: (n_h + 1..=n_h + n_b).collect(),
            weights: &w,
        };
        let t = isolation_attack(&ctx).unwrap();
        let mut messages: Vec<Message> = (1..=n_h).map(|m| Message { from: m, value: &models[m] }).collect();
        messages.extend((n_h + 1..=n_h + n_b).map(|b| Message { from: b, value: &t }));
        let out = weighted_mean(&AggregationInput::new(0, &models[0], messages).with_weights(&w)).unwrap();
        (out, models[0].clone())
    }

    #[test]
    fn isolation_then_weimean_is_exact_near_consensus() {
        let mut rng = seeded(11);
        for trial in 0..2000 {
            let (out, own) = isolation_round_trip(&mut rng, true, 3);
            assert_eq!(out, own, "trial {trial}");
        }
    }

    #[test]
    fn isolation_then_weimean_is_within_rounding() {
        let mut rng = seeded(12);
        for trial in 0..4000 {
            let (out, own) = isolation_round_trip(&mut rng, trial % 2 == 0, 3);
            for (a, b) in out.iter().zip(&own) {
                assert!((a - b).abs() <= 1e-12 * 1e3, "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn isolation_with_equal_models_sends_own() {
        let v = [2.5, -1.0];
        let w = weights(&[(0, 0.5), (1, 0.25), (2, 0.25)]);
        let ctx = AttackContext {
            target: 0,
            own: &v,
            honest: vec![(1, &v)],
            byzantine: vec![2],
            weights: &w,
        };
        assert_eq!(isolation_attack(&ctx).unwrap(), v.to_vec());
    }

    #[test]
    fn alie_cases() {
        let own = [0.0];
        let (a, b) = ([0.0], [2.0]);
        let w = weights(&[(0, 1.0 / 3.0), (1, 1.0 / 3.0), (2, 1.0 / 3.0)]);
        let ctx = AttackContext {
            target: 0,
            own: &own,
            honest: vec![(1, &a), (2, &b)],
            byzantine: vec![],
            weights: &w,
        };
        assert_eq!(alie_attack(&ctx, 1.0).unwrap(), vec![0.0]);
        assert_eq!(alie_attack(&ctx, 0.0).unwrap(), vec![1.0]);
        let same = AttackContext { honest: vec![(1, &b), (2, &b)], ..ctx };
        assert_eq!(alie_attack(&same, 3.0).unwrap(), vec![2.0]);
    }

    #[test]
    fn gaussian_law_of_large_numbers() {
        let own = [0.0, 0.0];
        let (a, b) = ([1.0, -4.0], [3.0, 2.0]);
        let w = weights(&[(0, 0.4), (1, 0.3), (2, 0.3)]);
        let ctx = AttackContext {
            target: 0,
            own: &own,
            honest: vec![(1, &a), (2, &b)],
            byzantine: vec![3],
            weights: &w,
        };
        assert_eq!(gaussian_attack(&ctx, 0.0, &mut seeded(0)).unwrap(), vec![2.0, -1.0]);
        let draws = 100_000;
        let mut rng = seeded(5);
        let mut sum = [0.0; 2];
        for _ in 0..draws {
            let m = gaussian_attack(&ctx, 1.0, &mut rng).unwrap();
            sum[0] += m[0];
            sum[1] += m[1];
        }
        let tol = 4.0 / (draws as f64).sqrt();
        assert!((sum[0] / draws as f64 - 2.0).abs() < tol);
        assert!((sum[1] / draws as f64 + 1.0).abs() < tol);
    }

    #[test]
    fn duplicate_frequencies_are_uniform() {
        let own = [0.0];
        let models = [[1.0], [2.0], [3.0], [4.0]];
        let w = weights(&[(0, 0.2), (1, 0.2), (2, 0.2), (3, 0.2), (4, 0.2)]);
        let ctx = AttackContext {
            target: 0,
            own: &own,
            honest: models.iter().enumerate().map(|(i, m)| (i + 1, m.as_slice())).collect(),
            byzantine: vec![],
            weights: &w,
        };
        let draws = 100_000;
        let mut counts = [0usize; 4];
        let mut rng = seeded(9);
        for _ in 0..draws {
            let m = sample_duplicate_attack(&ctx, &mut rng).unwrap();
            counts[m[0] as usize - 1] += 1;
        }
        let p = 0.25;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn random_attacks_replay() {
        let own = [0.0, 1.0];
        let (a, b) = ([1.0, 2.0], [3.0, 4.0]);
        let w = weights(&[(0, 0.4), (1, 0.3), (2, 0.3)]);
        let ctx = AttackContext {
            target: 0,
            own: &own,
            honest: vec![(1, &a), (2, &b)],
            byzantine: vec![3],
            weights: &w,
        };
        for spec in [AttackSpec::Gaussian { var: 1.0 }, AttackSpec::SampleDuplicate] {
            let x = craft(&spec, &ctx, &mut seeded(77)).unwrap();
            let y = craft(&spec, &ctx, &mut seeded(77)).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn spec_parsing() {
        for (s, spec) in [
            ("gaussian:var=1", AttackSpec::Gaussian { var: 1.0 }),
            ("gaussian", AttackSpec::Gaussian { var: 1.0 }),
            ("signflip", AttackSpec::SignFlip),
            ("isolation", AttackSpec::Isolation),
            ("dup", AttackSpec::SampleDuplicate),
            ("alie:z=1.0", AttackSpec::Alie { z: 1.0 }),
            ("none", AttackSpec::None),
        ] {
            let parsed: AttackSpec = s.parse().unwrap();
            assert_eq!(parsed, spec);
            assert_eq!(parsed.to_string().parse::<AttackSpec>().unwrap(), spec);
        }
        assert!("gaussian:var=-1".parse::<AttackSpec>().is_err());
        assert!("signflip:z=1".parse::<AttackSpec>().is_err());
        assert!("ipm".parse::<AttackSpec>().is_err());
    }
}
