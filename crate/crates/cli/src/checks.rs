//! Bound checks against measured runs, one function per suite.

use std::fmt;
use std::str::FromStr;

use anyhow::bail;
use byzmesh_core::analysis::{
    check_consensus_bound, check_convergence_bound, equal_weight_virtual, estimate_contraction, fixed_point_weighted,
    ios_rho_bound, Adversary, ConsensusConstants, ContractionReport, ContractionSetup, ConvergenceConstants,
};
use byzmesh_core::graph::{chi_squared, gen_erdos_renyi, gen_two_castle, ios_virtual_matrix, metropolis_weights, spectral_gap};
use byzmesh_core::rng::seeded;
use byzmesh_core::trainer::{run, trajectory, two_castle_fixture, TWO_CASTLE_ALPHA};
use byzmesh_core::{AggregatorSpec, AttackSpec, MixingMatrix, Problem, QEstimate, QuadraticProblem, RunConfig, StepSize, Topology};
use rand::Rng;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Contraction,
    Consensus,
    Convergence,
    FixedPoint,
    Counterexamples,
    All,
}

impl Suite {
    pub const EACH: [Suite; 5] = [
        Suite::Contraction,
        Suite::Consensus,
        Suite::Convergence,
        Suite::FixedPoint,
        Suite::Counterexamples,
    ];
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "contraction" => Suite::Contraction,
            "consensus" => Suite::Consensus,
            "convergence" => Suite::Convergence,
            "fixed_point" | "fixed-point" => Suite::FixedPoint,
            "counterexamples" => Suite::Counterexamples,
            "all" => Suite::All,
            other => {
                return Err(format!(
                    "unknown suite `{other}` (contraction, consensus, convergence, fixed_point, counterexamples, all)"
                ))
            }
        })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Contraction => "contraction",
            Suite::Consensus => "consensus",
            Suite::Convergence => "convergence",
            Suite::FixedPoint => "fixed_point",
            Suite::Counterexamples => "counterexamples",
            Suite::All => "all",
        })
    }
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    /// Rule under test in the contraction suite; IOS with `q = B_n` by default.
    pub rule: Option<AggregatorSpec>,
    /// Random instances per topology and adversary.
    pub samples: usize,
    /// Erdős–Rényi topologies per suite.
    pub topologies: usize,
    /// Seeds averaged by the consensus suite.
    pub seeds: Vec<u64>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            rule: None,
            samples: 2000,
            topologies: 5,
            seeds: (0..20).collect(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub suite: Suite,
    pub passed: bool,
    /// Human-readable findings, one per line.
    pub lines: Vec<String>,
    /// Raw reports, kept for replay.
    pub details: serde_json::Value,
}

pub fn run_suite(suite: Suite, opts: &CheckOptions) -> anyhow::Result<Vec<CheckReport>> {
    if opts.rule.is_some() && !matches!(suite, Suite::Contraction | Suite::All) {
        bail!(crate::config::ConfigError::new("--rule", "only the contraction suite takes a rule"));
    }
    let suites: Vec<Suite> = if suite == Suite::All { Suite::EACH.to_vec() } else { vec![suite] };
    suites
        .into_iter()
        .map(|s| match s {
            Suite::Contraction => contraction(opts),
            Suite::Consensus => consensus(opts),
            Suite::Convergence => convergence(opts),
            Suite::FixedPoint => fixed_point(),
            Suite::Counterexamples => counterexamples(),
            Suite::All => unreachable!(),
        })
        .collect()
}

/// Seeded Erdős–Rényi graph with 10 to 20 honest and 1 to 4 Byzantine workers.
fn random_er(seed: u64, p: f64) -> byzmesh_core::Result<Topology> {
    let mut rng = seeded(1000 + seed);
    let n = rng.random_range(10..=20);
    let b = rng.random_range(1..=4);
    gen_erdos_renyi(n, b, p, seed)
}

fn contraction(opts: &CheckOptions) -> anyhow::Result<CheckReport> {
    let rule = opts.rule.clone().unwrap_or(AggregatorSpec::Ios {
        q: QEstimate::ByzantineNeighbors,
    });
    let mut lines = Vec::new();
    let mut reports: Vec<ContractionReport> = Vec::new();
    let mut passed = true;
    let mut i = opts.seed;
    while reports.len() < 2 * opts.topologies {
        let t = random_er(i, 0.7)?;
        i += 1;
        let wp = metropolis_weights(&t);
        let Some(bound) = ios_rho_bound(&wp, &t) else { continue };
        if t.honest_ids().any(|n| rule.validate_for(t.degree(n), t.byzantine_neighbors(n).len()).is_err())
        {
            continue;
        }
        let wv = if rule.needs_weights() {
            ios_virtual_matrix(&wp, &t)?
        } else {
            equal_weight_virtual(&t)
        };
        let setup = ContractionSetup {
            topology: &t,
            wprime: &wp,
            w_virtual: &wv,
        };
        for adversary in [Adversary::Random, Adversary::WorstScaled] {
            let r = estimate_contraction(&rule, setup, 4, opts.samples, i, adversary, Some(bound))?;
            let ok = r.within_bound();
            passed &= ok;
            lines.push(format!(
                "{} N={} B={} {adversary:?}: rho_hat {:.4e} vs bound {bound:.4e}",
                if ok { "ok  " } else { "FAIL" },
                t.n_honest(),
                t.n_byzantine(),
                r.rho_hat
            ));
            reports.push(r);
        }
    }
    Ok(CheckReport {
        suite: Suite::Contraction,
        passed,
        lines,
        details: serde_json::to_value(&reports)?,
    })
}

fn consensus(opts: &CheckOptions) -> anyhow::Result<CheckReport> {
    let t = (opts.seed..)
        .map(|s| gen_erdos_renyi(10, 0, 0.7, s))
        .find(|t| t.as_ref().map_or(true, Topology::honest_subgraph_connected))
        .expect("an unbounded search")?;
    let w = metropolis_weights(&t);
    let lambda = spectral_gap(&w).lambda;
    let mut rng = seeded(21 + opts.seed);
    let d = 3;
    let targets: Vec<Vec<f64>> = (0..10).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let problem = QuadraticProblem::new(targets, 0.5)?;
    let mut c = ConsensusConstants {
        lambda,
        rho: 0.0,
        alpha: 0.0,
        delta_in_sq: problem.inner_variation(),
        delta_out_sq: problem.outer_variation(),
        n: t.n_honest(),
        l: QuadraticProblem::SMOOTHNESS,
    };
    c.alpha = c.max_alpha();
    let traces = opts
        .seeds
        .iter()
        .map(|&seed| {
            let cfg = RunConfig::new(
                t.clone(),
                w.clone(),
                AggregatorSpec::WeiMean,
                AttackSpec::None,
                StepSize::Constant(c.alpha),
                300,
                vec![0.0; d],
                seed,
            );
            run(&cfg, &problem).map(|r| r.records)
        })
        .collect::<byzmesh_core::Result<Vec<_>>>()?;
    let report = check_consensus_bound(&traces, &c)?;
    Ok(CheckReport {
        suite: Suite::Consensus,
        passed: report.satisfied,
        lines: vec![format!(
            "lambda {lambda:.4}, alpha {:.4e}, {} seeds: max_k mean H {:.4e} vs bound {:.4e}",
            c.alpha, opts.seeds.len(), report.lhs, report.rhs
        )],
        details: serde_json::to_value(&report)?,
    })
}

fn convergence(opts: &CheckOptions) -> anyhow::Result<CheckReport> {
    let alpha = 0.05;
    let mut lines = Vec::new();
    let mut reports = Vec::new();
    let mut passed = true;
    let mut seed = opts.seed;
    while reports.len() < opts.topologies {
        seed += 1;
        let mut rng = seeded(3000 + seed);
        let n = rng.random_range(10..=14);
        let b = rng.random_range(1..=2);
        let t = gen_erdos_renyi(n, b, 0.8, seed)?;
        let wp = metropolis_weights(&t);
        if !t.honest_subgraph_connected() {
            continue;
        }
        let Some(rho) = ios_rho_bound(&wp, &t) else { continue };
        let chi_sq = chi_squared(&ios_virtual_matrix(&wp, &t)?);
        let targets: Vec<Vec<f64>> = (0..n).map(|_| (0..2).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let problem = QuadraticProblem::new(targets, 0.0)?;
        let x0 = vec![3.0, -3.0];
        let cfg = RunConfig::new(
            t,
            wp,
            AggregatorSpec::Ios {
                q: QEstimate::ByzantineNeighbors,
            },
            AttackSpec::SignFlip,
            StepSize::Constant(alpha),
            300,
            x0.clone(),
            seed,
        );
        let records = run(&cfg, &problem)?.records;
        let c = ConvergenceConstants {
            alpha,
            l: QuadraticProblem::SMOOTHNESS,
            n,
            rho,
            chi_sq,
            delta_in_sq: 0.0,
            delta_out_sq: problem.outer_variation(),
            f0: problem.loss(&x0),
            f_star: problem.optimal_value(),
        };
        let report = check_convergence_bound(&[records], &c)?;
        passed &= report.satisfied;
        lines.push(format!(
            "{} N={n} B={b} IOS/signflip: avg grad norm sq {:.4e} vs bound {:.4e}",
            if report.satisfied { "ok  " } else { "FAIL" },
            report.lhs,
            report.rhs
        ));
        reports.push(report);
    }
    Ok(CheckReport {
        suite: Suite::Convergence,
        passed,
        lines,
        details: serde_json::to_value(&reports)?,
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn fixed_point() -> anyhow::Result<CheckReport> {
    let tol = 1e-4;
    let targets = vec![vec![1.0, -2.0], vec![3.0, 0.5]];
    let t = Topology::from_edges(2, 0, &[(0, 1)])?;
    let w = MixingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]])?;
    let fp = fixed_point_weighted(&w, &targets)?;
    let problem = QuadraticProblem::new(targets, 0.0)?;
    let cfg = RunConfig::new(
        t,
        w,
        AggregatorSpec::WeiMean,
        AttackSpec::None,
        StepSize::InvSqrt(0.9),
        10_000,
        vec![0.0, 0.0],
        1,
    );
    let last = run(&cfg, &problem)?.final_state;
    let err = dist(&last.weighted_mean(&fp.p), &fp.y);
    let off = dist(&fp.y, &problem.optimum());
    let passed = err <= tol && off > tol;
    Ok(CheckReport {
        suite: Suite::FixedPoint,
        passed,
        lines: vec![format!(
            "W = [[1, 0], [0.5, 0.5]]: p = ({:.6}, {:.6}), |p-weighted mean - y| = {err:.3e}, |y - minimizer| = {off:.3e}",
            fp.p[0], fp.p[1]
        )],
        details: serde_json::json!({ "p": fp.p, "y": fp.y, "error": err, "distance_to_minimizer": off }),
    })
}

fn counterexamples() -> anyhow::Result<CheckReport> {
    let mut lines = Vec::new();
    let mut passed = true;
    let mut rules: Vec<AggregatorSpec> = [0.0, 0.3, 0.9].iter().map(|&r| AggregatorSpec::CooMed { r }).collect();
    rules.push("geomed".parse()?);
    rules.push("krum:q=1".parse()?);
    let mut fixtures = Vec::new();
    for rule in &rules {
        let rep = two_castle_fixture(0.0, 1.0, rule, 100)?;
        passed &= rep.stationary;
        lines.push(format!(
            "{} two-castle {rule}: {}",
            if rep.stationary { "ok  " } else { "FAIL" },
            if rep.stationary { "stationary for 100 steps" } else { "moved" }
        ));
        fixtures.push(rep);
    }
    let wei = two_castle_fixture(0.0, 1.0, &AggregatorSpec::WeiMean, 200)?;
    let hit = wei.first_below(1e-10);
    passed &= hit.is_some();
    lines.push(format!(
        "{} two-castle weimean (alpha {TWO_CASTLE_ALPHA:e}): H < 1e-10 at step {}",
        if hit.is_some() { "ok  " } else { "FAIL" },
        hit.map_or("never".into(), |k| k.to_string())
    ));
    fixtures.push(wei);

    let t = gen_two_castle(5, 1)?;
    let w = metropolis_weights(&t);
    let mut rng = seeded(7);
    let targets: Vec<Vec<f64>> = (0..t.n_honest())
        .map(|_| (0..3).map(|_| rng.random_range(10.0..11.0)).collect())
        .collect();
    let problem = QuadraticProblem::new(targets, 0.1)?;
    let base = |rule, attack| RunConfig::new(t.clone(), w.clone(), rule, attack, StepSize::Constant(0.05), 500, vec![10.5; 3], 3);
    let attacked = trajectory(&base(AggregatorSpec::WeiMean, AttackSpec::Isolation), &problem as &dyn Problem)?;
    let alone = trajectory(&base(AggregatorSpec::NoComm, AttackSpec::None), &problem)?;
    let first_diff = attacked.iter().zip(&alone).position(|(a, b)| {
        a.rows()
            .iter()
            .flatten()
            .zip(b.rows().iter().flatten())
            .any(|(x, y)| x.to_bits() != y.to_bits())
    });
    passed &= first_diff.is_none();
    lines.push(match first_diff {
        None => "ok   isolation + weimean matches nocomm bitwise for 500 steps".to_string(),
        Some(k) => format!("FAIL isolation + weimean departs from nocomm at step {k}"),
    });
    Ok(CheckReport {
        suite: Suite::Counterexamples,
        passed,
        lines,
        details: serde_json::json!({ "two_castle": fixtures, "isolation_first_difference": first_diff }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::EACH.into_iter().chain([Suite::All]) {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn fixed_point_suite_passes() {
        let r = run_suite(Suite::FixedPoint, &CheckOptions::default()).unwrap();
        assert!(r[0].passed, "{:?}", r[0].lines);
    }

    #[test]
    fn weimean_fails_contraction() {
        let opts = CheckOptions {
            rule: Some(AggregatorSpec::WeiMean),
            samples: 200,
            topologies: 1,
            ..CheckOptions::default()
        };
        let r = run_suite(Suite::Contraction, &opts).unwrap();
        assert!(!r[0].passed);
    }
}
