//! Aggregation cost per honest worker on two-castle(5,1) neighborhoods at
//! MNIST model size, plus the contraction estimator.

use std::hint::black_box;

use byzmesh_core::aggregation::{aggregate, AggregationInput, Message, NeighborWeights, RoundInfo};
use byzmesh_core::analysis::{estimate_contraction, ios_rho_bound, Adversary, ContractionSetup};
use byzmesh_core::graph::{gen_erdos_renyi, gen_two_castle, ios_virtual_matrix, metropolis_weights};
use byzmesh_core::AggregatorSpec;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DIM: usize = 7850;

fn rules(c: &mut Criterion) {
    let t = gen_two_castle(5, 1).unwrap();
    let w = metropolis_weights(&t);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let models: Vec<Vec<f64>> = (0..t.size())
        .map(|_| (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let n = 0;
    let weights = NeighborWeights::from_matrix(&w, &t, n);
    let round = RoundInfo {
        alpha: 0.1,
        byzantine_neighbors: t.byzantine_neighbors(n).len(),
    };
    let specs = [
        "weimean",
        "coomed",
        "geomed",
        "krum:q=auto",
        "trimean:q=auto",
        "faba:q=auto",
        "cc:tau=0.3",
        "scc:tau=0.3",
        "drsa:cr=0.5",
        "ios:q=auto",
    ];
    let mut group = c.benchmark_group("aggregate_d7850");
    for s in specs {
        let spec: AggregatorSpec = s.parse().unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(s), &spec, |b, spec| {
            b.iter(|| {
                let messages = t
                    .neighbors(n)
                    .into_iter()
                    .map(|m| Message {
                        from: m,
                        value: &models[m],
                    })
                    .collect();
                let input = AggregationInput::new(n, &models[n], messages).with_weights(&weights);
                black_box(aggregate(spec, &input, round).unwrap())
            })
        });
    }
    group.finish();
}

fn contraction(c: &mut Criterion) {
    let t = (0..)
        .map(|s| gen_erdos_renyi(15, 2, 0.7, s).unwrap())
        .find(|t| ios_rho_bound(&metropolis_weights(t), t).is_some())
        .unwrap();
    let wp = metropolis_weights(&t);
    let wv = ios_virtual_matrix(&wp, &t).unwrap();
    let setup = ContractionSetup {
        topology: &t,
        wprime: &wp,
        w_virtual: &wv,
    };
    let rule = AggregatorSpec::Ios {
        q: byzmesh_core::QEstimate::ByzantineNeighbors,
    };
    c.bench_function("ios_contraction_100_samples", |b| {
        b.iter(|| black_box(estimate_contraction(&rule, setup, 4, 100, 0, Adversary::WorstScaled, None).unwrap()))
    });
}

criterion_group!(benches, rules, contraction);
criterion_main!(benches);
