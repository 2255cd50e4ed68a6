//! Parallel vs sequential throughput on the two data-parallel hot spots:
//! replication batches and per-driver candidate generation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use rideshare_core::matching::{build_candidates, DriverInput, PassengerInput};
use rideshare_core::scenario::{
    self, build_network, run_replications, run_replications_seq, ScenarioConfig,
};

fn bench_cfg() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.scenario.passengers = 60;
    cfg.scenario.drivers = 48;
    cfg.scenario.warmup = false;
    cfg.scenario.replications = 8;
    cfg.scenario.master_seed = 7;
    cfg
}

fn replications(c: &mut Criterion) {
    let cfg = bench_cfg();
    let (net, od) = build_network(&cfg).expect("grid network");

    let mut group = c.benchmark_group("replication_batch");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("parallel", cfg.scenario.replications), |b| {
        b.iter(|| run_replications(&cfg, &net, &od).unwrap().len())
    });
    group.bench_function(BenchmarkId::new("sequential", cfg.scenario.replications), |b| {
        b.iter(|| run_replications_seq(&cfg, &net, &od).unwrap().len())
    });
    group.finish();
}

fn candidate_generation(c: &mut Criterion) {
    let cfg = bench_cfg();
    let (net, od) = build_network(&cfg).expect("grid network");
    let pop = scenario::sample_population(&cfg, &od, 11).expect("population");

    // Stage a mid-run pool: drivers at their origins, passengers waiting.
    let drivers: Vec<DriverInput> = pop.batches[0]
        .drivers
        .iter()
        .map(|d| DriverInput {
            snapshot: rideshare_core::scheduling::DriverSnapshot {
                driver: d.id,
                position: d.origin,
                available_at: d.depart_time,
                destination: d.destination,
                capacity: d.capacity,
                occupancy: 0,
                effective_latest_arrival: d.depart_time + 120.0,
            },
            current_vkt: 10.0,
            retained: vec![],
            fixed_dropoffs: vec![],
            remaining_passenger_slots: 4,
        })
        .collect();
    let passengers: Vec<PassengerInput> = pop.batches[0]
        .passengers
        .iter()
        .map(|p| {
            let sp = net
                .shortest_itinerary(p.origin, p.destination, p.depart_time)
                .expect("routable");
            PassengerInput {
                pair: rideshare_core::scheduling::CandidatePair {
                    passenger: p.id,
                    pickup: rideshare_core::domain::Stop {
                        node: p.origin,
                        kind: rideshare_core::domain::StopKind::Pickup,
                        agent: p.id,
                        earliest: p.depart_time,
                        latest: p.depart_time + 30.0,
                        seat_delta: 1,
                    },
                    dropoff: rideshare_core::domain::Stop {
                        node: p.destination,
                        kind: rideshare_core::domain::StopKind::DropOff,
                        agent: p.id,
                        earliest: p.depart_time,
                        latest: f64::INFINITY,
                        seat_delta: -1,
                    },
                    max_ride_min: sp.duration() + 30.0,
                },
                sp_distance_km: sp.distance_km,
            }
        })
        .collect();

    let mut group = c.benchmark_group("candidate_generation");
    group.bench_function("parallel_feature_path", |b| {
        b.iter(|| build_candidates(&drivers, &passengers, &net, 2).combos.len())
    });
    group.finish();
}

criterion_group!(benches, replications, candidate_generation);
criterion_main!(benches);
