use std::hint::black_box;
use std::path::Path;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use chainload::announce::OfferEntry;
use chainload::assignment::{self, DistanceMetric};
use chainload::bundle::{BundleId, BundleStore};
use chainload::scenario::Scenario;
use chainload::{workflow, Bundle, BundleKind, CapabilityVector, NodeAddress, Position, RatingWeights, ServiceOffer, Strategy};

fn offers(n: u64) -> Vec<OfferEntry> {
    (0..n)
        .map(|i| OfferEntry {
            offer: ServiceOffer {
                worker: NodeAddress(i + 1),
                service_name: "detect".into(),
                param_count: 1,
                capabilities: CapabilityVector {
                    cpu: 1.0 + (i % 3) as f64,
                    memory: 512.0 * (1 + i % 4) as f64,
                    disk: 4096.0,
                    energy: (i * 7 % 100) as f64,
                    position: Position { x: 100.0 * i as f64, y: 0.0 },
                },
                issued_at: i as f64,
            },
            received_at: (n - i) as f64,
        })
        .collect()
}

fn assignment(c: &mut Criterion) {
    let entries = offers(60);
    let refs: Vec<_> = entries.iter().collect();
    let plan = workflow::parse("any detect in [cpu=1,memory=1024,disk=2048,energy=20]").unwrap();
    let req = &plan.tasks[0].requirements;
    let metric = DistanceMetric::Ring { circumference_m: 6000.0 };
    let origin = Position::default();
    let weights = RatingWeights::default();
    c.bench_function("rank_60_offers", |b| {
        b.iter(|| {
            let capable = assignment::capability_filter(black_box(&refs), req);
            assignment::rank(&capable, req, &weights, &origin, &metric)
        })
    });
    let capable = assignment::capability_filter(&refs, req);
    let ranked = assignment::rank(&capable, req, &weights, &origin, &metric);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for st in [Strategy::Best, Strategy::Spread, Strategy::Recent, Strategy::Random] {
        c.bench_function(&format!("select_{}", st.name()), |b| b.iter(|| assignment::select(black_box(&ranked), st, &mut rng)));
    }
}

fn store(c: &mut Criterion) {
    c.bench_function("store_insert_prune_1000", |b| {
        b.iter(|| {
            let mut s = BundleStore::new();
            for seq in 0..1000u64 {
                s.insert(Bundle {
                    id: BundleId { source: NodeAddress(1), seq },
                    source: NodeAddress(1),
                    destination: None,
                    kind: BundleKind::Offer,
                    workflow: None,
                    payload: bytes::Bytes::from_static(b"offer"),
                    created_at: seq as f64,
                    ttl_seconds: 120.0,
                });
            }
            s.prune_expired(black_box(620.0))
        })
    });
}

fn ring_run(c: &mut Criterion) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/ring-homogeneous.toml");
    let scenario = Scenario::from_file(&path).unwrap();
    let mut g = c.benchmark_group("simulation");
    g.sample_size(10);
    g.bench_function("ring_homogeneous_one_workflow", |b| b.iter(|| scenario.run()));
    g.finish();
}

criterion_group!(benches, assignment, store, ring_run);
criterion_main!(benches);
