//! Just-in-time worker assignment: capability filtering, weighted rating,
//! ranking and the four selection strategies.
//!
//! A worker's score is the weighted sum over required resource metrics of
//! `min(capability / requirement, CAP_RATIO)` plus a proximity term
//! `weight_distance / (1 + d / R)`, where `d` is the distance from the
//! assigning node and `R` the task's distance requirement (default 100 m).
//! The spreading strategy draws `|z|` for `z ~ N(0, 1)` and picks rank
//! `min(floor(|z|), n - 1)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::announce::{CapabilityVector, OfferEntry, ServiceOffer};
use crate::bundle::NodeAddress;
use crate::simnet::Position;
use crate::workflow::{Metric, Requirements};

/// Upper bound on any single capability/requirement ratio.
pub const CAP_RATIO: f64 = 10.0;
/// Normalisation radius when a task gives no distance requirement.
pub const DEFAULT_RADIUS_M: f64 = 100.0;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatingWeights {
    pub energy: f64,
    pub distance: f64,
    pub cpu: f64,
    pub memory: f64,
    pub disk: f64,
}

impl Default for RatingWeights {
    /// Energy and distance 30 % each, CPU 20 %, memory and disk 10 % each.
    fn default() -> Self {
        Self { energy: 0.3, distance: 0.3, cpu: 0.2, memory: 0.1, disk: 0.1 }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum WeightsError {
    #[error("weight for {0} must lie in [0, 1]")]
    Range(&'static str),
    #[error("weights sum to {0}, expected 1")]
    Sum(f64),
}

impl RatingWeights {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Cpu => self.cpu,
            Metric::Memory => self.memory,
            Metric::Disk => self.disk,
            Metric::Energy => self.energy,
            Metric::Distance => self.distance,
        }
    }

    pub fn validate(&self) -> Result<(), WeightsError> {
        for m in Metric::ALL {
            let w = self.get(m);
            if !(0.0..=1.0).contains(&w) {
                return Err(WeightsError::Range(m.name()));
            }
        }
        let sum: f64 = Metric::ALL.iter().map(|m| self.get(*m)).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(WeightsError::Sum(sum));
        }
        Ok(())
    }
}

fn capability(caps: &CapabilityVector, m: Metric) -> f64 {
    match m {
        Metric::Cpu => caps.cpu,
        Metric::Memory => caps.memory,
        Metric::Disk => caps.disk,
        Metric::Energy => caps.energy,
        Metric::Distance => f64::INFINITY,
    }
}

/// Whether `caps` meets every resource requirement. Distance never disqualifies.
pub fn is_capable(caps: &CapabilityVector, req: &Requirements) -> bool {
    req.iter()
        .filter(|(m, _)| **m != Metric::Distance)
        .all(|(m, need)| capability(caps, *m) >= *need)
}

pub fn capability_filter<'a>(offers: &[&'a OfferEntry], req: &Requirements) -> Vec<&'a OfferEntry> {
    offers.iter().copied().filter(|e| is_capable(&e.offer.capabilities, req)).collect()
}

/// How distances between positions are measured.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistanceMetric {
    Euclidean,
    /// Nodes laid out along `x` with wrap-around at `circumference_m`, so the
    /// distance is hop count times spacing on a ring.
    Ring { circumference_m: f64 },
}

impl DistanceMetric {
    pub fn distance(&self, a: &Position, b: &Position) -> f64 {
        match self {
            DistanceMetric::Euclidean => a.distance(b),
            DistanceMetric::Ring { circumference_m } => {
                let dx = (a.x - b.x).abs() % circumference_m;
                dx.min(circumference_m - dx)
            }
        }
    }
}

pub fn proximity(distance_m: f64, radius_m: f64) -> f64 {
    1.0 / (1.0 + distance_m / radius_m)
}

/// Scores a capability vector against requirements at a given distance.
pub fn rate(caps: &CapabilityVector, req: &Requirements, weights: &RatingWeights, distance_m: f64) -> f64 {
    let resources: f64 = req
        .iter()
        .filter(|(m, _)| **m != Metric::Distance)
        .map(|(m, need)| weights.get(*m) * (capability(caps, *m) / need).min(CAP_RATIO))
        .sum();
    let radius = req.get(&Metric::Distance).copied().unwrap_or(DEFAULT_RADIUS_M);
    resources + weights.distance * proximity(distance_m, radius)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkerRating {
    pub worker: NodeAddress,
    pub score: f64,
    pub offer: ServiceOffer,
    pub received_at: f64,
}

/// Rates and sorts candidates: descending score, ties by ascending address.
pub fn rank(
    offers: &[&OfferEntry],
    req: &Requirements,
    weights: &RatingWeights,
    origin: &Position,
    metric: &DistanceMetric,
) -> Vec<WorkerRating> {
    let mut out: Vec<_> = offers
        .iter()
        .map(|e| {
            let d = metric.distance(origin, &e.offer.capabilities.position);
            WorkerRating {
                worker: e.offer.worker,
                score: rate(&e.offer.capabilities, req, weights, d),
                offer: e.offer.clone(),
                received_at: e.received_at,
            }
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.worker.cmp(&b.worker)));
    out
}

/// Maps a standard normal draw onto a rank index in `[0, n)`.
pub fn folded_index(z: f64, n: usize) -> usize {
    assert!(n >= 1, "need at least one candidate");
    (z.abs().floor() as usize).min(n - 1)
}

/// Draws a rank index from the folded standard normal law.
pub fn folded_normal_index<R: Rng + ?Sized>(n: usize, rng: &mut R) -> usize {
    let z: f64 = rng.sample(StandardNormal);
    folded_index(z, n)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Recent,
    Random,
    Best,
    Spread,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Recent, Strategy::Random, Strategy::Best, Strategy::Spread];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Recent => "recent",
            Strategy::Random => "random",
            Strategy::Best => "best",
            Strategy::Spread => "spread",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown strategy `{s}` (expected recent, random, best or spread)"))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("no capable worker offers `{service}`")]
pub struct SelectionError {
    pub service: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub worker: NodeAddress,
    /// Position of the chosen worker in the rating order.
    pub rank: usize,
    pub candidates: usize,
}

/// Picks one worker from an already ranked, capability-filtered list.
///
/// `recent` takes the offer that arrived last locally (ties by address);
/// `random` is uniform; `best` is rank 0; `spread` draws a folded-normal rank.
pub fn select<R: Rng + ?Sized>(ranked: &[WorkerRating], strategy: Strategy, rng: &mut R) -> Option<Selection> {
    if ranked.is_empty() {
        return None;
    }
    let rank = match strategy {
        Strategy::Best => 0,
        Strategy::Spread => folded_normal_index(ranked.len(), rng),
        Strategy::Random => {
            // uniform over the filtered offers in address order, independent of rating
            let mut by_addr: Vec<usize> = (0..ranked.len()).collect();
            by_addr.sort_by_key(|&i| ranked[i].worker);
            by_addr[rng.random_range(0..ranked.len())]
        }
        Strategy::Recent => {
            let mut best = 0;
            for (i, r) in ranked.iter().enumerate().skip(1) {
                let cur = &ranked[best];
                let newer = r.received_at > cur.received_at
                    || (r.received_at == cur.received_at && r.worker < cur.worker);
                if newer {
                    best = i;
                }
            }
            best
        }
    };
    Some(Selection { worker: ranked[rank].worker, rank, candidates: ranked.len() })
}

/// Everything an assigning node contributes to a decision.
#[derive(Clone, Debug)]
pub struct AssignContext<'a> {
    pub origin: Position,
    pub weights: &'a RatingWeights,
    pub metric: &'a DistanceMetric,
    pub strategy: Strategy,
    /// Never chosen: the assigning node itself and workers that already failed.
    pub exclude: &'a [NodeAddress],
}

/// Full pipeline: filter, exclude, rank, select.
pub fn assign<R: Rng + ?Sized>(
    service: &str,
    offers: &[&OfferEntry],
    req: &Requirements,
    ctx: &AssignContext<'_>,
    rng: &mut R,
) -> Result<Selection, SelectionError> {
    let candidates: Vec<_> = capability_filter(offers, req)
        .into_iter()
        .filter(|e| !ctx.exclude.contains(&e.offer.worker))
        .collect();
    let ranked = rank(&candidates, req, ctx.weights, &ctx.origin, ctx.metric);
    select(&ranked, ctx.strategy, rng).ok_or_else(|| SelectionError { service: service.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Strategy;
    use proptest::prelude::*;
    use proptest::strategy::Strategy as _;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn caps(cpu: f64, memory: f64, energy: f64, pos: (f64, f64)) -> CapabilityVector {
        CapabilityVector { cpu, memory, disk: 100.0, energy, position: Position::new(pos.0, pos.1) }
    }

    fn entry(worker: u64, c: CapabilityVector, received_at: f64) -> OfferEntry {
        OfferEntry {
            offer: ServiceOffer { worker: NodeAddress(worker), service_name: "s".into(), param_count: 1, capabilities: c, issued_at: 0.0 },
            received_at,
        }
    }

    fn req(pairs: &[(Metric, f64)]) -> Requirements {
        pairs.iter().copied().collect()
    }

    fn only(m: Metric) -> RatingWeights {
        let mut w = RatingWeights { energy: 0.0, distance: 0.0, cpu: 0.0, memory: 0.0, disk: 0.0 };
        match m {
            Metric::Cpu => w.cpu = 1.0,
            Metric::Memory => w.memory = 1.0,
            Metric::Disk => w.disk = 1.0,
            Metric::Energy => w.energy = 1.0,
            Metric::Distance => w.distance = 1.0,
        }
        w
    }

    #[test]
    fn default_weights_are_valid() {
        RatingWeights::default().validate().unwrap();
        let bad = RatingWeights { cpu: 0.5, ..Default::default() };
        assert!(matches!(bad.validate(), Err(WeightsError::Sum(_))));
    }

    #[test]
    fn filter_examples() {
        let weak = entry(1, caps(0.5, 10.0, 10.0, (0.0, 0.0)), 0.0);
        let strong = entry(2, caps(2.0, 1.0, 10.0, (0.0, 0.0)), 0.0);
        let r = req(&[(Metric::Cpu, 1.0), (Metric::Distance, 5.0)]);
        let kept = capability_filter(&[&weak, &strong], &r);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].offer.worker, NodeAddress(2), "memory absent from requirements");
    }

    #[test]
    fn rating_examples() {
        let c = caps(1.0, 0.0, 0.0, (0.0, 0.0));
        assert!((rate(&c, &req(&[(Metric::Cpu, 1.0)]), &only(Metric::Cpu), 0.0) - 1.0).abs() < 1e-12);

        // cpu weight 0.2, capability 2 over requirement 1, distance weight zero
        let w = RatingWeights { energy: 0.3, distance: 0.0, cpu: 0.2, memory: 0.4, disk: 0.1 };
        let c = caps(2.0, 0.0, 0.0, (0.0, 0.0));
        assert!((rate(&c, &req(&[(Metric::Cpu, 1.0)]), &w, 0.0) - 0.4).abs() < 1e-12);

        let w = only(Metric::Distance);
        let r = req(&[(Metric::Distance, 80.0)]);
        assert!((rate(&c, &r, &w, 0.0) - 1.0).abs() < 1e-12);
        assert!((rate(&c, &r, &w, 80.0) - 0.5).abs() < 1e-12);
        assert!((rate(&c, &Requirements::new(), &w, DEFAULT_RADIUS_M) - 0.5).abs() < 1e-12);

        let huge = caps(1e9, 0.0, 0.0, (0.0, 0.0));
        assert_eq!(rate(&huge, &req(&[(Metric::Cpu, 1.0)]), &only(Metric::Cpu), 0.0), CAP_RATIO);
    }

    #[test]
    fn ring_metric_wraps() {
        let m = DistanceMetric::Ring { circumference_m: 1200.0 };
        let at = |i: f64| Position::new(i * 100.0, 0.0);
        assert_eq!(m.distance(&at(0.0), &at(1.0)), 100.0);
        assert_eq!(m.distance(&at(0.0), &at(11.0)), 100.0);
        assert_eq!(m.distance(&at(0.0), &at(6.0)), 600.0);
        assert_eq!(m.distance(&at(2.0), &at(10.0)), 400.0);
    }

    #[test]
    fn rank_orders_and_breaks_ties_by_address() {
        let r = req(&[(Metric::Cpu, 1.0)]);
        let w = only(Metric::Cpu);
        let a = entry(5, caps(1.2, 0.0, 0.0, (0.0, 0.0)), 0.0);
        let b = entry(1, caps(0.8, 0.0, 0.0, (0.0, 0.0)), 0.0);
        let ranked = rank(&[&b, &a], &r, &w, &Position::default(), &DistanceMetric::Euclidean);
        assert_eq!(ranked.iter().map(|x| x.worker.0).collect::<Vec<_>>(), [5, 1]);

        let c = entry(9, caps(1.0, 0.0, 0.0, (0.0, 0.0)), 0.0);
        let d = entry(3, caps(1.0, 0.0, 0.0, (0.0, 0.0)), 0.0);
        let ranked = rank(&[&c, &d], &r, &w, &Position::default(), &DistanceMetric::Euclidean);
        assert_eq!(ranked.iter().map(|x| x.worker.0).collect::<Vec<_>>(), [3, 9]);
        assert!(rank(&[], &r, &w, &Position::default(), &DistanceMetric::Euclidean).is_empty());
    }

    #[test]
    fn folded_index_mapping() {
        assert_eq!(folded_index(0.3, 5), 0);
        assert_eq!(folded_index(-0.99, 5), 0);
        assert_eq!(folded_index(-1.5, 5), 1);
        assert_eq!(folded_index(2.7, 5), 2);
        assert_eq!(folded_index(7.0, 2), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| folded_normal_index(1, &mut rng) == 0));
    }

    #[test]
    fn strategies_on_small_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = req(&[(Metric::Cpu, 1.0)]);
        let a = entry(1, caps(1.2, 0.0, 0.0, (0.0, 0.0)), 5.0);
        let b = entry(2, caps(0.8 + 0.2, 0.0, 0.0, (0.0, 0.0)), 9.0);
        let ranked = rank(&[&a, &b], &r, &only(Metric::Cpu), &Position::default(), &DistanceMetric::Euclidean);
        for _ in 0..50 {
            assert_eq!(select(&ranked, Strategy::Best, &mut rng).unwrap().worker, NodeAddress(1));
            assert_eq!(select(&ranked, Strategy::Recent, &mut rng).unwrap().worker, NodeAddress(2));
        }
        assert_eq!(select(&ranked[..1], Strategy::Spread, &mut rng).unwrap().worker, NodeAddress(1));
        assert!(select(&[], Strategy::Best, &mut rng).is_none());
    }

    #[test]
    fn assign_excludes_and_reports_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = req(&[(Metric::Cpu, 1.0)]);
        let a = entry(1, caps(2.0, 0.0, 0.0, (0.0, 0.0)), 0.0);
        let b = entry(2, caps(1.5, 0.0, 0.0, (0.0, 0.0)), 0.0);
        let weak = entry(3, caps(0.1, 0.0, 0.0, (0.0, 0.0)), 0.0);
        let weights = RatingWeights::default();
        let exclude = [NodeAddress(1)];
        let ctx = AssignContext { origin: Position::default(), weights: &weights, metric: &DistanceMetric::Euclidean, strategy: Strategy::Best, exclude: &exclude };
        assert_eq!(assign("s", &[&a, &b, &weak], &r, &ctx, &mut rng).unwrap().worker, NodeAddress(2));
        let all = [NodeAddress(1), NodeAddress(2)];
        let ctx = AssignContext { exclude: &all, ..ctx };
        for st in Strategy::ALL {
            let ctx = AssignContext { strategy: st, ..ctx.clone() };
            assert_eq!(assign("s", &[&a, &b, &weak], &r, &ctx, &mut rng).unwrap_err().service, "s");
        }
    }

    #[test]
    fn spread_over_eleven_equal_workers_favours_rank_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let es: Vec<_> = (1..12).map(|w| entry(w, caps(1.0, 1.0, 1.0, (0.0, 0.0)), 0.0)).collect();
        let refs: Vec<_> = es.iter().collect();
        let ranked = rank(&refs, &req(&[(Metric::Cpu, 1.0)]), &RatingWeights::default(), &Position::default(), &DistanceMetric::Euclidean);
        let n = 10_000;
        let zero = (0..n).filter(|_| select(&ranked, Strategy::Spread, &mut rng).unwrap().rank == 0).count();
        let freq = zero as f64 / n as f64;
        assert!((freq - 0.6827).abs() <= 0.02, "rank-0 frequency {freq}");
    }

    fn arb_entry(worker: u64) -> impl proptest::strategy::Strategy<Value = OfferEntry> {
        (0.5f64..50.0, 0.5f64..50.0, 0.5f64..50.0, 0.5f64..50.0, -500.0f64..500.0, -500.0f64..500.0).prop_map(move |(cpu, memory, disk, energy, x, y)| {
            entry(worker, CapabilityVector { cpu, memory, disk, energy, position: Position::new(x, y) }, 0.0)
        })
    }

    fn full_req() -> Requirements {
        req(&[(Metric::Cpu, 1.0), (Metric::Memory, 1.0), (Metric::Disk, 1.0), (Metric::Energy, 1.0), (Metric::Distance, 100.0)])
    }

    fn order(es: &[OfferEntry], w: &RatingWeights) -> Vec<NodeAddress> {
        let refs: Vec<_> = es.iter().collect();
        rank(&refs, &full_req(), w, &Position::default(), &DistanceMetric::Euclidean).into_iter().map(|r| r.worker).collect()
    }

    proptest! {
        #[test]
        fn scaling_resources_preserves_order(es in (2usize..8).prop_flat_map(|n| {
            (0..n as u64).map(|w| (0.5f64..9.9, 0.5f64..9.9, 0.5f64..9.9, 0.5f64..9.9).prop_map(move |(cpu, memory, disk, energy)| {
                entry(w, CapabilityVector { cpu, memory, disk, energy, position: Position::default() }, 0.0)
            })).collect::<Vec<_>>()
        }), k in 0.1f64..1.0) {
            // no distance weight and no ratio saturation: order is scale-invariant
            let w = RatingWeights { energy: 0.4, distance: 0.0, cpu: 0.3, memory: 0.2, disk: 0.1 };
            let scaled: Vec<_> = es.iter().cloned().map(|mut e| {
                let c = &mut e.offer.capabilities;
                c.cpu *= k; c.memory *= k; c.disk *= k; c.energy *= k;
                e
            }).collect();
            let scores = |v: &[OfferEntry]| -> Vec<f64> {
                v.iter().map(|e| rate(&e.offer.capabilities, &full_req(), &w, 0.0)).collect()
            };
            let s = scores(&es);
            let gap = s.iter().enumerate().flat_map(|(i, a)| s[i + 1..].iter().map(move |b| (a - b).abs())).fold(f64::INFINITY, f64::min);
            prop_assume!(gap > 1e-9);
            prop_assert_eq!(order(&es, &w), order(&scaled, &w));
        }

        #[test]
        fn raising_a_capability_never_lowers_rank(es in (2usize..8).prop_flat_map(|n| {
            (0..n as u64).map(arb_entry).collect::<Vec<_>>()
        }), bump in 0.0f64..20.0, metric in 0usize..4) {
            let w = RatingWeights::default();
            let before = order(&es, &w).iter().position(|a| *a == NodeAddress(0)).unwrap();
            let mut up = es.clone();
            let c = &mut up[0].offer.capabilities;
            match metric { 0 => c.cpu += bump, 1 => c.memory += bump, 2 => c.disk += bump, _ => c.energy += bump }
            let after = order(&up, &w).iter().position(|a| *a == NodeAddress(0)).unwrap();
            prop_assert!(after <= before);
        }

        #[test]
        fn nearer_equal_worker_ranks_higher(d1 in 0.0f64..1000.0, gap in 0.01f64..1000.0) {
            let c = |x| CapabilityVector { cpu: 2.0, memory: 2.0, disk: 2.0, energy: 2.0, position: Position::new(x, 0.0) };
            // the nearer one has the larger address, so only distance can put it first
            let far = entry(1, c(d1 + gap), 0.0);
            let near = entry(2, c(d1), 0.0);
            let got = order(&[far, near], &RatingWeights::default());
            prop_assert_eq!(got[0], NodeAddress(2));
        }

        #[test]
        fn spread_with_small_draw_equals_best(z in -0.999f64..0.999, n in 1usize..20) {
            prop_assert_eq!(folded_index(z, n), 0);
        }

        #[test]
        fn select_stays_within_filtered_set(es in (1usize..8).prop_flat_map(|n| {
            (0..n as u64).map(arb_entry).collect::<Vec<_>>()
        }), seed in any::<u64>(), st in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = req(&[(Metric::Cpu, 10.0)]);
            let refs: Vec<_> = es.iter().collect();
            let weights = RatingWeights::default();
            let ctx = AssignContext { origin: Position::default(), weights: &weights, metric: &DistanceMetric::Euclidean, strategy: Strategy::ALL[st], exclude: &[] };
            if let Ok(sel) = assign("s", &refs, &r, &ctx, &mut rng) {
                let chosen = es.iter().find(|e| e.offer.worker == sel.worker).unwrap();
                prop_assert!(chosen.offer.capabilities.cpu >= 10.0);
            } else {
                prop_assert!(es.iter().all(|e| e.offer.capabilities.cpu < 10.0));
            }
        }
    }
}
