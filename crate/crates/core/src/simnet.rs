//! Discrete-event opportunistic network: positions, mobility, disc-range or
//! adjacency contacts, serialized per-link transfers and epidemic exchange.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::{Bundle, BundleId};

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub bandwidth_bps: f64,
    pub latency_s: f64,
}

impl Default for LinkModel {
    /// 54 Mbit/s with 20 ms delay.
    fn default() -> Self {
        Self { bandwidth_bps: 54e6, latency_s: 0.020 }
    }
}

impl LinkModel {
    /// `latency + 8·size / bandwidth`, in seconds.
    pub fn transfer_duration(&self, size_bytes: u64) -> f64 {
        self.latency_s + (8.0 * size_bytes as f64) / self.bandwidth_bps
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaypointParams {
    pub area_width: f64,
    pub area_height: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub pause_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MobilityModel {
    Static(Vec<Position>),
    RandomWaypoint(WaypointParams),
}

/// One node walking the random waypoint model.
#[derive(Clone, Debug)]
pub struct Walker {
    pub position: Position,
    target: Position,
    speed: f64,
    pause_left: f64,
}

impl Walker {
    pub fn spawn<R: Rng>(params: &WaypointParams, rng: &mut R) -> Self {
        let position = uniform_point(params, rng);
        let mut w = Walker { position, target: position, speed: 0.0, pause_left: 0.0 };
        w.next_leg(params, rng);
        w
    }

    fn next_leg<R: Rng>(&mut self, params: &WaypointParams, rng: &mut R) {
        self.target = uniform_point(params, rng);
        self.speed = if params.speed_max > params.speed_min {
            rng.random_range(params.speed_min..=params.speed_max)
        } else {
            params.speed_min
        };
    }

    /// Moves for `dt` seconds, pausing on arrival and then picking a new leg.
    pub fn advance<R: Rng>(&mut self, dt: f64, params: &WaypointParams, rng: &mut R) {
        let mut left = dt;
        while left > 0.0 {
            if self.pause_left > 0.0 {
                let p = self.pause_left.min(left);
                self.pause_left -= p;
                left -= p;
                if self.pause_left <= 0.0 {
                    self.next_leg(params, rng);
                }
                continue;
            }
            let remaining = self.position.distance(&self.target);
            let reach = self.speed * left;
            if reach < remaining {
                let f = reach / remaining;
                self.position.x += (self.target.x - self.position.x) * f;
                self.position.y += (self.target.y - self.position.y) * f;
                return;
            }
            left -= if self.speed > 0.0 { remaining / self.speed } else { left };
            self.position = self.target;
            self.pause_left = if params.pause_max > 0.0 {
                rng.random_range(0.0..=params.pause_max)
            } else {
                0.0
            };
            if self.pause_left <= 0.0 {
                self.next_leg(params, rng);
            }
        }
    }
}

fn uniform_point<R: Rng>(params: &WaypointParams, rng: &mut R) -> Position {
    Position::new(
        rng.random_range(0.0..=params.area_width),
        rng.random_range(0.0..=params.area_height),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub enum ContactModel {
    /// Disc model: in contact iff distance ≤ range.
    Range(f64),
    /// Explicit symmetric neighbour sets.
    Adjacency(Vec<BTreeSet<usize>>),
}

impl ContactModel {
    /// Ring of `n` nodes where node `i` neighbours `i ± 1 mod n`.
    pub fn ring(n: usize) -> Self {
        let adj = (0..n)
            .map(|i| {
                let mut s = BTreeSet::new();
                if n > 1 {
                    s.insert((i + 1) % n);
                    s.insert((i + n - 1) % n);
                }
                s
            })
            .collect();
        ContactModel::Adjacency(adj)
    }

    pub fn in_contact(&self, a: usize, b: usize, positions: &[Position]) -> bool {
        if a == b {
            return false;
        }
        match self {
            ContactModel::Range(r) => positions[a].distance(&positions[b]) <= *r,
            ContactModel::Adjacency(adj) => adj[a].contains(&b),
        }
    }
}

/// Time-ordered queue; equal timestamps pop in insertion order.
#[derive(Debug)]
pub struct EventQueue<E> {
    heap: BinaryHeap<Scheduled<E>>,
    seq: u64,
    now: f64,
}

#[derive(Debug)]
struct Scheduled<E> {
    at: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<E> Eq for Scheduled<E> {}
impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Scheduled<E> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.total_cmp(&self.at).then_with(|| other.seq.cmp(&self.seq))
    }
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self { heap: BinaryHeap::new(), seq: 0, now: 0.0 }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    /// Schedules at an absolute time; times in the past are clamped to now.
    pub fn push(&mut self, at: f64, event: E) {
        let at = if at < self.now { self.now } else { at };
        self.heap.push(Scheduled { at, seq: self.seq, event });
        self.seq += 1;
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|s| s.at)
    }

    pub fn pop(&mut self) -> Option<(f64, E)> {
        let s = self.heap.pop()?;
        self.now = s.at;
        Some((s.at, s.event))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// Read access the network needs from a node to run anti-entropy.
pub trait Replica {
    fn holds(&self, id: &BundleId) -> bool;
    /// Live bundles this node can offer to a peer.
    fn offerable(&self, now: f64) -> Vec<&Bundle>;
    /// Whether this node would keep `bundle` if it arrived.
    fn wants(&self, bundle: &Bundle, now: f64) -> bool;
}

pub type TransferId = u64;

#[derive(Clone, Debug)]
pub struct Transfer {
    pub from: usize,
    pub to: usize,
    pub bundle: Bundle,
    pub started_at: f64,
    pub completes_at: f64,
    link: (usize, usize),
    generation: u64,
}

#[derive(Clone, Debug)]
struct LinkState {
    generation: u64,
    busy_until: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetCounters {
    pub transfers_started: u64,
    pub transfers_completed: u64,
    pub transfers_aborted: u64,
    pub bytes_delivered: u64,
}

/// Node geometry, contacts and in-flight transfers.
#[derive(Debug)]
pub struct Network {
    pub link: LinkModel,
    pub contacts: ContactModel,
    positions: Vec<Position>,
    walkers: Option<(WaypointParams, Vec<Walker>)>,
    links: BTreeMap<(usize, usize), LinkState>,
    next_generation: u64,
    in_flight: BTreeMap<TransferId, Transfer>,
    pending: BTreeSet<(usize, BundleId)>,
    next_transfer: TransferId,
    pub counters: NetCounters,
}

fn key(a: usize, b: usize) -> (usize, usize) {
    if a < b { (a, b) } else { (b, a) }
}

impl Network {
    pub fn new_static(positions: Vec<Position>, contacts: ContactModel, link: LinkModel) -> Self {
        Self::build(positions, None, contacts, link)
    }

    pub fn new_mobile(walkers: Vec<Walker>, params: WaypointParams, range_m: f64, link: LinkModel) -> Self {
        let positions = walkers.iter().map(|w| w.position).collect();
        Self::build(positions, Some((params, walkers)), ContactModel::Range(range_m), link)
    }

    fn build(
        positions: Vec<Position>,
        walkers: Option<(WaypointParams, Vec<Walker>)>,
        contacts: ContactModel,
        link: LinkModel,
    ) -> Self {
        Network {
            link,
            contacts,
            positions,
            walkers,
            links: BTreeMap::new(),
            next_generation: 0,
            in_flight: BTreeMap::new(),
            pending: BTreeSet::new(),
            next_transfer: 0,
            counters: NetCounters::default(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn position(&self, node: usize) -> Position {
        self.positions[node]
    }

    pub fn in_contact(&self, a: usize, b: usize) -> bool {
        self.contacts.in_contact(a, b, &self.positions)
    }

    /// Moves every walker by `dt`, each with its own rng stream.
    pub fn move_nodes<R: Rng>(&mut self, dt: f64, rngs: &mut [R]) {
        if let Some((params, walkers)) = &mut self.walkers {
            for (i, w) in walkers.iter_mut().enumerate() {
                w.advance(dt, params, &mut rngs[i]);
                self.positions[i] = w.position;
            }
        }
    }

    /// Re-evaluates contacts; lost links abort their transfers. Returns the
    /// current contact pairs `(a, b)` with `a < b`, in ascending order.
    pub fn refresh_contacts(&mut self) -> Vec<(usize, usize)> {
        let n = self.positions.len();
        let mut up = Vec::new();
        match &self.contacts {
            ContactModel::Adjacency(adj) => {
                for (a, ns) in adj.iter().enumerate() {
                    up.extend(ns.iter().filter(|&&b| b > a).map(|&b| (a, b)));
                }
            }
            ContactModel::Range(r) => {
                for a in 0..n {
                    for b in a + 1..n {
                        if self.positions[a].distance(&self.positions[b]) <= *r {
                            up.push((a, b));
                        }
                    }
                }
            }
        }
        let up_set: BTreeSet<_> = up.iter().copied().collect();
        let lost: Vec<_> = self.links.keys().filter(|k| !up_set.contains(k)).copied().collect();
        for k in lost {
            self.links.remove(&k);
            let aborted: Vec<_> = self
                .in_flight
                .iter()
                .filter(|(_, t)| t.link == k)
                .map(|(id, _)| *id)
                .collect();
            for id in aborted {
                if let Some(t) = self.in_flight.remove(&id) {
                    self.pending.remove(&(t.to, t.bundle.id));
                    self.counters.transfers_aborted += 1;
                }
            }
        }
        for k in &up {
            if !self.links.contains_key(k) {
                let generation = self.next_generation;
                self.next_generation += 1;
                self.links.insert(*k, LinkState { generation, busy_until: 0.0 });
            }
        }
        up
    }

    /// Anti-entropy between two nodes in contact: everything live that one
    /// holds and the other lacks (and wants) is queued on their shared link.
    /// Each batch goes newest-created first; the link itself is FIFO.
    pub fn epidemic_sync(
        &mut self,
        (ia, a): (usize, &dyn Replica),
        (ib, b): (usize, &dyn Replica),
        now: f64,
    ) -> Vec<(TransferId, f64)> {
        let k = key(ia, ib);
        if !self.links.contains_key(&k) {
            return Vec::new();
        }
        let mut out = Vec::new();
        for (from, to, src, dst) in [(ia, ib, a, b), (ib, ia, b, a)] {
            let mut batch: Vec<&Bundle> = src
                .offerable(now)
                .into_iter()
                .filter(|bd| !dst.holds(&bd.id))
                .filter(|bd| !self.pending.contains(&(to, bd.id)))
                .filter(|bd| dst.wants(bd, now))
                .collect();
            batch.sort_by(|x, y| y.created_at.total_cmp(&x.created_at).then(x.id.cmp(&y.id)));
            for bd in batch {
                let link = self.links.get_mut(&k).expect("link checked above");
                let start = link.busy_until.max(now);
                let done = start + self.link.transfer_duration(bd.size_bytes());
                link.busy_until = done;
                let id = self.next_transfer;
                self.next_transfer += 1;
                self.pending.insert((to, bd.id));
                self.in_flight.insert(
                    id,
                    Transfer {
                        from,
                        to,
                        bundle: bd.clone(),
                        started_at: start,
                        completes_at: done,
                        link: k,
                        generation: link.generation,
                    },
                );
                self.counters.transfers_started += 1;
                out.push((id, done));
            }
        }
        out
    }

    /// Completes a transfer; `None` if it was aborted in the meantime.
    pub fn finish(&mut self, id: TransferId) -> Option<Transfer> {
        let t = self.in_flight.remove(&id)?;
        self.pending.remove(&(t.to, t.bundle.id));
        match self.links.get(&t.link) {
            Some(l) if l.generation == t.generation => {
                self.counters.transfers_completed += 1;
                self.counters.bytes_delivered += t.bundle.size_bytes();
                Some(t)
            }
            _ => {
                self.counters.transfers_aborted += 1;
                None
            }
        }
    }

    pub fn in_flight(&self) -> impl Iterator<Item = &Transfer> {
        self.in_flight.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{BundleKind, BundleStore, NodeAddress};
    use bytes::Bytes;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Plain(BundleStore);

    impl Replica for Plain {
        fn holds(&self, id: &BundleId) -> bool {
            self.0.contains(id)
        }
        fn offerable(&self, now: f64) -> Vec<&Bundle> {
            self.0.live(now).collect()
        }
        fn wants(&self, b: &Bundle, now: f64) -> bool {
            !b.is_expired(now)
        }
    }

    fn bundle(seq: u64, size: usize) -> Bundle {
        Bundle {
            id: BundleId { source: NodeAddress(0), seq },
            source: NodeAddress(0),
            destination: None,
            kind: BundleKind::WorkflowArchive,
            workflow: None,
            payload: Bytes::from(vec![0u8; size]),
            created_at: seq as f64,
            ttl_seconds: f64::INFINITY,
        }
    }

    #[test]
    fn transfer_duration_examples() {
        let l = LinkModel::default();
        assert!((l.transfer_duration(0) - 0.020).abs() < 1e-12);
        let d = l.transfer_duration(1_000_000);
        assert!((d - (0.020 + 8e6 / 54e6)).abs() < 1e-12);
        assert!((d - 0.1681).abs() < 1e-3);
        let fast = LinkModel { bandwidth_bps: 108e6, ..l };
        let slow_payload = d - l.latency_s;
        let fast_payload = fast.transfer_duration(1_000_000) - fast.latency_s;
        assert!((slow_payload / fast_payload - 2.0).abs() < 1e-12);
    }

    #[test]
    fn disc_contact_boundary_and_symmetry() {
        let pos = [Position::new(0.0, 0.0), Position::new(0.0, 39.9), Position::new(0.0, 40.1)];
        let c = ContactModel::Range(40.0);
        assert!(c.in_contact(0, 1, &pos));
        assert!(!c.in_contact(0, 2, &pos));
        assert_eq!(c.in_contact(1, 0, &pos), c.in_contact(0, 1, &pos));
    }

    #[test]
    fn ring_adjacency_is_exactly_two_neighbours() {
        let c = ContactModel::ring(12);
        let pos = vec![Position::default(); 12];
        for i in 0..12 {
            let ns: Vec<_> = (0..12).filter(|&j| c.in_contact(i, j, &pos)).collect();
            let mut want = vec![(i + 1) % 12, (i + 11) % 12];
            want.sort();
            assert_eq!(ns, want);
        }
    }

    #[test]
    fn queue_orders_by_time_then_insertion() {
        let mut q = EventQueue::new();
        q.push(2.0, "c");
        q.push(1.0, "a");
        q.push(1.0, "b");
        assert_eq!(q.pop(), Some((1.0, "a")));
        assert_eq!(q.pop(), Some((1.0, "b")));
        assert_eq!(q.pop(), Some((2.0, "c")));
        assert!(q.pop().is_none());
    }

    #[test]
    fn sync_copies_missing_and_skips_identical() {
        let mut net = Network::new_static(vec![Position::default(); 2], ContactModel::ring(2), LinkModel::default());
        net.refresh_contacts();
        let mut a = Plain(BundleStore::new());
        let b = Plain(BundleStore::new());
        a.0.insert(bundle(1, 10));
        let sched = net.epidemic_sync((0, &a), (1, &b), 0.0);
        assert_eq!(sched.len(), 1);
        // second sync while in flight schedules nothing new
        assert!(net.epidemic_sync((0, &a), (1, &b), 0.1).is_empty());
        let t = net.finish(sched[0].0).unwrap();
        let mut b = b;
        b.0.insert(t.bundle);
        assert!(net.epidemic_sync((0, &a), (1, &b), 1.0).is_empty());
    }

    #[test]
    fn link_is_serialized_fifo() {
        let mut net = Network::new_static(vec![Position::default(); 2], ContactModel::ring(2), LinkModel::default());
        net.refresh_contacts();
        let mut a = Plain(BundleStore::new());
        a.0.insert(bundle(1, 1_000_000));
        a.0.insert(bundle(2, 1_000_000));
        let b = Plain(BundleStore::new());
        let sched = net.epidemic_sync((0, &a), (1, &b), 0.0);
        let d = LinkModel::default().transfer_duration(1_000_000);
        assert_eq!(sched.len(), 2);
        assert!((sched[0].1 - d).abs() < 1e-12);
        assert!((sched[1].1 - 2.0 * d).abs() < 1e-12);
        // newest-created first
        assert_eq!(net.in_flight.get(&sched[0].0).unwrap().bundle.id.seq, 2);
    }

    #[test]
    fn contact_loss_aborts_transfer() {
        let mut net = Network::new_static(
            vec![Position::new(0.0, 0.0), Position::new(10.0, 0.0)],
            ContactModel::Range(40.0),
            LinkModel::default(),
        );
        net.refresh_contacts();
        let mut a = Plain(BundleStore::new());
        a.0.insert(bundle(1, 10_000_000));
        let b = Plain(BundleStore::new());
        let sched = net.epidemic_sync((0, &a), (1, &b), 0.0);
        net.positions[1] = Position::new(100.0, 0.0);
        net.refresh_contacts();
        assert!(net.finish(sched[0].0).is_none());
        assert_eq!(net.counters.transfers_aborted, 1);
        // back in range: restarts from scratch
        net.positions[1] = Position::new(10.0, 0.0);
        net.refresh_contacts();
        let again = net.epidemic_sync((0, &a), (1, &b), 5.0);
        assert_eq!(again.len(), 1);
        assert!(again[0].1 > 5.0 + 1.0);
    }

    #[test]
    fn walker_is_deterministic_bounded_and_speed_limited() {
        let p = WaypointParams { area_width: 1304.0, area_height: 1304.0, speed_min: 0.8, speed_max: 1.9, pause_max: 60.0 };
        let trace = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut w = Walker::spawn(&p, &mut rng);
            let mut out = vec![w.position];
            for _ in 0..4000 {
                let before = w.position;
                w.advance(0.5, &p, &mut rng);
                assert!(before.distance(&w.position) <= p.speed_max * 0.5 + 1e-9);
                assert!((0.0..=p.area_width).contains(&w.position.x));
                assert!((0.0..=p.area_height).contains(&w.position.y));
                out.push(w.position);
            }
            out
        };
        assert_eq!(trace(3), trace(3));
        assert_ne!(trace(3), trace(4));
    }
}
