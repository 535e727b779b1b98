//! Per-node bundle storage with time-to-live semantics.
//!
//! Every node owns one [`BundleStore`]. Epidemic synchronisation reads it,
//! application handlers insert into it, and cleanup markers prune it. Expired
//! bundles are pruned lazily whenever the store is read with a clock value.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Opaque 64-bit node identity, rendered as 16 lowercase hex digits.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct NodeAddress(pub u64);

impl NodeAddress {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed node address `{0}`: expected 16 hex digits")]
pub struct AddressError(pub String);

impl FromStr for NodeAddress {
    type Err = AddressError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 16 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(AddressError(s.to_string()));
        }
        u64::from_str_radix(s, 16)
            .map(NodeAddress)
            .map_err(|_| AddressError(s.to_string()))
    }
}

impl From<NodeAddress> for String {
    fn from(a: NodeAddress) -> String {
        a.to_string()
    }
}

impl TryFrom<String> for NodeAddress {
    type Error = AddressError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Workflow identity: the submitting client plus its local submission counter.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WorkflowId {
    pub client: NodeAddress,
    pub seq: u32,
}

impl fmt::Display for WorkflowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "wf-{}-{}", self.client, self.seq)
    }
}

/// `(source, per-node counter)`; unique without coordination.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BundleId {
    pub source: NodeAddress,
    pub seq: u64,
}

impl fmt::Display for BundleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.source, self.seq)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BundleKind {
    Offer,
    WorkflowArchive,
    ResultArchive,
    ErrorArchive,
    CleanupMarker,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub id: BundleId,
    pub source: NodeAddress,
    /// `None` means broadcast.
    pub destination: Option<NodeAddress>,
    pub kind: BundleKind,
    /// Workflow this bundle belongs to; cleanup removes by this tag.
    pub workflow: Option<WorkflowId>,
    pub payload: Bytes,
    pub created_at: f64,
    /// Seconds; `f64::INFINITY` never expires.
    pub ttl_seconds: f64,
}

impl Bundle {
    pub fn size_bytes(&self) -> u64 {
        self.payload.len() as u64
    }

    pub fn is_expired(&self, now: f64) -> bool {
        is_expired(self.created_at, self.ttl_seconds, now)
    }

    pub fn is_addressed_to(&self, node: NodeAddress) -> bool {
        self.destination.is_none_or(|d| d == node)
    }
}

/// True iff `now` lies strictly past `created_at + ttl_seconds`.
pub fn is_expired(created_at: f64, ttl_seconds: f64, now: f64) -> bool {
    now > created_at + ttl_seconds
}

/// Hands out `BundleId`s for one source node.
#[derive(Clone, Debug)]
pub struct BundleIdGen {
    source: NodeAddress,
    next: u64,
}

impl BundleIdGen {
    pub fn new(source: NodeAddress) -> Self {
        Self { source, next: 0 }
    }

    pub fn next_id(&mut self) -> BundleId {
        let id = BundleId { source: self.source, seq: self.next };
        self.next += 1;
        id
    }
}

/// Keyed bundle storage. Iteration order is by `BundleId`, so everything built
/// on top of it is reproducible.
#[derive(Clone, Debug, Default)]
pub struct BundleStore {
    bundles: BTreeMap<BundleId, Bundle>,
}

impl BundleStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `false` (and leaves the store untouched) when the id is already present.
    pub fn insert(&mut self, bundle: Bundle) -> bool {
        use std::collections::btree_map::Entry;
        match self.bundles.entry(bundle.id) {
            Entry::Occupied(_) => false,
            Entry::Vacant(slot) => {
                slot.insert(bundle);
                true
            }
        }
    }

    /// Fetches a live bundle. Expired bundles are pruned and never returned.
    pub fn fetch(&mut self, id: &BundleId, now: f64) -> Option<&Bundle> {
        if self.bundles.get(id).is_some_and(|b| b.is_expired(now)) {
            self.bundles.remove(id);
            return None;
        }
        self.bundles.get(id)
    }

    pub fn remove(&mut self, id: &BundleId) -> bool {
        self.bundles.remove(id).is_some()
    }

    /// Presence check that ignores expiry; used to avoid re-transferring.
    pub fn contains(&self, id: &BundleId) -> bool {
        self.bundles.contains_key(id)
    }

    pub fn prune_expired(&mut self, now: f64) -> usize {
        let before = self.bundles.len();
        self.bundles.retain(|_, b| !b.is_expired(now));
        before - self.bundles.len()
    }

    /// Removes every bundle tagged with `workflow` except cleanup markers.
    pub fn remove_workflow(&mut self, workflow: WorkflowId) -> usize {
        let before = self.bundles.len();
        self.bundles.retain(|_, b| {
            b.workflow != Some(workflow) || b.kind == BundleKind::CleanupMarker
        });
        before - self.bundles.len()
    }

    pub fn live(&self, now: f64) -> impl Iterator<Item = &Bundle> {
        self.bundles.values().filter(move |b| !b.is_expired(now))
    }

    /// All stored bundles, including expired ones not yet pruned.
    pub fn iter(&self) -> impl Iterator<Item = &Bundle> {
        self.bundles.values()
    }

    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn bundle(seq: u64, ttl: f64) -> Bundle {
        Bundle {
            id: BundleId { source: NodeAddress(1), seq },
            source: NodeAddress(1),
            destination: None,
            kind: BundleKind::Offer,
            workflow: None,
            payload: Bytes::from_static(b"abc"),
            created_at: 0.0,
            ttl_seconds: ttl,
        }
    }

    #[test]
    fn insert_then_fetch_round_trips() {
        let mut store = BundleStore::new();
        let b = bundle(7, 100.0);
        assert!(store.insert(b.clone()));
        assert_eq!(store.fetch(&b.id, 1.0), Some(&b));
        assert_eq!(b.size_bytes(), 3);
    }

    #[test]
    fn duplicate_insert_is_a_no_op() {
        let mut store = BundleStore::new();
        assert!(store.insert(bundle(1, 10.0)));
        assert!(!store.insert(bundle(1, 10.0)));
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn zero_ttl_bundle_is_not_delivered_after_creation_instant() {
        let mut store = BundleStore::new();
        let b = bundle(1, 0.0);
        store.insert(b.clone());
        assert!(store.fetch(&b.id, 0.1).is_none());
        assert!(store.is_empty(), "fetch prunes lazily");
    }

    #[test]
    fn expiry_boundaries() {
        assert!(!is_expired(0.0, 120.0, 119.0));
        assert!(!is_expired(0.0, 120.0, 120.0));
        assert!(is_expired(0.0, 120.0, 121.0));
        assert!(!is_expired(0.0, f64::INFINITY, 1e300));
    }

    #[test]
    fn remove_reports_presence_and_has_no_tombstone() {
        let mut store = BundleStore::new();
        let b = bundle(3, 10.0);
        store.insert(b.clone());
        assert!(store.remove(&b.id));
        assert!(!store.contains(&b.id));
        assert!(!store.remove(&b.id));
        assert!(store.insert(b.clone()));
        assert!(store.contains(&b.id));
    }

    #[test]
    fn remove_workflow_keeps_markers() {
        let wf = WorkflowId { client: NodeAddress(0), seq: 0 };
        let mut store = BundleStore::new();
        for (seq, kind) in [
            (0, BundleKind::WorkflowArchive),
            (1, BundleKind::WorkflowArchive),
            (2, BundleKind::ResultArchive),
            (3, BundleKind::CleanupMarker),
        ] {
            let mut b = bundle(seq, 10.0);
            b.kind = kind;
            b.workflow = Some(wf);
            store.insert(b);
        }
        store.insert(bundle(9, 10.0));
        assert_eq!(store.remove_workflow(wf), 3);
        assert_eq!(store.remove_workflow(wf), 0);
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn address_parsing() {
        assert_eq!("000000000000000a".parse(), Ok(NodeAddress(10)));
        assert!("xyz".parse::<NodeAddress>().is_err());
        assert!("00000000000000000".parse::<NodeAddress>().is_err());
        assert!("+00000000000000a".parse::<NodeAddress>().is_err());
        assert_eq!(NodeAddress(255).to_string(), "00000000000000ff");
    }

    #[derive(Debug, Clone)]
    enum Op {
        Insert(u64),
        Remove(u64),
    }

    proptest! {
        #[test]
        fn fetch_reflects_last_insert_or_remove(ops in prop::collection::vec(
            prop_oneof![(0u64..8).prop_map(Op::Insert), (0u64..8).prop_map(Op::Remove)], 0..64)
        ) {
            let mut store = BundleStore::new();
            let mut model = BTreeSet::new();
            for op in &ops {
                match *op {
                    Op::Insert(k) => { store.insert(bundle(k, f64::INFINITY)); model.insert(k); }
                    Op::Remove(k) => { store.remove(&bundle(k, 0.0).id); model.remove(&k); }
                }
            }
            for k in 0..8 {
                let id = bundle(k, 0.0).id;
                prop_assert_eq!(store.fetch(&id, 5.0).is_some(), model.contains(&k));
            }
        }
    }
}
