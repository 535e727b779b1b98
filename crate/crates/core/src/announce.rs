//! Service offers with capability snapshots, their wire encoding, and the
//! per-node offer database consulted for just-in-time assignment.
//!
//! Offer payload layout (little endian, version 1):
//!
//! ```text
//! header, 64 bytes
//!   0  magic  b"OFR1"
//!   4  u16    version
//!   6  u16    offer count
//!   8  u64    worker address
//!  16  f64    issued_at
//!  24  f32    cpu, memory, disk, energy
//!  40  f64    position x, y
//!  56  [u8;8] reserved
//! per offer, 32 bytes
//!   0  [u8;24] service name, UTF-8, NUL padded
//!  24  u32     parameter count
//!  28  [u8;4]  reserved
//! ```

use std::collections::BTreeMap;

use bytes::{Buf, BufMut, Bytes, BytesMut};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{Bundle, BundleId, BundleKind, NodeAddress};
use crate::simnet::Position;

pub const OFFER_MAGIC: &[u8; 4] = b"OFR1";
pub const OFFER_WIRE_VERSION: u16 = 1;
pub const OFFER_HEADER_BYTES: usize = 64;
pub const OFFER_RECORD_BYTES: usize = 32;
pub const MAX_SERVICE_NAME_BYTES: usize = 24;

pub const DEFAULT_ANNOUNCE_INTERVAL_S: f64 = 2.0;
pub const DEFAULT_OFFER_EXPIRY_S: f64 = 120.0;

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CapabilityVector {
    pub cpu: f64,
    pub memory: f64,
    pub disk: f64,
    pub energy: f64,
    pub position: Position,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServiceOffer {
    pub worker: NodeAddress,
    pub service_name: String,
    pub param_count: u32,
    pub capabilities: CapabilityVector,
    pub issued_at: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum OfferError {
    #[error("payload truncated")]
    Truncated,
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported offer wire version {0}")]
    Version(u16),
    #[error("service name is not valid UTF-8 or empty")]
    BadName,
    #[error("payload length {got} does not match {count} offers")]
    Length { got: usize, count: usize },
    #[error("bundle is not an offer")]
    WrongKind,
    #[error("bundle expired")]
    Expired,
}

pub fn encoded_len(offers: usize) -> usize {
    OFFER_HEADER_BYTES + OFFER_RECORD_BYTES * offers
}

/// Encodes one announcement: every service shares the capability snapshot.
pub fn encode_offers<'a>(
    worker: NodeAddress,
    caps: &CapabilityVector,
    issued_at: f64,
    services: impl IntoIterator<Item = (&'a str, u32)>,
) -> Bytes {
    let services: Vec<_> = services.into_iter().collect();
    let mut buf = BytesMut::with_capacity(encoded_len(services.len()));
    buf.put_slice(OFFER_MAGIC);
    buf.put_u16_le(OFFER_WIRE_VERSION);
    buf.put_u16_le(services.len() as u16);
    buf.put_u64_le(worker.0);
    buf.put_f64_le(issued_at);
    buf.put_f32_le(caps.cpu as f32);
    buf.put_f32_le(caps.memory as f32);
    buf.put_f32_le(caps.disk as f32);
    buf.put_f32_le(caps.energy as f32);
    buf.put_f64_le(caps.position.x);
    buf.put_f64_le(caps.position.y);
    buf.put_bytes(0, 8);
    for (name, params) in services {
        let raw = name.as_bytes();
        assert!(
            !raw.is_empty() && raw.len() <= MAX_SERVICE_NAME_BYTES,
            "service name must be 1..={MAX_SERVICE_NAME_BYTES} bytes"
        );
        buf.put_slice(raw);
        buf.put_bytes(0, MAX_SERVICE_NAME_BYTES - raw.len());
        buf.put_u32_le(params);
        buf.put_bytes(0, 4);
    }
    buf.freeze()
}

pub fn decode_offers(mut p: &[u8]) -> Result<Vec<ServiceOffer>, OfferError> {
    let total = p.len();
    if p.len() < OFFER_HEADER_BYTES {
        return Err(OfferError::Truncated);
    }
    if &p[..4] != OFFER_MAGIC {
        return Err(OfferError::BadMagic);
    }
    p.advance(4);
    let version = p.get_u16_le();
    if version != OFFER_WIRE_VERSION {
        return Err(OfferError::Version(version));
    }
    let count = p.get_u16_le() as usize;
    if total != encoded_len(count) {
        return Err(OfferError::Length { got: total, count });
    }
    let worker = NodeAddress(p.get_u64_le());
    let issued_at = p.get_f64_le();
    let cpu = p.get_f32_le() as f64;
    let memory = p.get_f32_le() as f64;
    let disk = p.get_f32_le() as f64;
    let energy = p.get_f32_le() as f64;
    let position = Position::new(p.get_f64_le(), p.get_f64_le());
    p.advance(8);
    let capabilities = CapabilityVector { cpu, memory, disk, energy, position };
    (0..count)
        .map(|_| {
            let raw = &p[..MAX_SERVICE_NAME_BYTES];
            let end = raw.iter().position(|&b| b == 0).unwrap_or(raw.len());
            let name = std::str::from_utf8(&raw[..end]).map_err(|_| OfferError::BadName)?;
            if name.is_empty() {
                return Err(OfferError::BadName);
            }
            let service_name = name.to_string();
            p.advance(MAX_SERVICE_NAME_BYTES);
            let param_count = p.get_u32_le();
            p.advance(4);
            Ok(ServiceOffer { worker, service_name, param_count, capabilities, issued_at })
        })
        .collect()
}

/// Builds the periodic announcement bundle; `None` for a worker without services.
pub fn broadcast_offers<'a>(
    id: BundleId,
    caps: &CapabilityVector,
    services: impl IntoIterator<Item = (&'a str, u32)>,
    now: f64,
    offer_expiry_s: f64,
) -> Option<Bundle> {
    let services: Vec<_> = services.into_iter().collect();
    if services.is_empty() {
        return None;
    }
    Some(Bundle {
        id,
        source: id.source,
        destination: None,
        kind: BundleKind::Offer,
        workflow: None,
        payload: encode_offers(id.source, caps, now, services),
        created_at: now,
        ttl_seconds: offer_expiry_s,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfferEntry {
    pub offer: ServiceOffer,
    /// Local arrival time of this version of the offer.
    pub received_at: f64,
}

/// Latest offer per `(worker, service)`. Offers older than `expiry_s` are
/// never returned.
#[derive(Clone, Debug)]
pub struct OfferDatabase {
    expiry_s: f64,
    entries: BTreeMap<(NodeAddress, String), OfferEntry>,
    newest: BTreeMap<NodeAddress, f64>,
    pub malformed: u64,
}

impl OfferDatabase {
    pub fn new(expiry_s: f64) -> Self {
        Self { expiry_s, entries: BTreeMap::new(), newest: BTreeMap::new(), malformed: 0 }
    }

    pub fn expiry_s(&self) -> f64 {
        self.expiry_s
    }

    /// Most recent `issued_at` ingested from `worker`, across services.
    pub fn newest_from(&self, worker: NodeAddress) -> Option<f64> {
        self.newest.get(&worker).copied()
    }

    /// Folds an offer bundle in. Returns how many entries changed.
    pub fn ingest(&mut self, bundle: &Bundle, now: f64) -> Result<usize, OfferError> {
        if bundle.kind != BundleKind::Offer {
            return Err(OfferError::WrongKind);
        }
        if bundle.is_expired(now) {
            return Err(OfferError::Expired);
        }
        let offers = match decode_offers(&bundle.payload) {
            Ok(o) => o,
            Err(e) => {
                self.malformed += 1;
                return Err(e);
            }
        };
        Ok(offers.into_iter().filter(|o| self.upsert(o.clone(), now)).count())
    }

    /// Inserts unless an equal-or-newer offer for the same key is present.
    pub fn upsert(&mut self, offer: ServiceOffer, now: f64) -> bool {
        let key = (offer.worker, offer.service_name.clone());
        if self.entries.get(&key).is_some_and(|e| e.offer.issued_at >= offer.issued_at) {
            return false;
        }
        let newest = self.newest.entry(offer.worker).or_insert(offer.issued_at);
        *newest = newest.max(offer.issued_at);
        self.entries.insert(key, OfferEntry { offer, received_at: now });
        true
    }

    pub fn is_valid(&self, entry: &OfferEntry, now: f64) -> bool {
        now - entry.offer.issued_at <= self.expiry_s
    }

    /// Non-expired offers for `service`, ordered by worker address.
    pub fn lookup(&self, service: &str, now: f64) -> Vec<&OfferEntry> {
        self.entries
            .iter()
            .filter(|((_, s), e)| s == service && self.is_valid(e, now))
            .map(|(_, e)| e)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
