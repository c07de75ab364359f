//! Off-chain world: a content-addressed blob store and point-to-point agent
//! channels with a deterministic latency model.

use std::collections::{BTreeMap, VecDeque};
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{hash, Digest};
use crate::identity::Did;
use crate::ledger::{Directory, VirtualTime};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FabricError {
    #[error("blob {0} not found")]
    NotFound(Digest),
    #[error("blob digest mismatch: expected {expected}, stored bytes hash to {actual}")]
    DigestMismatch { expected: Digest, actual: Digest },
    #[error("delivery failure: no endpoint registered for {0}")]
    DeliveryFailure(Did),
}

/// Locator 𝒟(◁̄) of a stored blob.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlobLocator {
    pub digest: Digest,
    pub store_id: String,
}

#[derive(Debug, Clone, Default)]
pub struct BlobStore {
    id: String,
    blobs: BTreeMap<Digest, Vec<u8>>,
}

impl BlobStore {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            blobs: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn store_blob(&mut self, bytes: &[u8]) -> BlobLocator {
        let digest = hash(bytes);
        self.blobs.entry(digest).or_insert_with(|| bytes.to_vec());
        BlobLocator {
            digest,
            store_id: self.id.clone(),
        }
    }

    /// Returns the stored bytes after re-checking them against the locator digest.
    pub fn fetch_blob(&self, locator: &BlobLocator) -> Result<Vec<u8>, FabricError> {
        if locator.store_id != self.id {
            return Err(FabricError::NotFound(locator.digest));
        }
        let bytes = self
            .blobs
            .get(&locator.digest)
            .ok_or(FabricError::NotFound(locator.digest))?;
        let actual = hash(bytes);
        if actual != locator.digest {
            return Err(FabricError::DigestMismatch {
                expected: locator.digest,
                actual,
            });
        }
        Ok(bytes.clone())
    }

    /// Fault injection: mutate stored bytes in place. Returns false if absent.
    pub fn corrupt(&mut self, locator: &BlobLocator, mutate: impl FnOnce(&mut Vec<u8>)) -> bool {
        match self.blobs.get_mut(&locator.digest) {
            Some(bytes) => {
                mutate(bytes);
                true
            }
            None => false,
        }
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MessageKind {
    RequestDelivery,
    ResponseNotice,
    KeyRequest,
    KeyDelivery,
    /// Plaintext reply used by the centralized baseline and by uncommitted forwards.
    DirectResponse,
}

impl MessageKind {
    /// Control messages carry protocol framing rather than application data.
    pub fn is_control(self) -> bool {
        matches!(
            self,
            MessageKind::ResponseNotice | MessageKind::KeyRequest | MessageKind::KeyDelivery
        )
    }
}

/// SA capacity under concurrent load.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaContention {
    /// Every call takes the base service time.
    Dedicated,
    /// An SA time-slices across the scenario's concurrent PA sessions, so a
    /// call takes `base × sessions`.
    #[default]
    SharedSessions,
    /// An SA serves one call at a time in arrival order (real-time FIFO).
    SerialQueue,
}

/// Affine off-chain latency: `per_hop_ms + size × per_byte_ns` for data
/// transfers, a flat `control_msg_ms` for control messages, and a responder
/// service time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub per_hop_ms: u64,
    pub per_byte_ns: u64,
    pub responder_service_ms: u64,
    pub control_msg_ms: u64,
    pub sa_contention: SaContention,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            per_hop_ms: 40,
            per_byte_ns: 200,
            responder_service_ms: 500,
            control_msg_ms: 0,
            sa_contention: SaContention::SharedSessions,
        }
    }
}

impl LatencyModel {
    pub fn zero() -> Self {
        Self {
            per_hop_ms: 0,
            per_byte_ns: 0,
            responder_service_ms: 0,
            control_msg_ms: 0,
            sa_contention: SaContention::Dedicated,
        }
    }

    pub fn transfer_ms(&self, size: usize) -> u64 {
        self.per_hop_ms + (size as u64 * self.per_byte_ns) / 1_000_000
    }

    pub fn latency(&self, _from: &Did, _to: &Did, kind: MessageKind, size: usize) -> u64 {
        if kind.is_control() {
            self.control_msg_ms
        } else {
            self.transfer_ms(size)
        }
    }

    /// Service time of one call given the number of concurrent PA sessions.
    pub fn service_ms(&self, base_ms: u64, sessions: u64) -> u64 {
        match self.sa_contention {
            SaContention::SharedSessions => base_ms * sessions.max(1),
            SaContention::Dedicated | SaContention::SerialQueue => base_ms,
        }
    }
}

/// Message bodies know their kind and how many application bytes they carry.
pub trait MessageBody: Clone {
    fn kind(&self) -> MessageKind;
    fn payload_size(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMessage<B> {
    pub from: Did,
    pub to: Did,
    pub body: B,
    pub sent_at: VirtualTime,
}

impl<B: MessageBody> ChannelMessage<B> {
    pub fn kind(&self) -> MessageKind {
        self.body.kind()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time: u64,
    pub delivered_at: u64,
    pub from: Did,
    pub to: Did,
    pub kind: MessageKind,
    pub size: usize,
}

type Tamper<B> = Box<dyn FnMut(&mut ChannelMessage<B>)>;

/// Reliable point-to-point channel, exactly-once and FIFO per (from, to) pair.
pub struct Channel<B> {
    model: LatencyModel,
    last_delivery: BTreeMap<(Did, Did), VirtualTime>,
    inboxes: BTreeMap<Did, BTreeMap<(VirtualTime, u64), ChannelMessage<B>>>,
    seq: u64,
    trace: Vec<TraceEvent>,
    tamper: VecDeque<Tamper<B>>,
}

impl<B: MessageBody> Channel<B> {
    pub fn new(model: LatencyModel) -> Self {
        Self {
            model,
            last_delivery: BTreeMap::new(),
            inboxes: BTreeMap::new(),
            seq: 0,
            trace: Vec::new(),
            tamper: VecDeque::new(),
        }
    }

    pub fn model(&self) -> &LatencyModel {
        &self.model
    }

    /// Fault injection: the next sent message is passed through `f` in transit.
    pub fn tamper_next(&mut self, f: impl FnMut(&mut ChannelMessage<B>) + 'static) {
        self.tamper.push_back(Box::new(f));
    }

    /// Queues `msg` and returns its delivery time.
    pub fn send(
        &mut self,
        mut msg: ChannelMessage<B>,
        directory: &dyn Directory,
    ) -> Result<VirtualTime, FabricError> {
        if directory.lookup(&msg.to).is_none() {
            return Err(FabricError::DeliveryFailure(msg.to));
        }
        let kind = msg.kind();
        let size = msg.body.payload_size();
        let latency = self.model.latency(&msg.from, &msg.to, kind, size);
        let pair = (msg.from.clone(), msg.to.clone());
        let mut deliver_at = msg.sent_at + latency;
        if let Some(prev) = self.last_delivery.get(&pair) {
            deliver_at = deliver_at.max(*prev);
        }
        self.last_delivery.insert(pair, deliver_at);
        self.trace.push(TraceEvent {
            time: msg.sent_at.millis(),
            delivered_at: deliver_at.millis(),
            from: msg.from.clone(),
            to: msg.to.clone(),
            kind,
            size,
        });
        if let Some(mut f) = self.tamper.pop_front() {
            f(&mut msg);
        }
        self.seq += 1;
        self.inboxes
            .entry(msg.to.clone())
            .or_default()
            .insert((deliver_at, self.seq), msg);
        Ok(deliver_at)
    }

    /// Removes and returns every message for `to` delivered by `now`, in delivery order.
    pub fn recv(&mut self, to: &Did, now: VirtualTime) -> Vec<ChannelMessage<B>> {
        let Some(inbox) = self.inboxes.get_mut(to) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        while let Some(entry) = inbox.first_entry() {
            if entry.key().0 > now {
                break;
            }
            out.push(entry.remove());
        }
        out
    }

    /// Removes the earliest due message for `to` from `from`.
    pub fn recv_from(&mut self, to: &Did, from: &Did, now: VirtualTime) -> Option<ChannelMessage<B>> {
        let inbox = self.inboxes.get_mut(to)?;
        let key = inbox
            .iter()
            .find(|((at, _), m)| *at <= now && &m.from == from)
            .map(|(k, _)| *k)?;
        inbox.remove(&key)
    }

    pub fn in_flight(&self) -> usize {
        self.inboxes.values().map(BTreeMap::len).sum()
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn write_trace_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time_ms", "delivered_ms", "from", "to", "kind", "size"])?;
        for e in &self.trace {
            w.write_record([
                e.time.to_string(),
                e.delivered_at.to_string(),
                e.from.to_string(),
                e.to.to_string(),
                format!("{:?}", e.kind),
                e.size.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
