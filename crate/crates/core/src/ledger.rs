//! Deterministic virtual-time ledger with the agent registry, the response
//! condition (escrow) contract and a token account book.
//!
//! Blocks are produced explicitly by [`Ledger::advance_block`] (or
//! [`Ledger::advance_to`], which produces every block whose boundary has been
//! reached). A transaction submitted at time `t` is confirmed by the first
//! block strictly after `t`; there are no reorgs, so one block is final.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, Digest, EncryptionPublicKey, Signature, SigningKeyPair, VerificationKey};
use crate::encoding::{Canonical, CanonicalEncode};
use crate::identity::Did;

pub const DEFAULT_BLOCK_INTERVAL_MS: u64 = 2000;

/// Simulation time in milliseconds.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct VirtualTime(pub u64);

impl VirtualTime {
    pub const ZERO: VirtualTime = VirtualTime(0);

    pub fn millis(self) -> u64 {
        self.0
    }
}

impl Add<u64> for VirtualTime {
    type Output = VirtualTime;

    fn add(self, ms: u64) -> VirtualTime {
        VirtualTime(self.0 + ms)
    }
}

impl Sub for VirtualTime {
    type Output = u64;

    fn sub(self, earlier: VirtualTime) -> u64 {
        self.0
            .checked_sub(earlier.0)
            .expect("virtual time difference must be non-negative")
    }
}

impl fmt::Display for VirtualTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceEntry {
    pub name: String,
    pub description: String,
    pub input_spec: String,
    pub output_spec: String,
}

impl CanonicalEncode for ServiceEntry {
    fn canonical(&self) -> Canonical {
        Canonical::new()
            .str("name", &self.name)
            .str("description", &self.description)
            .str("input_spec", &self.input_spec)
            .str("output_spec", &self.output_spec)
    }
}

/// Machine-readable service description resolved from a DID.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilitySchema {
    pub services: Vec<ServiceEntry>,
    pub endpoint: String,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub is_router: bool,
}

impl CapabilitySchema {
    pub fn validate(&self) -> Result<(), String> {
        if self.endpoint.is_empty() {
            return Err("capability schema endpoint is empty".into());
        }
        if self.services.is_empty() {
            return Err("capability schema lists no services".into());
        }
        Ok(())
    }
}

impl CanonicalEncode for CapabilitySchema {
    fn canonical(&self) -> Canonical {
        Canonical::new()
            .list("services", self.services.iter().map(|s| s.canonical_bytes()))
            .str("endpoint", &self.endpoint)
            .list("tags", self.tags.iter().map(|t| t.as_bytes()))
            .bool("is_router", self.is_router)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DidRecord {
    pub did: Did,
    pub verification_key: VerificationKey,
    pub encryption_key: EncryptionPublicKey,
    pub capability_schema: CapabilitySchema,
    #[serde(default)]
    pub revoked: bool,
}

impl CanonicalEncode for DidRecord {
    fn canonical(&self) -> Canonical {
        Canonical::new()
            .str("did", self.did.as_str())
            .bytes("verification_key", &self.verification_key.0)
            .bytes("encryption_key", &self.encryption_key.0)
            .nested("capability_schema", self.capability_schema.canonical())
            .bool("revoked", self.revoked)
    }
}

/// Release condition η: a token payment to `payee`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionEta {
    pub payee: Did,
    pub amount: u64,
    pub condition_id: Digest,
}

impl CanonicalEncode for ConditionEta {
    fn canonical(&self) -> Canonical {
        Canonical::new()
            .str("payee", self.payee.as_str())
            .u64("amount", self.amount)
            .bytes("condition_id", self.condition_id.as_bytes())
    }
}

/// Request commitment ⟨DID(u), DID(s), 𝓗(P(▷))⟩.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestTx {
    pub requester: Did,
    pub target: Did,
    pub payload_digest: Digest,
}

/// Response commitment ⟨𝓗(X(P(▷))), H(◁̄), η⟩.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseTx {
    pub request_tx_digest: Digest,
    pub encrypted_response_digest: Digest,
    pub condition: ConditionEta,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentTx {
    pub condition_id: Digest,
    pub amount: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxKind {
    Register,
    Request,
    Response,
    Payment,
}

impl TxKind {
    fn tag(self) -> &'static str {
        match self {
            TxKind::Register => "register",
            TxKind::Request => "request",
            TxKind::Response => "response",
            TxKind::Payment => "payment",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TxBody {
    Register(DidRecord),
    Request(RequestTx),
    Response(ResponseTx),
    Payment(PaymentTx),
}

impl TxBody {
    pub fn kind(&self) -> TxKind {
        match self {
            TxBody::Register(_) => TxKind::Register,
            TxBody::Request(_) => TxKind::Request,
            TxBody::Response(_) => TxKind::Response,
            TxBody::Payment(_) => TxKind::Payment,
        }
    }
}

impl CanonicalEncode for TxBody {
    fn canonical(&self) -> Canonical {
        match self {
            TxBody::Register(record) => record.canonical(),
            TxBody::Request(r) => Canonical::new()
                .str("requester", r.requester.as_str())
                .str("target", r.target.as_str())
                .bytes("payload_digest", r.payload_digest.as_bytes()),
            TxBody::Response(r) => Canonical::new()
                .bytes("request_tx_digest", r.request_tx_digest.as_bytes())
                .bytes("encrypted_response_digest", r.encrypted_response_digest.as_bytes())
                .nested("condition", r.condition.canonical()),
            TxBody::Payment(p) => Canonical::new()
                .bytes("condition_id", p.condition_id.as_bytes())
                .u64("amount", p.amount),
        }
    }
}

/// A signed ledger transaction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerTx {
    pub body: TxBody,
    pub sender_did: Did,
    pub nonce: u64,
    pub signature: Signature,
}

impl LedgerTx {
    pub fn signed(body: TxBody, sender_did: Did, nonce: u64, key: &SigningKeyPair) -> Self {
        let message = Self::signing_bytes(&body, &sender_did, nonce);
        let signature = crypto::sign(&message, key);
        Self {
            body,
            sender_did,
            nonce,
            signature,
        }
    }

    fn signing_bytes(body: &TxBody, sender: &Did, nonce: u64) -> Vec<u8> {
        Canonical::new()
            .str("kind", body.kind().tag())
            .nested("body", body.canonical())
            .str("sender_did", sender.as_str())
            .u64("nonce", nonce)
            .finish()
    }

    pub fn kind(&self) -> TxKind {
        self.body.kind()
    }

    /// Canonical encoding of `(kind, body, sender_did, nonce)`; the signed bytes.
    pub fn unsigned_bytes(&self) -> Vec<u8> {
        Self::signing_bytes(&self.body, &self.sender_did, self.nonce)
    }

    /// Transaction reference: hash of the canonical unsigned encoding.
    pub fn digest(&self) -> Digest {
        crypto::hash(&self.unsigned_bytes())
    }

    pub fn verify_signature(&self, key: &VerificationKey) -> bool {
        crypto::verify(&self.unsigned_bytes(), &self.signature, key)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub timestamp: VirtualTime,
    pub tx_hashes: Vec<Digest>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxStatus {
    Pending,
    Confirmed,
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TxLookup<'a> {
    pub status: TxStatus,
    pub tx: Option<&'a LedgerTx>,
    pub block_height: Option<u64>,
}

#[derive(Debug, Clone)]
struct TxEntry {
    tx: LedgerTx,
    submitted_at: VirtualTime,
    block_height: Option<u64>,
}

/// Escrow state of one η.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionState {
    pub condition: ConditionEta,
    pub response_tx: Digest,
    pub request_tx: Digest,
    pub payment_tx: Option<Digest>,
    pub fulfilled_height: Option<u64>,
    pub fulfilled_at: Option<VirtualTime>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("rejected: signature does not verify")]
    RejectedSignature,
    #[error("rejected: unknown DID {0}")]
    RejectedUnknownDid(Did),
    #[error("rejected: DID {0} is revoked")]
    RejectedRevokedDid(Did),
    #[error("rejected: duplicate transaction {0}")]
    RejectedDuplicate(Digest),
    #[error("rejected: DID {0} is registered under a different key")]
    RejectedDuplicateDid(Did),
    #[error("rejected: sender {sender} may not submit this transaction (expected {expected})")]
    RejectedSenderMismatch { sender: Did, expected: Did },
    #[error("rejected: invalid DID record: {0}")]
    RejectedInvalidRecord(String),
    #[error("rejected: request transaction {0} is not confirmed")]
    UnknownRequest(Digest),
    #[error("rejected: condition {0} already exists")]
    DuplicateCondition(Digest),
    #[error("unknown condition {0}")]
    UnknownCondition(Digest),
    #[error("rejected: condition {0} already fulfilled")]
    RejectedAlreadyFulfilled(Digest),
    #[error("rejected: payment amount {paid} does not match condition amount {required}")]
    AmountMismatch { paid: u64, required: u64 },
    #[error("insufficient balance: need {needed}, available {available}")]
    InsufficientBalance { needed: u64, available: u64 },
    #[error("expected a {expected:?} transaction")]
    WrongKind { expected: TxKind },
    #[error("DID {0} not found")]
    NotFound(Did),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerConfig {
    pub block_interval_ms: u64,
    #[serde(default)]
    pub genesis_balances: BTreeMap<Did, u64>,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        Self {
            block_interval_ms: DEFAULT_BLOCK_INTERVAL_MS,
            genesis_balances: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Ledger {
    config: LedgerConfig,
    now: VirtualTime,
    blocks: Vec<Block>,
    txs: BTreeMap<Digest, TxEntry>,
    pending: Vec<Digest>,
    registry: BTreeMap<Did, DidRecord>,
    pending_registrations: BTreeMap<Did, VerificationKey>,
    balances: BTreeMap<Did, u64>,
    pending_debits: BTreeMap<Did, u64>,
    conditions: BTreeMap<Digest, ConditionState>,
    pending_conditions: BTreeSet<Digest>,
}

impl Ledger {
    pub fn new(config: LedgerConfig) -> Self {
        assert!(config.block_interval_ms > 0, "block interval must be positive");
        let balances = config.genesis_balances.clone();
        Self {
            config,
            now: VirtualTime::ZERO,
            blocks: vec![Block {
                height: 0,
                timestamp: VirtualTime::ZERO,
                tx_hashes: Vec::new(),
            }],
            txs: BTreeMap::new(),
            pending: Vec::new(),
            registry: BTreeMap::new(),
            pending_registrations: BTreeMap::new(),
            balances,
            pending_debits: BTreeMap::new(),
            conditions: BTreeMap::new(),
            pending_conditions: BTreeSet::new(),
        }
    }

    pub fn config(&self) -> &LedgerConfig {
        &self.config
    }

    pub fn block_interval_ms(&self) -> u64 {
        self.config.block_interval_ms
    }

    pub fn now(&self) -> VirtualTime {
        self.now
    }

    pub fn head(&self) -> &Block {
        self.blocks.last().expect("genesis block always exists")
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn next_block_time(&self) -> VirtualTime {
        self.head().timestamp + self.config.block_interval_ms
    }

    /// Moves the clock forward within the current block interval.
    ///
    /// Panics if `t` reaches the next block boundary (use [`advance_to`](Self::advance_to)).
    pub fn set_now(&mut self, t: VirtualTime) {
        assert!(t >= self.now, "ledger time cannot go backwards");
        assert!(
            t < self.next_block_time(),
            "set_now({t}) would skip the block due at {}",
            self.next_block_time()
        );
        self.now = t;
    }

    /// Produces every block with timestamp `<= t`, then sets the clock to `t`.
    pub fn advance_to(&mut self, t: VirtualTime) -> Vec<Block> {
        assert!(t >= self.now, "ledger time cannot go backwards");
        let mut produced = Vec::new();
        while self.next_block_time() <= t {
            produced.push(self.advance_block());
        }
        self.now = t;
        produced
    }

    /// Includes all pending transactions, in submission order, in a new block.
    pub fn advance_block(&mut self) -> Block {
        let height = self.head().height + 1;
        let timestamp = self.next_block_time();
        let tx_hashes = std::mem::take(&mut self.pending);
        for digest in &tx_hashes {
            self.apply(*digest, height, timestamp);
        }
        let block = Block {
            height,
            timestamp,
            tx_hashes,
        };
        self.blocks.push(block.clone());
        self.now = timestamp;
        block
    }

    fn apply(&mut self, digest: Digest, height: u64, timestamp: VirtualTime) {
        let entry = self.txs.get_mut(&digest).expect("pending tx is stored");
        entry.block_height = Some(height);
        let tx = entry.tx.clone();
        match tx.body {
            TxBody::Register(record) => {
                self.pending_registrations.remove(&record.did);
                self.registry.insert(record.did.clone(), record);
            }
            TxBody::Request(_) => {}
            TxBody::Response(resp) => {
                let id = resp.condition.condition_id;
                self.pending_conditions.remove(&id);
                self.conditions.insert(
                    id,
                    ConditionState {
                        condition: resp.condition,
                        response_tx: digest,
                        request_tx: resp.request_tx_digest,
                        payment_tx: None,
                        fulfilled_height: None,
                        fulfilled_at: None,
                    },
                );
            }
            TxBody::Payment(payment) => {
                let state = self
                    .conditions
                    .get_mut(&payment.condition_id)
                    .expect("payment validated against a confirmed condition");
                let payer = tx.sender_did;
                let payee = state.condition.payee.clone();
                let amount = payment.amount;
                *self.pending_debits.entry(payer.clone()).or_default() -= amount;
                *self.balances.entry(payer).or_default() -= amount;
                *self.balances.entry(payee).or_default() += amount;
                state.fulfilled_height = Some(height);
                state.fulfilled_at = Some(timestamp);
            }
        }
    }

    fn signing_key_for(&self, tx: &LedgerTx) -> Result<VerificationKey, LedgerError> {
        if let TxBody::Register(record) = &tx.body {
            if let Some(existing) = self.registry.get(&record.did) {
                return Ok(existing.verification_key);
            }
            if let Some(key) = self.pending_registrations.get(&record.did) {
                return Ok(*key);
            }
            return Ok(record.verification_key);
        }
        let record = self
            .registry
            .get(&tx.sender_did)
            .ok_or_else(|| LedgerError::RejectedUnknownDid(tx.sender_did.clone()))?;
        if record.revoked {
            return Err(LedgerError::RejectedRevokedDid(tx.sender_did.clone()));
        }
        Ok(record.verification_key)
    }

    pub fn submit_tx(&mut self, tx: LedgerTx) -> Result<Digest, LedgerError> {
        let digest = tx.digest();
        if self.txs.contains_key(&digest) {
            return Err(LedgerError::RejectedDuplicate(digest));
        }
        let key = self.signing_key_for(&tx)?;
        if !tx.verify_signature(&key) {
            // A registration signed by its own new key for a taken DID is a
            // uniqueness violation, not a forgery.
            if let TxBody::Register(record) = &tx.body {
                if key != record.verification_key
                    && tx.verify_signature(&record.verification_key)
                {
                    return Err(LedgerError::RejectedDuplicateDid(record.did.clone()));
                }
            }
            return Err(LedgerError::RejectedSignature);
        }
        self.validate_body(&tx)?;

        match &tx.body {
            TxBody::Register(record) => {
                self.pending_registrations
                    .insert(record.did.clone(), record.verification_key);
            }
            TxBody::Response(resp) => {
                self.pending_conditions.insert(resp.condition.condition_id);
            }
            TxBody::Payment(payment) => {
                *self.pending_debits.entry(tx.sender_did.clone()).or_default() += payment.amount;
                self.conditions
                    .get_mut(&payment.condition_id)
                    .expect("validated")
                    .payment_tx = Some(digest);
            }
            TxBody::Request(_) => {}
        }
        self.txs.insert(
            digest,
            TxEntry {
                tx,
                submitted_at: self.now,
                block_height: None,
            },
        );
        self.pending.push(digest);
        Ok(digest)
    }

    fn validate_body(&self, tx: &LedgerTx) -> Result<(), LedgerError> {
        match &tx.body {
            TxBody::Register(record) => {
                if record.did != tx.sender_did {
                    return Err(LedgerError::RejectedSenderMismatch {
                        sender: tx.sender_did.clone(),
                        expected: record.did.clone(),
                    });
                }
                record
                    .capability_schema
                    .validate()
                    .map_err(LedgerError::RejectedInvalidRecord)
            }
            TxBody::Request(req) => {
                if req.requester != tx.sender_did {
                    return Err(LedgerError::RejectedSenderMismatch {
                        sender: tx.sender_did.clone(),
                        expected: req.requester.clone(),
                    });
                }
                let target = self
                    .registry
                    .get(&req.target)
                    .ok_or_else(|| LedgerError::RejectedUnknownDid(req.target.clone()))?;
                if target.revoked {
                    return Err(LedgerError::RejectedRevokedDid(req.target.clone()));
                }
                Ok(())
            }
            TxBody::Response(resp) => {
                let request = self
                    .confirmed_request(&resp.request_tx_digest)
                    .ok_or(LedgerError::UnknownRequest(resp.request_tx_digest))?;
                if request.target != tx.sender_did {
                    return Err(LedgerError::RejectedSenderMismatch {
                        sender: tx.sender_did.clone(),
                        expected: request.target.clone(),
                    });
                }
                let id = resp.condition.condition_id;
                if self.conditions.contains_key(&id) || self.pending_conditions.contains(&id) {
                    return Err(LedgerError::DuplicateCondition(id));
                }
                Ok(())
            }
            TxBody::Payment(payment) => {
                let state = self
                    .conditions
                    .get(&payment.condition_id)
                    .ok_or(LedgerError::UnknownCondition(payment.condition_id))?;
                if state.payment_tx.is_some() {
                    return Err(LedgerError::RejectedAlreadyFulfilled(payment.condition_id));
                }
                if payment.amount != state.condition.amount {
                    return Err(LedgerError::AmountMismatch {
                        paid: payment.amount,
                        required: state.condition.amount,
                    });
                }
                let available = self.available_balance(&tx.sender_did);
                if available < payment.amount {
                    return Err(LedgerError::InsufficientBalance {
                        needed: payment.amount,
                        available,
                    });
                }
                Ok(())
            }
        }
    }

    fn confirmed_request(&self, digest: &Digest) -> Option<&RequestTx> {
        let entry = self.txs.get(digest)?;
        entry.block_height?;
        match &entry.tx.body {
            TxBody::Request(req) => Some(req),
            _ => None,
        }
    }

    pub fn get_tx(&self, digest: &Digest) -> TxLookup<'_> {
        match self.txs.get(digest) {
            None => TxLookup {
                status: TxStatus::Unknown,
                tx: None,
                block_height: None,
            },
            Some(entry) => TxLookup {
                status: if entry.block_height.is_some() {
                    TxStatus::Confirmed
                } else {
                    TxStatus::Pending
                },
                tx: Some(&entry.tx),
                block_height: entry.block_height,
            },
        }
    }

    pub fn submitted_at(&self, digest: &Digest) -> Option<VirtualTime> {
        self.txs.get(digest).map(|e| e.submitted_at)
    }

    /// Confirmation timestamp of a confirmed transaction.
    pub fn confirmed_at(&self, digest: &Digest) -> Option<VirtualTime> {
        let height = self.txs.get(digest)?.block_height?;
        Some(self.blocks[height as usize].timestamp)
    }

    /// Submits a self-signed registration (or an update signed by the current key).
    pub fn register_did(
        &mut self,
        record: DidRecord,
        key: &SigningKeyPair,
        nonce: u64,
    ) -> Result<Digest, LedgerError> {
        let did = record.did.clone();
        self.submit_tx(LedgerTx::signed(TxBody::Register(record), did, nonce, key))
    }

    /// Revocation is a registry update with `revoked = true`.
    pub fn revoke_did(
        &mut self,
        did: &Did,
        key: &SigningKeyPair,
        nonce: u64,
    ) -> Result<Digest, LedgerError> {
        let mut record = self.resolve_did(did)?.clone();
        record.revoked = true;
        self.register_did(record, key, nonce)
    }

    pub fn resolve_did(&self, did: &Did) -> Result<&DidRecord, LedgerError> {
        self.registry
            .get(did)
            .ok_or_else(|| LedgerError::NotFound(did.clone()))
    }

    pub fn records(&self) -> impl Iterator<Item = &DidRecord> {
        self.registry.values()
    }

    /// Submits a signed payment that fulfills `condition_id`.
    pub fn fulfill_condition(&mut self, payment: LedgerTx) -> Result<Digest, LedgerError> {
        if payment.kind() != TxKind::Payment {
            return Err(LedgerError::WrongKind {
                expected: TxKind::Payment,
            });
        }
        self.submit_tx(payment)
    }

    /// True once a confirmed payment satisfied the condition.
    pub fn is_fulfilled(&self, condition_id: &Digest) -> Result<bool, LedgerError> {
        self.conditions
            .get(condition_id)
            .map(|c| c.fulfilled_height.is_some())
            .ok_or(LedgerError::UnknownCondition(*condition_id))
    }

    pub fn condition(&self, condition_id: &Digest) -> Option<&ConditionState> {
        self.conditions.get(condition_id)
    }

    pub fn balance(&self, did: &Did) -> u64 {
        self.balances.get(did).copied().unwrap_or(0)
    }

    fn available_balance(&self, did: &Did) -> u64 {
        self.balance(did) - self.pending_debits.get(did).copied().unwrap_or(0)
    }

    pub fn total_supply(&self) -> u64 {
        self.balances.values().sum()
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    pub fn tx_count(&self) -> usize {
        self.txs.len()
    }

    pub fn dump(&self) -> LedgerDump {
        LedgerDump {
            block_interval_ms: self.config.block_interval_ms,
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockDump {
                    height: b.height,
                    timestamp: b.timestamp,
                    txs: b.tx_hashes.iter().map(|d| self.txs[d].tx.clone()).collect(),
                })
                .collect(),
            pending: self.pending.iter().map(|d| self.txs[d].tx.clone()).collect(),
            balances: self.balances.clone(),
        }
    }
}

/// Read access to DID → capability schema resolution.
///
/// Implemented by the on-chain registry and by the static directory the
/// centralized baseline is pre-configured with. Revoked DIDs are not listed.
pub trait Directory {
    fn lookup(&self, did: &Did) -> Option<&CapabilitySchema>;

    /// All active entries in DID order.
    fn entries(&self) -> Vec<(&Did, &CapabilitySchema)>;
}

impl Directory for Ledger {
    fn lookup(&self, did: &Did) -> Option<&CapabilitySchema> {
        self.registry
            .get(did)
            .filter(|r| !r.revoked)
            .map(|r| &r.capability_schema)
    }

    fn entries(&self) -> Vec<(&Did, &CapabilitySchema)> {
        self.registry
            .values()
            .filter(|r| !r.revoked)
            .map(|r| (&r.did, &r.capability_schema))
            .collect()
    }
}

/// A fixed DID → schema table.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticDirectory {
    pub entries: BTreeMap<Did, CapabilitySchema>,
}

impl Directory for StaticDirectory {
    fn lookup(&self, did: &Did) -> Option<&CapabilitySchema> {
        self.entries.get(did)
    }

    fn entries(&self) -> Vec<(&Did, &CapabilitySchema)> {
        self.entries.iter().collect()
    }
}

/// JSON-exportable ledger state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerDump {
    pub block_interval_ms: u64,
    pub blocks: Vec<BlockDump>,
    pub pending: Vec<LedgerTx>,
    pub balances: BTreeMap<Did, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDump {
    pub height: u64,
    pub timestamp: VirtualTime,
    pub txs: Vec<LedgerTx>,
}
