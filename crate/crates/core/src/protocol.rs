//! The verifiable communication cycle between a proxy agent `u` and a service
//! agent `s`: request commitment, response commitment, and conditional
//! response retrieval with key release.
//!
//! The functions here are the synchronous protocol steps. They never wait for
//! blocks; the caller (see [`crate::agents::TrustedCommunicator`]) sequences
//! them over virtual time and accounts the confirmation waits.

use std::collections::BTreeMap;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{
    self, hash, Ciphertext, CryptoError, Digest, EncryptionPublicKey, SymmetricKey,
};
use crate::encoding::{Canonical, CanonicalEncode};
use crate::fabric::{BlobLocator, BlobStore, FabricError, MessageBody, MessageKind};
use crate::identity::{AgentIdentity, Did};
use crate::ledger::{
    ConditionEta, Ledger, LedgerError, LedgerTx, PaymentTx, RequestTx, ResponseTx,
    TxBody, TxStatus, VirtualTime,
};

/// P(▷): the off-chain request payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestPayload {
    pub requester: Did,
    pub target: Did,
    #[serde(with = "crypto::hex_vec")]
    pub body: Vec<u8>,
    #[serde(with = "crypto::hex_vec")]
    pub context_snapshot: Vec<u8>,
    pub nonce: u64,
}

impl CanonicalEncode for RequestPayload {
    fn canonical(&self) -> Canonical {
        Canonical::new()
            .str("requester", self.requester.as_str())
            .str("target", self.target.as_str())
            .bytes("body", &self.body)
            .bytes("context_snapshot", &self.context_snapshot)
            .u64("nonce", self.nonce)
    }
}

impl RequestPayload {
    /// Application bytes carried on the wire.
    pub fn wire_size(&self) -> usize {
        self.body.len() + self.context_snapshot.len()
    }
}

/// Messages exchanged over the agent channel.
#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolMessage {
    RequestDelivery {
        payload: RequestPayload,
        req_tx_ref: Option<Digest>,
    },
    ResponseNotice {
        locator: BlobLocator,
        response_tx_ref: Digest,
    },
    KeyRequest {
        response_tx_ref: Digest,
    },
    KeyDelivery(Result<Ciphertext, Refusal>),
    DirectResponse {
        raw: Vec<u8>,
    },
}

impl MessageBody for ProtocolMessage {
    fn kind(&self) -> MessageKind {
        match self {
            ProtocolMessage::RequestDelivery { .. } => MessageKind::RequestDelivery,
            ProtocolMessage::ResponseNotice { .. } => MessageKind::ResponseNotice,
            ProtocolMessage::KeyRequest { .. } => MessageKind::KeyRequest,
            ProtocolMessage::KeyDelivery(_) => MessageKind::KeyDelivery,
            ProtocolMessage::DirectResponse { .. } => MessageKind::DirectResponse,
        }
    }

    fn payload_size(&self) -> usize {
        match self {
            ProtocolMessage::RequestDelivery { payload, .. } => payload.wire_size(),
            ProtocolMessage::ResponseNotice { locator, .. } => {
                2 * crypto::DIGEST_LEN + locator.store_id.len()
            }
            ProtocolMessage::KeyRequest { .. } => crypto::DIGEST_LEN,
            ProtocolMessage::KeyDelivery(Ok(ct)) => ct.to_bytes().len(),
            ProtocolMessage::KeyDelivery(Err(_)) => 1,
            ProtocolMessage::DirectResponse { raw } => raw.len(),
        }
    }
}

/// Why a verifier rejected a delivered artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Error)]
#[serde(rename_all = "kebab-case")]
pub enum Rejection {
    #[error("hash mismatch")]
    HashMismatch,
    #[error("unknown transaction")]
    UnknownTx,
    #[error("wrong target")]
    WrongTarget,
    #[error("link mismatch")]
    LinkMismatch,
    #[error("blob not found")]
    BlobNotFound,
}

/// Why an SA declined to release κ̄. An expected protocol path, not a fault.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Error)]
#[serde(rename_all = "kebab-case")]
pub enum Refusal {
    #[error("condition unfulfilled")]
    ConditionUnfulfilled,
    #[error("unknown cycle")]
    UnknownCycle,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("DID {0} cannot be resolved")]
    UnresolvableDid(Did),
    #[error("DID {0} is revoked")]
    RevokedDid(Did),
    #[error("ledger: {0}")]
    Ledger(#[from] LedgerError),
    #[error("rejected: {0}")]
    Rejected(#[from] Rejection),
    #[error("refused: {0}")]
    Refused(#[from] Refusal),
    #[error("crypto: {0}")]
    Crypto(#[from] CryptoError),
    #[error("fabric: {0}")]
    Fabric(#[from] FabricError),
    #[error("transaction {0} was not confirmed")]
    NotConfirmed(Digest),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

impl ProtocolError {
    /// Short machine-readable reason used in audit records.
    pub fn reason(&self) -> String {
        match self {
            ProtocolError::UnresolvableDid(_) => "unresolvable-did".into(),
            ProtocolError::RevokedDid(_) => "revoked-did".into(),
            ProtocolError::Ledger(e) => format!("ledger: {e}"),
            ProtocolError::Rejected(r) => serde_plain(r),
            ProtocolError::Refused(r) => serde_plain(r),
            ProtocolError::Crypto(CryptoError::UnwrapFailed) => "unwrap-failed".into(),
            ProtocolError::Crypto(CryptoError::DecryptionFailed) => "decryption-failed".into(),
            ProtocolError::Crypto(e) => format!("crypto: {e}"),
            ProtocolError::Fabric(FabricError::DigestMismatch { .. }) => "hash-mismatch".into(),
            ProtocolError::Fabric(e) => format!("fabric: {e}"),
            ProtocolError::NotConfirmed(_) => "not-confirmed".into(),
            ProtocolError::MalformedResponse(_) => "malformed-response".into(),
        }
    }
}

fn serde_plain<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "phase", content = "reason")]
pub enum CyclePhase {
    Committed,
    Delivered,
    Responded,
    Fulfilled,
    KeyReleased,
    Decrypted,
    Failed(String),
}

impl CyclePhase {
    fn rank(&self) -> Option<u8> {
        match self {
            CyclePhase::Committed => Some(0),
            CyclePhase::Delivered => Some(1),
            CyclePhase::Responded => Some(2),
            CyclePhase::Fulfilled => Some(3),
            CyclePhase::KeyReleased => Some(4),
            CyclePhase::Decrypted => Some(5),
            CyclePhase::Failed(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseMark {
    #[serde(flatten)]
    pub phase: CyclePhase,
    pub at: VirtualTime,
}

/// Per-interaction phase and timing record.
///
/// Time from `started_at` to the last accounted instant is split exactly
/// into confirmation waits (`on_chain_wait_ms`) and everything else.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleState {
    pub started_at: VirtualTime,
    pub phases: Vec<PhaseMark>,
    pub on_chain_wait_ms: u64,
    pub off_chain_ms: u64,
    pub confirmation_waits: u32,
    accounted_to: VirtualTime,
}

impl CycleState {
    pub fn new(started_at: VirtualTime) -> Self {
        Self {
            started_at,
            phases: Vec::new(),
            on_chain_wait_ms: 0,
            off_chain_ms: 0,
            confirmation_waits: 0,
            accounted_to: started_at,
        }
    }

    pub fn phase(&self) -> Option<&CyclePhase> {
        self.phases.last().map(|m| &m.phase)
    }

    pub fn is_failed(&self) -> bool {
        matches!(self.phase(), Some(CyclePhase::Failed(_)))
    }

    /// Accrues `[accounted_to, now)` as off-chain time.
    pub fn settle(&mut self, now: VirtualTime) {
        self.off_chain_ms += now - self.accounted_to;
        self.accounted_to = now;
    }

    /// Accrues a confirmation wait from `submitted` to `confirmed`.
    pub fn confirmation_wait(&mut self, submitted: VirtualTime, confirmed: VirtualTime) {
        self.settle(submitted);
        self.on_chain_wait_ms += confirmed - submitted;
        self.accounted_to = confirmed;
        self.confirmation_waits += 1;
    }

    /// Moves to `next`, which must be the immediate successor of the current
    /// phase (or `Committed` first). `Failed` is reachable from anywhere
    /// non-terminal.
    pub fn advance(&mut self, next: CyclePhase, now: VirtualTime) {
        self.settle(now);
        let ok = match (self.phase().and_then(CyclePhase::rank), next.rank()) {
            _ if self.is_failed() => false,
            (_, None) => true,
            (None, Some(r)) => r == 0,
            (Some(cur), Some(r)) => r == cur + 1,
        };
        assert!(ok, "illegal phase transition {:?} -> {next:?}", self.phase());
        self.phases.push(PhaseMark { phase: next, at: now });
    }

    pub fn fail(&mut self, reason: impl Into<String>, now: VirtualTime) {
        self.advance(CyclePhase::Failed(reason.into()), now);
    }

    pub fn phase_time(&self, phase: &CyclePhase) -> Option<VirtualTime> {
        self.phases.iter().find(|m| &m.phase == phase).map(|m| m.at)
    }

    pub fn total_ms(&self) -> u64 {
        self.accounted_to - self.started_at
    }

    pub fn ended_at(&self) -> VirtualTime {
        self.accounted_to
    }
}

/// SA-side view of a committed response. `raw` and κ never leave the SA
/// before release; `wrapped_key` is set only once the condition is met.
#[derive(Debug, Clone)]
pub struct ResponseEnvelope {
    pub raw: Vec<u8>,
    pub encrypted: Ciphertext,
    pub locator: BlobLocator,
    pub response_tx_ref: Digest,
    pub request_tx_ref: Digest,
    pub requester: Did,
    pub condition: ConditionEta,
    pub wrapped_key: Option<Ciphertext>,
    key: SymmetricKey,
}

impl ResponseEnvelope {
    pub fn key(&self) -> &SymmetricKey {
        &self.key
    }
}

/// Fault hooks for an SA's key release.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReleaseFaults {
    /// Wrap a fresh random key instead of κ.
    pub wrap_wrong_key: bool,
}

/// The SA's private store of committed responses keyed by ResponseTx digest.
#[derive(Debug, Default)]
pub struct KeyVault {
    envelopes: BTreeMap<Digest, ResponseEnvelope>,
    pub faults: ReleaseFaults,
}

impl KeyVault {
    pub fn insert(&mut self, env: ResponseEnvelope) {
        self.envelopes.insert(env.response_tx_ref, env);
    }

    pub fn get(&self, response_tx_ref: &Digest) -> Option<&ResponseEnvelope> {
        self.envelopes.get(response_tx_ref)
    }

    pub fn len(&self) -> usize {
        self.envelopes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envelopes.is_empty()
    }

    /// SA side of key release: κ̄ = wrap(κ, PK(u)) iff the condition is
    /// fulfilled on the ledger and the caller is the original requester.
    pub fn request_key_release<R: RngCore + CryptoRng>(
        &mut self,
        ledger: &Ledger,
        requester: &Did,
        response_tx_ref: &Digest,
        rng: &mut R,
    ) -> Result<Ciphertext, Refusal> {
        let env = self
            .envelopes
            .get_mut(response_tx_ref)
            .filter(|e| &e.requester == requester)
            .ok_or(Refusal::UnknownCycle)?;
        match ledger.is_fulfilled(&env.condition.condition_id) {
            Ok(true) => {}
            Ok(false) => return Err(Refusal::ConditionUnfulfilled),
            Err(_) => return Err(Refusal::UnknownCycle),
        }
        let recipient = ledger
            .resolve_did(requester)
            .map_err(|_| Refusal::UnknownCycle)?
            .encryption_key;
        let key = if self.faults.wrap_wrong_key {
            SymmetricKey::generate(rng)
        } else {
            env.key.clone()
        };
        let wrapped = crypto::wrap_key(&key, &recipient, rng).map_err(|_| Refusal::UnknownCycle)?;
        env.wrapped_key = Some(wrapped.clone());
        Ok(wrapped)
    }
}

/// Resolves `did` to an active record, with the protocol's error mapping.
pub fn resolve_active(ledger: &Ledger, did: &Did) -> Result<EncryptionPublicKey, ProtocolError> {
    let record = ledger
        .resolve_did(did)
        .map_err(|_| ProtocolError::UnresolvableDid(did.clone()))?;
    if record.revoked {
        return Err(ProtocolError::RevokedDid(did.clone()));
    }
    Ok(record.encryption_key)
}

/// X(P(▷)) = ⟨DID(u), DID(s), 𝓗(P(▷))⟩, signed by `u`. Returns the tx reference.
pub fn commit_request(
    ledger: &mut Ledger,
    u: &AgentIdentity,
    payload: &RequestPayload,
    tx_nonce: u64,
) -> Result<Digest, ProtocolError> {
    resolve_active(ledger, &payload.target)?;
    let body = TxBody::Request(RequestTx {
        requester: u.did.clone(),
        target: payload.target.clone(),
        payload_digest: payload.canonical_digest(),
    });
    let tx = LedgerTx::signed(body, u.did.clone(), tx_nonce, &u.signing);
    Ok(ledger.submit_tx(tx)?)
}

/// Accepts iff `req_tx_ref` is confirmed, targets `s`, and commits to this payload.
pub fn verify_request(
    ledger: &Ledger,
    s: &Did,
    payload: &RequestPayload,
    req_tx_ref: &Digest,
) -> Result<(), Rejection> {
    let lookup = ledger.get_tx(req_tx_ref);
    let Some(LedgerTx {
        body: TxBody::Request(req),
        ..
    }) = lookup.tx.filter(|_| lookup.status == TxStatus::Confirmed)
    else {
        return Err(Rejection::UnknownTx);
    };
    if &req.target != s {
        return Err(Rejection::WrongTarget);
    }
    if req.payload_digest != payload.canonical_digest() {
        return Err(Rejection::HashMismatch);
    }
    Ok(())
}

/// Condition identifier unique per response commitment.
pub fn condition_id(req_tx_ref: &Digest, payee: &Did, amount: u64, nonce: u64) -> Digest {
    let enc = Canonical::new()
        .bytes("request_tx", req_tx_ref.as_bytes())
        .str("payee", payee.as_str())
        .u64("amount", amount)
        .u64("nonce", nonce);
    hash(&enc.finish())
}

/// Encrypts `raw` under a fresh κ, stores ◁̄, and submits
/// X(◁) = ⟨𝓗(X(P(▷))), H(◁̄), η⟩ signed by `s`.
#[allow(clippy::too_many_arguments)]
pub fn commit_response<R: RngCore + CryptoRng>(
    ledger: &mut Ledger,
    blobs: &mut BlobStore,
    s: &AgentIdentity,
    req_tx_ref: &Digest,
    raw: &[u8],
    amount: u64,
    tx_nonce: u64,
    rng: &mut R,
) -> Result<ResponseEnvelope, ProtocolError> {
    let requester = match ledger.get_tx(req_tx_ref).tx {
        Some(LedgerTx {
            body: TxBody::Request(req),
            ..
        }) => req.requester.clone(),
        _ => return Err(Rejection::UnknownTx.into()),
    };
    let key = SymmetricKey::generate(rng);
    let encrypted = crypto::sym_encrypt(raw, &key, rng);
    let stored = encrypted.to_bytes();
    let locator = blobs.store_blob(&stored);
    let condition = ConditionEta {
        payee: s.did.clone(),
        amount,
        condition_id: condition_id(req_tx_ref, &s.did, amount, tx_nonce),
    };
    let body = TxBody::Response(ResponseTx {
        request_tx_digest: *req_tx_ref,
        encrypted_response_digest: locator.digest,
        condition: condition.clone(),
    });
    let tx = LedgerTx::signed(body, s.did.clone(), tx_nonce, &s.signing);
    let response_tx_ref = ledger.submit_tx(tx)?;
    Ok(ResponseEnvelope {
        raw: raw.to_vec(),
        encrypted,
        locator,
        response_tx_ref,
        request_tx_ref: *req_tx_ref,
        requester,
        condition,
        wrapped_key: None,
        key,
    })
}

/// What the PA learns from a verified response commitment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedResponse {
    pub ciphertext: Ciphertext,
    pub condition: ConditionEta,
    pub response_tx_ref: Digest,
}

/// PA side: fetches ◁̄ and checks it against the confirmed ResponseTx, which
/// must link back to `req_tx_ref` and come from the request's target.
pub fn verify_encrypted_response(
    ledger: &Ledger,
    blobs: &BlobStore,
    req_tx_ref: &Digest,
    locator: &BlobLocator,
    response_tx_ref: &Digest,
) -> Result<VerifiedResponse, Rejection> {
    let lookup = ledger.get_tx(response_tx_ref);
    let Some(tx) = lookup.tx.filter(|_| lookup.status == TxStatus::Confirmed) else {
        return Err(Rejection::UnknownTx);
    };
    let TxBody::Response(resp) = &tx.body else {
        return Err(Rejection::LinkMismatch);
    };
    if &resp.request_tx_digest != req_tx_ref {
        return Err(Rejection::LinkMismatch);
    }
    match ledger.get_tx(req_tx_ref).tx {
        Some(LedgerTx {
            body: TxBody::Request(req),
            ..
        }) if req.target == tx.sender_did => {}
        _ => return Err(Rejection::LinkMismatch),
    }
    let bytes = match blobs.fetch_blob(locator) {
        Ok(b) => b,
        Err(FabricError::DigestMismatch { .. }) => return Err(Rejection::HashMismatch),
        Err(_) => return Err(Rejection::BlobNotFound),
    };
    if hash(&bytes) != resp.encrypted_response_digest {
        return Err(Rejection::HashMismatch);
    }
    let ciphertext = Ciphertext::from_bytes(&bytes).map_err(|_| Rejection::HashMismatch)?;
    Ok(VerifiedResponse {
        ciphertext,
        condition: resp.condition.clone(),
        response_tx_ref: *response_tx_ref,
    })
}

/// Submits the payment that fulfills η.
pub fn pay_condition(
    ledger: &mut Ledger,
    u: &AgentIdentity,
    condition: &ConditionEta,
    tx_nonce: u64,
) -> Result<Digest, ProtocolError> {
    let body = TxBody::Payment(PaymentTx {
        condition_id: condition.condition_id,
        amount: condition.amount,
    });
    let tx = LedgerTx::signed(body, u.did.clone(), tx_nonce, &u.signing);
    Ok(ledger.fulfill_condition(tx)?)
}

/// ◁ = Dec(◁̄, Dec(κ̄, SK(u))).
pub fn decrypt_response(
    u: &AgentIdentity,
    ciphertext: &Ciphertext,
    wrapped_key: &Ciphertext,
) -> Result<Vec<u8>, CryptoError> {
    let key = crypto::unwrap_key(wrapped_key, &u.encryption.secret)?;
    crypto::sym_decrypt(ciphertext, &key)
}

/// Machine-readable record of one interaction cycle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleAudit {
    pub pa: Did,
    pub sa: Did,
    pub request_index: usize,
    pub com_index: usize,
    pub committed: bool,
    pub request_tx: Option<Digest>,
    pub response_tx: Option<Digest>,
    pub payment_tx: Option<Digest>,
    pub locator: Option<BlobLocator>,
    pub condition: Option<ConditionEta>,
    pub payment_confirmed_at: Option<VirtualTime>,
    pub key_released_at: Option<VirtualTime>,
    pub cycle: CycleState,
}

impl CycleAudit {
    pub fn new(pa: Did, sa: Did, request_index: usize, com_index: usize, start: VirtualTime) -> Self {
        Self {
            pa,
            sa,
            request_index,
            com_index,
            committed: false,
            request_tx: None,
            response_tx: None,
            payment_tx: None,
            locator: None,
            condition: None,
            payment_confirmed_at: None,
            key_released_at: None,
            cycle: CycleState::new(start),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{CapabilitySchema, DidRecord, LedgerConfig, ServiceEntry};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct Fixture {
        ledger: Ledger,
        blobs: BlobStore,
        u: AgentIdentity,
        s: AgentIdentity,
        rng: ChaCha20Rng,
    }

    fn schema() -> CapabilitySchema {
        CapabilitySchema {
            services: vec![ServiceEntry {
                name: "svc".into(),
                description: String::new(),
                input_spec: "text".into(),
                output_spec: "text".into(),
            }],
            endpoint: "sim://x".into(),
            tags: vec![],
            is_router: false,
        }
    }

    fn register(ledger: &mut Ledger, id: &AgentIdentity) {
        let record = DidRecord {
            did: id.did.clone(),
            verification_key: id.signing.public,
            encryption_key: id.encryption.public,
            capability_schema: schema(),
            revoked: false,
        };
        ledger.register_did(record, &id.signing, 0).unwrap();
    }

    fn fixture() -> Fixture {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let u = AgentIdentity::generate(Did::dmas("pa-0"), &mut rng);
        let s = AgentIdentity::generate(Did::dmas("sa-0"), &mut rng);
        let mut config = LedgerConfig::default();
        config.genesis_balances.insert(u.did.clone(), 100);
        let mut ledger = Ledger::new(config);
        register(&mut ledger, &u);
        register(&mut ledger, &s);
        ledger.advance_block();
        Fixture {
            ledger,
            blobs: BlobStore::new("d0"),
            u,
            s,
            rng,
        }
    }

    fn payload(f: &Fixture, body: &[u8]) -> RequestPayload {
        RequestPayload {
            requester: f.u.did.clone(),
            target: f.s.did.clone(),
            body: body.to_vec(),
            context_snapshot: b"[]".to_vec(),
            nonce: 1,
        }
    }

    /// Runs request commitment through response verification.
    fn committed(f: &mut Fixture, raw: &[u8], amount: u64) -> (Digest, ResponseEnvelope) {
        let p = payload(f, b"hi");
        let req = commit_request(&mut f.ledger, &f.u, &p, 1).unwrap();
        f.ledger.advance_block();
        verify_request(&f.ledger, &f.s.did, &p, &req).unwrap();
        let env = commit_response(
            &mut f.ledger,
            &mut f.blobs,
            &f.s,
            &req,
            raw,
            amount,
            1,
            &mut f.rng,
        )
        .unwrap();
        f.ledger.advance_block();
        (req, env)
    }

    #[test]
    fn request_digest_matches_independent_hash() {
        let mut f = fixture();
        let p = payload(&f, b"weather in Paris");
        let req = commit_request(&mut f.ledger, &f.u, &p, 1).unwrap();
        f.ledger.advance_block();
        let Some(LedgerTx {
            body: TxBody::Request(r),
            ..
        }) = f.ledger.get_tx(&req).tx
        else {
            panic!("request tx missing");
        };
        assert_eq!(r.payload_digest, hash(&p.canonical_bytes()));
    }

    #[test]
    fn empty_body_commits() {
        let mut f = fixture();
        let p = payload(&f, b"");
        let req = commit_request(&mut f.ledger, &f.u, &p, 1).unwrap();
        f.ledger.advance_block();
        assert_eq!(verify_request(&f.ledger, &f.s.did, &p, &req), Ok(()));
    }

    #[test]
    fn revoked_target_is_refused_before_submission() {
        let mut f = fixture();
        let s_key = f.s.signing.clone();
        f.ledger.revoke_did(&f.s.did, &s_key, 1).unwrap();
        f.ledger.advance_block();
        let before = f.ledger.tx_count();
        let p = payload(&f, b"x");
        assert_eq!(
            commit_request(&mut f.ledger, &f.u, &p, 1),
            Err(ProtocolError::RevokedDid(f.s.did.clone()))
        );
        assert_eq!(f.ledger.tx_count(), before);
    }

    #[test]
    fn verify_request_rejections() {
        let mut f = fixture();
        let p = payload(&f, b"hello");
        let req = commit_request(&mut f.ledger, &f.u, &p, 1).unwrap();
        assert_eq!(
            verify_request(&f.ledger, &f.s.did, &p, &req),
            Err(Rejection::UnknownTx),
            "pending request is not yet evidence"
        );
        f.ledger.advance_block();
        let mut tampered = p.clone();
        tampered.body[0] ^= 0x01;
        assert_eq!(
            verify_request(&f.ledger, &f.s.did, &tampered, &req),
            Err(Rejection::HashMismatch)
        );
        assert_eq!(
            verify_request(&f.ledger, &f.u.did, &p, &req),
            Err(Rejection::WrongTarget)
        );
        assert_eq!(
            verify_request(&f.ledger, &f.s.did, &p, &hash(b"never")),
            Err(Rejection::UnknownTx)
        );
    }

    #[test]
    fn full_cycle_roundtrip() {
        let mut f = fixture();
        let (req, env) = committed(&mut f, b"42", 10);
        let v = verify_encrypted_response(
            &f.ledger,
            &f.blobs,
            &req,
            &env.locator,
            &env.response_tx_ref,
        )
        .unwrap();
        let Some(LedgerTx {
            body: TxBody::Response(r),
            ..
        }) = f.ledger.get_tx(&env.response_tx_ref).tx
        else {
            panic!()
        };
        let fetched = f.blobs.fetch_blob(&env.locator).unwrap();
        assert_eq!(r.encrypted_response_digest, hash(&fetched));

        let mut vault = KeyVault::default();
        vault.insert(env);
        let pay = pay_condition(&mut f.ledger, &f.u, &v.condition, 2).unwrap();
        assert_eq!(
            vault.request_key_release(&f.ledger, &f.u.did, &v.response_tx_ref, &mut f.rng),
            Err(Refusal::ConditionUnfulfilled),
            "payment pending"
        );
        f.ledger.advance_block();
        assert!(f.ledger.confirmed_at(&pay).is_some());
        let wrapped = vault
            .request_key_release(&f.ledger, &f.u.did, &v.response_tx_ref, &mut f.rng)
            .unwrap();
        assert_eq!(decrypt_response(&f.u, &v.ciphertext, &wrapped).unwrap(), b"42");
        assert_eq!(f.ledger.balance(&f.u.did), 90);
        assert_eq!(f.ledger.balance(&f.s.did), 10);
    }

    #[test]
    fn empty_response_and_zero_fee() {
        let mut f = fixture();
        let (req, env) = committed(&mut f, b"", 0);
        let v = verify_encrypted_response(&f.ledger, &f.blobs, &req, &env.locator, &env.response_tx_ref)
            .unwrap();
        let mut vault = KeyVault::default();
        vault.insert(env);
        pay_condition(&mut f.ledger, &f.u, &v.condition, 2).unwrap();
        f.ledger.advance_block();
        let wrapped = vault
            .request_key_release(&f.ledger, &f.u.did, &v.response_tx_ref, &mut f.rng)
            .unwrap();
        assert_eq!(decrypt_response(&f.u, &v.ciphertext, &wrapped).unwrap(), b"");
        assert_eq!(f.ledger.balance(&f.u.did), 100);
    }

    #[test]
    fn corrupted_blob_and_bad_linkage_are_rejected() {
        let mut f = fixture();
        let (req, env) = committed(&mut f, b"data", 1);
        assert_eq!(
            verify_encrypted_response(&f.ledger, &f.blobs, &hash(b"other"), &env.locator, &env.response_tx_ref),
            Err(Rejection::LinkMismatch)
        );
        f.blobs.corrupt(&env.locator, |b| *b.last_mut().unwrap() ^= 0x80);
        assert_eq!(
            verify_encrypted_response(&f.ledger, &f.blobs, &req, &env.locator, &env.response_tx_ref),
            Err(Rejection::HashMismatch)
        );
    }

    #[test]
    fn key_release_refusals_and_wrong_key_hook() {
        let mut f = fixture();
        let (req, env) = committed(&mut f, b"secret", 5);
        let v = verify_encrypted_response(&f.ledger, &f.blobs, &req, &env.locator, &env.response_tx_ref)
            .unwrap();
        let mut vault = KeyVault::default();
        vault.insert(env);
        assert_eq!(
            vault.request_key_release(&f.ledger, &f.u.did, &hash(b"?"), &mut f.rng),
            Err(Refusal::UnknownCycle)
        );
        assert_eq!(
            vault.request_key_release(&f.ledger, &f.s.did, &v.response_tx_ref, &mut f.rng),
            Err(Refusal::UnknownCycle),
            "only the requester may ask"
        );
        pay_condition(&mut f.ledger, &f.u, &v.condition, 2).unwrap();
        f.ledger.advance_block();
        vault.faults.wrap_wrong_key = true;
        let wrapped = vault
            .request_key_release(&f.ledger, &f.u.did, &v.response_tx_ref, &mut f.rng)
            .unwrap();
        assert_eq!(
            decrypt_response(&f.u, &v.ciphertext, &wrapped),
            Err(CryptoError::DecryptionFailed)
        );
        let eve = AgentIdentity::generate(Did::dmas("eve"), &mut f.rng);
        vault.faults.wrap_wrong_key = false;
        let wrapped = vault
            .request_key_release(&f.ledger, &f.u.did, &v.response_tx_ref, &mut f.rng)
            .unwrap();
        assert_eq!(
            decrypt_response(&eve, &v.ciphertext, &wrapped),
            Err(CryptoError::UnwrapFailed)
        );
    }

    #[test]
    fn cycle_state_accounting() {
        let mut c = CycleState::new(VirtualTime(100));
        c.confirmation_wait(VirtualTime(100), VirtualTime(2000));
        c.advance(CyclePhase::Committed, VirtualTime(2000));
        c.advance(CyclePhase::Delivered, VirtualTime(2050));
        c.confirmation_wait(VirtualTime(2550), VirtualTime(4000));
        c.advance(CyclePhase::Responded, VirtualTime(4000));
        assert_eq!(c.on_chain_wait_ms, 1900 + 1450);
        assert_eq!(c.off_chain_ms, 50 + 500);
        assert_eq!(c.total_ms(), c.on_chain_wait_ms + c.off_chain_ms);
        assert_eq!(c.confirmation_waits, 2);
        c.fail("x", VirtualTime(4000));
        assert!(c.is_failed());
    }

    #[test]
    #[should_panic(expected = "illegal phase transition")]
    fn cycle_state_rejects_skips() {
        let mut c = CycleState::new(VirtualTime(0));
        c.advance(CyclePhase::Committed, VirtualTime(0));
        c.advance(CyclePhase::Responded, VirtualTime(0));
    }

    #[test]
    fn audit_json_roundtrip() {
        let mut a = CycleAudit::new("a".into(), "b".into(), 0, 1, VirtualTime(5));
        a.cycle.advance(CyclePhase::Committed, VirtualTime(7));
        a.cycle.fail("hash-mismatch", VirtualTime(9));
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<CycleAudit>(&json).unwrap(), a);
    }
}
