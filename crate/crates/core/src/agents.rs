//! Proxy and service agent runtimes: PA memory Γ(u), FirstSelect, the `com`
//! wrapper, depth-first and breadth-first discovery, termination predicates,
//! deterministic SA responders, and the two transports (ledger-anchored and
//! direct) that `com` runs over.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::fabric::{BlobStore, Channel, ChannelMessage, LatencyModel, SaContention};
use crate::identity::{AgentIdentity, Did};
use crate::ledger::{Directory, Ledger, StaticDirectory, VirtualTime};
use crate::protocol::{
    self, CycleAudit, CyclePhase, ProtocolError, ProtocolMessage, RequestPayload,
};
use crate::crypto::Digest;
use crate::sim::SimHandle;

/// A user request ▷.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRequest {
    pub text: String,
    pub tags: Vec<String>,
}

impl UserRequest {
    pub fn new(text: impl Into<String>, tags: &[&str]) -> Self {
        Self {
            text: text.into(),
            tags: tags.iter().map(|t| t.to_string()).collect(),
        }
    }

    pub fn to_body(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("request serializes")
    }

    pub fn from_body(body: &[u8]) -> Option<Self> {
        serde_json::from_slice(body).ok()
    }
}

pub const TERMINAL_MARKER: u8 = 0x01;
pub const FORWARD_MARKER: u8 = 0x02;

/// Decoded SA reply ◁: one marker byte, then canonical JSON.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Terminal { content: String },
    Forward { candidates: Vec<Did> },
}

#[derive(Serialize, Deserialize)]
struct TerminalJson {
    content: String,
}

#[derive(Serialize, Deserialize)]
struct ForwardJson {
    candidates: Vec<Did>,
}

pub fn encode_reply(reply: &Reply) -> Vec<u8> {
    let (marker, json) = match reply {
        Reply::Terminal { content } => (
            TERMINAL_MARKER,
            serde_json::to_vec(&TerminalJson {
                content: content.clone(),
            }),
        ),
        Reply::Forward { candidates } => (
            FORWARD_MARKER,
            serde_json::to_vec(&ForwardJson {
                candidates: candidates.clone(),
            }),
        ),
    };
    let mut out = vec![marker];
    out.extend(json.expect("reply serializes"));
    out
}

pub fn decode_reply(raw: &[u8]) -> Result<Reply, String> {
    let (marker, json) = raw.split_first().ok_or("empty reply")?;
    match *marker {
        TERMINAL_MARKER => serde_json::from_slice::<TerminalJson>(json)
            .map(|t| Reply::Terminal { content: t.content })
            .map_err(|e| e.to_string()),
        FORWARD_MARKER => serde_json::from_slice::<ForwardJson>(json)
            .map(|f| Reply::Forward {
                candidates: f.candidates,
            })
            .map_err(|e| e.to_string()),
        m => Err(format!("unknown reply marker {m:#04x}")),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalBehavior {
    /// Content is the request body.
    Echo,
    /// Substitutes `{body}` (request text), `{did}` (this SA) and `{tag}`
    /// (the request's first tag).
    Template(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Terminal(TerminalBehavior),
    /// Forwards to the candidates listed under the first request tag that
    /// has a table entry.
    Router { table: BTreeMap<String, Vec<Did>> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponderSpec {
    pub behavior: Behavior,
    pub service_delay_ms: u64,
}

/// Stateless SA reply as a function of the payload only.
pub fn sa_respond(spec: &ResponderSpec, sa: &Did, payload: &RequestPayload) -> Vec<u8> {
    let request = UserRequest::from_body(&payload.body);
    let reply = match &spec.behavior {
        Behavior::Terminal(TerminalBehavior::Echo) => Reply::Terminal {
            content: String::from_utf8_lossy(&payload.body).into_owned(),
        },
        Behavior::Terminal(TerminalBehavior::Template(t)) => {
            let (text, tag) = match &request {
                Some(r) => (r.text.as_str(), r.tags.first().map(String::as_str).unwrap_or("")),
                None => ("", ""),
            };
            Reply::Terminal {
                content: t
                    .replace("{body}", text)
                    .replace("{did}", sa.as_str())
                    .replace("{tag}", tag),
            }
        }
        Behavior::Router { table } => {
            let tags = request.map(|r| r.tags).unwrap_or_default();
            match tags.iter().find_map(|t| table.get(t)) {
                Some(candidates) => Reply::Forward {
                    candidates: candidates.clone(),
                },
                None => Reply::Terminal {
                    content: format!("error: no route for tags {tags:?}"),
                },
            }
        }
    };
    encode_reply(&reply)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Terminal { content: Vec<u8> },
    Forward { candidates: Vec<Did> },
    Failed { reason: String },
}

/// Result r of one `com`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceResult {
    pub source: Did,
    pub outcome: Outcome,
    /// Position of this com's audit record, when the transport keeps one.
    pub cycle_audit: Option<usize>,
}

impl ServiceResult {
    pub fn is_terminal(&self) -> bool {
        matches!(self.outcome, Outcome::Terminal { .. })
    }

    fn from_raw(source: Did, raw: &[u8], cycle_audit: Option<usize>) -> Self {
        let outcome = match decode_reply(raw) {
            Ok(Reply::Terminal { content }) => Outcome::Terminal {
                content: content.into_bytes(),
            },
            Ok(Reply::Forward { candidates }) => Outcome::Forward { candidates },
            Err(e) => Outcome::Failed {
                reason: format!("malformed-response: {e}"),
            },
        };
        Self {
            source,
            outcome,
            cycle_audit,
        }
    }

    fn failed(source: Did, reason: String, cycle_audit: Option<usize>) -> Self {
        Self {
            source,
            outcome: Outcome::Failed { reason },
            cycle_audit,
        }
    }
}

/// Externally settable abort flags for `HumanSignal` atoms.
#[derive(Debug, Clone, Default)]
pub struct SignalBoard {
    flags: BTreeMap<String, Arc<AtomicBool>>,
}

impl SignalBoard {
    pub fn flag(&mut self, name: &str) -> Arc<AtomicBool> {
        self.flags.entry(name.to_string()).or_default().clone()
    }

    pub fn is_set(&self, name: &str) -> bool {
        self.flags
            .get(name)
            .is_some_and(|f| f.load(Ordering::SeqCst))
    }
}

/// Termination predicate τ.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tau {
    And(Vec<Tau>),
    Or(Vec<Tau>),
    /// |R⃗| ≥ n.
    TerminalCount(usize),
    /// At least `m` coms in the current discovery run.
    CommBudget(usize),
    /// `now ≥ run start + ms`.
    TimeoutMs(u64),
    HumanSignal(String),
}

impl Tau {
    /// The predicate that never fires.
    pub fn never() -> Self {
        Tau::Or(Vec::new())
    }
}

pub fn evaluate_tau(tau: &Tau, run: &DiscoveryRun, now: VirtualTime, signals: &SignalBoard) -> bool {
    match tau {
        Tau::And(parts) => parts.iter().all(|t| evaluate_tau(t, run, now, signals)),
        Tau::Or(parts) => parts.iter().any(|t| evaluate_tau(t, run, now, signals)),
        Tau::TerminalCount(n) => run.terminal_responses.len() >= *n,
        Tau::CommBudget(m) => run.comms >= *m,
        Tau::TimeoutMs(ms) => now >= run.started_at + *ms,
        Tau::HumanSignal(name) => signals.is_set(name),
    }
}

/// State of one discovery run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DiscoveryRun {
    pub started_at: VirtualTime,
    pub terminal_responses: Vec<ServiceResult>,
    pub visited: BTreeSet<Did>,
    pub com_order: Vec<Did>,
    pub comms: usize,
}

/// One Γ(u) entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub sa: Did,
    pub request: String,
    pub response: String,
}

#[derive(Debug, Clone)]
pub struct ProxyAgentState {
    pub identity: AgentIdentity,
    pub context: Vec<ContextEntry>,
    pub comms_count: usize,
    pub run: DiscoveryRun,
    /// Number of trailing Γ entries sent with each request.
    pub context_window: usize,
    tx_nonce: u64,
    request_nonce: u64,
}

impl ProxyAgentState {
    pub fn new(identity: AgentIdentity, context_window: usize) -> Self {
        Self {
            identity,
            context: Vec::new(),
            comms_count: 0,
            run: DiscoveryRun::default(),
            context_window,
            tx_nonce: 0,
            request_nonce: 0,
        }
    }

    pub fn did(&self) -> &Did {
        &self.identity.did
    }

    pub fn next_tx_nonce(&mut self) -> u64 {
        self.tx_nonce += 1;
        self.tx_nonce
    }

    pub fn next_request_nonce(&mut self) -> u64 {
        self.request_nonce += 1;
        self.request_nonce
    }

    /// Serialized excerpt of Γ(u) shipped in the payload.
    pub fn context_snapshot(&self) -> Vec<u8> {
        let start = self.context.len().saturating_sub(self.context_window);
        serde_json::to_vec(&self.context[start..]).expect("context serializes")
    }

    pub fn build_payload(&mut self, target: &Did, request: &UserRequest) -> RequestPayload {
        RequestPayload {
            requester: self.identity.did.clone(),
            target: target.clone(),
            body: request.to_body(),
            context_snapshot: self.context_snapshot(),
            nonce: self.next_request_nonce(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstSelectConfig {
    /// Registry entries whose tags intersect the request's.
    #[default]
    Tags,
    Hardcoded(Vec<Did>),
}

/// Ordered by (tag matches desc, DID asc).
pub fn first_select(dir: &dyn Directory, tags: &[String], config: &FirstSelectConfig) -> Vec<Did> {
    match config {
        FirstSelectConfig::Hardcoded(list) => list.clone(),
        FirstSelectConfig::Tags => {
            let wanted: BTreeSet<&str> = tags.iter().map(String::as_str).collect();
            let mut scored: Vec<(usize, &Did)> = dir
                .entries()
                .into_iter()
                .filter_map(|(did, schema)| {
                    let n = schema
                        .tags
                        .iter()
                        .filter(|t| wanted.contains(t.as_str()))
                        .count();
                    (n > 0).then_some((n, did))
                })
                .collect();
            scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
            scored.into_iter().map(|(_, d)| d.clone()).collect()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    DepthFirst,
    BreadthFirst,
}

/// Transport for one interaction with an SA.
#[allow(async_fn_in_trait)]
pub trait Communicator {
    fn now(&self) -> VirtualTime;

    fn first_select(&self, request: &UserRequest, config: &FirstSelectConfig) -> Vec<Did>;

    /// Runs one exchange and returns the SA's result. Bookkeeping on the
    /// PA state is done by [`com`].
    async fn exchange(
        &self,
        pa: &mut ProxyAgentState,
        sa: &Did,
        request: &UserRequest,
        request_index: usize,
    ) -> ServiceResult;
}

/// Com(u, s): one exchange plus Γ(u) and counter bookkeeping.
pub async fn com<C: Communicator>(
    c: &C,
    pa: &mut ProxyAgentState,
    sa: &Did,
    request: &UserRequest,
    request_index: usize,
) -> ServiceResult {
    let result = c.exchange(pa, sa, request, request_index).await;
    let response = match &result.outcome {
        Outcome::Terminal { content } => String::from_utf8_lossy(content).into_owned(),
        Outcome::Forward { candidates } => {
            let list: Vec<&str> = candidates.iter().map(Did::as_str).collect();
            format!("forward: {}", list.join(","))
        }
        Outcome::Failed { reason } => format!("failed: {reason}"),
    };
    pa.context.push(ContextEntry {
        sa: sa.clone(),
        request: request.text.clone(),
        response,
    });
    pa.comms_count += 1;
    pa.run.comms += 1;
    pa.run.com_order.push(sa.clone());
    result
}

/// Depth-first (stack) or breadth-first (queue) discovery. Visited DIDs are
/// skipped; failed coms neither enter R⃗ nor expand candidates.
#[allow(clippy::too_many_arguments)]
pub async fn discover<C: Communicator>(
    strategy: Strategy,
    c: &C,
    pa: &mut ProxyAgentState,
    request: &UserRequest,
    tau: &Tau,
    first: Vec<Did>,
    signals: &SignalBoard,
    request_index: usize,
) -> Vec<ServiceResult> {
    pa.run = DiscoveryRun {
        started_at: c.now(),
        ..DiscoveryRun::default()
    };
    let mut frontier: VecDeque<Did> = first.into();
    while !frontier.is_empty() && !evaluate_tau(tau, &pa.run, c.now(), signals) {
        let next = match strategy {
            Strategy::DepthFirst => frontier.pop_back(),
            Strategy::BreadthFirst => frontier.pop_front(),
        };
        let Some(sa) = next else { break };
        if !pa.run.visited.insert(sa.clone()) {
            continue;
        }
        let result = com(c, pa, &sa, request, request_index).await;
        match &result.outcome {
            Outcome::Terminal { .. } => pa.run.terminal_responses.push(result),
            Outcome::Forward { candidates } => frontier.extend(candidates.iter().cloned()),
            Outcome::Failed { .. } => {}
        }
    }
    pa.run.terminal_responses.clone()
}

pub async fn discover_depth_first<C: Communicator>(
    c: &C,
    pa: &mut ProxyAgentState,
    request: &UserRequest,
    tau: &Tau,
    first: Vec<Did>,
    signals: &SignalBoard,
) -> Vec<ServiceResult> {
    discover(Strategy::DepthFirst, c, pa, request, tau, first, signals, 0).await
}

pub async fn discover_breadth_first<C: Communicator>(
    c: &C,
    pa: &mut ProxyAgentState,
    request: &UserRequest,
    tau: &Tau,
    first: Vec<Did>,
    signals: &SignalBoard,
) -> Vec<ServiceResult> {
    discover(Strategy::BreadthFirst, c, pa, request, tau, first, signals, 0).await
}

/// Test-only fault hooks on an SA.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SaFaults {
    /// Flip a byte of the stored blob (index modulo length) right after storing it.
    pub corrupt_blob_byte: Option<usize>,
}

/// Service agent runtime: identity, responder, fee and key vault.
#[derive(Debug)]
pub struct ServiceAgent {
    pub identity: AgentIdentity,
    pub responder: ResponderSpec,
    /// Condition amount for terminal replies; forwards are free.
    pub fee: u64,
    pub vault: protocol::KeyVault,
    pub faults: SaFaults,
    tx_nonce: u64,
}

impl ServiceAgent {
    pub fn new(identity: AgentIdentity, responder: ResponderSpec, fee: u64) -> Self {
        Self {
            identity,
            responder,
            fee,
            vault: protocol::KeyVault::default(),
            faults: SaFaults::default(),
            tx_nonce: 0,
        }
    }

    fn next_tx_nonce(&mut self) -> u64 {
        self.tx_nonce += 1;
        self.tx_nonce
    }
}

/// Shared mutable simulation state. Borrowed briefly, never across an await.
pub struct World {
    pub ledger: Ledger,
    pub blobs: BlobStore,
    pub channel: Channel<ProtocolMessage>,
    pub rng: ChaCha20Rng,
    /// Pre-configured endpoints for the direct (ledger-free) transport.
    pub static_directory: StaticDirectory,
    sa_busy_until: BTreeMap<Did, VirtualTime>,
}

impl World {
    pub fn new(ledger: Ledger, latency: LatencyModel, rng: ChaCha20Rng) -> Self {
        Self {
            ledger,
            blobs: BlobStore::new("blobs-0"),
            channel: Channel::new(latency),
            rng,
            static_directory: StaticDirectory::default(),
            sa_busy_until: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSettings {
    /// Concurrent PA sessions, for the shared-sessions contention model.
    pub sessions: u64,
    /// Virtual time charged per cryptographic operation.
    pub crypto_op_ms: u64,
    /// Commit forwarding replies on-chain with a zero-amount condition.
    pub commit_forwarding: bool,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        Self {
            sessions: 1,
            crypto_op_ms: 0,
            commit_forwarding: true,
        }
    }
}

/// Everything the transports share within one simulation.
pub struct Network {
    pub world: RefCell<World>,
    pub sas: RefCell<BTreeMap<Did, ServiceAgent>>,
    pub audits: RefCell<Vec<CycleAudit>>,
    pub sim: SimHandle,
    pub settings: NetworkSettings,
}

impl Network {
    pub fn new(world: World, sas: BTreeMap<Did, ServiceAgent>, sim: SimHandle, settings: NetworkSettings) -> Self {
        Self {
            world: RefCell::new(world),
            sas: RefCell::new(sas),
            audits: RefCell::new(Vec::new()),
            sim,
            settings,
        }
    }

    fn now(&self) -> VirtualTime {
        self.sim.now()
    }

    async fn crypto_ops(&self, n: u64) {
        let ms = n * self.settings.crypto_op_ms;
        if ms > 0 {
            self.sim.sleep(ms).await;
        }
    }

    /// Waits for the block that includes `tx`; returns (submitted, confirmed).
    async fn await_confirmation(&self, tx: &Digest) -> Result<(VirtualTime, VirtualTime), ProtocolError> {
        let (submitted, next_block) = {
            let w = self.world.borrow();
            let submitted = w.ledger.submitted_at(tx).ok_or(ProtocolError::NotConfirmed(*tx))?;
            (submitted, w.ledger.next_block_time())
        };
        self.sim.sleep_until(next_block).await;
        let confirmed = self
            .world
            .borrow()
            .ledger
            .confirmed_at(tx)
            .ok_or(ProtocolError::NotConfirmed(*tx))?;
        Ok((submitted, confirmed))
    }

    /// Sends over the channel, resolving endpoints via the ledger registry
    /// (`trusted`) or the static directory. Returns the delivery time.
    fn send(&self, from: &Did, to: &Did, body: ProtocolMessage, trusted: bool) -> Result<VirtualTime, ProtocolError> {
        let mut w = self.world.borrow_mut();
        let w = &mut *w;
        let msg = ChannelMessage {
            from: from.clone(),
            to: to.clone(),
            body,
            sent_at: self.now(),
        };
        let dir: &dyn Directory = if trusted { &w.ledger } else { &w.static_directory };
        Ok(w.channel.send(msg, dir)?)
    }

    /// Sends, waits for delivery, and returns the received message body.
    async fn transfer(&self, from: &Did, to: &Did, body: ProtocolMessage, trusted: bool) -> Result<ProtocolMessage, ProtocolError> {
        let at = self.send(from, to, body, trusted)?;
        self.sim.sleep_until(at).await;
        let msg = self
            .world
            .borrow_mut()
            .channel
            .recv_from(to, from, self.now())
            .expect("reliable channel delivers at the scheduled time");
        Ok(msg.body)
    }

    /// Runs the SA's responder, charging its service time under the
    /// configured contention model.
    async fn serve(&self, sa: &Did, payload: &RequestPayload) -> Vec<u8> {
        let (raw, base) = {
            let sas = self.sas.borrow();
            let agent = &sas[sa];
            (sa_respond(&agent.responder, sa, payload), agent.responder.service_delay_ms)
        };
        let done = {
            let mut w = self.world.borrow_mut();
            let model = w.channel.model().clone();
            let now = self.now();
            match model.sa_contention {
                SaContention::SerialQueue => {
                    let start = w.sa_busy_until.get(sa).copied().unwrap_or(now).max(now);
                    let end = start + base;
                    w.sa_busy_until.insert(sa.clone(), end);
                    end
                }
                _ => now + model.service_ms(base, self.settings.sessions),
            }
        };
        self.sim.sleep_until(done).await;
        raw
    }

    fn push_audit(&self, audit: CycleAudit) -> usize {
        let mut audits = self.audits.borrow_mut();
        audits.push(audit);
        audits.len() - 1
    }
}

/// Ledger-anchored transport: every com is a full verifiable cycle.
pub struct TrustedCommunicator<'n> {
    pub net: &'n Network,
}

enum SaReply {
    Committed {
        locator: crate::fabric::BlobLocator,
        response_tx_ref: Digest,
    },
    Direct(Vec<u8>),
}

impl TrustedCommunicator<'_> {
    /// SA side from delivery through response notice.
    async fn sa_handle(
        &self,
        sa: &Did,
        pa: &Did,
        delivered: ProtocolMessage,
        audit: &mut CycleAudit,
    ) -> Result<SaReply, ProtocolError> {
        let net = self.net;
        let ProtocolMessage::RequestDelivery {
            payload,
            req_tx_ref: Some(req_ref),
        } = delivered
        else {
            return Err(protocol::Rejection::UnknownTx.into());
        };
        net.crypto_ops(1).await;
        protocol::verify_request(&net.world.borrow().ledger, sa, &payload, &req_ref)?;
        audit.cycle.advance(CyclePhase::Delivered, net.now());

        let raw = net.serve(sa, &payload).await;
        let is_forward = raw.first() == Some(&FORWARD_MARKER);
        if is_forward && !net.settings.commit_forwarding {
            let reply = net
                .transfer(sa, pa, ProtocolMessage::DirectResponse { raw }, true)
                .await?;
            let ProtocolMessage::DirectResponse { raw } = reply else {
                unreachable!("direct response stays a direct response");
            };
            return Ok(SaReply::Direct(raw));
        }

        net.crypto_ops(2).await;
        let env = {
            let mut sas = net.sas.borrow_mut();
            let agent = sas.get_mut(sa).expect("SA runtime exists");
            let amount = if is_forward { 0 } else { agent.fee };
            let nonce = agent.next_tx_nonce();
            let mut w = net.world.borrow_mut();
            let w = &mut *w;
            let env = protocol::commit_response(
                &mut w.ledger,
                &mut w.blobs,
                &agent.identity,
                &req_ref,
                &raw,
                amount,
                nonce,
                &mut w.rng,
            )?;
            if let Some(i) = agent.faults.corrupt_blob_byte {
                w.blobs.corrupt(&env.locator, |b| {
                    let n = b.len();
                    b[i % n] ^= 0x01;
                });
            }
            agent.vault.insert(env.clone());
            env
        };
        audit.response_tx = Some(env.response_tx_ref);
        audit.locator = Some(env.locator.clone());
        audit.condition = Some(env.condition.clone());
        let (sub, conf) = net.await_confirmation(&env.response_tx_ref).await?;
        audit.cycle.confirmation_wait(sub, conf);

        let notice = net
            .transfer(
                sa,
                pa,
                ProtocolMessage::ResponseNotice {
                    locator: env.locator,
                    response_tx_ref: env.response_tx_ref,
                },
                true,
            )
            .await?;
        match notice {
            ProtocolMessage::ResponseNotice {
                locator,
                response_tx_ref,
            } => Ok(SaReply::Committed {
                locator,
                response_tx_ref,
            }),
            _ => Err(protocol::Rejection::LinkMismatch.into()),
        }
    }

    /// SA side of a key request.
    async fn sa_release(&self, sa: &Did, pa: &Did, response_tx_ref: &Digest, audit: &mut CycleAudit) -> ProtocolMessage {
        let net = self.net;
        net.crypto_ops(1).await;
        let result = {
            let mut sas = net.sas.borrow_mut();
            let agent = sas.get_mut(sa).expect("SA runtime exists");
            let mut w = net.world.borrow_mut();
            let w = &mut *w;
            agent
                .vault
                .request_key_release(&w.ledger, pa, response_tx_ref, &mut w.rng)
        };
        if result.is_ok() {
            audit.key_released_at = Some(net.now());
        }
        ProtocolMessage::KeyDelivery(result)
    }

    async fn run_cycle(
        &self,
        pa: &mut ProxyAgentState,
        sa: &Did,
        request: &UserRequest,
        audit: &mut CycleAudit,
    ) -> Result<Vec<u8>, ProtocolError> {
        let net = self.net;
        let u = pa.did().clone();

        // Request commitment.
        let payload = pa.build_payload(sa, request);
        net.crypto_ops(2).await;
        let nonce = pa.next_tx_nonce();
        let req_ref =
            protocol::commit_request(&mut net.world.borrow_mut().ledger, &pa.identity, &payload, nonce)?;
        audit.request_tx = Some(req_ref);
        audit.committed = true;
        let (sub, conf) = net.await_confirmation(&req_ref).await?;
        audit.cycle.confirmation_wait(sub, conf);
        audit.cycle.advance(CyclePhase::Committed, net.now());

        let delivered = net
            .transfer(
                &u,
                sa,
                ProtocolMessage::RequestDelivery {
                    payload,
                    req_tx_ref: Some(req_ref),
                },
                true,
            )
            .await?;

        // Response commitment (SA side).
        let (locator, response_tx_ref) = match self.sa_handle(sa, &u, delivered, audit).await? {
            SaReply::Direct(raw) => {
                audit.cycle.advance(CyclePhase::Responded, net.now());
                return Ok(raw);
            }
            SaReply::Committed {
                locator,
                response_tx_ref,
            } => (locator, response_tx_ref),
        };

        // Response retrieval.
        let verified = {
            let w = net.world.borrow();
            protocol::verify_encrypted_response(&w.ledger, &w.blobs, &req_ref, &locator, &response_tx_ref)
        };
        let fetch_ms = {
            let w = net.world.borrow();
            let size = verified.as_ref().map(|v| v.ciphertext.body.len()).unwrap_or(0);
            w.channel.model().transfer_ms(size)
        };
        net.sim.sleep(fetch_ms).await;
        net.crypto_ops(1).await;
        let verified = verified?;
        audit.cycle.advance(CyclePhase::Responded, net.now());

        net.crypto_ops(1).await;
        let nonce = pa.next_tx_nonce();
        let pay_ref =
            protocol::pay_condition(&mut net.world.borrow_mut().ledger, &pa.identity, &verified.condition, nonce)?;
        audit.payment_tx = Some(pay_ref);
        let (sub, conf) = net.await_confirmation(&pay_ref).await?;
        audit.cycle.confirmation_wait(sub, conf);
        audit.payment_confirmed_at = Some(conf);
        audit.cycle.advance(CyclePhase::Fulfilled, net.now());

        let key_request = net
            .transfer(&u, sa, ProtocolMessage::KeyRequest { response_tx_ref }, true)
            .await?;
        let ProtocolMessage::KeyRequest { response_tx_ref } = key_request else {
            return Err(protocol::Refusal::UnknownCycle.into());
        };
        let delivery = self.sa_release(sa, &u, &response_tx_ref, audit).await;
        let ProtocolMessage::KeyDelivery(result) = net.transfer(sa, &u, delivery, true).await? else {
            return Err(protocol::Refusal::UnknownCycle.into());
        };
        let wrapped = result?;
        audit.cycle.advance(CyclePhase::KeyReleased, net.now());

        net.crypto_ops(2).await;
        let raw = protocol::decrypt_response(&pa.identity, &verified.ciphertext, &wrapped)?;
        audit.cycle.advance(CyclePhase::Decrypted, net.now());
        Ok(raw)
    }
}

impl Communicator for TrustedCommunicator<'_> {
    fn now(&self) -> VirtualTime {
        self.net.now()
    }

    fn first_select(&self, request: &UserRequest, config: &FirstSelectConfig) -> Vec<Did> {
        first_select(&self.net.world.borrow().ledger, &request.tags, config)
    }

    async fn exchange(
        &self,
        pa: &mut ProxyAgentState,
        sa: &Did,
        request: &UserRequest,
        request_index: usize,
    ) -> ServiceResult {
        let net = self.net;
        let mut audit = CycleAudit::new(
            pa.did().clone(),
            sa.clone(),
            request_index,
            pa.comms_count,
            net.now(),
        );
        let known = net.sas.borrow().contains_key(sa);
        let result = if known {
            self.run_cycle(pa, sa, request, &mut audit).await
        } else {
            Err(ProtocolError::UnresolvableDid(sa.clone()))
        };
        let now = net.now();
        let outcome = match &result {
            Ok(_) => None,
            Err(e) => Some(e.reason()),
        };
        if let Some(reason) = &outcome {
            audit.cycle.fail(reason.clone(), now);
        } else {
            audit.cycle.settle(now);
        }
        let index = net.push_audit(audit);
        match result {
            Ok(raw) => ServiceResult::from_raw(sa.clone(), &raw, Some(index)),
            Err(e) => ServiceResult::failed(sa.clone(), e.reason(), Some(index)),
        }
    }
}

/// Ledger-free transport for the centralized baseline: request, service,
/// plaintext reply.
pub struct DirectCommunicator<'n> {
    pub net: &'n Network,
}

impl DirectCommunicator<'_> {
    async fn run_cycle(&self, pa: &mut ProxyAgentState, sa: &Did, request: &UserRequest) -> Result<Vec<u8>, ProtocolError> {
        let net = self.net;
        let u = pa.did().clone();
        let payload = pa.build_payload(sa, request);
        let delivered = net
            .transfer(
                &u,
                sa,
                ProtocolMessage::RequestDelivery {
                    payload,
                    req_tx_ref: None,
                },
                false,
            )
            .await?;
        let ProtocolMessage::RequestDelivery { payload, .. } = delivered else {
            return Err(protocol::Rejection::UnknownTx.into());
        };
        let raw = net.serve(sa, &payload).await;
        match net
            .transfer(sa, &u, ProtocolMessage::DirectResponse { raw }, false)
            .await?
        {
            ProtocolMessage::DirectResponse { raw } => Ok(raw),
            _ => Err(ProtocolError::MalformedResponse("unexpected message".into())),
        }
    }
}

impl Communicator for DirectCommunicator<'_> {
    fn now(&self) -> VirtualTime {
        self.net.now()
    }

    fn first_select(&self, request: &UserRequest, config: &FirstSelectConfig) -> Vec<Did> {
        first_select(&self.net.world.borrow().static_directory, &request.tags, config)
    }

    async fn exchange(
        &self,
        pa: &mut ProxyAgentState,
        sa: &Did,
        request: &UserRequest,
        request_index: usize,
    ) -> ServiceResult {
        let net = self.net;
        let mut audit = CycleAudit::new(pa.did().clone(), sa.clone(), request_index, pa.comms_count, net.now());
        let known = net.sas.borrow().contains_key(sa);
        let result = if known {
            self.run_cycle(pa, sa, request).await
        } else {
            Err(ProtocolError::UnresolvableDid(sa.clone()))
        };
        audit.cycle.settle(net.now());
        let index = net.push_audit(audit);
        match result {
            Ok(raw) => ServiceResult::from_raw(sa.clone(), &raw, Some(index)),
            Err(e) => ServiceResult::failed(sa.clone(), e.reason(), Some(index)),
        }
    }
}
