//! Scenario runner: topology construction, the virtual-time simulation of
//! many proxy agents, the on-chain/off-chain latency decomposition, the
//! centralized baseline, PA-count sweeps, reports, and offline audit checks.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    discover, Behavior, Communicator, DirectCommunicator, FirstSelectConfig, Network,
    NetworkSettings, ProxyAgentState, ResponderSpec, ServiceAgent, SignalBoard, Strategy, Tau,
    TerminalBehavior, TrustedCommunicator, UserRequest, World,
};
use crate::crypto::{Digest, VerificationKey};
use crate::fabric::{LatencyModel, TraceEvent};
use crate::identity::{AgentIdentity, Did};
use crate::ledger::{
    CapabilitySchema, DidRecord, Ledger, LedgerConfig, LedgerDump, LedgerTx, ServiceEntry, TxBody,
    VirtualTime,
};
use crate::protocol::CycleAudit;
use crate::sim::{Executor, SimHandle};

/// Version of the metrics CSV column layout.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Dmas,
    Cmas,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Dmas => "dmas",
            Mode::Cmas => "cmas",
        })
    }
}

/// How request tags are chosen for each PA's request sequence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workload {
    /// Every request carries every group tag, engaging all routers.
    #[default]
    AllGroups,
    /// Request `k` carries only `group-{k mod groups}`.
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtraSa {
    /// Name part of `did:dmas:<name>`.
    pub name: String,
    #[serde(default)]
    pub tags: Vec<String>,
    pub behavior: Behavior,
    #[serde(default)]
    pub service_delay_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Topology {
    pub routing_groups: usize,
    pub terminals_per_group: usize,
    /// Terminal reply template (see [`TerminalBehavior::Template`]).
    pub terminal_template: String,
    pub extra_sas: Vec<ExtraSa>,
}

impl Default for Topology {
    fn default() -> Self {
        Self {
            routing_groups: 4,
            terminals_per_group: 7,
            terminal_template: "{did} answers '{body}'".into(),
            extra_sas: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub mode: Mode,
    pub block_interval_ms: u64,
    pub pa_count: usize,
    pub requests_per_pa: usize,
    pub strategy: Strategy,
    pub tau: Tau,
    /// Condition amount for terminal replies.
    pub condition_amount: u64,
    pub initial_balance: u64,
    pub commit_forwarding: bool,
    pub crypto_op_ms: u64,
    pub context_window: usize,
    pub first_select: FirstSelectConfig,
    pub workload: Workload,
    pub latency: LatencyModel,
    pub topology: Topology,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "paper".into(),
            seed: 7,
            mode: Mode::Dmas,
            block_interval_ms: crate::ledger::DEFAULT_BLOCK_INTERVAL_MS,
            pa_count: 1,
            requests_per_pa: 8,
            strategy: Strategy::DepthFirst,
            tau: Tau::TerminalCount(1),
            condition_amount: 10,
            initial_balance: 1_000_000,
            commit_forwarding: true,
            crypto_op_ms: 0,
            context_window: 4,
            first_select: FirstSelectConfig::Tags,
            workload: Workload::AllGroups,
            latency: LatencyModel::default(),
            topology: Topology::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| ConfigError {
            field: e
                .span()
                .map(|span| field_at(text, span.start))
                .unwrap_or_else(|| "scenario".into()),
            message: e.message().to_string(),
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::new("path", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.pa_count == 0 {
            return Err(ConfigError::new("pa_count", "must be at least 1"));
        }
        if self.block_interval_ms == 0 {
            return Err(ConfigError::new("block_interval_ms", "must be positive"));
        }
        if self.mode == Mode::Dmas && self.initial_balance < self.condition_amount {
            return Err(ConfigError::new(
                "initial_balance",
                format!("must cover at least one condition_amount ({})", self.condition_amount),
            ));
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, sa) in self.topology.extra_sas.iter().enumerate() {
            if sa.name.is_empty() {
                return Err(ConfigError::new(&format!("topology.extra_sas[{i}].name"), "must not be empty"));
            }
            if !names.insert(sa.name.as_str()) {
                return Err(ConfigError::new(
                    &format!("topology.extra_sas[{i}].name"),
                    format!("duplicate name {:?}", sa.name),
                ));
            }
        }
        if self.topology.routing_groups == 0 && self.topology.extra_sas.is_empty() {
            return Err(ConfigError::new("topology", "no service agents configured"));
        }
        Ok(())
    }

    /// The `k`-th request of PA `i`.
    pub fn request(&self, pa: usize, k: usize) -> UserRequest {
        let groups = self.topology.routing_groups;
        let tags = match (self.workload, groups) {
            (_, 0) => Vec::new(),
            (Workload::AllGroups, _) => (0..groups).map(group_tag).collect(),
            (Workload::RoundRobin, _) => vec![group_tag(k % groups)],
        };
        UserRequest {
            text: format!("request {k} from pa-{pa}"),
            tags,
        }
    }
}

/// Dotted key path of the TOML entry at byte `offset`, with its line number.
fn field_at(text: &str, offset: usize) -> String {
    let line_no = text[..offset].matches('\n').count() + 1;
    let mut table = String::new();
    let mut key = String::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if i + 1 > line_no {
            break;
        }
        if line.starts_with('[') {
            table = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        } else if i + 1 == line_no {
            key = line.split('=').next().unwrap_or("").trim().to_string();
        }
    }
    let path = match (table.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    };
    format!("{path} (line {line_no})")
}

pub fn group_tag(g: usize) -> String {
    format!("group-{g}")
}

pub fn router_did(g: usize) -> Did {
    Did::dmas(&format!("sa-r{g}"))
}

pub fn terminal_did(g: usize, k: usize) -> Did {
    Did::dmas(&format!("sa-t{g}-{k}"))
}

pub fn pa_did(i: usize) -> Did {
    Did::dmas(&format!("pa-{i}"))
}

/// A service agent to be registered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaSpec {
    pub did: Did,
    pub schema: CapabilitySchema,
    pub responder: ResponderSpec,
}

fn schema(did: &Did, service: &str, tags: Vec<String>, is_router: bool) -> CapabilitySchema {
    CapabilitySchema {
        services: vec![ServiceEntry {
            name: service.into(),
            description: format!("{service} service of {did}"),
            input_spec: "application/json request".into(),
            output_spec: "marker byte + canonical JSON reply".into(),
        }],
        endpoint: format!("sim://{}", did.as_str()),
        tags,
        is_router,
    }
}

/// Routers `sa-r{g}` tagged `group-{g}`, each forwarding its group tag to
/// terminals `sa-t{g}-{k}`, plus any extra SAs.
pub fn build_topology(topology: &Topology, default_service_ms: u64) -> Vec<SaSpec> {
    let mut out = Vec::new();
    for g in 0..topology.routing_groups {
        let terminals: Vec<Did> = (0..topology.terminals_per_group)
            .map(|k| terminal_did(g, k))
            .collect();
        let did = router_did(g);
        out.push(SaSpec {
            schema: schema(&did, "routing", vec![group_tag(g)], true),
            responder: ResponderSpec {
                behavior: Behavior::Router {
                    table: BTreeMap::from([(group_tag(g), terminals.clone())]),
                },
                service_delay_ms: default_service_ms,
            },
            did,
        });
        for did in terminals {
            out.push(SaSpec {
                schema: schema(&did, "answer", vec![format!("{}-terminal", group_tag(g))], false),
                responder: ResponderSpec {
                    behavior: Behavior::Terminal(TerminalBehavior::Template(
                        topology.terminal_template.clone(),
                    )),
                    service_delay_ms: default_service_ms,
                },
                did,
            });
        }
    }
    for extra in &topology.extra_sas {
        let did = Did::dmas(&extra.name);
        let is_router = matches!(extra.behavior, Behavior::Router { .. });
        out.push(SaSpec {
            schema: schema(&did, "custom", extra.tags.clone(), is_router),
            responder: ResponderSpec {
                behavior: extra.behavior.clone(),
                service_delay_ms: extra.service_delay_ms.unwrap_or(default_service_ms),
            },
            did,
        });
    }
    out
}

/// 4 routing groups × 7 terminals: 32 SAs.
pub fn build_paper_topology() -> Vec<SaSpec> {
    build_topology(&Topology::default(), LatencyModel::default().responder_service_ms)
}

/// Per-com row of `cycles.csv`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComMetrics {
    pub pa: String,
    pub request: usize,
    pub com: usize,
    pub sa: String,
    pub kind: String,
    pub start_ms: u64,
    pub end_ms: u64,
    pub total_ms: u64,
    pub on_chain_ms: u64,
    pub off_chain_ms: u64,
    pub confirmation_waits: u32,
    pub txs: u32,
}

/// Per-request row of `metrics.csv`: one interaction cycle from the first
/// com of a discovery run to its termination.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub pa: String,
    pub request: usize,
    pub start_ms: u64,
    pub end_ms: u64,
    pub total_ms: u64,
    pub on_chain_ms: u64,
    pub off_chain_ms: u64,
    pub coms: usize,
    pub terminals: usize,
    pub confirmation_waits: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaMetrics {
    pub pa: String,
    pub requests: usize,
    pub first_start_ms: u64,
    pub last_end_ms: u64,
    pub request_completion_ms: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub requests: usize,
    pub coms: usize,
    pub txs: usize,
    pub blocks: usize,
    pub total_ms: u64,
    pub on_chain_ms: u64,
    pub off_chain_ms: u64,
    pub on_chain_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionMetrics {
    pub requests: Vec<RequestMetrics>,
    pub coms: Vec<ComMetrics>,
    pub per_pa: Vec<PaMetrics>,
    pub aggregate: Aggregate,
}

/// Σon / Σtotal, defined as 0 for an empty total.
pub fn on_chain_share(on: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        on as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema_version: u32,
    pub mode: Mode,
    pub seed: u64,
    pub cycles: Vec<CycleAudit>,
}

/// Everything one run produces.
pub struct RunOutput {
    pub scenario: Scenario,
    pub metrics: InteractionMetrics,
    pub audit: AuditReport,
    pub ledger: Option<LedgerDump>,
    pub trace: Vec<TraceEvent>,
    pub pas: Vec<ProxyAgentState>,
}

struct RequestRecord {
    pa_index: usize,
    request: usize,
    start: VirtualTime,
    end: VirtualTime,
    terminals: usize,
}

/// Runs a scenario in its configured mode.
pub fn run_scenario(s: &Scenario) -> Result<RunOutput, ConfigError> {
    s.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(s.seed);
    let specs = build_topology(&s.topology, s.latency.responder_service_ms);
    let sa_ids: Vec<AgentIdentity> = specs
        .iter()
        .map(|spec| AgentIdentity::generate(spec.did.clone(), &mut rng))
        .collect();
    let pa_ids: Vec<AgentIdentity> = (0..s.pa_count)
        .map(|i| AgentIdentity::generate(pa_did(i), &mut rng))
        .collect();

    let mut config = LedgerConfig {
        block_interval_ms: s.block_interval_ms,
        genesis_balances: BTreeMap::new(),
    };
    for pa in &pa_ids {
        config.genesis_balances.insert(pa.did.clone(), s.initial_balance);
    }
    let mut ledger = Ledger::new(config);
    let mut records = Vec::new();
    for (spec, id) in specs.iter().zip(&sa_ids) {
        records.push((record(id, spec.schema.clone()), id));
    }
    for id in &pa_ids {
        let schema = schema(&id.did, "proxy", vec!["proxy".into()], false);
        records.push((record(id, schema), id));
    }
    let mut static_directory = crate::ledger::StaticDirectory::default();
    for (rec, id) in &records {
        static_directory
            .entries
            .insert(rec.did.clone(), rec.capability_schema.clone());
        if s.mode == Mode::Dmas {
            ledger
                .register_did(rec.clone(), &id.signing, 0)
                .expect("fresh registry accepts distinct DIDs");
        }
    }
    if s.mode == Mode::Dmas {
        ledger.advance_block();
    }
    let start = ledger.now();

    let mut world = World::new(ledger, s.latency.clone(), rng);
    world.static_directory = static_directory;
    let sas: BTreeMap<Did, ServiceAgent> = specs
        .iter()
        .zip(sa_ids)
        .map(|(spec, id)| {
            (
                spec.did.clone(),
                ServiceAgent::new(id, spec.responder.clone(), s.condition_amount),
            )
        })
        .collect();
    let settings = NetworkSettings {
        sessions: s.pa_count as u64,
        crypto_op_ms: s.crypto_op_ms,
        commit_forwarding: s.commit_forwarding,
    };
    let handle = SimHandle::new(start);
    let net = Network::new(world, sas, handle.clone(), settings);
    let pas: Vec<ProxyAgentState> = pa_ids
        .into_iter()
        .map(|id| ProxyAgentState::new(id, s.context_window))
        .collect();

    let (pas, records) = match s.mode {
        Mode::Dmas => simulate(s, &net, &TrustedCommunicator { net: &net }, handle, pas, true),
        Mode::Cmas => simulate(s, &net, &DirectCommunicator { net: &net }, handle, pas, false),
    };

    let world = net.world.into_inner();
    let audits = net.audits.into_inner();
    let metrics = compute_metrics(&pas, &records, &audits, &world.ledger, s.mode);
    Ok(RunOutput {
        scenario: s.clone(),
        metrics,
        audit: AuditReport {
            schema_version: METRICS_SCHEMA_VERSION,
            mode: s.mode,
            seed: s.seed,
            cycles: audits,
        },
        ledger: (s.mode == Mode::Dmas).then(|| world.ledger.dump()),
        trace: world.channel.trace().to_vec(),
        pas,
    })
}

/// Same scenario with every ledger interaction removed.
pub fn run_cmas_baseline(s: &Scenario) -> Result<RunOutput, ConfigError> {
    run_scenario(&Scenario {
        mode: Mode::Cmas,
        ..s.clone()
    })
}

fn record(id: &AgentIdentity, capability_schema: CapabilitySchema) -> DidRecord {
    DidRecord {
        did: id.did.clone(),
        verification_key: id.signing.public,
        encryption_key: id.encryption.public,
        capability_schema,
        revoked: false,
    }
}

fn simulate<C: Communicator>(
    s: &Scenario,
    net: &Network,
    comm: &C,
    handle: SimHandle,
    pas: Vec<ProxyAgentState>,
    produce_blocks: bool,
) -> (Vec<ProxyAgentState>, Vec<RequestRecord>) {
    let finished: RefCell<BTreeMap<usize, ProxyAgentState>> = RefCell::new(BTreeMap::new());
    let records: RefCell<Vec<RequestRecord>> = RefCell::new(Vec::new());
    let signals = SignalBoard::default();
    {
        let mut ex = Executor::with_handle(handle.clone());
        if produce_blocks {
            ex.on_advance(|t| {
                net.world.borrow_mut().ledger.advance_to(t);
            });
        }
        for (i, mut pa) in pas.into_iter().enumerate() {
            let (finished, records, signals) = (&finished, &records, &signals);
            ex.spawn(async move {
                for k in 0..s.requests_per_pa {
                    let request = s.request(i, k);
                    let start = comm.now();
                    let first = comm.first_select(&request, &s.first_select);
                    let results =
                        discover(s.strategy, comm, &mut pa, &request, &s.tau, first, signals, k).await;
                    records.borrow_mut().push(RequestRecord {
                        pa_index: i,
                        request: k,
                        start,
                        end: comm.now(),
                        terminals: results.len(),
                    });
                }
                finished.borrow_mut().insert(i, pa);
            });
        }
        ex.run();
    }
    let pas = finished.into_inner().into_values().collect();
    let mut records = records.into_inner();
    records.sort_by_key(|r| (r.pa_index, r.request));
    (pas, records)
}

fn compute_metrics(
    pas: &[ProxyAgentState],
    records: &[RequestRecord],
    audits: &[CycleAudit],
    ledger: &Ledger,
    mode: Mode,
) -> InteractionMetrics {
    let pa_index: BTreeMap<&Did, usize> = pas.iter().enumerate().map(|(i, p)| (p.did(), i)).collect();
    let mut by_request: BTreeMap<(usize, usize), Vec<&CycleAudit>> = BTreeMap::new();
    for a in audits {
        by_request
            .entry((pa_index[&a.pa], a.request_index))
            .or_default()
            .push(a);
    }
    // Outcome kinds come from the PA's Γ(u) entries in com order.
    let mut coms = Vec::new();
    let mut requests = Vec::new();
    let mut tx_total = 0usize;
    for r in records {
        let pa = &pas[r.pa_index];
        let cycles = by_request.remove(&(r.pa_index, r.request)).unwrap_or_default();
        let mut on = 0;
        let mut waits = 0;
        for a in &cycles {
            let c = &a.cycle;
            let entry = &pa.context[a.com_index];
            let kind = if c.is_failed() {
                "failed"
            } else if entry.response.starts_with("forward: ") {
                "forward"
            } else {
                "terminal"
            };
            let txs = [a.request_tx, a.response_tx, a.payment_tx]
                .iter()
                .filter(|t| t.is_some())
                .count() as u32;
            tx_total += txs as usize;
            on += c.on_chain_wait_ms;
            waits += c.confirmation_waits;
            coms.push(ComMetrics {
                pa: pa.did().to_string(),
                request: r.request,
                com: a.com_index,
                sa: a.sa.to_string(),
                kind: kind.into(),
                start_ms: c.started_at.millis(),
                end_ms: c.ended_at().millis(),
                total_ms: c.total_ms(),
                on_chain_ms: c.on_chain_wait_ms,
                off_chain_ms: c.off_chain_ms,
                confirmation_waits: c.confirmation_waits,
                txs,
            });
        }
        let total = r.end - r.start;
        requests.push(RequestMetrics {
            pa: pa.did().to_string(),
            request: r.request,
            start_ms: r.start.millis(),
            end_ms: r.end.millis(),
            total_ms: total,
            on_chain_ms: on,
            off_chain_ms: total - on,
            coms: cycles.len(),
            terminals: r.terminals,
            confirmation_waits: waits,
        });
    }
    let per_pa = pas
        .iter()
        .enumerate()
        .map(|(i, pa)| {
            let rows: Vec<&RequestRecord> = records.iter().filter(|r| r.pa_index == i).collect();
            PaMetrics {
                pa: pa.did().to_string(),
                requests: rows.len(),
                first_start_ms: rows.first().map_or(0, |r| r.start.millis()),
                last_end_ms: rows.last().map_or(0, |r| r.end.millis()),
                request_completion_ms: rows.iter().map(|r| r.end - r.start).collect(),
            }
        })
        .collect();
    let total_ms = requests.iter().map(|r| r.total_ms).sum();
    let on_chain_ms = requests.iter().map(|r| r.on_chain_ms).sum();
    let aggregate = Aggregate {
        requests: requests.len(),
        coms: coms.len(),
        txs: tx_total,
        blocks: if mode == Mode::Dmas { ledger.blocks().len() } else { 0 },
        total_ms,
        on_chain_ms,
        off_chain_ms: total_ms - on_chain_ms,
        on_chain_share: on_chain_share(on_chain_ms, total_ms),
    };
    InteractionMetrics {
        requests,
        coms,
        per_pa,
        aggregate,
    }
}

fn write_csv<T: Serialize, W: io::Write>(out: W, header: &[&str], rows: &[T]) -> io::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()
}

pub const METRICS_COLUMNS: &[&str] = &[
    "pa",
    "request",
    "start_ms",
    "end_ms",
    "total_ms",
    "on_chain_ms",
    "off_chain_ms",
    "coms",
    "terminals",
    "confirmation_waits",
];

pub const CYCLE_COLUMNS: &[&str] = &[
    "pa",
    "request",
    "com",
    "sa",
    "kind",
    "start_ms",
    "end_ms",
    "total_ms",
    "on_chain_ms",
    "off_chain_ms",
    "confirmation_waits",
    "txs",
];

pub fn metrics_csv(m: &InteractionMetrics) -> Vec<u8> {
    let mut out = Vec::new();
    write_csv(&mut out, METRICS_COLUMNS, &m.requests).expect("in-memory write");
    out
}

pub fn cycles_csv(m: &InteractionMetrics) -> Vec<u8> {
    let mut out = Vec::new();
    write_csv(&mut out, CYCLE_COLUMNS, &m.coms).expect("in-memory write");
    out
}

pub fn audit_json(a: &AuditReport) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(a).expect("audit serializes");
    out.push(b'\n');
    out
}

pub fn summary_text(out: &RunOutput) -> String {
    let s = &out.scenario;
    let a = &out.metrics.aggregate;
    let mut text = String::new();
    text.push_str(&format!(
        "scenario {} mode={} seed={} pas={} requests/pa={}\n",
        s.name, s.mode, s.seed, s.pa_count, s.requests_per_pa
    ));
    text.push_str(&format!(
        "{:<12} {:>10} {:>6} {:>5} {:>7} {:>14} {:>14} {:>14} {:>8}\n",
        "", "requests", "coms", "txs", "blocks", "total_ms", "on_chain_ms", "off_chain_ms", "share"
    ));
    text.push_str(&format!(
        "{:<12} {:>10} {:>6} {:>5} {:>7} {:>14} {:>14} {:>14} {:>8.4}\n",
        "all", a.requests, a.coms, a.txs, a.blocks, a.total_ms, a.on_chain_ms, a.off_chain_ms, a.on_chain_share
    ));
    for pa in &out.metrics.per_pa {
        let rows: Vec<&RequestMetrics> = out.metrics.requests.iter().filter(|r| r.pa == pa.pa).collect();
        let total: u64 = rows.iter().map(|r| r.total_ms).sum();
        let on: u64 = rows.iter().map(|r| r.on_chain_ms).sum();
        let coms: usize = rows.iter().map(|r| r.coms).sum();
        text.push_str(&format!(
            "{:<12} {:>10} {:>6} {:>5} {:>7} {:>14} {:>14} {:>14} {:>8.4}\n",
            pa.pa.trim_start_matches(Did::METHOD_PREFIX),
            rows.len(),
            coms,
            "",
            "",
            total,
            on,
            total - on,
            on_chain_share(on, total)
        ));
    }
    text
}

/// Writes metrics.csv, cycles.csv, audit.json, trace.csv, summary.txt and,
/// in ledger mode, ledger.json into `dir`.
pub fn emit_report(out: &RunOutput, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&out.metrics))?;
    fs::write(dir.join("cycles.csv"), cycles_csv(&out.metrics))?;
    fs::write(dir.join("audit.json"), audit_json(&out.audit))?;
    if let Some(dump) = &out.ledger {
        let mut json = serde_json::to_vec_pretty(dump).expect("ledger serializes");
        json.push(b'\n');
        fs::write(dir.join("ledger.json"), json)?;
    }
    let mut trace = Vec::new();
    write_csv(
        &mut trace,
        &["time_ms", "delivered_ms", "from", "to", "kind", "size"],
        &out.trace,
    )?;
    fs::write(dir.join("trace.csv"), trace)?;
    fs::write(dir.join("summary.txt"), summary_text(out))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub pa_count: usize,
    pub on_chain_share: f64,
    pub total_ms: u64,
    pub on_chain_ms: u64,
    pub off_chain_ms: u64,
    pub requests: usize,
}

/// Runs `base` at each PA count, one OS thread per simulation.
pub fn sweep_pa_counts(base: &Scenario, counts: &[usize]) -> Result<Vec<SweepRow>, ConfigError> {
    let scenarios: Vec<Scenario> = counts
        .iter()
        .map(|&n| Scenario {
            pa_count: n,
            ..base.clone()
        })
        .collect();
    for s in &scenarios {
        s.validate()?;
    }
    let rows = std::thread::scope(|scope| {
        let handles: Vec<_> = scenarios
            .iter()
            .map(|s| {
                scope.spawn(move || {
                    let out = run_scenario(s).expect("validated above");
                    let a = out.metrics.aggregate;
                    SweepRow {
                        pa_count: s.pa_count,
                        on_chain_share: a.on_chain_share,
                        total_ms: a.total_ms,
                        on_chain_ms: a.on_chain_ms,
                        off_chain_ms: a.off_chain_ms,
                        requests: a.requests,
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    });
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> Vec<u8> {
    let mut out = Vec::new();
    write_csv(
        &mut out,
        &["pa_count", "on_chain_share", "total_ms", "on_chain_ms", "off_chain_ms", "requests"],
        rows,
    )
    .expect("in-memory write");
    out
}

/// Offline check of an audit record against a ledger dump.
///
/// Re-verifies every transaction signature against the key registered for
/// its sender at that point of the chain, then checks each cycle's linkage,
/// payment-before-release ordering and timing identity.
pub fn verify_audit(audit: &AuditReport, dump: &LedgerDump) -> Vec<String> {
    let mut violations = Vec::new();
    let mut keys: BTreeMap<Did, VerificationKey> = BTreeMap::new();
    let mut txs: BTreeMap<Digest, (&LedgerTx, VirtualTime)> = BTreeMap::new();
    for block in &dump.blocks {
        for tx in &block.txs {
            let digest = tx.digest();
            let key = match (&tx.body, keys.get(&tx.sender_did)) {
                (_, Some(k)) => Some(*k),
                (TxBody::Register(rec), None) => Some(rec.verification_key),
                (_, None) => None,
            };
            match key {
                Some(k) if tx.verify_signature(&k) => {}
                Some(_) => violations.push(format!("tx {digest}: signature does not verify")),
                None => violations.push(format!("tx {digest}: sender {} not registered", tx.sender_did)),
            }
            if let TxBody::Register(rec) = &tx.body {
                keys.insert(rec.did.clone(), rec.verification_key);
            }
            txs.insert(digest, (tx, block.timestamp));
        }
    }
    for (i, a) in audit.cycles.iter().enumerate() {
        let at = |what: &str| format!("cycle {i} ({} -> {}): {what}", a.pa, a.sa);
        let c = &a.cycle;
        if c.total_ms() != c.on_chain_wait_ms + c.off_chain_ms {
            violations.push(at("total != on-chain + off-chain"));
        }
        if !a.committed {
            continue;
        }
        let Some(req_ref) = a.request_tx else {
            violations.push(at("committed cycle without request tx"));
            continue;
        };
        match txs.get(&req_ref) {
            Some((
                LedgerTx {
                    body: TxBody::Request(r),
                    sender_did,
                    ..
                },
                _,
            )) => {
                if sender_did != &a.pa || r.requester != a.pa || r.target != a.sa {
                    violations.push(at("request tx parties do not match"));
                }
            }
            _ => {
                violations.push(at("request tx not on chain"));
                continue;
            }
        }
        if let Some(resp_ref) = a.response_tx {
            match txs.get(&resp_ref) {
                Some((
                    LedgerTx {
                        body: TxBody::Response(r),
                        sender_did,
                        ..
                    },
                    _,
                )) => {
                    if r.request_tx_digest != req_ref {
                        violations.push(at("response tx does not link to request"));
                    }
                    if sender_did != &a.sa {
                        violations.push(at("response tx not signed by target"));
                    }
                    if a.locator.as_ref().map(|l| l.digest) != Some(r.encrypted_response_digest) {
                        violations.push(at("locator digest differs from committed digest"));
                    }
                    if a.condition.as_ref() != Some(&r.condition) {
                        violations.push(at("condition differs from committed condition"));
                    }
                }
                _ => violations.push(at("response tx not on chain")),
            }
        }
        match (a.payment_tx, a.key_released_at) {
            (Some(pay_ref), released) => match txs.get(&pay_ref) {
                Some((
                    LedgerTx {
                        body: TxBody::Payment(p),
                        sender_did,
                        ..
                    },
                    confirmed,
                )) => {
                    if a.condition.as_ref().map(|c| c.condition_id) != Some(p.condition_id) {
                        violations.push(at("payment does not reference the cycle's condition"));
                    }
                    if sender_did != &a.pa {
                        violations.push(at("payment not signed by requester"));
                    }
                    if a.payment_confirmed_at != Some(*confirmed) {
                        violations.push(at("payment confirmation time differs from block timestamp"));
                    }
                    if let Some(released) = released {
                        if released < *confirmed {
                            violations.push(at("key released before payment confirmation"));
                        }
                    }
                }
                _ => violations.push(at("payment tx not on chain")),
            },
            (None, Some(_)) => violations.push(at("key released without payment")),
            (None, None) => {}
        }
    }
    violations
}
