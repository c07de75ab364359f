//! Shared fixtures and independent oracles for the integration suites.
#![allow(dead_code)]

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::future::Future;

use dmas::agents::{
    encode_reply, evaluate_tau, Behavior, Communicator, FirstSelectConfig, Network,
    NetworkSettings, ProxyAgentState, Reply, ResponderSpec, ServiceAgent, ServiceResult,
    SignalBoard, Tau, TerminalBehavior, UserRequest, World,
};
use dmas::fabric::LatencyModel;
use dmas::identity::{AgentIdentity, Did};
use dmas::ledger::{
    CapabilitySchema, DidRecord, Ledger, LedgerConfig, ServiceEntry, VirtualTime,
};
use dmas::sim::{Executor, SimHandle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub fn schema(tags: &[&str], is_router: bool) -> CapabilitySchema {
    CapabilitySchema {
        services: vec![ServiceEntry {
            name: "svc".into(),
            description: "test".into(),
            input_spec: "json".into(),
            output_spec: "reply".into(),
        }],
        endpoint: "sim://test".into(),
        tags: tags.iter().map(|t| t.to_string()).collect(),
        is_router,
    }
}

pub fn record(id: &AgentIdentity, schema: CapabilitySchema) -> DidRecord {
    DidRecord {
        did: id.did.clone(),
        verification_key: id.signing.public,
        encryption_key: id.encryption.public,
        capability_schema: schema,
        revoked: false,
    }
}

pub fn echo(delay: u64) -> ResponderSpec {
    ResponderSpec {
        behavior: Behavior::Terminal(TerminalBehavior::Echo),
        service_delay_ms: delay,
    }
}

/// A registered single-PA network for driving full protocol cycles.
pub struct Mini {
    pub net: Network,
    pub handle: SimHandle,
}

/// Registers one PA and the given SAs; every SA charges `fee`.
pub fn mini(seed: u64, sas: Vec<(Did, ResponderSpec)>, fee: u64, latency: LatencyModel) -> (Mini, ProxyAgentState) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let pa = AgentIdentity::generate(Did::dmas("pa-0"), &mut rng);
    let mut config = LedgerConfig::default();
    config.genesis_balances.insert(pa.did.clone(), u64::MAX / 2);
    let mut ledger = Ledger::new(config);
    ledger
        .register_did(record(&pa, schema(&["proxy"], false)), &pa.signing, 0)
        .unwrap();
    let mut agents = BTreeMap::new();
    let mut static_dir = dmas::ledger::StaticDirectory::default();
    for (did, spec) in sas {
        let id = AgentIdentity::generate(did.clone(), &mut rng);
        let is_router = matches!(spec.behavior, Behavior::Router { .. });
        let sch = schema(&["test"], is_router);
        static_dir.entries.insert(did.clone(), sch.clone());
        ledger.register_did(record(&id, sch), &id.signing, 0).unwrap();
        agents.insert(did, ServiceAgent::new(id, spec, fee));
    }
    static_dir.entries.insert(pa.did.clone(), schema(&["proxy"], false));
    ledger.advance_block();
    let handle = SimHandle::new(ledger.now());
    let mut world = World::new(ledger, latency, rng);
    world.static_directory = static_dir;
    let net = Network::new(world, agents, handle.clone(), NetworkSettings::default());
    (Mini { net, handle }, ProxyAgentState::new(pa, 4))
}

impl Mini {
    /// Runs `fut` to completion with ledger blocks produced on schedule.
    pub fn run<'a>(&'a self, fut: impl Future<Output = ()> + 'a) {
        let mut ex = Executor::with_handle(self.handle.clone());
        ex.on_advance(|t| {
            self.net.world.borrow_mut().ledger.advance_to(t);
        });
        ex.spawn(fut);
        ex.run();
    }
}

/// A delegation graph: each node either answers or forwards to a list.
#[derive(Debug, Clone)]
pub struct Graph {
    pub nodes: Vec<Did>,
    pub forwards: BTreeMap<Did, Vec<Did>>,
    pub first: Vec<Did>,
}

pub fn node(i: usize) -> Did {
    Did::new(format!("n{i:02}"))
}

impl Graph {
    pub fn is_terminal(&self, d: &Did) -> bool {
        !self.forwards.contains_key(d)
    }

    /// Random graph on `n ≤ 20` nodes. Acyclic graphs only point from lower
    /// to higher indices.
    pub fn random(rng: &mut ChaCha20Rng, acyclic: bool) -> Self {
        let n = rng.gen_range(1..=20);
        let nodes: Vec<Did> = (0..n).map(node).collect();
        let mut forwards = BTreeMap::new();
        for i in 0..n {
            if rng.gen_bool(0.45) {
                let k = rng.gen_range(0..=4);
                let targets: Vec<Did> = (0..k)
                    .filter_map(|_| {
                        if acyclic {
                            (i + 1 < n).then(|| node(rng.gen_range(i + 1..n)))
                        } else {
                            Some(node(rng.gen_range(0..n)))
                        }
                    })
                    .collect();
                forwards.insert(node(i), targets);
            }
        }
        let first_len = rng.gen_range(0..=n.min(4));
        let first = (0..first_len).map(|_| node(rng.gen_range(0..n))).collect();
        Self {
            nodes,
            forwards,
            first,
        }
    }

    /// A graph with at least one cycle reachable from the start list.
    pub fn random_cyclic(rng: &mut ChaCha20Rng) -> Self {
        loop {
            let mut g = Self::random(rng, false);
            if g.nodes.len() < 2 {
                continue;
            }
            // Close a loop through the first start node.
            let a = node(0);
            let b = node(rng.gen_range(1..g.nodes.len()));
            g.forwards.entry(a.clone()).or_default().push(b.clone());
            g.forwards.entry(b).or_default().push(a.clone());
            g.first.push(a);
            return g;
        }
    }
}

/// Instant transport answering from a graph; also checks that no com starts
/// while τ holds.
pub struct GraphComm<'g> {
    pub graph: &'g Graph,
    pub clock: Cell<u64>,
    pub tau: Tau,
    pub signals: SignalBoard,
    pub violations: Cell<usize>,
}

impl<'g> GraphComm<'g> {
    pub fn new(graph: &'g Graph, tau: Tau) -> Self {
        Self {
            graph,
            clock: Cell::new(0),
            tau,
            signals: SignalBoard::default(),
            violations: Cell::new(0),
        }
    }
}

impl Communicator for GraphComm<'_> {
    fn now(&self) -> VirtualTime {
        VirtualTime(self.clock.get())
    }

    fn first_select(&self, _: &UserRequest, _: &FirstSelectConfig) -> Vec<Did> {
        self.graph.first.clone()
    }

    async fn exchange(&self, pa: &mut ProxyAgentState, sa: &Did, _: &UserRequest, _: usize) -> ServiceResult {
        if evaluate_tau(&self.tau, &pa.run, self.now(), &self.signals) {
            self.violations.set(self.violations.get() + 1);
        }
        self.clock.set(self.clock.get() + 10);
        let reply = match self.graph.forwards.get(sa) {
            Some(c) => Reply::Forward { candidates: c.clone() },
            None => Reply::Terminal {
                content: sa.to_string(),
            },
        };
        let raw = encode_reply(&reply);
        let outcome = match dmas::agents::decode_reply(&raw).unwrap() {
            Reply::Terminal { content } => dmas::agents::Outcome::Terminal {
                content: content.into_bytes(),
            },
            Reply::Forward { candidates } => dmas::agents::Outcome::Forward { candidates },
        };
        ServiceResult {
            source: sa.clone(),
            outcome,
            cycle_audit: None,
        }
    }
}

/// Oracle: explicit stack simulation of depth-first delegation order.
pub fn stack_oracle(g: &Graph) -> Vec<Did> {
    let mut stack: Vec<Did> = g.first.clone();
    let mut seen = BTreeSet::new();
    let mut order = Vec::new();
    while let Some(s) = stack.pop() {
        if seen.contains(&s) {
            continue;
        }
        seen.insert(s.clone());
        order.push(s.clone());
        if let Some(next) = g.forwards.get(&s) {
            for c in next {
                stack.push(c.clone());
            }
        }
    }
    order
}

/// Oracle: explicit queue simulation of breadth-first order.
pub fn queue_oracle(g: &Graph) -> Vec<Did> {
    let mut queue: VecDeque<Did> = g.first.iter().cloned().collect();
    let mut seen = BTreeSet::new();
    let mut order = Vec::new();
    while let Some(s) = queue.pop_front() {
        if !seen.insert(s.clone()) {
            continue;
        }
        order.push(s.clone());
        for c in g.forwards.get(&s).into_iter().flatten() {
            queue.push_back(c.clone());
        }
    }
    order
}

/// Oracle: terminal nodes reachable from the start list (recursive search).
pub fn reachable_terminals(g: &Graph) -> BTreeSet<Did> {
    fn visit(g: &Graph, d: &Did, seen: &mut BTreeSet<Did>) {
        if !seen.insert(d.clone()) {
            return;
        }
        for c in g.forwards.get(d).into_iter().flatten() {
            visit(g, c, seen);
        }
    }
    let mut seen = BTreeSet::new();
    for d in &g.first {
        visit(g, d, &mut seen);
    }
    seen.into_iter().filter(|d| g.is_terminal(d)).collect()
}

pub fn pa_state(seed: u64) -> ProxyAgentState {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    ProxyAgentState::new(AgentIdentity::generate(Did::dmas("pa"), &mut rng), 4)
}
