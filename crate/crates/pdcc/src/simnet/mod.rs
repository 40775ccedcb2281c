//! Deterministic discrete-event simulator: logical time, seeded delays with
//! a partial-synchrony (GST) model, scripted clients, a Byzantine behavior
//! catalog, and online invariant checks. Identical (scenario, seed) pairs
//! produce byte-identical traces.

pub mod adversary;
pub mod client;
pub mod scenario;

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{Digest, Encode};
use crate::domain::{AccountId, Nonce, ValidatorId};
use crate::messages::{ClientId, Message, NodeId, Step, TimerKind};
use crate::trace::{Effect, EventKind, TraceRecord};
use crate::validator::Validator;

pub use adversary::AdversaryState;
pub use client::ClientNode;
pub use scenario::{
    AdversaryNodeSpec, Behavior, ClientSpec, EquivocateSpec, GenesisSpec, GoalSpec, MutationSpec,
    NetworkSpec, ReconfigSpec, Scenario, ScenarioError, TransferSpec, ValidatorSpec,
};

/// Client id reserved for the reconfiguration admin.
pub const ADMIN_CLIENT: ClientId = ClientId(1_000_000);

#[derive(Debug, Clone)]
pub enum Node {
    Validator(Box<ValidatorNode>),
    Client(Box<ClientNode>),
}

#[derive(Debug, Clone)]
pub struct ValidatorNode {
    pub v: Validator,
    pub adversary: Option<AdversaryState>,
}

impl Node {
    /// Delivers one message; `false` means the node dropped it unprocessed
    /// (crashed).
    pub fn deliver(&mut self, src: NodeId, msg: Message, now: u64) -> (bool, Step) {
        match self {
            Node::Validator(vn) => {
                if vn.adversary.as_ref().is_some_and(|a| a.crashed(now)) {
                    let mut s = Step::default();
                    s.effect(Effect::MessageDropped { reason: "crashed".into() });
                    (false, s)
                } else if let Some(adv) = vn.adversary.as_mut() {
                    (true, adv.handle_message(&mut vn.v, src, msg, now))
                } else {
                    (true, vn.v.handle_message(src, msg, now))
                }
            }
            Node::Client(c) => {
                let mut s = Step::default();
                c.handle_message(src, msg, &mut s);
                (true, s)
            }
        }
    }

    pub fn fire(&mut self, kind: TimerKind, now: u64) -> Step {
        match self {
            Node::Validator(vn) => {
                if vn.adversary.as_ref().is_some_and(|a| a.crashed(now)) {
                    Step::default()
                } else {
                    vn.v.handle_timer(kind, now)
                }
            }
            Node::Client(c) => {
                let mut s = Step::default();
                c.handle_timer(kind, &mut s);
                s
            }
        }
    }

    pub fn start(&mut self) -> Step {
        match self {
            Node::Validator(_) => Step::default(),
            Node::Client(c) => {
                let mut s = Step::default();
                c.start(&mut s);
                s
            }
        }
    }

    pub fn state_digest(&self) -> Digest {
        match self {
            Node::Validator(vn) => vn.v.state_digest_full(),
            Node::Client(c) => c.state_digest(),
        }
    }
}

/// Builds the node map for a validated scenario; shared by the simulator
/// and the interleaving explorer.
pub fn build_nodes(scenario: &Scenario) -> BTreeMap<NodeId, Node> {
    let directory = scenario.key_directory();
    let config = scenario.genesis_config();
    let accounts = scenario.genesis_accounts();
    let params = scenario.validator_params();
    let mutations = scenario.mutation_flags();

    let mut nodes: BTreeMap<NodeId, Node> = BTreeMap::new();
    for vid in scenario.validator_ids() {
        let mut v = Validator::new(
            vid,
            scenario.key_pair(vid),
            directory.clone(),
            config.clone(),
            accounts.clone(),
            params,
        );
        let adversary = scenario
            .adversary
            .iter()
            .find(|a| a.id == vid.0)
            .map(|a| AdversaryState::new(a.behavior, a.crash_at, scenario.key_pair(vid)));
        if adversary.is_none() {
            v.mutations = mutations;
        }
        nodes.insert(
            NodeId::Validator(vid),
            Node::Validator(Box::new(ValidatorNode { v, adversary })),
        );
    }
    let validator_ids = scenario.validator_ids();
    for spec in &scenario.clients {
        let client = ClientNode::from_spec(
            spec,
            validator_ids.clone(),
            directory.clone(),
            scenario.network.client_retry_interval,
        );
        nodes.insert(NodeId::Client(client.id), Node::Client(Box::new(client)));
    }
    if !scenario.reconfigs.is_empty() {
        let admin = ClientNode::reconfig_admin(
            ADMIN_CLIENT,
            scenario.reconfigs.clone(),
            validator_ids,
            directory,
            scenario.network.client_retry_interval,
        );
        nodes.insert(NodeId::Client(ADMIN_CLIENT), Node::Client(Box::new(admin)));
    }
    nodes
}

#[derive(Debug, Clone)]
enum EventBody {
    Deliver { src: NodeId, dst: NodeId, msg: Message, sent_at: u64 },
    Timer { node: NodeId, kind: TimerKind },
    ClientStart { client: ClientId },
}

/// First safety or conservation failure observed online.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OnlineViolation {
    pub property: String,
    pub step: u64,
    pub node: String,
    pub description: String,
}

/// Cheap cross-validator bookkeeping updated after every event; the offline
/// checker is the authoritative audit, this catches violations fail-fast.
#[derive(Debug, Clone, Default)]
pub struct OnlineState {
    pub initial_supply: u128,
    pub members: BTreeMap<u64, BTreeSet<ValidatorId>>,
    pub delivered: BTreeMap<(u64, u64), Digest>,
    pub ch_entries: BTreeMap<u64, String>,
    pub executions: BTreeMap<(AccountId, Nonce), Digest>,
}

impl OnlineState {
    pub(crate) fn check_effect(&mut self, node: &str, effect: &Effect) -> Option<(String, String)> {
        match effect {
            Effect::CertAccepted { cert_epoch, installed, .. } => {
                if cert_epoch != installed {
                    return Some((
                        "invariant-i-configuration-bound-certification".into(),
                        format!(
                            "{node} accepted a certificate for epoch {cert_epoch} while \
                             installed at {installed}"
                        ),
                    ));
                }
            }
            Effect::Delivered { epoch, slot, payload_hash, .. } => {
                if let Some(prev) = self.delivered.get(&(*epoch, *slot)) {
                    if prev != payload_hash {
                        return Some((
                            "invariant-ii-same-configuration-delivery".into(),
                            format!(
                                "{node} delivered {payload_hash} at ({epoch}, {slot}) but \
                                 another correct validator delivered {prev}"
                            ),
                        ));
                    }
                } else {
                    self.delivered.insert((*epoch, *slot), *payload_hash);
                }
            }
            Effect::Installed { new_epoch, members, entry_bytes, .. } => {
                if let Some(prev) = self.ch_entries.get(new_epoch) {
                    if prev != entry_bytes {
                        return Some((
                            "invariant-ii-same-configuration-delivery".into(),
                            format!("{node} appended a different history entry at {new_epoch}"),
                        ));
                    }
                } else {
                    self.ch_entries.insert(*new_epoch, entry_bytes.clone());
                }
                self.members.insert(*new_epoch, members.iter().copied().collect());
            }
            Effect::Executed { sender, nonce, tx_digest, total_supply, .. } => {
                if *total_supply != self.initial_supply {
                    return Some((
                        "conservation".into(),
                        format!(
                            "{node} reports total supply {total_supply}, expected {}",
                            self.initial_supply
                        ),
                    ));
                }
                let key = (sender.clone(), *nonce);
                if let Some(prev) = self.executions.get(&key) {
                    if prev != tx_digest {
                        return Some((
                            "no-double-spend".into(),
                            format!(
                                "{node} executed {tx_digest} at ({sender}, {nonce}) but \
                                 {prev} was executed elsewhere"
                            ),
                        ));
                    }
                } else {
                    self.executions.insert(key, *tx_digest);
                }
            }
            Effect::QuorumFormed { epoch, signers, kind, .. } => {
                if let Some(members) = self.members.get(epoch) {
                    for s in signers {
                        if !members.contains(s) {
                            return Some((
                                "invariant-iii-no-quorum-pollution".into(),
                                format!(
                                    "{node} counted non-member {s} in a {kind:?} quorum for \
                                     epoch {epoch}"
                                ),
                            ));
                        }
                    }
                }
            }
            Effect::Anomaly { description } => {
                return Some(("anomaly".into(), format!("{node}: {description}")));
            }
            _ => {}
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    GoalsMet,
    Quiesced,
    BudgetExhausted,
    ViolationHalted,
}

pub struct Simulation {
    pub scenario: Scenario,
    pub seed: u64,
    rng: ChaCha8Rng,
    pub now: u64,
    pub steps: u64,
    next_seq: u64,
    queue: BTreeMap<(u64, u64), EventBody>,
    pub nodes: BTreeMap<NodeId, Node>,
    pub trace: Vec<TraceRecord>,
    pub online: OnlineState,
    pub violation: Option<OnlineViolation>,
    pub check_online: bool,
    corrupt: BTreeSet<ValidatorId>,
    scripted: BTreeMap<(AccountId, Nonce), Digest>,
}

impl Simulation {
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        let config = scenario.genesis_config();
        let accounts = scenario.genesis_accounts();
        let corrupt = scenario.corrupt_set();
        let nodes = build_nodes(&scenario);

        let mut sim = Simulation {
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            now: 0,
            steps: 0,
            next_seq: 0,
            queue: BTreeMap::new(),
            nodes,
            trace: Vec::new(),
            online: OnlineState {
                initial_supply: accounts.total_supply(),
                members: BTreeMap::from([(0, config.members.iter().copied().collect())]),
                ..OnlineState::default()
            },
            violation: None,
            check_online: true,
            corrupt,
            scripted: scenario.scripted_transfers(),
            scenario,
        };

        // Seed the calendar: client starts, reconfiguration triggers, and the
        // first checkpoint tick for every genesis member.
        for spec in &sim.scenario.clients.clone() {
            sim.push_event(spec.start, EventBody::ClientStart { client: ClientId(spec.id) });
        }
        for r in &sim.scenario.reconfigs.clone() {
            sim.push_event(r.at, EventBody::ClientStart { client: ADMIN_CLIENT });
        }
        let tick = sim.scenario.network.checkpoint_interval;
        for m in sim.scenario.genesis.members.clone() {
            sim.push_event(
                tick,
                EventBody::Timer {
                    node: NodeId::Validator(ValidatorId(m)),
                    kind: TimerKind::CheckpointTick,
                },
            );
        }
        sim
    }

    fn push_event(&mut self, at: u64, body: EventBody) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((at, seq), body);
    }

    /// Network delay for a message sent now. After GST every delivery lands
    /// within `delta`; before GST delays are arbitrary up to the configured
    /// bound, but nothing sent before GST arrives later than `gst + delta`.
    fn sample_delay(&mut self, now: u64) -> u64 {
        let net = self.scenario.network;
        if now >= net.gst {
            self.rng.gen_range(1..=net.delta.max(1))
        } else {
            let raw = self.rng.gen_range(1..=net.pre_gst_delay_max.max(1));
            let cap = (net.gst - now) + self.rng.gen_range(1..=net.delta.max(1));
            raw.min(cap)
        }
    }

    fn apply_step(&mut self, origin: NodeId, step: &Step) {
        for (to, msg) in &step.outgoing {
            let delay = self.sample_delay(self.now);
            let at = self.now + delay;
            self.push_event(
                at,
                EventBody::Deliver {
                    src: origin,
                    dst: *to,
                    msg: msg.clone(),
                    sent_at: self.now,
                },
            );
        }
        for (kind, delay) in &step.timers {
            let at = self.now + (*delay).max(1);
            self.push_event(at, EventBody::Timer { node: origin, kind: *kind });
        }
    }

    fn node_state_digest(&self, id: NodeId) -> Digest {
        match self.nodes.get(&id) {
            Some(Node::Validator(vn)) => vn.v.state_digest_summary(),
            Some(Node::Client(c)) => c.state_digest(),
            None => Digest::ZERO,
        }
    }

    fn is_correct_validator(&self, id: NodeId) -> bool {
        matches!(id, NodeId::Validator(v) if !self.corrupt.contains(&v))
    }

    fn run_online_checks(&mut self, id: NodeId, effects: &[Effect]) {
        if !self.check_online || self.violation.is_some() || !self.is_correct_validator(id) {
            return;
        }
        let node_name = id.to_string();
        for e in effects {
            if let Some((property, description)) = self.online.check_effect(&node_name, e) {
                self.violation = Some(OnlineViolation {
                    property,
                    step: self.steps,
                    node: node_name.clone(),
                    description,
                });
                return;
            }
        }
    }

    /// Processes the next event; returns the trace record it produced, or
    /// `None` when the queue is empty.
    pub fn step(&mut self) -> Option<&TraceRecord> {
        let (&(time, seq), _) = self.queue.iter().next()?;
        let body = self.queue.remove(&(time, seq)).expect("peeked");
        self.now = time;
        self.steps += 1;

        let record = match body {
            EventBody::Deliver { src, dst, msg, sent_at } => {
                self.deliver(src, dst, msg, sent_at)
            }
            EventBody::Timer { node, kind } => self.fire_timer(node, kind),
            EventBody::ClientStart { client } => self.client_start(client),
        };
        self.trace.push(record);
        self.trace.last()
    }

    fn deliver(&mut self, src: NodeId, dst: NodeId, msg: Message, sent_at: u64) -> TraceRecord {
        let msg_kind = msg.kind_name().to_string();
        let msg_digest = Encode::digest(&msg);
        let now = self.now;

        let (event_kind, step) = match self.nodes.get_mut(&dst) {
            Some(node) => {
                let (processed, step) = node.deliver(src, msg, now);
                let kind = if processed { EventKind::MessageDelivery } else { EventKind::Dropped };
                (kind, step)
            }
            None => {
                let mut s = Step::default();
                s.effect(Effect::MessageDropped { reason: "unknown destination".into() });
                (EventKind::Dropped, s)
            }
        };

        self.apply_step(dst, &step);
        self.run_online_checks(dst, &step.effects);
        TraceRecord {
            step: self.steps,
            time: now,
            node: dst.to_string(),
            event_kind,
            message_kind: Some(msg_kind),
            message_digest: Some(msg_digest),
            sent_at: Some(sent_at),
            src: Some(src.to_string()),
            state_digest_after: self.node_state_digest(dst),
            effects: step.effects,
        }
    }

    fn fire_timer(&mut self, node: NodeId, kind: TimerKind) -> TraceRecord {
        let now = self.now;
        let step = match self.nodes.get_mut(&node) {
            Some(n) => n.fire(kind, now),
            None => Step::default(),
        };
        self.apply_step(node, &step);
        self.run_online_checks(node, &step.effects);
        TraceRecord {
            step: self.steps,
            time: now,
            node: node.to_string(),
            event_kind: EventKind::TimerFire,
            message_kind: None,
            message_digest: None,
            sent_at: None,
            src: None,
            state_digest_after: self.node_state_digest(node),
            effects: step.effects,
        }
    }

    fn client_start(&mut self, client: ClientId) -> TraceRecord {
        let id = NodeId::Client(client);
        let step = match self.nodes.get_mut(&id) {
            Some(n) => n.start(),
            None => Step::default(),
        };
        self.apply_step(id, &step);
        TraceRecord {
            step: self.steps,
            time: self.now,
            node: id.to_string(),
            event_kind: EventKind::ClientAction,
            message_kind: None,
            message_digest: None,
            sent_at: None,
            src: None,
            state_digest_after: self.node_state_digest(id),
            effects: step.effects,
        }
    }

    /// All scripted goals met: every correct validator reached the epoch it
    /// is obliged to reach, and every scripted transfer is reflected at every
    /// correct member of the final configuration.
    pub fn goals_met(&self) -> bool {
        // Cheap pre-filter: no validator can cover the scripted transfers
        // before it has executed at least that many slots.
        for node in self.nodes.values() {
            if let Node::Validator(vn) = node {
                if !self.corrupt.contains(&vn.v.id)
                    && vn.v.is_member()
                    && vn.v.executed.len() < self.scripted.len()
                    && vn.v.installed_index() == 0
                    && !self.scripted.is_empty()
                {
                    return false;
                }
            }
        }
        let goals = self.scenario.effective_goals();
        let seq = self.scenario.config_sequence();
        let final_members: BTreeSet<ValidatorId> =
            seq.last().map(|m| m.iter().copied().collect()).unwrap_or_default();
        for (id, node) in &self.nodes {
            let NodeId::Validator(vid) = id else { continue };
            if self.corrupt.contains(vid) {
                continue;
            }
            let Node::Validator(vn) = node else { continue };
            let last_member_epoch = seq
                .iter()
                .enumerate()
                .filter(|(_, m)| m.contains(vid))
                .map(|(i, _)| i as u64)
                .next_back();
            let Some(last) = last_member_epoch else { continue };
            let obliged = goals.final_epoch.min(last + 1);
            if vn.v.installed_index() < obliged {
                return false;
            }
            if goals.all_transfers && final_members.contains(vid) {
                for ((sender, nonce), tx_digest) in &self.scripted {
                    let covered = match vn.v.executed.get(&(sender.clone(), *nonce)) {
                        Some(d) => d == tx_digest,
                        None => vn
                            .v
                            .live_accounts
                            .get(sender)
                            .is_some_and(|r| r.next_nonce > *nonce),
                    };
                    if !covered {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Nothing left but idle housekeeping: every queued event is a periodic
    /// checkpoint tick and no member holds settlement work.
    pub fn idle(&self) -> bool {
        let only_ticks = self
            .queue
            .values()
            .all(|e| matches!(e, EventBody::Timer { kind: TimerKind::CheckpointTick, .. }));
        only_ticks
            && self.nodes.values().all(|n| match n {
                Node::Validator(vn) => {
                    vn.v.retired_at.is_some()
                        || !vn.v.is_member()
                        || !vn.v.has_settlement_work()
                }
                Node::Client(c) => c.is_idle(),
            })
    }

    /// Steps until the goals hold, the system goes idle, the budget runs
    /// out, or an online check fails.
    pub fn run(&mut self, max_steps: u64) -> RunOutcome {
        self.run_until(Simulation::goals_met, max_steps)
    }

    /// Steps until `condition` holds or the budget is exhausted.
    pub fn run_until(
        &mut self,
        condition: impl Fn(&Simulation) -> bool,
        budget: u64,
    ) -> RunOutcome {
        loop {
            if self.violation.is_some() {
                return RunOutcome::ViolationHalted;
            }
            if self.steps % 16 == 0 {
                if condition(self) {
                    return RunOutcome::GoalsMet;
                }
                if self.idle() {
                    return if condition(self) {
                        RunOutcome::GoalsMet
                    } else {
                        RunOutcome::Quiesced
                    };
                }
            }
            if self.steps >= budget {
                return RunOutcome::BudgetExhausted;
            }
            if self.step().is_none() {
                return if condition(self) {
                    RunOutcome::GoalsMet
                } else {
                    RunOutcome::Quiesced
                };
            }
        }
    }

    pub fn validator(&self, id: ValidatorId) -> Option<&Validator> {
        match self.nodes.get(&NodeId::Validator(id)) {
            Some(Node::Validator(vn)) => Some(&vn.v),
            _ => None,
        }
    }

    pub fn correct_validators(&self) -> impl Iterator<Item = &Validator> {
        self.nodes.values().filter_map(move |n| match n {
            Node::Validator(vn) if !self.corrupt.contains(&vn.v.id) => Some(&vn.v),
            _ => None,
        })
    }

    pub fn trace_jsonl(&self) -> String {
        crate::trace::to_jsonl(&self.trace)
    }
}

/// Loads and validates a scenario, producing a simulation ready to step.
pub fn load_scenario(path: &std::path::Path, seed: u64) -> Result<Simulation, ScenarioError> {
    let scenario = Scenario::load(path)?;
    Ok(Simulation::new(scenario, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn transfer_scenario() -> Scenario {
        Scenario {
            name: "smoke".into(),
            validators: (0..4).map(|id| ValidatorSpec { id, key: None }).collect(),
            genesis: GenesisSpec {
                members: vec![0, 1, 2, 3],
                accounts: BTreeMap::from([("a".into(), 100), ("b".into(), 100)]),
            },
            network: NetworkSpec { gst: 0, ..NetworkSpec::default() },
            clients: vec![ClientSpec {
                id: 0,
                start: 5,
                transfers: vec![
                    TransferSpec {
                        sender: "a".into(),
                        recipient: "b".into(),
                        amount: 7,
                        nonce: 0,
                    },
                    TransferSpec {
                        sender: "a".into(),
                        recipient: "b".into(),
                        amount: 3,
                        nonce: 1,
                    },
                ],
                equivocate: None,
            }],
            reconfigs: vec![],
            adversary: vec![],
            mutations: vec![],
            allow_assumption_violations: false,
            goals: None,
        }
    }

    #[test]
    fn healthy_transfers_execute_everywhere() {
        let mut sim = Simulation::new(transfer_scenario(), 7);
        let outcome = sim.run(50_000);
        assert_eq!(outcome, RunOutcome::GoalsMet, "violation: {:?}", sim.violation);
        for v in sim.correct_validators() {
            let a = v.live_accounts.get(&"a".into()).unwrap();
            assert_eq!(a.next_nonce, 2);
            assert_eq!(a.balance, 90);
        }
    }

    #[test]
    fn same_seed_gives_identical_traces() {
        let mut a = Simulation::new(transfer_scenario(), 42);
        let mut b = Simulation::new(transfer_scenario(), 42);
        a.run(50_000);
        b.run(50_000);
        assert_eq!(a.trace_jsonl(), b.trace_jsonl());
    }

    #[test]
    fn different_seeds_usually_differ() {
        let mut a = Simulation::new(transfer_scenario(), 1);
        let mut b = Simulation::new(transfer_scenario(), 2);
        a.run(50_000);
        b.run(50_000);
        assert_ne!(a.trace_jsonl(), b.trace_jsonl());
    }

    #[test]
    fn post_gst_messages_always_land_within_delta() {
        let mut sim = Simulation::new(transfer_scenario(), 3);
        sim.run(50_000);
        let delta = sim.scenario.network.delta;
        let gst = sim.scenario.network.gst;
        for r in &sim.trace {
            if let (Some(sent), time) = (r.sent_at, r.time) {
                if sent >= gst {
                    assert!(time - sent <= delta, "late delivery at step {}", r.step);
                }
            }
        }
    }
}
