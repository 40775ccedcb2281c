//! Interleaving exploration: bounded exhaustive enumeration of delivery
//! orders with state-hash deduplication, plus a systematically randomized
//! mode that sweeps simulator seeds. Invariants are checked in every visited
//! state; a violation yields the minimal action prefix that reaches it.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::codec::{Digest, Encode};
use crate::messages::{ClientId, Message, NodeId, Step, TimerKind};
use crate::simnet::{build_nodes, Node, OnlineState, Scenario, Simulation};
use crate::trace::Effect;

#[derive(Debug, Clone, Copy)]
pub enum ExploreMode {
    /// Depth-bounded DFS over single-event scheduling choices.
    Exhaustive { depth: usize, max_states: u64 },
    /// Seeded simulator runs with online checks; each seed is one randomly
    /// scheduled interleaving.
    Randomized { seed_start: u64, seed_end: u64, max_steps: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Counterexample {
    pub property: String,
    pub description: String,
    /// Action trail from the initial state (exhaustive mode), or empty for
    /// randomized mode where (seed, step) pins the schedule.
    pub schedule: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExploreReport {
    pub states_explored: u64,
    pub dedup_hits: u64,
    pub budget_exhausted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub violation: Option<Counterexample>,
}

/// One schedulable choice in the exhaustive explorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Action {
    Deliver(u64),
    FireTimer(u64),
    StartClient(u64),
}

#[derive(Clone)]
struct ExploreState {
    nodes: BTreeMap<NodeId, Node>,
    pending: BTreeMap<u64, (NodeId, NodeId, Message)>,
    next_msg: u64,
    timers: BTreeMap<u64, (NodeId, TimerKind)>,
    next_timer: u64,
    starts: BTreeMap<u64, ClientId>,
    online: OnlineState,
    actions: u64,
}

impl ExploreState {
    fn initial(scenario: &Scenario) -> Self {
        let nodes = build_nodes(scenario);
        let mut starts = BTreeMap::new();
        let mut i = 0u64;
        for c in &scenario.clients {
            starts.insert(i, ClientId(c.id));
            i += 1;
        }
        for _ in &scenario.reconfigs {
            starts.insert(i, crate::simnet::ADMIN_CLIENT);
            i += 1;
        }
        ExploreState {
            nodes,
            pending: BTreeMap::new(),
            next_msg: 0,
            timers: BTreeMap::new(),
            next_timer: 0,
            starts,
            online: OnlineState {
                initial_supply: scenario.genesis_accounts().total_supply(),
                members: BTreeMap::from([(
                    0,
                    scenario.genesis_config().members.iter().copied().collect(),
                )]),
                ..OnlineState::default()
            },
            actions: 0,
        }
    }

    fn choices(&self) -> Vec<Action> {
        let mut out: Vec<Action> = self.pending.keys().map(|id| Action::Deliver(*id)).collect();
        // Timers fire in arming order; one pending timer choice at a time
        // keeps the branching factor linear in the message count.
        if let Some(id) = self.timers.keys().next() {
            out.push(Action::FireTimer(*id));
        }
        if let Some(id) = self.starts.keys().next() {
            out.push(Action::StartClient(*id));
        }
        out
    }

    fn describe(&self, action: Action) -> String {
        match action {
            Action::Deliver(id) => match self.pending.get(&id) {
                Some((src, dst, msg)) => {
                    format!("deliver {} {src}->{dst}", msg.kind_name())
                }
                None => format!("deliver #{id}"),
            },
            Action::FireTimer(id) => match self.timers.get(&id) {
                Some((node, kind)) => format!("timer {node} {kind:?}"),
                None => format!("timer #{id}"),
            },
            Action::StartClient(id) => match self.starts.get(&id) {
                Some(c) => format!("start {c}"),
                None => format!("start #{id}"),
            },
        }
    }

    fn absorb(&mut self, origin: NodeId, step: Step) -> Vec<Effect> {
        for (to, msg) in step.outgoing {
            self.pending.insert(self.next_msg, (origin, to, msg));
            self.next_msg += 1;
        }
        for (kind, _) in step.timers {
            // Client retransmissions are redundant under explorer scheduling:
            // every message is eventually deliverable by choice.
            if matches!(kind, TimerKind::ClientRetry { .. }) {
                continue;
            }
            self.timers.insert(self.next_timer, (origin, kind));
            self.next_timer += 1;
        }
        step.effects
    }

    /// Applies an action; returns the acting node and resulting effects.
    fn apply(&mut self, action: Action) -> (NodeId, Vec<Effect>) {
        self.actions += 1;
        let now = self.actions;
        match action {
            Action::Deliver(id) => {
                let (src, dst, msg) = self.pending.remove(&id).expect("valid choice");
                let step = match self.nodes.get_mut(&dst) {
                    Some(node) => node.deliver(src, msg, now).1,
                    None => Step::default(),
                };
                (dst, self.absorb(dst, step))
            }
            Action::FireTimer(id) => {
                let (node_id, kind) = self.timers.remove(&id).expect("valid choice");
                let step = match self.nodes.get_mut(&node_id) {
                    Some(node) => node.fire(kind, now),
                    None => Step::default(),
                };
                (node_id, self.absorb(node_id, step))
            }
            Action::StartClient(id) => {
                let client = self.starts.remove(&id).expect("valid choice");
                let node_id = NodeId::Client(client);
                let step = match self.nodes.get_mut(&node_id) {
                    Some(node) => node.start(),
                    None => Step::default(),
                };
                (node_id, self.absorb(node_id, step))
            }
        }
    }

    fn digest(&self) -> Digest {
        let mut out = Vec::new();
        for (id, node) in &self.nodes {
            id.encode_into(&mut out);
            node.state_digest().encode_into(&mut out);
        }
        // Pending messages as a multiset: identity is (src, dst, content).
        let mut msgs: Vec<Digest> = self
            .pending
            .values()
            .map(|(src, dst, m)| {
                let mut b = Vec::new();
                src.encode_into(&mut b);
                dst.encode_into(&mut b);
                m.encode_into(&mut b);
                crate::codec::digest(&b)
            })
            .collect();
        msgs.sort_unstable();
        msgs.encode_into(&mut out);
        let timers: Vec<(NodeId, TimerKind)> = self.timers.values().cloned().collect();
        for (n, k) in &timers {
            n.encode_into(&mut out);
            k.encode_into(&mut out);
        }
        (self.starts.len() as u64).encode_into(&mut out);
        crate::codec::digest(&out)
    }
}

/// Explores message interleavings of a scenario and checks the safety
/// invariants in every visited state.
pub fn explore_interleavings(scenario: &Scenario, mode: ExploreMode) -> ExploreReport {
    match mode {
        ExploreMode::Exhaustive { depth, max_states } => exhaustive(scenario, depth, max_states),
        ExploreMode::Randomized { seed_start, seed_end, max_steps } => {
            randomized(scenario, seed_start..seed_end, max_steps)
        }
    }
}

fn exhaustive(scenario: &Scenario, depth: usize, max_states: u64) -> ExploreReport {
    let corrupt = scenario.corrupt_set();
    let mut report = ExploreReport {
        states_explored: 0,
        dedup_hits: 0,
        budget_exhausted: false,
        violation: None,
    };
    // Best (shallowest) depth at which each state hash was expanded; a state
    // is revisited only if reached again with more remaining budget.
    let mut visited: HashMap<Digest, usize> = HashMap::new();
    let root = ExploreState::initial(scenario);
    let mut stack: Vec<(ExploreState, usize, Vec<String>)> = vec![(root, 0, Vec::new())];

    while let Some((state, d, trail)) = stack.pop() {
        if report.states_explored >= max_states {
            report.budget_exhausted = true;
            return report;
        }
        report.states_explored += 1;
        if d >= depth {
            continue;
        }
        // Deterministic order: deliveries by id, then timer, then start;
        // reversed so the stack pops them in ascending order.
        let mut choices = state.choices();
        choices.reverse();
        for action in choices {
            let mut next = state.clone();
            let label = next.describe(action);
            let (actor, effects) = next.apply(action);
            let mut trail2 = trail.clone();
            trail2.push(label);

            // Check invariants at the new state (correct validators only).
            let is_correct = matches!(actor, NodeId::Validator(v) if !corrupt.contains(&v));
            if is_correct {
                let name = actor.to_string();
                for e in &effects {
                    if let Some((property, description)) = next.online.check_effect(&name, e) {
                        report.violation = Some(Counterexample {
                            property,
                            description,
                            schedule: trail2.clone(),
                            seed: None,
                            step: next.actions,
                        });
                        return report;
                    }
                }
            }

            let digest = next.digest();
            let d2 = d + 1;
            match visited.get(&digest) {
                Some(prev) if *prev <= d2 => {
                    report.dedup_hits += 1;
                }
                _ => {
                    visited.insert(digest, d2);
                    stack.push((next, d2, trail2));
                }
            }
        }
    }
    report
}

fn randomized(scenario: &Scenario, seeds: std::ops::Range<u64>, max_steps: u64) -> ExploreReport {
    let mut report = ExploreReport {
        states_explored: 0,
        dedup_hits: 0,
        budget_exhausted: false,
        violation: None,
    };
    for seed in seeds {
        let mut sim = Simulation::new(scenario.clone(), seed);
        sim.run(max_steps);
        report.states_explored += sim.steps;
        if let Some(v) = sim.violation {
            report.violation = Some(Counterexample {
                property: v.property,
                description: v.description,
                schedule: Vec::new(),
                seed: Some(seed),
                step: v.step,
            });
            return report;
        }
    }
    report
}
