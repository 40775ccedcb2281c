//! The validator state machine: one node's installed configuration, account
//! tables, fast-path locks, settlement slots, learner set, and configuration
//! history. Fast-path, settlement, and reconfiguration handlers live in
//! their own modules as further `impl Validator` blocks; this module owns
//! the state, message dispatch, and bookkeeping shared between them.

use std::collections::{BTreeMap, BTreeSet};

use crate::codec::{Digest, Encode};
use crate::crypto::{KeyDirectory, KeyPair};
use crate::domain::{
    AccountId, AccountTable, Certificate, CheckpointPayload, CommitProof, ConfigHistoryEntry,
    Configuration, Nonce, ReconfigRequest, Transaction, ValidatorId,
};
use crate::fastpath::LockEntry;
use crate::messages::{DeliveryMsg, Message, NodeId, Step, TimerKind};
use crate::reconfig::GenesisAnchor;
use crate::settlement::SlotState;
use crate::trace::Effect;

/// Tunables every validator needs; all in logical time units.
#[derive(Debug, Clone, Copy)]
pub struct ValidatorParams {
    /// Base timeout before broadcasting an attempt change; doubles per
    /// attempt.
    pub attempt_timeout: u64,
    /// Cadence of the periodic checkpoint check.
    pub checkpoint_interval: u64,
    /// How long a removed validator keeps serving snapshots.
    pub leaver_grace: u64,
}

impl Default for ValidatorParams {
    fn default() -> Self {
        ValidatorParams { attempt_timeout: 80, checkpoint_interval: 60, leaver_grace: 2000 }
    }
}

/// Fault-injection switches for self-testing the checkers. All off in real
/// configurations; scenarios opt in explicitly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MutationFlags {
    /// Accept certificates regardless of their epoch tag.
    pub accept_any_epoch: bool,
    /// Ignore prepared values carried by attempt-change justifications.
    pub skip_locked_value: bool,
    /// Count votes from non-members (defeats the learner gate).
    pub skip_learner_gate: bool,
}

#[derive(Debug, Clone)]
pub struct Validator {
    pub id: ValidatorId,
    pub(crate) key: KeyPair,
    pub directory: KeyDirectory,
    pub params: ValidatorParams,
    pub mutations: MutationFlags,

    /// Installed configuration; index only ever increases.
    pub config: Configuration,
    pub ch: Vec<ConfigHistoryEntry>,
    pub genesis: GenesisAnchor,

    /// Account state as of the last delivered checkpoint.
    pub checkpoint_accounts: AccountTable,
    /// Account state including fast-path executions since the checkpoint.
    pub live_accounts: AccountTable,

    /// Fast-path signing locks; never overwritten, survive installs.
    pub locks: BTreeMap<(AccountId, Nonce), LockEntry>,
    /// Every `(account, nonce)` this validator has executed, with the
    /// transaction digest, regardless of path.
    pub executed: BTreeMap<(AccountId, Nonce), Digest>,
    /// Executed but not yet checkpointed; value is the certificate we would
    /// propose for the slot.
    pub pending: BTreeMap<(AccountId, Nonce), Certificate<Transaction>>,
    /// Certificates that arrived ahead of their sender's nonce.
    pub(crate) buffered_certs: BTreeMap<(AccountId, Nonce), Certificate<Transaction>>,
    /// Every transaction certificate seen, keyed by certificate digest, so
    /// checkpoint items can be resolved and served to peers.
    pub known_certs: BTreeMap<Digest, Certificate<Transaction>>,

    /// Next undelivered settlement slot within the current epoch.
    pub next_slot: u64,
    pub slots: BTreeMap<u64, SlotState>,
    pub latest_checkpoint: Option<(CheckpointPayload, CommitProof)>,
    /// Deliveries for future (epoch, slot) pairs, applied once reachable.
    pub(crate) buffered_deliveries: BTreeMap<(u64, u64), DeliveryMsg>,

    /// The reconfiguration certificate held for the current epoch, if any.
    pub reconfig_cert: Option<Certificate<ReconfigRequest>>,
    /// Epoch -> digest of the request signed there (first one wins).
    pub(crate) signed_reconfig: BTreeMap<u64, Digest>,
    /// Temporary membership: joiners being forwarded to until install.
    pub learners: BTreeSet<ValidatorId>,

    /// Messages for a future epoch or slot, replayed after advancement.
    pub(crate) deferred: Vec<(NodeId, Message)>,
    /// Learner-side: whether a snapshot request is outstanding.
    pub(crate) snapshot_requested: bool,
    pub(crate) snapshot_servers_tried: BTreeSet<ValidatorId>,
    /// Set when this validator left the member set; it then only serves
    /// snapshots, and only within the grace window.
    pub retired_at: Option<u64>,
}

impl Validator {
    pub fn new(
        id: ValidatorId,
        key: KeyPair,
        directory: KeyDirectory,
        genesis_config: Configuration,
        genesis_accounts: AccountTable,
        params: ValidatorParams,
    ) -> Self {
        let anchor = GenesisAnchor {
            config: genesis_config.clone(),
            account_digest: genesis_accounts.state_digest(),
        };
        Validator {
            id,
            key,
            directory,
            params,
            mutations: MutationFlags::default(),
            config: genesis_config,
            ch: vec![ConfigHistoryEntry::genesis(&anchor.config, anchor.account_digest)],
            genesis: anchor,
            checkpoint_accounts: genesis_accounts.clone(),
            live_accounts: genesis_accounts,
            locks: BTreeMap::new(),
            executed: BTreeMap::new(),
            pending: BTreeMap::new(),
            buffered_certs: BTreeMap::new(),
            known_certs: BTreeMap::new(),
            next_slot: 0,
            slots: BTreeMap::new(),
            latest_checkpoint: None,
            buffered_deliveries: BTreeMap::new(),
            reconfig_cert: None,
            signed_reconfig: BTreeMap::new(),
            learners: BTreeSet::new(),
            deferred: Vec::new(),
            snapshot_requested: false,
            snapshot_servers_tried: BTreeSet::new(),
            retired_at: None,
        }
    }

    pub fn installed_index(&self) -> u64 {
        self.config.index
    }

    pub fn is_member(&self) -> bool {
        self.config.contains(self.id)
    }

    /// Whether a signer's votes count toward quorums right now. Learners and
    /// other non-members are ignored (unless the gate mutation is on).
    pub fn counts_toward_quorum(&self, signer: ValidatorId) -> bool {
        if self.mutations.skip_learner_gate {
            self.directory.public(signer).is_some()
        } else {
            self.config.contains(signer)
        }
    }

    pub(crate) fn slot_state(&mut self, slot: u64) -> &mut SlotState {
        self.slots.entry(slot).or_default()
    }

    /// Broadcast to current members (except self) plus all learners being
    /// forwarded to. Settlement traffic always goes through here so learners
    /// see every message we send.
    pub(crate) fn settlement_broadcast(&self, step: &mut Step, msg: Message) {
        for &m in &self.config.members {
            if m != self.id {
                step.send(NodeId::Validator(m), msg.clone());
            }
        }
        for &l in &self.learners {
            step.send(NodeId::Validator(l), msg.clone());
        }
    }

    /// Main entry point: deliver one message to this validator.
    pub fn handle_message(&mut self, from: NodeId, msg: Message, now: u64) -> Step {
        let mut step = Step::default();
        if let Some(retired) = self.retired_at {
            // Leavers only serve snapshots, and only within the grace window.
            match &msg {
                Message::SnapshotRequest { requester } if now <= retired + self.params.leaver_grace => {
                    self.handle_snapshot_request(*requester, &mut step);
                }
                _ => step.effect(Effect::MessageDropped { reason: "retired".into() }),
            }
            return step;
        }

        if !self.is_member() {
            self.handle_as_learner(from, msg, &mut step);
            return step;
        }

        match msg {
            Message::TransferOrder { epoch, tx } => {
                self.on_transfer_order(from, epoch, tx, &mut step)
            }
            Message::ConfirmCert { cert } => self.on_confirm_cert(from, cert, &mut step),
            Message::ReconfigOrder { req } => self.on_reconfig_order(from, req, &mut step),
            Message::ReconfigCert { cert } => self.on_reconfig_cert(cert, &mut step),
            Message::Propose(p) => self.on_propose(from, p, &mut step),
            Message::Prepare(p) => self.on_prepare(p, &mut step),
            Message::Commit(c) => self.on_commit(c, &mut step),
            Message::AttemptChange(a) => self.on_attempt_change(a, &mut step),
            Message::Delivery(d) => self.on_delivery(from, d, now, &mut step),
            Message::CertFetch { epoch, digests } => {
                self.on_cert_fetch(from, epoch, digests, &mut step)
            }
            Message::CertFill { certs, .. } => self.on_cert_fill(from, certs, now, &mut step),
            Message::SnapshotRequest { requester } => {
                self.handle_snapshot_request(requester, &mut step)
            }
            Message::SnapshotResponse { snapshot } => {
                self.on_snapshot_response(from, snapshot, &mut step)
            }
            // Client-facing responses are never addressed to validators.
            other => step.effect(Effect::MessageDropped {
                reason: format!("unexpected {} at validator", other.kind_name()),
            }),
        }
        step
    }

    pub fn handle_timer(&mut self, kind: TimerKind, now: u64) -> Step {
        let mut step = Step::default();
        if self.retired_at.is_some() {
            return step;
        }
        match kind {
            TimerKind::Slot { epoch, slot, attempt } => {
                self.on_slot_timer(epoch, slot, attempt, &mut step)
            }
            TimerKind::CheckpointTick => {
                if self.is_member() {
                    self.try_propose_or_arm(&mut step);
                    step.arm(TimerKind::CheckpointTick, self.params.checkpoint_interval);
                }
            }
            TimerKind::LearnerRetry => self.on_learner_retry(now, &mut step),
            TimerKind::ClientRetry { .. } | TimerKind::AdversaryWake => {}
        }
        step
    }

    /// Defers a message that references a future epoch or slot.
    pub(crate) fn defer(&mut self, from: NodeId, msg: Message) {
        // Cap retention so a byzantine peer cannot balloon our state.
        if self.deferred.len() < 4096 {
            self.deferred.push((from, msg));
        }
    }

    /// Replays deferred messages after the epoch or slot advanced.
    pub(crate) fn drain_deferred(&mut self, now: u64, step: &mut Step) {
        if self.deferred.is_empty() {
            return;
        }
        let queued = std::mem::take(&mut self.deferred);
        for (from, msg) in queued {
            let sub = self.handle_message(from, msg, now);
            step.outgoing.extend(sub.outgoing);
            step.timers.extend(sub.timers);
            step.effects.extend(sub.effects);
        }
    }

    /// Cheap digest of the externally meaningful state, recorded per trace
    /// event. Scalars only; account contents are already pinned by the
    /// state digests inside delivery effects. Exploration uses
    /// [`Validator::state_digest_full`] instead.
    pub fn state_digest_summary(&self) -> Digest {
        let mut out = Vec::with_capacity(96);
        self.config.index.encode_into(&mut out);
        (self.config.members.len() as u64).encode_into(&mut out);
        (self.ch.len() as u64).encode_into(&mut out);
        self.next_slot.encode_into(&mut out);
        (self.executed.len() as u64).encode_into(&mut out);
        (self.pending.len() as u64).encode_into(&mut out);
        (self.locks.len() as u64).encode_into(&mut out);
        (self.learners.len() as u64).encode_into(&mut out);
        match &self.latest_checkpoint {
            None => out.push(0),
            Some((p, _)) => {
                out.push(1);
                p.state_digest.encode_into(&mut out);
                p.slot.encode_into(&mut out);
            }
        }
        self.retired_at.is_some().encode_into(&mut out);
        crate::codec::digest(&out)
    }

    /// Digest of the full behavioral state; used for trace records and for
    /// state deduplication during interleaving exploration.
    pub fn state_digest_full(&self) -> Digest {
        let mut out = Vec::new();
        self.id.encode_into(&mut out);
        self.config.encode_into(&mut out);
        self.ch.encode_into(&mut out);
        self.checkpoint_accounts.encode_into(&mut out);
        self.live_accounts.encode_into(&mut out);
        self.locks.encode_into(&mut out);
        self.executed.encode_into(&mut out);
        (self.pending.len() as u64).encode_into(&mut out);
        for (k, v) in &self.pending {
            k.encode_into(&mut out);
            Encode::digest(v).encode_into(&mut out);
        }
        self.buffered_certs.keys().cloned().collect::<Vec<_>>().encode_into(&mut out);
        self.next_slot.encode_into(&mut out);
        (self.slots.len() as u64).encode_into(&mut out);
        for (slot, st) in &self.slots {
            slot.encode_into(&mut out);
            st.encode_state(&mut out);
        }
        match &self.latest_checkpoint {
            None => out.push(0),
            Some((p, pr)) => {
                out.push(1);
                Encode::digest(p).encode_into(&mut out);
                Encode::digest(pr).encode_into(&mut out);
            }
        }
        self.buffered_deliveries.keys().cloned().collect::<Vec<_>>().encode_into(&mut out);
        match &self.reconfig_cert {
            None => out.push(0),
            Some(c) => {
                out.push(1);
                Encode::digest(c).encode_into(&mut out);
            }
        }
        self.signed_reconfig.encode_into(&mut out);
        self.learners.encode_into(&mut out);
        (self.deferred.len() as u64).encode_into(&mut out);
        for (_, m) in &self.deferred {
            Encode::digest(m).encode_into(&mut out);
        }
        self.snapshot_requested.encode_into(&mut out);
        self.retired_at.unwrap_or(u64::MAX).encode_into(&mut out);
        crate::codec::digest(&out)
    }
}
