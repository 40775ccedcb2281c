//! Slot-based settlement checkpoints within one configuration: rotating
//! coordinators, PREPARE/COMMIT voting with per-attempt prepare locks,
//! attempt changes carrying locked values, and canonical delivery envelopes.
//!
//! The coordinator of `(slot, attempt)` is `members[(slot + attempt) mod n]`,
//! so over time every member initiates proposals. A slot's commit proof is
//! assembled exactly once, by the coordinator that observes the commit
//! quorum, and spread in a signed delivery envelope; that keeps the stored
//! `(payload hash, proof)` bytes identical across all correct validators.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::codec::{Digest, Encode};
use crate::crypto::{self, SignDomain, Signature};
use crate::domain::{CheckpointPayload, CommitProof, CommittedItem, Transaction, ValidatorId};
use crate::messages::{
    AttemptChangeMsg, CommitVote, DeliveryMsg, Message, NodeId, PrepareVote, Proposal, Step,
    TimerKind,
};
use crate::trace::{Effect, ExecutionPath, QuorumKind};
use crate::validator::Validator;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SettlementError {
    #[error("not the coordinator for this slot and attempt")]
    NotCoordinator,
    #[error("previous slot not delivered yet")]
    PreviousSlotUndelivered,
    #[error("proposal epoch {got} does not match installed epoch {installed}")]
    WrongConfiguration { got: u64, installed: u64 },
    #[error("invalid item: {0}")]
    InvalidItem(String),
    #[error("state digest does not match recomputation")]
    DigestMismatch,
    #[error("already prepared a different payload at this (slot, attempt)")]
    AlreadyPrepared,
    #[error("quorum invalid: {0}")]
    QuorumInvalid(String),
    #[error("commit proof invalid: {0}")]
    ProofInvalid(String),
    #[error("slot ahead of the next undelivered slot")]
    SlotGap,
    #[error("attempt is stale")]
    StaleAttempt,
    #[error("proposal ignores a prepared value carried by its justification")]
    LockedValueIgnored,
    #[error("proposer signature invalid")]
    BadProposerSignature,
    #[error("already commit-voted for a different payload in this slot")]
    ConflictingCommit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryStatus {
    Applied,
    AlreadyDelivered,
}

/// Per-slot consensus bookkeeping.
#[derive(Debug, Clone, Default)]
pub struct SlotState {
    /// Highest attempt this validator participates in.
    pub attempt: u64,
    /// Payloads seen for this slot, by hash.
    pub proposals: BTreeMap<Digest, CheckpointPayload>,
    /// Attempts at which we proposed.
    pub proposed_attempts: BTreeSet<u64>,
    /// Attempt -> payload hash we PREPARE-voted there. Never overwritten.
    pub prepared: BTreeMap<u64, Digest>,
    pub prepare_votes: BTreeMap<(u64, Digest), BTreeMap<ValidatorId, Signature>>,
    pub commit_votes: BTreeMap<Digest, BTreeMap<ValidatorId, Signature>>,
    /// The only payload hash this validator will ever COMMIT in this slot.
    pub committed_hash: Option<Digest>,
    /// Attempts at which we commit-voted.
    pub committed_attempts: BTreeSet<u64>,
    pub attempt_changes: BTreeMap<u64, BTreeMap<ValidatorId, AttemptChangeMsg>>,
    pub delivered: Option<(CheckpointPayload, CommitProof)>,
    /// Proposal parked until missing item certificates arrive.
    pub awaiting_proposal: Option<(Proposal, BTreeSet<Digest>)>,
    /// Delivery envelope parked until missing item certificates arrive.
    pub awaiting_delivery: Option<(DeliveryMsg, BTreeSet<Digest>)>,
    pub timers_armed: BTreeSet<u64>,
    /// Coordinator-side: the delivery envelope was already broadcast.
    pub delivery_sent: bool,
    quorum_logged: BTreeSet<(u8, u64, Digest)>,
}

impl SlotState {
    pub fn highest_prepared(&self) -> Option<(Digest, u64)> {
        self.prepared.iter().next_back().map(|(a, h)| (*h, *a))
    }

    fn log_quorum_once(&mut self, kind: QuorumKind, attempt: u64, hash: Digest) -> bool {
        let tag = match kind {
            QuorumKind::Prepare => 0,
            QuorumKind::Commit => 1,
            QuorumKind::AttemptChange => 2,
        };
        self.quorum_logged.insert((tag, attempt, hash))
    }

    pub(crate) fn encode_state(&self, out: &mut Vec<u8>) {
        self.attempt.encode_into(out);
        self.proposals.keys().cloned().collect::<Vec<_>>().encode_into(out);
        self.proposed_attempts.encode_into(out);
        self.prepared.encode_into(out);
        (self.prepare_votes.len() as u64).encode_into(out);
        for ((a, h), votes) in &self.prepare_votes {
            (*a, *h).encode_into(out);
            votes.keys().cloned().collect::<Vec<_>>().encode_into(out);
        }
        (self.commit_votes.len() as u64).encode_into(out);
        for (h, votes) in &self.commit_votes {
            h.encode_into(out);
            votes.keys().cloned().collect::<Vec<_>>().encode_into(out);
        }
        self.committed_hash.encode_into(out);
        self.committed_attempts.encode_into(out);
        (self.attempt_changes.len() as u64).encode_into(out);
        for (a, votes) in &self.attempt_changes {
            a.encode_into(out);
            votes.keys().cloned().collect::<Vec<_>>().encode_into(out);
        }
        match &self.delivered {
            None => out.push(0),
            Some((p, _)) => {
                out.push(1);
                p.hash().encode_into(out);
            }
        }
        self.awaiting_proposal.is_some().encode_into(out);
        self.awaiting_delivery.is_some().encode_into(out);
        self.delivery_sent.encode_into(out);
    }
}

impl Validator {
    pub(crate) fn has_settlement_work(&self) -> bool {
        self.reconfig_cert.is_some()
            || self.pending.values().any(|c| c.config_index == self.config.index)
    }

    /// Propose for the next slot if we coordinate it and there is work, or
    /// arm the slot timer so a stalled coordinator gets rotated out.
    pub(crate) fn try_propose_or_arm(&mut self, step: &mut Step) {
        if !self.is_member() {
            return;
        }
        let slot = self.next_slot;
        let attempt = self.slots.get(&slot).map_or(0, |s| s.attempt);
        let has_work = self.has_settlement_work();
        let is_coordinator = self.config.coordinator(slot, attempt) == self.id;
        let already = self
            .slots
            .get(&slot)
            .is_some_and(|s| s.proposed_attempts.contains(&attempt));
        if is_coordinator && !already && (has_work || attempt > 0) {
            if let Err(err) = self.propose_checkpoint(slot, step) {
                step.effect(Effect::ProposalRejected {
                    epoch: self.config.index,
                    slot,
                    attempt,
                    reason: err.to_string(),
                });
            }
        } else if has_work || !self.slots.get(&slot).map_or(true, |s| s.proposals.is_empty()) {
            self.arm_slot_timer(slot, attempt, step);
        }
    }

    pub(crate) fn arm_slot_timer(&mut self, slot: u64, attempt: u64, step: &mut Step) {
        let epoch = self.config.index;
        let base = self.params.attempt_timeout;
        let st = self.slot_state(slot);
        if st.delivered.is_none() && st.timers_armed.insert(attempt) {
            let delay = base.saturating_mul(1 << attempt.min(6));
            step.arm(TimerKind::Slot { epoch, slot, attempt }, delay);
        }
    }

    /// Builds, signs, and spreads a checkpoint proposal for `slot` at the
    /// slot's current attempt. The payload carries our pending items (current
    /// epoch only) and at most one reconfiguration proposal.
    pub fn propose_checkpoint(
        &mut self,
        slot: u64,
        step: &mut Step,
    ) -> Result<Proposal, SettlementError> {
        if slot != self.next_slot {
            return Err(SettlementError::PreviousSlotUndelivered);
        }
        let attempt = self.slots.get(&slot).map_or(0, |s| s.attempt);
        if self.config.coordinator(slot, attempt) != self.id {
            return Err(SettlementError::NotCoordinator);
        }
        if attempt > 0 {
            let have = self
                .slots
                .get(&slot)
                .and_then(|s| s.attempt_changes.get(&attempt))
                .map_or(0, |v| v.len());
            if have < self.config.quorum() {
                return Err(SettlementError::QuorumInvalid(format!(
                    "only {have} attempt-change votes for attempt {attempt}"
                )));
            }
        }

        let payload = match self.locked_value_for(slot, attempt) {
            Some(hash) => {
                let st = self.slots.get(&slot).expect("attempt changes imply slot state");
                st.proposals
                    .get(&hash)
                    .cloned()
                    .ok_or_else(|| SettlementError::InvalidItem("locked payload unknown".into()))?
            }
            None => self.build_fresh_payload(slot),
        };
        let hash = payload.hash();
        let justification: Vec<AttemptChangeMsg> = if attempt == 0 {
            Vec::new()
        } else {
            self.slots[&slot].attempt_changes[&attempt].values().cloned().collect()
        };
        let sig = crypto::sign(
            &self.key,
            &crypto::propose_message(self.config.index, slot, attempt, hash),
        );
        let proposal = Proposal {
            config_index: self.config.index,
            slot,
            attempt,
            payload: payload.clone(),
            justification,
            proposer: self.id,
            sig,
        };
        self.slot_state(slot).proposed_attempts.insert(attempt);
        step.effect(Effect::ProposalSent {
            epoch: proposal.config_index,
            slot,
            attempt,
            payload_hash: hash,
            items: payload.items.len(),
            reconfig: payload.reconfig_proposal().is_some(),
        });
        self.settlement_broadcast(step, Message::Propose(proposal.clone()));
        // Validate our own proposal through the common path so we take the
        // prepare lock and contribute our own PREPARE vote.
        self.process_proposal(proposal.clone(), step)?;
        Ok(proposal)
    }

    /// The value a new coordinator is obliged to re-propose: the prepared
    /// payload with the highest attempt among the collected attempt changes.
    fn locked_value_for(&self, slot: u64, attempt: u64) -> Option<Digest> {
        if attempt == 0 || self.mutations.skip_locked_value {
            return None;
        }
        let votes = self.slots.get(&slot)?.attempt_changes.get(&attempt)?;
        votes
            .values()
            .filter_map(|m| m.prepared)
            .max_by_key(|(_, a)| *a)
            .map(|(h, _)| h)
    }

    fn build_fresh_payload(&self, slot: u64) -> CheckpointPayload {
        let mut base = self.checkpoint_accounts.clone();
        let mut items = Vec::new();
        for cert in self.pending.values() {
            if cert.config_index != self.config.index {
                continue;
            }
            if base.apply_transfer(&cert.payload).is_ok() {
                items.push(CommittedItem::Transfer(Encode::digest(cert)));
            }
        }
        if let Some(cert) = &self.reconfig_cert {
            let proposal = crate::reconfig::build_reconfig_proposal(
                &self.config,
                &self.directory,
                cert,
                self.checkpoint_accounts.state_digest(),
            );
            if let Ok(p) = proposal {
                items.push(CommittedItem::Reconfig(p));
            }
        }
        CheckpointPayload {
            config_index: self.config.index,
            slot,
            items,
            state_digest: base.state_digest(),
            admin_data: Vec::new(),
        }
    }

    pub(crate) fn on_propose(&mut self, from: NodeId, p: Proposal, step: &mut Step) {
        if p.config_index > self.config.index {
            self.defer(from, Message::Propose(p));
            return;
        }
        if p.config_index < self.config.index {
            step.effect(Effect::MessageDropped { reason: "stale epoch proposal".into() });
            return;
        }
        if p.slot > self.next_slot {
            self.defer(from, Message::Propose(p));
            return;
        }
        if p.slot < self.next_slot {
            step.effect(Effect::MessageDropped { reason: "slot already delivered".into() });
            return;
        }
        let (epoch, slot, attempt) = (p.config_index, p.slot, p.attempt);
        if let Err(err) = self.process_proposal(p, step) {
            step.effect(Effect::ProposalRejected { epoch, slot, attempt, reason: err.to_string() });
        }
    }

    /// Full proposal validation: coordinator envelope, justification with
    /// the locked-value rule, every item, and the state digest. Emits our
    /// PREPARE on success.
    pub fn handle_proposal(&mut self, p: Proposal, step: &mut Step) -> Result<(), SettlementError> {
        if p.config_index != self.config.index {
            return Err(SettlementError::WrongConfiguration {
                got: p.config_index,
                installed: self.config.index,
            });
        }
        if p.slot != self.next_slot {
            return Err(SettlementError::SlotGap);
        }
        self.process_proposal(p, step)
    }

    fn process_proposal(&mut self, p: Proposal, step: &mut Step) -> Result<(), SettlementError> {
        let epoch = self.config.index;
        if p.payload.config_index != epoch || p.config_index != epoch {
            return Err(SettlementError::WrongConfiguration {
                got: p.payload.config_index,
                installed: epoch,
            });
        }
        if p.payload.slot != p.slot {
            return Err(SettlementError::InvalidItem("payload slot mismatch".into()));
        }
        if p.proposer != self.config.coordinator(p.slot, p.attempt) {
            return Err(SettlementError::NotCoordinator);
        }
        let hash = p.payload.hash();
        if !self.directory.verify(
            p.proposer,
            &crypto::propose_message(epoch, p.slot, p.attempt, hash),
            &p.sig,
        ) {
            return Err(SettlementError::BadProposerSignature);
        }
        {
            let st = self.slot_state(p.slot);
            if p.attempt < st.attempt {
                return Err(SettlementError::StaleAttempt);
            }
            if let Some(prev) = st.prepared.get(&p.attempt) {
                if *prev != hash {
                    return Err(SettlementError::AlreadyPrepared);
                }
                // Identical re-delivery: the lock is already taken.
                return Ok(());
            }
        }
        self.validate_justification(&p, hash)?;

        // Item availability: park the proposal and pull missing certificates
        // from the proposer.
        let missing = self.missing_transfer_certs(&p.payload);
        if !missing.is_empty() {
            let (proposer, slot) = (p.proposer, p.slot);
            step.send(
                NodeId::Validator(proposer),
                Message::CertFetch { epoch, digests: missing.iter().cloned().collect() },
            );
            self.slot_state(slot).awaiting_proposal = Some((p, missing));
            return Ok(());
        }

        self.validate_items_and_digest(&p.payload)?;

        let slot = p.slot;
        let attempt = p.attempt;
        let prepare_sig = crypto::sign(&self.key, &crypto::prepare_message(epoch, slot, attempt, hash));
        let own = self.id;
        {
            let st = self.slot_state(slot);
            st.proposals.insert(hash, p.payload.clone());
            st.attempt = st.attempt.max(attempt);
            st.prepared.insert(attempt, hash);
            st.prepare_votes
                .entry((attempt, hash))
                .or_default()
                .insert(own, prepare_sig);
        }
        step.effect(Effect::PrepareSent { epoch, slot, attempt, payload_hash: hash });
        self.settlement_broadcast(
            step,
            Message::Prepare(PrepareVote {
                config_index: epoch,
                slot,
                attempt,
                payload_hash: hash,
                signer: own,
                sig: prepare_sig,
            }),
        );
        self.arm_slot_timer(slot, attempt, step);
        self.maybe_commit(slot, attempt, hash, step);
        Ok(())
    }

    fn validate_justification(&mut self, p: &Proposal, hash: Digest) -> Result<(), SettlementError> {
        if p.attempt == 0 {
            return Ok(());
        }
        let epoch = self.config.index;
        let mut valid: BTreeMap<ValidatorId, Option<(Digest, u64)>> = BTreeMap::new();
        for ac in &p.justification {
            if ac.config_index != epoch || ac.slot != p.slot || ac.next_attempt != p.attempt {
                continue;
            }
            if !self.counts_toward_quorum(ac.signer) {
                continue;
            }
            let msg = crypto::attempt_change_message(epoch, ac.slot, ac.next_attempt, ac.prepared);
            if !self.directory.verify(ac.signer, &msg, &ac.sig) {
                continue;
            }
            valid.entry(ac.signer).or_insert(ac.prepared);
            // Keep re-proposable payloads around.
            if let (Some((h, _)), Some(payload)) = (ac.prepared, &ac.prepared_payload) {
                if payload.hash() == h {
                    self.slot_state(p.slot).proposals.insert(h, payload.clone());
                }
            }
        }
        if valid.len() < self.config.quorum() {
            return Err(SettlementError::QuorumInvalid(format!(
                "justification has {} valid attempt-changes, quorum is {}",
                valid.len(),
                self.config.quorum()
            )));
        }
        if !self.mutations.skip_locked_value {
            let locked = valid.values().filter_map(|p| *p).max_by_key(|(_, a)| *a);
            if let Some((locked_hash, _)) = locked {
                if locked_hash != hash {
                    return Err(SettlementError::LockedValueIgnored);
                }
            }
        }
        Ok(())
    }

    fn missing_transfer_certs(&self, payload: &CheckpointPayload) -> BTreeSet<Digest> {
        payload
            .items
            .iter()
            .filter_map(|item| match item {
                CommittedItem::Transfer(d) if !self.known_certs.contains_key(d) => Some(*d),
                _ => None,
            })
            .collect()
    }

    /// Re-validates every item against the checkpoint base and checks the
    /// claimed post-checkpoint state digest.
    fn validate_items_and_digest(&self, payload: &CheckpointPayload) -> Result<(), SettlementError> {
        let reconfig_count = payload
            .items
            .iter()
            .filter(|i| matches!(i, CommittedItem::Reconfig(_)))
            .count();
        if reconfig_count > 1 {
            return Err(SettlementError::InvalidItem(
                "more than one reconfiguration proposal".into(),
            ));
        }
        let mut base = self.checkpoint_accounts.clone();
        for item in &payload.items {
            match item {
                CommittedItem::Transfer(d) => {
                    let cert = self
                        .known_certs
                        .get(d)
                        .ok_or_else(|| SettlementError::InvalidItem("unknown certificate".into()))?;
                    if cert.config_index != self.config.index {
                        return Err(SettlementError::InvalidItem(
                            "certificate from another epoch".into(),
                        ));
                    }
                    crypto::verify_certificate(
                        &self.config,
                        &self.directory,
                        SignDomain::FastVote,
                        cert,
                    )
                    .map_err(|e| SettlementError::InvalidItem(e.to_string()))?;
                    base.apply_transfer(&cert.payload)
                        .map_err(|e| SettlementError::InvalidItem(e.to_string()))?;
                }
                CommittedItem::Reconfig(rp) => {
                    self.validate_reconfig_item(rp)?;
                }
            }
        }
        if base.state_digest() != payload.state_digest {
            return Err(SettlementError::DigestMismatch);
        }
        Ok(())
    }

    fn validate_reconfig_item(
        &self,
        rp: &crate::domain::ReconfigProposal,
    ) -> Result<(), SettlementError> {
        rp.validate_shape()
            .map_err(|e| SettlementError::InvalidItem(e.to_string()))?;
        if rp.from_index != self.config.index {
            return Err(SettlementError::InvalidItem(format!(
                "reconfiguration from epoch {} is stale (installed {})",
                rp.from_index, self.config.index
            )));
        }
        crypto::verify_certificate(
            &self.config,
            &self.directory,
            SignDomain::ReconfigVote,
            &rp.request_cert,
        )
        .map_err(|e| SettlementError::InvalidItem(format!("request certificate: {e}")))?;
        if rp.proposer_state_digest != self.checkpoint_accounts.state_digest() {
            return Err(SettlementError::InvalidItem(
                "proposer state digest does not pin our latest checkpoint".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn on_prepare(&mut self, v: PrepareVote, step: &mut Step) {
        if v.config_index > self.config.index {
            self.defer(NodeId::Validator(v.signer), Message::Prepare(v));
            return;
        }
        if v.config_index < self.config.index || v.slot < self.next_slot {
            step.effect(Effect::MessageDropped { reason: "stale prepare".into() });
            return;
        }
        if v.slot > self.next_slot {
            self.defer(NodeId::Validator(v.signer), Message::Prepare(v));
            return;
        }
        if !self.counts_toward_quorum(v.signer) {
            step.effect(Effect::VoteIgnored {
                kind: QuorumKind::Prepare,
                epoch: v.config_index,
                slot: v.slot,
                signer: v.signer,
                reason: "not a member".into(),
            });
            return;
        }
        let msg = crypto::prepare_message(v.config_index, v.slot, v.attempt, v.payload_hash);
        if !self.directory.verify(v.signer, &msg, &v.sig) {
            step.effect(Effect::MessageDropped { reason: "bad prepare signature".into() });
            return;
        }
        self.slot_state(v.slot)
            .prepare_votes
            .entry((v.attempt, v.payload_hash))
            .or_default()
            .entry(v.signer)
            .or_insert(v.sig);
        self.maybe_commit(v.slot, v.attempt, v.payload_hash, step);
    }

    /// On a PREPARE quorum: emit our COMMIT, under the rule that a validator
    /// commits at most one payload hash per slot.
    fn maybe_commit(&mut self, slot: u64, attempt: u64, hash: Digest, step: &mut Step) {
        let epoch = self.config.index;
        let quorum = self.config.quorum();
        let st = self.slot_state(slot);
        if st.delivered.is_some() {
            return;
        }
        let Some(votes) = st.prepare_votes.get(&(attempt, hash)) else { return };
        if votes.len() < quorum {
            return;
        }
        let signers: Vec<ValidatorId> = votes.keys().copied().collect();
        if st.log_quorum_once(QuorumKind::Prepare, attempt, hash) {
            step.effect(Effect::QuorumFormed {
                kind: QuorumKind::Prepare,
                epoch,
                slot,
                attempt,
                payload_hash: hash,
                signers,
            });
        }
        if let Some(committed) = st.committed_hash {
            if committed != hash {
                return; // never equivocate commits within a slot
            }
        }
        if !st.committed_attempts.insert(attempt) {
            return;
        }
        st.committed_hash = Some(hash);
        let sig = crypto::sign(&self.key, &crypto::commit_message(epoch, slot, hash));
        let own = self.id;
        self.slot_state(slot)
            .commit_votes
            .entry(hash)
            .or_default()
            .insert(own, sig);
        step.effect(Effect::CommitSent { epoch, slot, payload_hash: hash });
        self.settlement_broadcast(
            step,
            Message::Commit(CommitVote {
                config_index: epoch,
                slot,
                payload_hash: hash,
                signer: own,
                sig,
            }),
        );
        self.maybe_assemble_delivery(slot, hash, step);
    }

    /// Validates an explicit PREPARE quorum and emits the COMMIT vote; the
    /// vote set must hold a quorum of distinct, valid member signatures.
    pub fn handle_prepare_quorum(
        &mut self,
        slot: u64,
        attempt: u64,
        payload_hash: Digest,
        votes: &[(ValidatorId, Signature)],
        step: &mut Step,
    ) -> Result<CommitVote, SettlementError> {
        let epoch = self.config.index;
        let msg = crypto::prepare_message(epoch, slot, attempt, payload_hash);
        let mut distinct = BTreeSet::new();
        for (id, sig) in votes {
            if !self.counts_toward_quorum(*id) {
                return Err(SettlementError::QuorumInvalid(format!("{id} is not a member")));
            }
            if !self.directory.verify(*id, &msg, sig) {
                return Err(SettlementError::QuorumInvalid(format!("bad signature from {id}")));
            }
            distinct.insert(*id);
        }
        if distinct.len() < self.config.quorum() {
            return Err(SettlementError::QuorumInvalid(format!(
                "{} distinct valid prepares, quorum is {}",
                distinct.len(),
                self.config.quorum()
            )));
        }
        {
            let st = self.slot_state(slot);
            if let Some(committed) = st.committed_hash {
                if committed != payload_hash {
                    return Err(SettlementError::ConflictingCommit);
                }
            }
            for (id, sig) in votes {
                st.prepare_votes
                    .entry((attempt, payload_hash))
                    .or_default()
                    .entry(*id)
                    .or_insert(*sig);
            }
        }
        self.maybe_commit(slot, attempt, payload_hash, step);
        let own = self.id;
        let sig = self.slot_state(slot).commit_votes[&payload_hash][&own];
        Ok(CommitVote { config_index: epoch, slot, payload_hash, signer: own, sig })
    }

    pub(crate) fn on_commit(&mut self, c: CommitVote, step: &mut Step) {
        if c.config_index > self.config.index {
            self.defer(NodeId::Validator(c.signer), Message::Commit(c));
            return;
        }
        if c.config_index < self.config.index || c.slot < self.next_slot {
            step.effect(Effect::MessageDropped { reason: "stale commit".into() });
            return;
        }
        if c.slot > self.next_slot {
            self.defer(NodeId::Validator(c.signer), Message::Commit(c));
            return;
        }
        if !self.counts_toward_quorum(c.signer) {
            step.effect(Effect::VoteIgnored {
                kind: QuorumKind::Commit,
                epoch: c.config_index,
                slot: c.slot,
                signer: c.signer,
                reason: "not a member".into(),
            });
            return;
        }
        let msg = crypto::commit_message(c.config_index, c.slot, c.payload_hash);
        if !self.directory.verify(c.signer, &msg, &c.sig) {
            step.effect(Effect::MessageDropped { reason: "bad commit signature".into() });
            return;
        }
        self.slot_state(c.slot)
            .commit_votes
            .entry(c.payload_hash)
            .or_default()
            .entry(c.signer)
            .or_insert(c.sig);
        self.maybe_assemble_delivery(c.slot, c.payload_hash, step);
    }

    /// On a COMMIT quorum, the coordinator of the slot's current attempt
    /// assembles the commit proof once and spreads it in a signed envelope.
    fn maybe_assemble_delivery(&mut self, slot: u64, hash: Digest, step: &mut Step) {
        let epoch = self.config.index;
        let quorum = self.config.quorum();
        let st = self.slot_state(slot);
        if st.delivered.is_some() {
            return;
        }
        let Some(votes) = st.commit_votes.get(&hash) else { return };
        if votes.len() < quorum {
            return;
        }
        let signers: Vec<ValidatorId> = votes.keys().copied().collect();
        let attempt = st.attempt;
        if st.log_quorum_once(QuorumKind::Commit, attempt, hash) {
            step.effect(Effect::QuorumFormed {
                kind: QuorumKind::Commit,
                epoch,
                slot,
                attempt,
                payload_hash: hash,
                signers,
            });
        }
        if self.config.coordinator(slot, attempt) != self.id {
            return;
        }
        let st = self.slot_state(slot);
        if st.delivery_sent {
            return;
        }
        let Some(payload) = st.proposals.get(&hash).cloned() else { return };
        let proof = CommitProof {
            config_index: epoch,
            slot,
            payload_hash: hash,
            signatures: st.commit_votes[&hash].iter().map(|(id, s)| (*id, *s)).collect(),
        };
        st.delivery_sent = true;
        let sig = crypto::sign(&self.key, &crypto::delivery_message(epoch, slot, attempt, hash));
        let envelope = DeliveryMsg {
            config_index: epoch,
            slot,
            attempt,
            payload: payload.clone(),
            proof: proof.clone(),
            coordinator: self.id,
            sig,
        };
        self.settlement_broadcast(step, Message::Delivery(envelope));
        // Deliver locally from the same canonical envelope.
        // now=0 is fine here: delivery effects never read the clock.
        if let Err(err) = self.deliver_checkpoint(payload, proof, 0, step) {
            step.effect(Effect::Anomaly {
                description: format!("own delivery failed: {err}"),
            });
        }
    }

    pub(crate) fn on_delivery(&mut self, from: NodeId, d: DeliveryMsg, now: u64, step: &mut Step) {
        if d.config_index > self.config.index {
            self.buffered_deliveries.insert((d.config_index, d.slot), d);
            return;
        }
        if d.config_index < self.config.index || d.slot < self.next_slot {
            step.effect(Effect::MessageDropped { reason: "stale delivery".into() });
            return;
        }
        if d.slot > self.next_slot {
            self.buffered_deliveries.insert((d.config_index, d.slot), d);
            return;
        }
        if let Err(err) = self.validate_delivery_envelope(&d) {
            step.effect(Effect::MessageDropped { reason: format!("delivery rejected: {err}") });
            return;
        }
        let missing = self.missing_transfer_certs(&d.payload);
        if !missing.is_empty() {
            let fetch_from = match from {
                NodeId::Validator(_) => from,
                NodeId::Client(_) => NodeId::Validator(d.coordinator),
            };
            step.send(
                fetch_from,
                Message::CertFetch {
                    epoch: d.config_index,
                    digests: missing.iter().cloned().collect(),
                },
            );
            let slot = d.slot;
            self.slot_state(slot).awaiting_delivery = Some((d, missing));
            return;
        }
        let (payload, proof) = (d.payload, d.proof);
        if let Err(err) = self.deliver_checkpoint(payload, proof, now, step) {
            step.effect(Effect::MessageDropped { reason: format!("delivery failed: {err}") });
        }
    }

    fn validate_delivery_envelope(&self, d: &DeliveryMsg) -> Result<(), SettlementError> {
        let hash = d.payload.hash();
        if hash != d.proof.payload_hash {
            return Err(SettlementError::ProofInvalid("payload/proof hash mismatch".into()));
        }
        if d.coordinator != self.config.coordinator(d.slot, d.attempt) {
            return Err(SettlementError::ProofInvalid("not signed by a coordinator".into()));
        }
        let msg = crypto::delivery_message(d.config_index, d.slot, d.attempt, hash);
        if !self.directory.verify(d.coordinator, &msg, &d.sig) {
            return Err(SettlementError::ProofInvalid("bad envelope signature".into()));
        }
        Ok(())
    }

    /// Applies a committed checkpoint: update the checkpoint base, execute
    /// items not yet executed, store `(payload hash, proof)`, clear included
    /// pending items, and install the next configuration if the payload
    /// carries a reconfiguration proposal. Idempotent per (epoch, slot).
    pub fn deliver_checkpoint(
        &mut self,
        payload: CheckpointPayload,
        proof: CommitProof,
        now: u64,
        step: &mut Step,
    ) -> Result<DeliveryStatus, SettlementError> {
        if payload.config_index != self.config.index {
            return Err(SettlementError::WrongConfiguration {
                got: payload.config_index,
                installed: self.config.index,
            });
        }
        if payload.slot < self.next_slot {
            return Ok(DeliveryStatus::AlreadyDelivered);
        }
        if payload.slot > self.next_slot {
            return Err(SettlementError::SlotGap);
        }
        let hash = payload.hash();
        if proof.payload_hash != hash || proof.slot != payload.slot {
            return Err(SettlementError::ProofInvalid("proof binds another payload".into()));
        }
        crypto::verify_commit_proof(&self.config, &self.directory, &proof)
            .map_err(|e| SettlementError::ProofInvalid(e.to_string()))?;

        // Apply to a copy first so a bad committed payload cannot corrupt us.
        let mut base = self.checkpoint_accounts.clone();
        let mut applied_txs: Vec<Transaction> = Vec::new();
        for item in &payload.items {
            if let CommittedItem::Transfer(d) = item {
                let cert = self
                    .known_certs
                    .get(d)
                    .ok_or_else(|| SettlementError::InvalidItem("unknown certificate".into()))?;
                base.apply_transfer(&cert.payload)
                    .map_err(|e| SettlementError::InvalidItem(e.to_string()))?;
                applied_txs.push(cert.payload.clone());
            }
        }
        if base.state_digest() != payload.state_digest {
            return Err(SettlementError::DigestMismatch);
        }

        self.checkpoint_accounts = base;
        for tx in &applied_txs {
            let key = (tx.sender.clone(), tx.nonce);
            self.pending.remove(&key);
            self.buffered_certs.remove(&key);
            if !self.executed.contains_key(&key) {
                // Settlement is catching the live table up.
                if self.live_accounts.apply_transfer(tx).is_ok() {
                    self.executed.insert(key, Encode::digest(tx));
                    step.effect(Effect::Executed {
                        sender: tx.sender.clone(),
                        recipient: tx.recipient.clone(),
                        amount: tx.amount,
                        nonce: tx.nonce,
                        tx_digest: Encode::digest(tx),
                        total_supply: self.live_accounts.total_supply(),
                        via: ExecutionPath::Checkpoint,
                    });
                }
            }
        }

        let slot = payload.slot;
        step.effect(Effect::Delivered {
            epoch: payload.config_index,
            slot,
            payload_hash: hash,
            state_digest: payload.state_digest,
            items: payload.items.len(),
            proof: proof.clone(),
        });
        self.slot_state(slot).delivered = Some((payload.clone(), proof.clone()));
        self.latest_checkpoint = Some((payload.clone(), proof.clone()));

        if let Some(rp) = payload.reconfig_proposal().cloned() {
            self.install_configuration(&payload, &proof, &rp, now, step)
                .map_err(|e| SettlementError::InvalidItem(e.to_string()))?;
        } else {
            self.next_slot = slot + 1;
            self.slots.retain(|s, _| *s >= slot + 1);
        }

        self.resume_buffered_deliveries(now, step);
        self.drain_deferred(now, step);
        self.try_propose_or_arm(step);
        Ok(DeliveryStatus::Applied)
    }

    pub(crate) fn resume_buffered_deliveries(&mut self, now: u64, step: &mut Step) {
        let key = (self.config.index, self.next_slot);
        if let Some(d) = self.buffered_deliveries.remove(&key) {
            let from = NodeId::Validator(d.coordinator);
            self.on_delivery(from, d, now, step);
        }
        // Drop buffered deliveries that can never apply anymore.
        let epoch = self.config.index;
        let slot = self.next_slot;
        self.buffered_deliveries
            .retain(|(e, s), _| *e > epoch || (*e == epoch && *s >= slot));
    }

    /// Local timer for `(slot, attempt)` expired without delivery: vote to
    /// move the slot to the next attempt, carrying our highest prepared
    /// value (and its payload, for the next coordinator).
    pub fn attempt_timeout(&mut self, slot: u64, attempt: u64, step: &mut Step) -> Option<AttemptChangeMsg> {
        let epoch = self.config.index;
        if slot != self.next_slot {
            return None; // already delivered or not reachable yet
        }
        let st = self.slot_state(slot);
        if st.delivered.is_some() || st.attempt > attempt {
            return None;
        }
        let next_attempt = attempt + 1;
        let prepared = st.highest_prepared();
        let prepared_payload = prepared.and_then(|(h, _)| st.proposals.get(&h).cloned());
        let own = self.id;
        let sig = crypto::sign(
            &self.key,
            &crypto::attempt_change_message(epoch, slot, next_attempt, prepared),
        );
        let msg = AttemptChangeMsg {
            config_index: epoch,
            slot,
            next_attempt,
            prepared,
            prepared_payload,
            signer: own,
            sig,
        };
        let st = self.slot_state(slot);
        st.attempt = next_attempt;
        st.attempt_changes
            .entry(next_attempt)
            .or_default()
            .insert(own, msg.clone());
        step.effect(Effect::AttemptChangeSent { epoch, slot, next_attempt, prepared });
        self.settlement_broadcast(step, Message::AttemptChange(msg.clone()));
        self.arm_slot_timer(slot, next_attempt, step);
        self.maybe_act_on_attempt_quorum(slot, next_attempt, step);
        Some(msg)
    }

    pub(crate) fn on_slot_timer(&mut self, epoch: u64, slot: u64, attempt: u64, step: &mut Step) {
        if epoch != self.config.index || !self.is_member() {
            return;
        }
        self.attempt_timeout(slot, attempt, step);
    }

    pub(crate) fn on_attempt_change(&mut self, a: AttemptChangeMsg, step: &mut Step) {
        if a.config_index > self.config.index {
            self.defer(NodeId::Validator(a.signer), Message::AttemptChange(a));
            return;
        }
        if a.config_index < self.config.index || a.slot < self.next_slot {
            step.effect(Effect::MessageDropped { reason: "stale attempt change".into() });
            return;
        }
        if a.slot > self.next_slot {
            self.defer(NodeId::Validator(a.signer), Message::AttemptChange(a));
            return;
        }
        if !self.counts_toward_quorum(a.signer) {
            step.effect(Effect::VoteIgnored {
                kind: QuorumKind::AttemptChange,
                epoch: a.config_index,
                slot: a.slot,
                signer: a.signer,
                reason: "not a member".into(),
            });
            return;
        }
        let msg = crypto::attempt_change_message(a.config_index, a.slot, a.next_attempt, a.prepared);
        if !self.directory.verify(a.signer, &msg, &a.sig) {
            step.effect(Effect::MessageDropped { reason: "bad attempt-change signature".into() });
            return;
        }
        let slot = a.slot;
        let next_attempt = a.next_attempt;
        {
            let st = self.slot_state(slot);
            if let (Some((h, _)), Some(payload)) = (a.prepared, &a.prepared_payload) {
                if payload.hash() == h {
                    st.proposals.insert(h, payload.clone());
                }
            }
            st.attempt_changes
                .entry(next_attempt)
                .or_default()
                .entry(a.signer)
                .or_insert(a);
        }
        self.maybe_act_on_attempt_quorum(slot, next_attempt, step);
    }

    fn maybe_act_on_attempt_quorum(&mut self, slot: u64, next_attempt: u64, step: &mut Step) {
        let epoch = self.config.index;
        let quorum = self.config.quorum();
        let st = self.slot_state(slot);
        let Some(votes) = st.attempt_changes.get(&next_attempt) else { return };
        if votes.len() < quorum || st.delivered.is_some() {
            return;
        }
        let signers: Vec<ValidatorId> = votes.keys().copied().collect();
        if st.log_quorum_once(QuorumKind::AttemptChange, next_attempt, Digest::ZERO) {
            step.effect(Effect::QuorumFormed {
                kind: QuorumKind::AttemptChange,
                epoch,
                slot,
                attempt: next_attempt,
                payload_hash: Digest::ZERO,
                signers,
            });
        }
        if st.attempt < next_attempt {
            st.attempt = next_attempt;
        }
        self.arm_slot_timer(slot, next_attempt, step);
        if self.config.coordinator(slot, next_attempt) == self.id
            && !self.slots[&slot].proposed_attempts.contains(&next_attempt)
            && slot == self.next_slot
        {
            if let Err(err) = self.propose_checkpoint(slot, step) {
                step.effect(Effect::ProposalRejected {
                    epoch,
                    slot,
                    attempt: next_attempt,
                    reason: err.to_string(),
                });
            }
        }
    }

    pub(crate) fn on_cert_fetch(
        &mut self,
        from: NodeId,
        epoch: u64,
        digests: Vec<Digest>,
        step: &mut Step,
    ) {
        let certs: Vec<_> = digests
            .iter()
            .filter_map(|d| self.known_certs.get(d).cloned())
            .collect();
        if !certs.is_empty() {
            step.send(from, Message::CertFill { epoch, certs });
        }
    }

    pub(crate) fn on_cert_fill(
        &mut self,
        _from: NodeId,
        certs: Vec<crate::domain::Certificate<Transaction>>,
        now: u64,
        step: &mut Step,
    ) {
        for cert in certs {
            self.known_certs.insert(Encode::digest(&cert), cert);
        }
        let slot = self.next_slot;
        let Some(st) = self.slots.get_mut(&slot) else { return };
        if let Some((p, missing)) = st.awaiting_proposal.take() {
            let still: BTreeSet<Digest> = missing
                .into_iter()
                .filter(|d| !self.known_certs.contains_key(d))
                .collect();
            if still.is_empty() {
                let (epoch, sl, attempt) = (p.config_index, p.slot, p.attempt);
                if let Err(err) = self.process_proposal(p, step) {
                    step.effect(Effect::ProposalRejected {
                        epoch,
                        slot: sl,
                        attempt,
                        reason: err.to_string(),
                    });
                }
            } else {
                self.slot_state(slot).awaiting_proposal =
                    Some((p, still)).map(|(p, s)| (p, s));
            }
        }
        let Some(st) = self.slots.get_mut(&slot) else { return };
        if let Some((d, missing)) = st.awaiting_delivery.take() {
            let still: BTreeSet<Digest> = missing
                .into_iter()
                .filter(|dg| !self.known_certs.contains_key(dg))
                .collect();
            if still.is_empty() {
                let from = NodeId::Validator(d.coordinator);
                self.on_delivery(from, d, now, step);
            } else {
                self.slot_state(slot).awaiting_delivery = Some((d, still));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{KeyDirectory, KeyPair};
    use crate::domain::{AccountTable, Configuration, Transaction};
    use crate::validator::ValidatorParams;

    fn cluster(n: u32) -> Vec<Validator> {
        let keys: Vec<_> = (0..n).map(|i| KeyPair::derive(ValidatorId(i))).collect();
        let dir = KeyDirectory::new(
            keys.iter().enumerate().map(|(i, k)| (ValidatorId(i as u32), k.public())),
        );
        let config = Configuration::new(0, (0..n).map(ValidatorId)).unwrap();
        let accounts =
            AccountTable::from_balances([("alice".into(), 100), ("bob".into(), 50)]);
        (0..n)
            .map(|i| {
                Validator::new(
                    ValidatorId(i),
                    keys[i as usize].clone(),
                    dir.clone(),
                    config.clone(),
                    accounts.clone(),
                    ValidatorParams::default(),
                )
            })
            .collect()
    }

    fn certify_and_execute(vs: &mut [Validator], tx: &Transaction) {
        let votes: Vec<_> = (0..3)
            .map(|i| (ValidatorId(i as u32), vs[i].handle_transfer_order(tx, 0).unwrap()))
            .collect();
        let cert = crypto::assemble_certificate(
            &vs[0].config.clone(),
            &vs[0].directory.clone(),
            SignDomain::FastVote,
            0,
            tx,
            &votes,
        )
        .unwrap();
        let mut step = Step::default();
        for v in vs.iter_mut() {
            v.execute_certificate(&cert, &mut step).unwrap();
        }
    }

    #[test]
    fn coordinator_proposes_pending_items() {
        let mut vs = cluster(4);
        let t1 = Transaction::new("alice".into(), "bob".into(), 5, 0).unwrap();
        let t2 = Transaction::new("bob".into(), "alice".into(), 3, 0).unwrap();
        certify_and_execute(&mut vs, &t1);
        certify_and_execute(&mut vs, &t2);

        let mut step = Step::default();
        // Slot 0, attempt 0 coordinator is member index 0.
        let proposal = vs[0].propose_checkpoint(0, &mut step).unwrap();
        assert_eq!(proposal.payload.items.len(), 2);
        assert!(proposal.payload.reconfig_proposal().is_none());
        assert_eq!(proposal.slot, 0);
    }

    #[test]
    fn non_coordinator_cannot_propose() {
        let mut vs = cluster(4);
        let mut step = Step::default();
        assert_eq!(
            vs[1].propose_checkpoint(0, &mut step).unwrap_err(),
            SettlementError::NotCoordinator
        );
    }

    #[test]
    fn proposal_for_future_slot_is_premature() {
        let mut vs = cluster(4);
        let mut step = Step::default();
        assert_eq!(
            vs[1].propose_checkpoint(1, &mut step).unwrap_err(),
            SettlementError::PreviousSlotUndelivered
        );
    }

    #[test]
    fn validators_prepare_well_formed_proposals() {
        let mut vs = cluster(4);
        let tx = Transaction::new("alice".into(), "bob".into(), 5, 0).unwrap();
        certify_and_execute(&mut vs, &tx);
        let mut step = Step::default();
        let proposal = vs[0].propose_checkpoint(0, &mut step).unwrap();

        let mut step1 = Step::default();
        vs[1].handle_proposal(proposal.clone(), &mut step1).unwrap();
        assert!(step1
            .effects
            .iter()
            .any(|e| matches!(e, Effect::PrepareSent { .. })));
        // Prepare lock is held.
        assert_eq!(
            vs[1].slots[&0].prepared[&0],
            proposal.payload.hash()
        );
    }

    #[test]
    fn proposal_with_wrong_state_digest_is_rejected() {
        let mut vs = cluster(4);
        let tx = Transaction::new("alice".into(), "bob".into(), 5, 0).unwrap();
        certify_and_execute(&mut vs, &tx);
        let mut step = Step::default();
        let mut proposal = vs[0].propose_checkpoint(0, &mut step).unwrap();
        proposal.payload.state_digest = Digest::ZERO;
        // Re-sign so only the digest check can fail.
        proposal.sig = crypto::sign(
            &KeyPair::derive(ValidatorId(0)),
            &crypto::propose_message(0, 0, 0, proposal.payload.hash()),
        );
        let mut step1 = Step::default();
        assert_eq!(
            vs[1].handle_proposal(proposal, &mut step1).unwrap_err(),
            SettlementError::DigestMismatch
        );
    }

    #[test]
    fn second_proposal_same_attempt_different_hash_is_locked_out() {
        let mut vs = cluster(4);
        let tx = Transaction::new("alice".into(), "bob".into(), 5, 0).unwrap();
        certify_and_execute(&mut vs, &tx);
        let mut step = Step::default();
        let proposal = vs[0].propose_checkpoint(0, &mut step).unwrap();
        let mut step1 = Step::default();
        vs[1].handle_proposal(proposal.clone(), &mut step1).unwrap();

        // Same coordinator, same attempt, different payload bytes.
        let mut other = proposal;
        other.payload.admin_data = vec![1];
        let mut base = vs[0].checkpoint_accounts.clone();
        for item in &other.payload.items {
            if let CommittedItem::Transfer(d) = item {
                let cert = vs[0].known_certs.get(d).unwrap();
                base.apply_transfer(&cert.payload).unwrap();
            }
        }
        other.payload.state_digest = base.state_digest();
        other.sig = crypto::sign(
            &KeyPair::derive(ValidatorId(0)),
            &crypto::propose_message(0, 0, 0, other.payload.hash()),
        );
        let mut step2 = Step::default();
        assert_eq!(
            vs[1].handle_proposal(other, &mut step2).unwrap_err(),
            SettlementError::AlreadyPrepared
        );
    }

    fn prepare_votes_for(
        vs: &[Validator],
        ids: &[u32],
        slot: u64,
        attempt: u64,
        hash: Digest,
    ) -> Vec<(ValidatorId, Signature)> {
        ids.iter()
            .map(|&i| {
                let key = KeyPair::derive(ValidatorId(i));
                let msg = crypto::prepare_message(vs[0].config.index, slot, attempt, hash);
                (ValidatorId(i), crypto::sign(&key, &msg))
            })
            .collect()
    }

    #[test]
    fn prepare_quorum_yields_commit_vote() {
        let mut vs = cluster(4);
        let hash = crate::codec::digest(b"payload");
        let votes = prepare_votes_for(&vs, &[0, 1, 2], 0, 0, hash);
        let mut step = Step::default();
        let commit = vs[3].handle_prepare_quorum(0, 0, hash, &votes, &mut step).unwrap();
        assert_eq!(commit.payload_hash, hash);
        assert_eq!(commit.signer, ValidatorId(3));
    }

    #[test]
    fn short_or_polluted_prepare_quorum_is_rejected() {
        let mut vs = cluster(4);
        let hash = crate::codec::digest(b"payload");
        let mut step = Step::default();

        let short = prepare_votes_for(&vs, &[0, 1], 0, 0, hash);
        assert!(matches!(
            vs[3].handle_prepare_quorum(0, 0, hash, &short, &mut step),
            Err(SettlementError::QuorumInvalid(_))
        ));

        let mut polluted = prepare_votes_for(&vs, &[0, 1], 0, 0, hash);
        let outsider = KeyPair::derive(ValidatorId(9));
        polluted.push((
            ValidatorId(9),
            crypto::sign(&outsider, &crypto::prepare_message(0, 0, 0, hash)),
        ));
        assert!(matches!(
            vs[3].handle_prepare_quorum(0, 0, hash, &polluted, &mut step),
            Err(SettlementError::QuorumInvalid(_))
        ));
    }

    /// Drives one full slot through propose/prepare/commit/delivery by
    /// routing messages between validators directly.
    fn run_slot_round(vs: &mut Vec<Validator>) {
        let mut inboxes: Vec<Vec<(NodeId, Message)>> = vec![Vec::new(); vs.len()];
        let mut step = Step::default();
        vs[0].propose_checkpoint(0, &mut step).unwrap();
        let mut queue: Vec<(NodeId, Message)> = step.outgoing;
        let mut guard = 0;
        while !queue.is_empty() && guard < 10_000 {
            guard += 1;
            let (to, msg) = queue.remove(0);
            let NodeId::Validator(vid) = to else { continue };
            let idx = vid.0 as usize;
            if idx >= vs.len() {
                continue;
            }
            let from = NodeId::Validator(vs[idx].id);
            let out = vs[idx].handle_message(from, msg, 0);
            queue.extend(out.outgoing);
            inboxes[idx].clear();
        }
        assert!(guard < 10_000, "message routing did not quiesce");
    }

    #[test]
    fn full_round_delivers_and_consumes_pending_items() {
        let mut vs = cluster(4);
        let tx = Transaction::new("alice".into(), "bob".into(), 5, 0).unwrap();
        certify_and_execute(&mut vs, &tx);
        assert!(!vs[0].pending_executed_items().is_empty());

        run_slot_round(&mut vs);

        for v in &vs {
            assert_eq!(v.next_slot, 1, "{} did not deliver slot 0", v.id);
            assert!(v.pending_executed_items().is_empty());
            let (payload, proof) = v.latest_checkpoint.as_ref().unwrap();
            assert_eq!(payload.slot, 0);
            assert_eq!(proof.payload_hash, payload.hash());
            assert_eq!(v.checkpoint_accounts, v.live_accounts);
        }
        // All validators stored the same canonical proof bytes.
        let first = vs[0].latest_checkpoint.as_ref().unwrap().1.encode();
        for v in &vs[1..] {
            assert_eq!(v.latest_checkpoint.as_ref().unwrap().1.encode(), first);
        }
    }

    #[test]
    fn redelivering_a_checkpoint_is_idempotent() {
        let mut vs = cluster(4);
        let tx = Transaction::new("alice".into(), "bob".into(), 5, 0).unwrap();
        certify_and_execute(&mut vs, &tx);
        run_slot_round(&mut vs);

        let (payload, proof) = vs[1].latest_checkpoint.clone().unwrap();
        let before = vs[1].checkpoint_accounts.clone();
        let mut step = Step::default();
        let status = vs[1].deliver_checkpoint(payload, proof, 0, &mut step).unwrap();
        assert_eq!(status, DeliveryStatus::AlreadyDelivered);
        assert_eq!(vs[1].checkpoint_accounts, before);
    }

    #[test]
    fn delivery_with_bogus_proof_is_rejected() {
        let mut vs = cluster(4);
        let tx = Transaction::new("alice".into(), "bob".into(), 5, 0).unwrap();
        certify_and_execute(&mut vs, &tx);
        run_slot_round(&mut vs);

        let (payload, mut proof) = vs[0].latest_checkpoint.clone().unwrap();
        proof.signatures.truncate(1);
        let mut fresh = cluster(4);
        // Give the fresh validator the certificates it needs.
        fresh[1].known_certs = vs[0].known_certs.clone();
        let mut step = Step::default();
        assert!(matches!(
            fresh[1].deliver_checkpoint(payload, proof, 0, &mut step),
            Err(SettlementError::ProofInvalid(_))
        ));
    }

    #[test]
    fn timeout_produces_attempt_change_with_locked_value() {
        let mut vs = cluster(4);
        let tx = Transaction::new("alice".into(), "bob".into(), 5, 0).unwrap();
        certify_and_execute(&mut vs, &tx);
        let mut step = Step::default();
        let proposal = vs[0].propose_checkpoint(0, &mut step).unwrap();
        let hash = proposal.payload.hash();
        let mut step1 = Step::default();
        vs[1].handle_proposal(proposal, &mut step1).unwrap();

        // Validator 1 prepared; its attempt change reports the lock.
        let mut step2 = Step::default();
        let ac = vs[1].attempt_timeout(0, 0, &mut step2).unwrap();
        assert_eq!(ac.next_attempt, 1);
        assert_eq!(ac.prepared, Some((hash, 0)));
        assert!(ac.prepared_payload.is_some());

        // Validator 3 never saw the proposal; it reports no lock.
        let mut step3 = Step::default();
        let ac3 = vs[3].attempt_timeout(0, 0, &mut step3).unwrap();
        assert_eq!(ac3.prepared, None);
    }

    #[test]
    fn timeout_after_delivery_is_suppressed() {
        let mut vs = cluster(4);
        let tx = Transaction::new("alice".into(), "bob".into(), 5, 0).unwrap();
        certify_and_execute(&mut vs, &tx);
        run_slot_round(&mut vs);
        let mut step = Step::default();
        assert!(vs[1].attempt_timeout(0, 0, &mut step).is_none());
    }

    #[test]
    fn new_coordinator_must_repropose_locked_value() {
        let mut vs = cluster(4);
        let tx = Transaction::new("alice".into(), "bob".into(), 5, 0).unwrap();
        certify_and_execute(&mut vs, &tx);
        let mut step = Step::default();
        let proposal = vs[0].propose_checkpoint(0, &mut step).unwrap();
        let locked_hash = proposal.payload.hash();

        // 0 proposed and prepared; 1 prepared. 2 and 3 saw nothing.
        let mut s1 = Step::default();
        vs[1].handle_proposal(proposal, &mut s1).unwrap();

        // Everyone times out; attempt changes flow to the attempt-1
        // coordinator (member 1 for slot 0).
        let mut changes = Vec::new();
        for i in [0usize, 2, 3] {
            let mut s = Step::default();
            if let Some(ac) = vs[i].attempt_timeout(0, 0, &mut s) {
                changes.push(ac);
            }
        }
        let mut s = Step::default();
        vs[1].attempt_timeout(0, 0, &mut s).unwrap();
        let mut proposed = None;
        for ac in changes {
            let mut s = Step::default();
            vs[1].on_attempt_change(ac, &mut s);
            for e in &s.effects {
                if let Effect::ProposalSent { payload_hash, attempt, .. } = e {
                    proposed = Some((*payload_hash, *attempt));
                }
            }
        }
        let (hash, attempt) = proposed.expect("coordinator of attempt 1 proposed");
        assert_eq!(attempt, 1);
        assert_eq!(hash, locked_hash, "locked value must be re-proposed");
    }
}
