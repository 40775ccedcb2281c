//! Membership reconfiguration: certified requests, the installation rule,
//! configuration history maintenance, temporary membership (learners), and
//! verifiable state transfer to joiners.


use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Digest, Encode};
use crate::crypto::{self, KeyDirectory, SignDomain, Signature};
use crate::domain::{
    AccountTable, Certificate, CheckpointPayload, CommitProof, ConfigHistoryEntry, Configuration,
    DomainError, ReconfigProposal, ReconfigRequest, ValidatorId,
};
use crate::messages::{Message, NodeId, Step, TimerKind};
use crate::trace::Effect;
use crate::validator::Validator;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReconfigError {
    #[error("invalid membership: {0}")]
    InvalidMembership(String),
    #[error("request tagged epoch {claimed} but installed epoch is {installed}")]
    WrongConfiguration { claimed: u64, installed: u64 },
    #[error("policy violation: {0}")]
    PolicyViolation(String),
    #[error("already signed a different reconfiguration for this epoch")]
    ConflictingReconfig,
    #[error("request certificate invalid: {0}")]
    CertificateInvalid(String),
    #[error("reconfiguration proposal invalid: {0}")]
    ProposalInvalid(String),
    #[error("transition from epoch {from} does not match installed epoch {installed}")]
    WrongTransition { from: u64, installed: u64 },
    #[error("requester is not authorized for state transfer")]
    NotAuthorized,
}

/// Trust anchor a joiner starts from: the genesis configuration and the
/// digest of the initial account table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenesisAnchor {
    pub config: Configuration,
    pub account_digest: Digest,
}

/// State transfer package: the configuration history prefix, the latest
/// committed checkpoint with its proof, and the full account table at that
/// checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub ch_prefix: Vec<ConfigHistoryEntry>,
    pub latest: Option<(CheckpointPayload, CommitProof)>,
    pub accounts: AccountTable,
}

impl Encode for Snapshot {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.ch_prefix.encode_into(out);
        match &self.latest {
            None => out.push(0),
            Some((p, pr)) => {
                out.push(1);
                p.encode_into(out);
                pr.encode_into(out);
            }
        }
        self.accounts.encode_into(out);
    }
}

/// Why a snapshot was rejected, with the first failing history link.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("snapshot rejected at link {link}: {reason}")]
pub struct SnapshotRejection {
    pub link: usize,
    pub reason: String,
}

fn reject(link: usize, reason: impl Into<String>) -> SnapshotRejection {
    SnapshotRejection { link, reason: reason.into() }
}

/// Builds a well-formed reconfiguration request bound to the current epoch.
pub fn create_reconfig_request(
    current: u64,
    next_members: impl IntoIterator<Item = ValidatorId>,
) -> Result<ReconfigRequest, ReconfigError> {
    ReconfigRequest::new(current, next_members).map_err(|e| match e {
        DomainError::InvalidMembership(m) => ReconfigError::InvalidMembership(m),
        other => ReconfigError::InvalidMembership(other.to_string()),
    })
}

/// Wraps a certified request into the settlement item that installs the next
/// configuration. The certificate must validate under `config`.
pub fn build_reconfig_proposal(
    config: &Configuration,
    directory: &KeyDirectory,
    cert: &Certificate<ReconfigRequest>,
    state_digest: Digest,
) -> Result<ReconfigProposal, ReconfigError> {
    crypto::verify_certificate(config, directory, SignDomain::ReconfigVote, cert)
        .map_err(|e| ReconfigError::CertificateInvalid(e.to_string()))?;
    Ok(ReconfigProposal {
        from_index: cert.config_index,
        to_index: cert.config_index + 1,
        next_members: cert.payload.next_members.clone(),
        request_cert: cert.clone(),
        proposer_state_digest: state_digest,
    })
}

/// Audits a snapshot against the genesis anchor: the history must chain from
/// genesis with valid quorum proofs, the latest checkpoint must verify under
/// the members recorded for its epoch, and the account table must match the
/// committed state digest.
pub fn verify_snapshot(
    anchor: &GenesisAnchor,
    directory: &KeyDirectory,
    snap: &Snapshot,
) -> Result<(), SnapshotRejection> {
    let genesis_entry = ConfigHistoryEntry::genesis(&anchor.config, anchor.account_digest);
    let Some(first) = snap.ch_prefix.first() else {
        return Err(reject(0, "empty configuration history"));
    };
    if first.encode() != genesis_entry.encode() {
        return Err(reject(0, "history does not start at the genesis anchor"));
    }
    for (i, window) in snap.ch_prefix.windows(2).enumerate() {
        let (prev, entry) = (&window[0], &window[1]);
        let link = i + 1;
        if entry.new_index != prev.new_index + 1 {
            return Err(reject(link, "history indices not consecutive"));
        }
        if entry.proof.config_index != prev.new_index {
            return Err(reject(link, "proof bound to the wrong epoch"));
        }
        if entry.proof.payload_hash != entry.payload_hash {
            return Err(reject(link, "proof does not cover the entry payload hash"));
        }
        let prev_config = Configuration {
            index: prev.new_index,
            members: prev.new_members.clone(),
        };
        crypto::verify_commit_proof(&prev_config, directory, &entry.proof)
            .map_err(|e| reject(link, format!("commit proof: {e}")))?;
        Configuration::new(entry.new_index, entry.new_members.iter().copied())
            .map_err(|e| reject(link, e.to_string()))?;
    }
    let last = snap.ch_prefix.last().expect("nonempty");
    let last_link = snap.ch_prefix.len() - 1;

    match &snap.latest {
        None => {
            if snap.ch_prefix.len() != 1 {
                return Err(reject(
                    last_link,
                    "installed configurations without any committed checkpoint",
                ));
            }
            if snap.accounts.state_digest() != anchor.account_digest {
                return Err(reject(0, "account table does not match the genesis digest"));
            }
        }
        Some((payload, proof)) => {
            let hash = payload.hash();
            if proof.payload_hash != hash
                || proof.config_index != payload.config_index
                || proof.slot != payload.slot
            {
                return Err(reject(last_link, "latest proof binds another payload"));
            }
            let entry = snap
                .ch_prefix
                .iter()
                .find(|e| e.new_index == proof.config_index)
                .ok_or_else(|| reject(last_link, "latest proof epoch not in history"))?;
            let cfg = Configuration {
                index: entry.new_index,
                members: entry.new_members.clone(),
            };
            crypto::verify_commit_proof(&cfg, directory, proof)
                .map_err(|e| reject(last_link, format!("latest proof: {e}")))?;
            // The latest checkpoint must belong to the final installed epoch,
            // or be the transition payload that installed it.
            if proof.config_index != last.new_index {
                if proof.config_index + 1 != last.new_index || hash != last.payload_hash {
                    return Err(reject(last_link, "latest checkpoint is not current"));
                }
            }
            // A transition payload must agree with the entry it installed.
            if let Some(rp) = payload.reconfig_proposal() {
                if let Some(installed) =
                    snap.ch_prefix.iter().find(|e| e.new_index == rp.to_index)
                {
                    if installed.new_members != rp.next_members
                        || installed.payload_hash != hash
                    {
                        return Err(reject(
                            last_link,
                            "installed entry disagrees with the committed proposal",
                        ));
                    }
                }
            }
            if snap.accounts.state_digest() != payload.state_digest {
                return Err(reject(last_link, "account table does not match the state digest"));
            }
        }
    }
    Ok(())
}

impl Validator {
    /// Endorses a reconfiguration request: at most one distinct next-member
    /// set per epoch (first signed wins), no-op changes refused.
    pub fn sign_reconfig(&mut self, req: &ReconfigRequest) -> Result<Signature, ReconfigError> {
        if req.current_index != self.config.index {
            return Err(ReconfigError::WrongConfiguration {
                claimed: req.current_index,
                installed: self.config.index,
            });
        }
        ReconfigRequest::new(req.current_index, req.next_members.iter().copied())
            .map_err(|e| ReconfigError::PolicyViolation(e.to_string()))?;
        if req.next_members == self.config.members {
            return Err(ReconfigError::PolicyViolation("membership unchanged".into()));
        }
        let digest = Encode::digest(req);
        match self.signed_reconfig.get(&req.current_index) {
            Some(prev) if *prev != digest => return Err(ReconfigError::ConflictingReconfig),
            _ => {}
        }
        self.signed_reconfig.insert(req.current_index, digest);
        Ok(crypto::sign(
            &self.key,
            &crypto::reconfig_vote_message(req.current_index, req),
        ))
    }

    /// Observing a fully valid reconfiguration certificate triggers
    /// temporary membership: joiners become learners, and from now until
    /// install this validator forwards settlement traffic to them.
    pub fn on_observe_reconfig_cert(
        &mut self,
        cert: &Certificate<ReconfigRequest>,
        step: &mut Step,
    ) {
        if cert.config_index != self.config.index {
            return; // stale or future; ignored silently
        }
        if crypto::verify_certificate(
            &self.config,
            &self.directory,
            SignDomain::ReconfigVote,
            cert,
        )
        .is_err()
        {
            return;
        }
        if self.reconfig_cert.is_none() {
            self.reconfig_cert = Some(cert.clone());
        }
        let joiners: Vec<ValidatorId> = cert
            .payload
            .next_members
            .iter()
            .copied()
            .filter(|m| !self.config.contains(*m))
            .collect();
        let mut newly = Vec::new();
        for j in &joiners {
            if self.learners.insert(*j) {
                newly.push(*j);
            }
        }
        if !newly.is_empty() || !joiners.is_empty() {
            step.effect(Effect::ReconfigCertObserved {
                epoch: cert.config_index,
                joiners: joiners.clone(),
                cert: cert.clone(),
            });
        }
        // First contact: hand the certificate to new learners so they can
        // start state transfer.
        for j in newly {
            step.send(NodeId::Validator(j), Message::ReconfigCert { cert: cert.clone() });
        }
    }

    /// Installation rule: the delivered payload carries a valid proposal for
    /// `installed -> installed+1`; append the history entry, adopt the new
    /// member set, clear the learner set, and never sign under older epochs
    /// again.
    pub fn install_configuration(
        &mut self,
        payload: &CheckpointPayload,
        proof: &CommitProof,
        rp: &ReconfigProposal,
        now: u64,
        step: &mut Step,
    ) -> Result<(), ReconfigError> {
        rp.validate_shape().map_err(|e| ReconfigError::ProposalInvalid(e.to_string()))?;
        if rp.from_index != self.config.index {
            return Err(ReconfigError::WrongTransition {
                from: rp.from_index,
                installed: self.config.index,
            });
        }
        crypto::verify_certificate(
            &self.config,
            &self.directory,
            SignDomain::ReconfigVote,
            &rp.request_cert,
        )
        .map_err(|e| ReconfigError::CertificateInvalid(e.to_string()))?;

        let entry = ConfigHistoryEntry {
            new_index: rp.to_index,
            new_members: rp.next_members.clone(),
            payload_hash: payload.hash(),
            proof: proof.clone(),
        };
        self.ch.push(entry.clone());
        self.config = Configuration {
            index: rp.to_index,
            members: rp.next_members.clone(),
        };
        self.learners.clear();
        self.reconfig_cert = None;
        self.slots.clear();
        self.next_slot = 0;
        step.effect(Effect::Installed {
            new_epoch: entry.new_index,
            members: entry.new_members.clone(),
            entry_bytes: hex::encode(entry.encode()),
            entry,
        });
        if !self.is_member() {
            self.retired_at = Some(now);
        }
        Ok(())
    }

    /// Serves the state-transfer package to a learner or member.
    pub fn serve_snapshot(&self, requester: ValidatorId) -> Result<Snapshot, ReconfigError> {
        if !self.learners.contains(&requester) && !self.config.contains(requester) {
            return Err(ReconfigError::NotAuthorized);
        }
        Ok(Snapshot {
            ch_prefix: self.ch.clone(),
            latest: self.latest_checkpoint.clone(),
            accounts: self.checkpoint_accounts.clone(),
        })
    }

    pub(crate) fn handle_snapshot_request(&mut self, requester: ValidatorId, step: &mut Step) {
        match self.serve_snapshot(requester) {
            Ok(snapshot) => {
                step.effect(Effect::SnapshotServed { to: requester });
                step.send(NodeId::Validator(requester), Message::SnapshotResponse { snapshot });
            }
            Err(err) => {
                step.effect(Effect::SnapshotRequestRejected {
                    from: requester,
                    reason: err.to_string(),
                });
            }
        }
    }

    // ---- message wrappers -------------------------------------------------

    pub(crate) fn on_reconfig_order(
        &mut self,
        from: NodeId,
        req: ReconfigRequest,
        step: &mut Step,
    ) {
        let req_digest = Encode::digest(&req);
        match self.sign_reconfig(&req) {
            Ok(sig) => {
                step.effect(Effect::ReconfigSigned { epoch: req.current_index, req_digest });
                step.send(
                    from,
                    Message::ReconfigVote {
                        epoch: req.current_index,
                        req_digest,
                        config: self.config.clone(),
                        signer: self.id,
                        sig,
                    },
                );
            }
            Err(err) => {
                step.effect(Effect::ReconfigRejected {
                    epoch: req.current_index,
                    reason: err.to_string(),
                });
                step.send(
                    from,
                    Message::ReconfigReject {
                        epoch: req.current_index,
                        req_digest,
                        installed: self.config.index,
                        reason: err.to_string(),
                    },
                );
            }
        }
    }

    pub(crate) fn on_reconfig_cert(
        &mut self,
        cert: Certificate<ReconfigRequest>,
        step: &mut Step,
    ) {
        self.on_observe_reconfig_cert(&cert, step);
        // Holding a certificate is settlement work.
        self.try_propose_or_arm(step);
    }

    // ---- learner side -----------------------------------------------------

    /// A node outside the member set: it waits for state transfer and
    /// buffered deliveries, and otherwise stays quiet.
    pub(crate) fn handle_as_learner(&mut self, from: NodeId, msg: Message, step: &mut Step) {
        match msg {
            Message::SnapshotResponse { snapshot } => {
                self.on_snapshot_response(from, snapshot, step)
            }
            Message::Delivery(d) => {
                self.buffered_deliveries.insert((d.config_index, d.slot), d);
                self.maybe_request_snapshot(from, step);
            }
            Message::SnapshotRequest { requester } => {
                // Another learner probing us; we have nothing authoritative.
                step.effect(Effect::SnapshotRequestRejected {
                    from: requester,
                    reason: "not a member".into(),
                });
            }
            _ => {
                self.maybe_request_snapshot(from, step);
            }
        }
    }

    fn maybe_request_snapshot(&mut self, contact: NodeId, step: &mut Step) {
        if self.snapshot_requested {
            return;
        }
        let NodeId::Validator(peer) = contact else { return };
        self.snapshot_requested = true;
        self.snapshot_servers_tried.insert(peer);
        step.send(contact, Message::SnapshotRequest { requester: self.id });
        step.arm(TimerKind::LearnerRetry, self.params.attempt_timeout * 2);
    }

    pub(crate) fn on_learner_retry(&mut self, _now: u64, step: &mut Step) {
        if self.is_member() || self.retired_at.is_some() {
            return;
        }
        // Try the next server we have not asked yet; wrap around if needed.
        let candidates: Vec<ValidatorId> = self
            .config
            .members
            .iter()
            .copied()
            .filter(|m| *m != self.id && !self.snapshot_servers_tried.contains(m))
            .collect();
        let target = candidates.first().copied().or_else(|| {
            self.snapshot_servers_tried.clear();
            self.config.members.iter().copied().find(|m| *m != self.id)
        });
        if let Some(peer) = target {
            self.snapshot_servers_tried.insert(peer);
            step.send(NodeId::Validator(peer), Message::SnapshotRequest { requester: self.id });
        }
        step.arm(TimerKind::LearnerRetry, self.params.attempt_timeout * 2);
    }

    pub(crate) fn on_snapshot_response(
        &mut self,
        from: NodeId,
        snapshot: Snapshot,
        step: &mut Step,
    ) {
        let NodeId::Validator(server) = from else { return };
        let verdict = verify_snapshot(&self.genesis, &self.directory, &snapshot);
        let accepted = verdict.is_ok();
        let snap_epoch = snapshot.ch_prefix.last().map_or(0, |e| e.new_index);
        let latest_slot = snapshot.latest.as_ref().map(|(p, _)| (p.config_index, p.slot));
        let newer = snap_epoch > self.config.index
            || (snap_epoch == self.config.index && !self.is_member())
            || latest_slot.is_some_and(|(e, s)| e == self.config.index && s >= self.next_slot);
        let adopt = accepted && !self.is_member() && newer;
        step.effect(Effect::SnapshotVerified {
            server,
            accepted,
            adopted: adopt,
            epoch: snap_epoch,
            reject_reason: verdict.err().map(|e| e.to_string()),
            account_nonces: snapshot
                .accounts
                .accounts
                .iter()
                .map(|(k, v)| (k.clone(), v.next_nonce))
                .collect(),
        });
        if !adopt {
            // Allow retries to ask elsewhere.
            if !accepted {
                self.snapshot_requested = false;
            }
            return;
        }

        let last = snapshot.ch_prefix.last().expect("verified nonempty");
        self.config = Configuration {
            index: last.new_index,
            members: last.new_members.clone(),
        };
        self.ch = snapshot.ch_prefix;
        self.checkpoint_accounts = snapshot.accounts.clone();
        self.live_accounts = snapshot.accounts;
        self.next_slot = match &snapshot.latest {
            Some((p, _)) if p.config_index == self.config.index => p.slot + 1,
            _ => 0,
        };
        self.latest_checkpoint = snapshot.latest;
        self.slots.clear();
        self.pending.clear();
        self.buffered_certs.clear();

        if self.is_member() {
            step.arm(TimerKind::CheckpointTick, self.params.checkpoint_interval);
        }
        let now_hint = 0;
        self.resume_buffered_deliveries(now_hint, step);
        self.drain_deferred(now_hint, step);
    }
}

/// Counts or ignores one vote for quorum purposes: votes from signers
/// outside the member set never change a tally.
pub fn learner_gate(v: &Validator, signer: ValidatorId) -> bool {
    v.counts_toward_quorum(signer)
}
