//! Wire messages exchanged between nodes, and the timer vocabulary.
//!
//! Every message has a canonical encoding (tag byte plus fields) so message
//! digests in traces are bit-stable.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec::{put_bytes, Digest, Encode};
use crate::crypto::Signature;
use crate::domain::{
    AccountId, Certificate, CheckpointPayload, CommitProof, Configuration, Nonce,
    ReconfigRequest, Transaction, ValidatorId,
};
use crate::reconfig::Snapshot;

/// Client process identity, disjoint from validator ids.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ClientId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum NodeId {
    Validator(ValidatorId),
    Client(ClientId),
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Validator(v) => write!(f, "{v}"),
            NodeId::Client(c) => write!(f, "{c}"),
        }
    }
}

impl Encode for NodeId {
    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            NodeId::Validator(v) => {
                out.push(0);
                v.encode_into(out);
            }
            NodeId::Client(c) => {
                out.push(1);
                c.0.encode_into(out);
            }
        }
    }
}

/// Outcome a validator reports to the client that pushed a certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckStatus {
    Executed,
    Buffered,
    StaleEpoch,
    FutureEpoch,
    Invalid,
}

impl Encode for AckStatus {
    fn encode_into(&self, out: &mut Vec<u8>) {
        let tag: u8 = match self {
            AckStatus::Executed => 0,
            AckStatus::Buffered => 1,
            AckStatus::StaleEpoch => 2,
            AckStatus::FutureEpoch => 3,
            AckStatus::Invalid => 4,
        };
        out.push(tag);
    }
}

/// A settlement proposal for one `(epoch, slot, attempt)`.
///
/// For attempts after the first, `justification` carries a quorum of
/// attempt-change votes; validators enforce that a prepared value reported
/// there is re-proposed rather than replaced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub config_index: u64,
    pub slot: u64,
    pub attempt: u64,
    pub payload: CheckpointPayload,
    pub justification: Vec<AttemptChangeMsg>,
    pub proposer: ValidatorId,
    pub sig: Signature,
}

impl Encode for Proposal {
    fn encode_into(&self, out: &mut Vec<u8>) {
        (self.config_index, self.slot, self.attempt).encode_into(out);
        self.payload.encode_into(out);
        self.justification.encode_into(out);
        self.proposer.encode_into(out);
        self.sig.encode_into(out);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareVote {
    pub config_index: u64,
    pub slot: u64,
    pub attempt: u64,
    pub payload_hash: Digest,
    pub signer: ValidatorId,
    pub sig: Signature,
}

impl Encode for PrepareVote {
    fn encode_into(&self, out: &mut Vec<u8>) {
        (self.config_index, self.slot, self.attempt).encode_into(out);
        self.payload_hash.encode_into(out);
        self.signer.encode_into(out);
        self.sig.encode_into(out);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitVote {
    pub config_index: u64,
    pub slot: u64,
    pub payload_hash: Digest,
    pub signer: ValidatorId,
    pub sig: Signature,
}

impl Encode for CommitVote {
    fn encode_into(&self, out: &mut Vec<u8>) {
        (self.config_index, self.slot).encode_into(out);
        self.payload_hash.encode_into(out);
        self.signer.encode_into(out);
        self.sig.encode_into(out);
    }
}

/// Vote to abandon the current attempt of a slot. Carries the sender's
/// highest prepared value; the payload itself rides along unsigned so a new
/// coordinator can re-propose it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptChangeMsg {
    pub config_index: u64,
    pub slot: u64,
    pub next_attempt: u64,
    pub prepared: Option<(Digest, u64)>,
    pub prepared_payload: Option<CheckpointPayload>,
    pub signer: ValidatorId,
    pub sig: Signature,
}

impl Encode for AttemptChangeMsg {
    fn encode_into(&self, out: &mut Vec<u8>) {
        (self.config_index, self.slot, self.next_attempt).encode_into(out);
        self.prepared.encode_into(out);
        self.prepared_payload.encode_into(out);
        self.signer.encode_into(out);
        self.sig.encode_into(out);
    }
}

/// Canonical delivery envelope: the coordinator of the deciding attempt
/// assembles the commit proof once and signs the envelope, so every correct
/// validator stores identical proof bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryMsg {
    pub config_index: u64,
    pub slot: u64,
    pub attempt: u64,
    pub payload: CheckpointPayload,
    pub proof: CommitProof,
    pub coordinator: ValidatorId,
    pub sig: Signature,
}

impl Encode for DeliveryMsg {
    fn encode_into(&self, out: &mut Vec<u8>) {
        (self.config_index, self.slot, self.attempt).encode_into(out);
        self.payload.encode_into(out);
        self.proof.encode_into(out);
        self.coordinator.encode_into(out);
        self.sig.encode_into(out);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Message {
    // Client-to-validator fast path.
    TransferOrder { epoch: u64, tx: Transaction },
    ConfirmCert { cert: Certificate<Transaction> },
    ReconfigOrder { req: ReconfigRequest },
    ReconfigCert { cert: Certificate<ReconfigRequest> },

    // Validator-to-client responses.
    TransferVote {
        epoch: u64,
        tx_digest: Digest,
        config: Configuration,
        signer: ValidatorId,
        sig: Signature,
    },
    TransferReject { epoch: u64, tx_digest: Digest, installed: u64, reason: String },
    ExecAck {
        tx_digest: Digest,
        sender: AccountId,
        nonce: Nonce,
        status: AckStatus,
        installed: u64,
    },
    ReconfigVote {
        epoch: u64,
        req_digest: Digest,
        config: Configuration,
        signer: ValidatorId,
        sig: Signature,
    },
    ReconfigReject { epoch: u64, req_digest: Digest, installed: u64, reason: String },

    // Settlement.
    Propose(Proposal),
    Prepare(PrepareVote),
    Commit(CommitVote),
    AttemptChange(AttemptChangeMsg),
    Delivery(DeliveryMsg),
    CertFetch { epoch: u64, digests: Vec<Digest> },
    CertFill { epoch: u64, certs: Vec<Certificate<Transaction>> },

    // State transfer.
    SnapshotRequest { requester: ValidatorId },
    SnapshotResponse { snapshot: Snapshot },
}

impl Message {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Message::TransferOrder { .. } => "transfer_order",
            Message::ConfirmCert { .. } => "confirm_cert",
            Message::ReconfigOrder { .. } => "reconfig_order",
            Message::ReconfigCert { .. } => "reconfig_cert",
            Message::TransferVote { .. } => "transfer_vote",
            Message::TransferReject { .. } => "transfer_reject",
            Message::ExecAck { .. } => "exec_ack",
            Message::ReconfigVote { .. } => "reconfig_vote",
            Message::ReconfigReject { .. } => "reconfig_reject",
            Message::Propose(_) => "propose",
            Message::Prepare(_) => "prepare",
            Message::Commit(_) => "commit",
            Message::AttemptChange(_) => "attempt_change",
            Message::Delivery(_) => "delivery",
            Message::CertFetch { .. } => "cert_fetch",
            Message::CertFill { .. } => "cert_fill",
            Message::SnapshotRequest { .. } => "snapshot_request",
            Message::SnapshotResponse { .. } => "snapshot_response",
        }
    }
}

impl Encode for Message {
    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Message::TransferOrder { epoch, tx } => {
                out.push(0);
                epoch.encode_into(out);
                tx.encode_into(out);
            }
            Message::ConfirmCert { cert } => {
                out.push(1);
                cert.encode_into(out);
            }
            Message::ReconfigOrder { req } => {
                out.push(2);
                req.encode_into(out);
            }
            Message::ReconfigCert { cert } => {
                out.push(3);
                cert.encode_into(out);
            }
            Message::TransferVote { epoch, tx_digest, config, signer, sig } => {
                out.push(4);
                epoch.encode_into(out);
                tx_digest.encode_into(out);
                config.encode_into(out);
                signer.encode_into(out);
                sig.encode_into(out);
            }
            Message::TransferReject { epoch, tx_digest, installed, reason } => {
                out.push(5);
                epoch.encode_into(out);
                tx_digest.encode_into(out);
                installed.encode_into(out);
                put_bytes(out, reason.as_bytes());
            }
            Message::ExecAck { tx_digest, sender, nonce, status, installed } => {
                out.push(6);
                tx_digest.encode_into(out);
                sender.encode_into(out);
                nonce.encode_into(out);
                status.encode_into(out);
                installed.encode_into(out);
            }
            Message::ReconfigVote { epoch, req_digest, config, signer, sig } => {
                out.push(7);
                epoch.encode_into(out);
                req_digest.encode_into(out);
                config.encode_into(out);
                signer.encode_into(out);
                sig.encode_into(out);
            }
            Message::ReconfigReject { epoch, req_digest, installed, reason } => {
                out.push(8);
                epoch.encode_into(out);
                req_digest.encode_into(out);
                installed.encode_into(out);
                put_bytes(out, reason.as_bytes());
            }
            Message::Propose(p) => {
                out.push(9);
                p.encode_into(out);
            }
            Message::Prepare(p) => {
                out.push(10);
                p.encode_into(out);
            }
            Message::Commit(c) => {
                out.push(11);
                c.encode_into(out);
            }
            Message::AttemptChange(a) => {
                out.push(12);
                a.encode_into(out);
            }
            Message::Delivery(d) => {
                out.push(13);
                d.encode_into(out);
            }
            Message::CertFetch { epoch, digests } => {
                out.push(14);
                epoch.encode_into(out);
                digests.encode_into(out);
            }
            Message::CertFill { epoch, certs } => {
                out.push(15);
                epoch.encode_into(out);
                certs.encode_into(out);
            }
            Message::SnapshotRequest { requester } => {
                out.push(16);
                requester.encode_into(out);
            }
            Message::SnapshotResponse { snapshot } => {
                out.push(17);
                snapshot.encode_into(out);
            }
        }
    }
}

/// Timers a node can arm; the simulator fires them back at the owner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimerKind {
    /// Attempt timeout for a settlement slot.
    Slot { epoch: u64, slot: u64, attempt: u64 },
    /// Periodic checkpoint cadence check.
    CheckpointTick,
    /// Learner retries its snapshot request.
    LearnerRetry,
    /// Client retransmission for an outstanding order or certificate.
    ClientRetry { token: u64 },
    /// Scripted adversary wake-up.
    AdversaryWake,
}

impl Encode for TimerKind {
    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            TimerKind::Slot { epoch, slot, attempt } => {
                out.push(0);
                (*epoch, *slot, *attempt).encode_into(out);
            }
            TimerKind::CheckpointTick => out.push(1),
            TimerKind::LearnerRetry => out.push(2),
            TimerKind::ClientRetry { token } => {
                out.push(3);
                token.encode_into(out);
            }
            TimerKind::AdversaryWake => out.push(4),
        }
    }
}

/// Everything a node wants done after handling one event.
#[derive(Debug, Default, Clone)]
pub struct Step {
    pub outgoing: Vec<(NodeId, Message)>,
    pub timers: Vec<(TimerKind, u64)>,
    pub effects: Vec<crate::trace::Effect>,
}

impl Step {
    pub fn send(&mut self, to: NodeId, msg: Message) {
        self.outgoing.push((to, msg));
    }

    pub fn arm(&mut self, kind: TimerKind, delay: u64) {
        self.timers.push((kind, delay));
    }

    pub fn effect(&mut self, e: crate::trace::Effect) {
        self.effects.push(e);
    }
}
