//! Trace records: one JSON line per simulated event, carrying enough
//! embedded material (certificates, proofs, history entries) for the offline
//! checker to re-verify every signature independently.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codec::Digest;
use crate::domain::{
    AccountId, Amount, Certificate, CommitProof, ConfigHistoryEntry, Nonce, ReconfigRequest,
    Transaction, ValidatorId,
};

/// Things that happened while a node processed one event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Effect {
    TransferSigned {
        epoch: u64,
        sender: AccountId,
        nonce: Nonce,
        tx_digest: Digest,
    },
    TransferRejected {
        epoch: u64,
        sender: AccountId,
        nonce: Nonce,
        reason: String,
    },
    CertAccepted {
        cert_epoch: u64,
        installed: u64,
        tx_digest: Digest,
        cert: Certificate<Transaction>,
    },
    CertRejected {
        cert_epoch: u64,
        installed: u64,
        reason: String,
    },
    Executed {
        sender: AccountId,
        recipient: AccountId,
        amount: Amount,
        nonce: Nonce,
        tx_digest: Digest,
        #[serde(with = "u128_string")]
        total_supply: u128,
        via: ExecutionPath,
    },
    ReconfigSigned {
        epoch: u64,
        req_digest: Digest,
    },
    ReconfigRejected {
        epoch: u64,
        reason: String,
    },
    ReconfigCertObserved {
        epoch: u64,
        joiners: Vec<ValidatorId>,
        cert: Certificate<ReconfigRequest>,
    },
    ProposalSent {
        epoch: u64,
        slot: u64,
        attempt: u64,
        payload_hash: Digest,
        items: usize,
        reconfig: bool,
    },
    ProposalRejected {
        epoch: u64,
        slot: u64,
        attempt: u64,
        reason: String,
    },
    PrepareSent {
        epoch: u64,
        slot: u64,
        attempt: u64,
        payload_hash: Digest,
    },
    CommitSent {
        epoch: u64,
        slot: u64,
        payload_hash: Digest,
    },
    AttemptChangeSent {
        epoch: u64,
        slot: u64,
        next_attempt: u64,
        prepared: Option<(Digest, u64)>,
    },
    /// Tally audit record: a quorum formed locally from these signers.
    QuorumFormed {
        kind: QuorumKind,
        epoch: u64,
        slot: u64,
        attempt: u64,
        payload_hash: Digest,
        signers: Vec<ValidatorId>,
    },
    /// Tally audit record: a vote was not counted.
    VoteIgnored {
        kind: QuorumKind,
        epoch: u64,
        slot: u64,
        signer: ValidatorId,
        reason: String,
    },
    Delivered {
        epoch: u64,
        slot: u64,
        payload_hash: Digest,
        state_digest: Digest,
        items: usize,
        proof: CommitProof,
    },
    Installed {
        new_epoch: u64,
        members: Vec<ValidatorId>,
        entry_bytes: String,
        entry: ConfigHistoryEntry,
    },
    SnapshotServed {
        to: ValidatorId,
    },
    SnapshotRequestRejected {
        from: ValidatorId,
        reason: String,
    },
    SnapshotVerified {
        server: ValidatorId,
        accepted: bool,
        adopted: bool,
        epoch: u64,
        reject_reason: Option<String>,
        account_nonces: BTreeMap<AccountId, Nonce>,
    },
    MessageDropped {
        reason: String,
    },
    AdversaryAction {
        description: String,
    },
    ClientNote {
        description: String,
    },
    /// Surfaced protocol anomaly that should be impossible under the fault
    /// model; the checker treats its presence at a correct node as a failure.
    Anomaly {
        description: String,
    },
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionPath {
    FastPath,
    Checkpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuorumKind {
    Prepare,
    Commit,
    AttemptChange,
}

/// Event classes recorded in a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    MessageDelivery,
    TimerFire,
    ClientAction,
    Dropped,
}

/// One line of the trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub time: u64,
    pub node: String,
    pub event_kind: EventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message_kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message_digest: Option<Digest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sent_at: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub src: Option<String>,
    pub state_digest_after: Digest,
    pub effects: Vec<Effect>,
}

impl TraceRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace records always serialize")
    }

    pub fn from_json_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

/// Serializes a full trace as JSON Lines.
pub fn to_jsonl(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_json_line());
        out.push('\n');
    }
    out
}

/// Parses a JSON Lines trace.
pub fn from_jsonl(text: &str) -> Result<Vec<TraceRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(TraceRecord::from_json_line)
        .collect()
}
