//! PDCC: dynamic membership reconfiguration for certificate-based payment
//! systems.
//!
//! The library implements the whole stack needed to study the protocol at
//! desk scale:
//!
//! * [`domain`] — configurations, quorum arithmetic, transactions,
//!   certificates, checkpoint payloads, commit proofs, and the append-only
//!   configuration history.
//! * [`crypto`] — a deterministic signature scheme with domain separation,
//!   certificate assembly, and quorum verification.
//! * [`validator`], [`fastpath`], [`settlement`], [`reconfig`] — the
//!   validator state machine: per-account consistent broadcast for payments,
//!   slot-based settlement checkpoints, and learner-based membership
//!   transitions with verifiable state transfer.
//! * [`simnet`] — a deterministic discrete-event simulator with partial
//!   synchrony, scripted clients, and a catalog of Byzantine behaviors.
//! * [`explore`] — bounded exhaustive and randomized interleaving
//!   exploration with state deduplication.
//! * [`checker`] — offline trace audits for the protocol's safety and
//!   liveness properties.

pub mod checker;
pub mod codec;
pub mod crypto;
pub mod domain;
pub mod explore;
pub mod fastpath;
pub mod messages;
pub mod reconfig;
pub mod settlement;
pub mod simnet;
pub mod trace;
pub mod validator;

pub use codec::{digest, Digest, Encode};
pub use domain::{
    quorum_params, AccountId, AccountTable, Amount, Certificate, CheckpointPayload, CommitProof,
    CommittedItem, ConfigHistoryEntry, Configuration, DomainError, Nonce, ReconfigProposal,
    ReconfigRequest, Transaction, ValidatorId,
};
pub use validator::Validator;
