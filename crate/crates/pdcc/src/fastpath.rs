//! Per-account consistent broadcast for payments: vote issuance with
//! per-(account, nonce) locking, configuration-bound certificate acceptance,
//! and idempotent certificate execution.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Digest, Encode};
use crate::crypto::{self, CertificateError, SignDomain, Signature};
use crate::domain::{Amount, Certificate, Configuration, Nonce, Transaction};
use crate::messages::{AckStatus, Message, NodeId, Step};
use crate::trace::{Effect, ExecutionPath};
use crate::validator::Validator;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FastPathError {
    #[error("order tagged epoch {claimed} but installed epoch is {installed}")]
    WrongConfiguration { claimed: u64, installed: u64 },
    #[error("unknown sender")]
    UnknownSender,
    #[error("bad nonce: expected {expected}, got {got}")]
    BadNonce { expected: Nonce, got: Nonce },
    #[error("insufficient funds: spendable {spendable}, needed {needed}")]
    InsufficientFunds { spendable: Amount, needed: Amount },
    #[error("a different transaction is already locked at this (account, nonce)")]
    ConflictingTransaction,
    #[error("certificate from stale epoch {cert} (installed {installed})")]
    StaleConfiguration { cert: u64, installed: u64 },
    #[error("certificate from future epoch {cert} (installed {installed})")]
    FutureConfiguration { cert: u64, installed: u64 },
    #[error("certificate quorum invalid: {0}")]
    QuorumInvalid(CertificateError),
    #[error("malformed transaction: {0}")]
    MalformedTransaction(String),
}

/// What this validator signed at an `(account, nonce)` slot. The digest is
/// never overwritten; the amount is kept so unexecuted locks reduce the
/// spendable balance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockEntry {
    pub tx_digest: Digest,
    pub amount: Amount,
}

impl Encode for LockEntry {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.tx_digest.encode_into(out);
        self.amount.encode_into(out);
    }
}

/// Outcome of presenting a certificate for execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecOutcome {
    Applied,
    AlreadyExecuted,
    /// Nonce is ahead of the sender's sequence; buffered until the gap fills.
    Buffered,
}

impl Validator {
    /// Signs a transfer order if it is the unique transaction at the
    /// sender's next nonce, affordable after subtracting unexecuted locks,
    /// and tagged with the installed epoch. Repeating an identical request
    /// returns the same signature.
    pub fn handle_transfer_order(
        &mut self,
        tx: &Transaction,
        claimed_epoch: u64,
    ) -> Result<Signature, FastPathError> {
        if claimed_epoch != self.config.index {
            return Err(FastPathError::WrongConfiguration {
                claimed: claimed_epoch,
                installed: self.config.index,
            });
        }
        tx.validate()
            .map_err(|e| FastPathError::MalformedTransaction(e.to_string()))?;

        let key = (tx.sender.clone(), tx.nonce);
        let tx_digest = Encode::digest(tx);
        if let Some(lock) = self.locks.get(&key) {
            if lock.tx_digest == tx_digest {
                // Idempotent: same request, same signature (fresh epoch tag).
                return Ok(crypto::sign(
                    &self.key,
                    &crypto::fast_vote_message(claimed_epoch, tx),
                ));
            }
            return Err(FastPathError::ConflictingTransaction);
        }

        let record = self
            .live_accounts
            .get(&tx.sender)
            .copied()
            .ok_or(FastPathError::UnknownSender)?;
        if tx.nonce != record.next_nonce {
            return Err(FastPathError::BadNonce { expected: record.next_nonce, got: tx.nonce });
        }
        let locked_unexecuted: Amount = self
            .locks
            .range((tx.sender.clone(), record.next_nonce)..=(tx.sender.clone(), Nonce::MAX))
            .map(|(_, l)| l.amount)
            .sum();
        let spendable = record.balance.saturating_sub(locked_unexecuted);
        if tx.amount > spendable {
            return Err(FastPathError::InsufficientFunds { spendable, needed: tx.amount });
        }

        self.locks.insert(key, LockEntry { tx_digest, amount: tx.amount });
        Ok(crypto::sign(&self.key, &crypto::fast_vote_message(claimed_epoch, tx)))
    }

    /// Accepts a transaction certificate iff it is tagged with the installed
    /// epoch and carries a valid quorum from the installed member set.
    pub fn accept_certificate(
        &self,
        cert: &Certificate<Transaction>,
    ) -> Result<(), FastPathError> {
        if self.mutations.accept_any_epoch {
            // Broken acceptance used by checker self-tests: verify the quorum
            // against the current members but under the certificate's own
            // epoch tag.
            let cfg = Configuration {
                index: cert.config_index,
                members: self.config.members.clone(),
            };
            return crypto::verify_certificate(&cfg, &self.directory, SignDomain::FastVote, cert)
                .map_err(FastPathError::QuorumInvalid);
        }
        if cert.config_index < self.config.index {
            return Err(FastPathError::StaleConfiguration {
                cert: cert.config_index,
                installed: self.config.index,
            });
        }
        if cert.config_index > self.config.index {
            return Err(FastPathError::FutureConfiguration {
                cert: cert.config_index,
                installed: self.config.index,
            });
        }
        crypto::verify_certificate(&self.config, &self.directory, SignDomain::FastVote, cert)
            .map_err(FastPathError::QuorumInvalid)
    }

    /// Executes an accepted certificate against the live account table.
    /// Keyed by `(sender, nonce)`: re-delivery is a no-op, and a certificate
    /// arriving ahead of its sender's sequence is buffered.
    pub fn execute_certificate(
        &mut self,
        cert: &Certificate<Transaction>,
        step: &mut Step,
    ) -> Result<ExecOutcome, FastPathError> {
        self.accept_certificate(cert)?;
        let tx = &cert.payload;
        tx.validate()
            .map_err(|e| FastPathError::MalformedTransaction(e.to_string()))?;
        step.effect(Effect::CertAccepted {
            cert_epoch: cert.config_index,
            installed: self.config.index,
            tx_digest: Encode::digest(tx),
            cert: cert.clone(),
        });
        self.known_certs.insert(Encode::digest(cert), cert.clone());

        let key = (tx.sender.clone(), tx.nonce);
        if self.executed.contains_key(&key) {
            // Refresh the pending certificate if this one is newer-epoch;
            // stale-epoch certificates cannot enter future checkpoints.
            if let Some(old) = self.pending.get(&key) {
                if cert.config_index > old.config_index {
                    self.pending.insert(key, cert.clone());
                }
            }
            return Ok(ExecOutcome::AlreadyExecuted);
        }

        let record = self
            .live_accounts
            .get(&tx.sender)
            .copied()
            .ok_or(FastPathError::UnknownSender)?;
        if tx.nonce > record.next_nonce {
            self.buffered_certs.insert(key, cert.clone());
            return Ok(ExecOutcome::Buffered);
        }
        if tx.nonce < record.next_nonce {
            // Sequence already advanced without an executed entry; treat as
            // already covered (possible after snapshot adoption).
            return Ok(ExecOutcome::AlreadyExecuted);
        }

        self.apply_live(cert, step)?;
        // Drain any buffered successors that are now sequential.
        loop {
            let next = self
                .live_accounts
                .get(&tx.sender)
                .map(|r| (tx.sender.clone(), r.next_nonce));
            let Some(next_key) = next else { break };
            let Some(buffered) = self.buffered_certs.remove(&next_key) else { break };
            if self.accept_certificate(&buffered).is_err() {
                // Buffered under an epoch that has since closed; drop it and
                // wait for re-certification.
                continue;
            }
            self.apply_live(&buffered, step)?;
        }
        Ok(ExecOutcome::Applied)
    }

    fn apply_live(
        &mut self,
        cert: &Certificate<Transaction>,
        step: &mut Step,
    ) -> Result<(), FastPathError> {
        let tx = &cert.payload;
        self.live_accounts
            .apply_transfer(tx)
            .map_err(|e| FastPathError::MalformedTransaction(e.to_string()))?;
        let key = (tx.sender.clone(), tx.nonce);
        self.executed.insert(key.clone(), Encode::digest(tx));
        self.pending.insert(key, cert.clone());
        step.effect(Effect::Executed {
            sender: tx.sender.clone(),
            recipient: tx.recipient.clone(),
            amount: tx.amount,
            nonce: tx.nonce,
            tx_digest: Encode::digest(tx),
            total_supply: self.live_accounts.total_supply(),
            via: ExecutionPath::FastPath,
        });
        Ok(())
    }

    /// Certificate digests executed since the last checkpoint, in
    /// `(sender, nonce)` order, restricted to certificates from the current
    /// epoch (older ones must be re-certified before they can settle).
    pub fn pending_executed_items(&self) -> Vec<Digest> {
        self.pending
            .values()
            .filter(|c| c.config_index == self.config.index)
            .map(Encode::digest)
            .collect()
    }

    // ---- message-level wrappers -------------------------------------------

    pub(crate) fn on_transfer_order(
        &mut self,
        from: NodeId,
        epoch: u64,
        tx: Transaction,
        step: &mut Step,
    ) {
        let tx_digest = Encode::digest(&tx);
        match self.handle_transfer_order(&tx, epoch) {
            Ok(sig) => {
                step.effect(Effect::TransferSigned {
                    epoch,
                    sender: tx.sender.clone(),
                    nonce: tx.nonce,
                    tx_digest,
                });
                step.send(
                    from,
                    Message::TransferVote {
                        epoch,
                        tx_digest,
                        config: self.config.clone(),
                        signer: self.id,
                        sig,
                    },
                );
            }
            Err(err) => {
                step.effect(Effect::TransferRejected {
                    epoch,
                    sender: tx.sender.clone(),
                    nonce: tx.nonce,
                    reason: err.to_string(),
                });
                step.send(
                    from,
                    Message::TransferReject {
                        epoch,
                        tx_digest,
                        installed: self.config.index,
                        reason: reason_code(&err),
                    },
                );
            }
        }
    }

    pub(crate) fn on_confirm_cert(
        &mut self,
        from: NodeId,
        cert: Certificate<Transaction>,
        step: &mut Step,
    ) {
        let tx = cert.payload.clone();
        let tx_digest = Encode::digest(&tx);
        let status = match self.execute_certificate(&cert, step) {
            Ok(ExecOutcome::Applied) => {
                self.try_propose_or_arm(step);
                AckStatus::Executed
            }
            Ok(ExecOutcome::AlreadyExecuted) => AckStatus::Executed,
            Ok(ExecOutcome::Buffered) => AckStatus::Buffered,
            Err(err) => {
                step.effect(Effect::CertRejected {
                    cert_epoch: cert.config_index,
                    installed: self.config.index,
                    reason: err.to_string(),
                });
                match err {
                    FastPathError::StaleConfiguration { .. } => AckStatus::StaleEpoch,
                    FastPathError::FutureConfiguration { .. } => AckStatus::FutureEpoch,
                    _ => AckStatus::Invalid,
                }
            }
        };
        if let NodeId::Client(_) = from {
            step.send(
                from,
                Message::ExecAck {
                    tx_digest,
                    sender: tx.sender,
                    nonce: tx.nonce,
                    status,
                    installed: self.config.index,
                },
            );
        }
    }
}

fn reason_code(err: &FastPathError) -> String {
    match err {
        FastPathError::WrongConfiguration { .. } => "wrong_configuration".into(),
        FastPathError::UnknownSender => "unknown_sender".into(),
        FastPathError::BadNonce { .. } => "bad_nonce".into(),
        FastPathError::InsufficientFunds { .. } => "insufficient_funds".into(),
        FastPathError::ConflictingTransaction => "conflicting_transaction".into(),
        other => format!("{other:?}"),
    }
}
