//! The Byzantine behavior catalog. A corrupt node wraps an ordinary
//! validator and perturbs its interface: suppressing output, forging votes
//! with its own key, replaying stale certificates, or equivocating. It can
//! only ever sign with its own key; it never fabricates other validators'
//! signatures.

use crate::codec::{digest, Digest, Encode};
use crate::crypto::{self, KeyPair};
use crate::domain::{Certificate, Transaction, ValidatorId};
use crate::messages::{CommitVote, Message, NodeId, PrepareVote, Step};
use crate::simnet::scenario::Behavior;
use crate::trace::Effect;
use crate::validator::Validator;

#[derive(Debug, Clone)]
pub struct AdversaryState {
    pub behavior: Behavior,
    pub crash_at: Option<u64>,
    key: KeyPair,
    /// Certificates seen, for replay after installs.
    stash: Vec<Certificate<Transaction>>,
    members_hint: Vec<ValidatorId>,
}

impl AdversaryState {
    pub fn new(behavior: Behavior, crash_at: Option<u64>, key: KeyPair) -> Self {
        AdversaryState { behavior, crash_at, key, stash: Vec::new(), members_hint: Vec::new() }
    }

    pub fn crashed(&self, now: u64) -> bool {
        self.behavior == Behavior::Crash && self.crash_at.map_or(true, |at| now >= at)
    }

    /// Runs one inbound message through the corrupt node. Returns the step
    /// to apply; most behaviors delegate to the inner honest validator and
    /// then distort the outputs.
    pub fn handle_message(
        &mut self,
        inner: &mut Validator,
        from: NodeId,
        msg: Message,
        now: u64,
    ) -> Step {
        self.members_hint = inner.config.members.clone();
        match self.behavior {
            Behavior::EquivocateFastpath => {
                if let Message::TransferOrder { epoch, tx } = &msg {
                    // Sign anything: no locks, no nonce or funds checks.
                    let mut step = Step::default();
                    let sig = crypto::sign(&self.key, &crypto::fast_vote_message(*epoch, tx));
                    step.effect(Effect::AdversaryAction {
                        description: format!(
                            "equivocate-fastpath signed {} nonce {} unconditionally",
                            tx.sender, tx.nonce
                        ),
                    });
                    step.send(
                        from,
                        Message::TransferVote {
                            epoch: *epoch,
                            tx_digest: Encode::digest(tx),
                            config: inner.config.clone(),
                            signer: inner.id,
                            sig,
                        },
                    );
                    return step;
                }
                inner.handle_message(from, msg, now)
            }
            Behavior::StaleCertReplay => {
                if let Message::ConfirmCert { cert } = &msg {
                    self.stash.push(cert.clone());
                }
                let mut step = inner.handle_message(from, msg, now);
                let installed = step
                    .effects
                    .iter()
                    .any(|e| matches!(e, Effect::Installed { .. }));
                if installed {
                    // The epoch advanced: replay every certificate gathered
                    // under older epochs to everyone.
                    let stale: Vec<_> = self
                        .stash
                        .iter()
                        .filter(|c| c.config_index < inner.config.index)
                        .cloned()
                        .collect();
                    if !stale.is_empty() {
                        step.effect(Effect::AdversaryAction {
                            description: format!("replaying {} stale certificates", stale.len()),
                        });
                        for cert in stale {
                            for &m in &inner.config.members {
                                if m != inner.id {
                                    step.send(
                                        NodeId::Validator(m),
                                        Message::ConfirmCert { cert: cert.clone() },
                                    );
                                }
                            }
                        }
                    }
                }
                step
            }
            Behavior::PrematureLearnerVote => {
                let mut step = inner.handle_message(from, msg.clone(), now);
                if !inner.is_member() {
                    // Vote on everything we see despite not being a member.
                    let forged = self.premature_votes(inner, &msg);
                    if !forged.is_empty() {
                        step.effect(Effect::AdversaryAction {
                            description: format!(
                                "premature learner vote on {} message(s)",
                                forged.len()
                            ),
                        });
                        for m in forged {
                            for &member in &self.members_hint {
                                step.send(NodeId::Validator(member), m.clone());
                            }
                        }
                    }
                }
                step
            }
            Behavior::ConflictingPrepare => {
                let mut step = inner.handle_message(from, msg, now);
                step.outgoing = self.split_votes(inner.id, std::mem::take(&mut step.outgoing));
                step
            }
            Behavior::Withhold => {
                let mut step = inner.handle_message(from, msg, now);
                if !step.outgoing.is_empty() {
                    step.effect(Effect::AdversaryAction {
                        description: format!("withheld {} message(s)", step.outgoing.len()),
                    });
                }
                step.outgoing.clear();
                step
            }
            Behavior::Crash => {
                // Reaching here means now < crash_at.
                inner.handle_message(from, msg, now)
            }
        }
    }

    /// Forged settlement votes for whatever proposal or prepare the learner
    /// just observed.
    fn premature_votes(&self, inner: &Validator, msg: &Message) -> Vec<Message> {
        let (epoch, slot, attempt, hash) = match msg {
            Message::Propose(p) => (p.config_index, p.slot, p.attempt, p.payload.hash()),
            Message::Prepare(p) => (p.config_index, p.slot, p.attempt, p.payload_hash),
            _ => return Vec::new(),
        };
        let prepare_sig =
            crypto::sign(&self.key, &crypto::prepare_message(epoch, slot, attempt, hash));
        let commit_sig = crypto::sign(&self.key, &crypto::commit_message(epoch, slot, hash));
        vec![
            Message::Prepare(PrepareVote {
                config_index: epoch,
                slot,
                attempt,
                payload_hash: hash,
                signer: inner.id,
                sig: prepare_sig,
            }),
            Message::Commit(CommitVote {
                config_index: epoch,
                slot,
                payload_hash: hash,
                signer: inner.id,
                sig: commit_sig,
            }),
        ]
    }

    /// Splits outgoing PREPARE/COMMIT votes: even-indexed recipients get the
    /// honest vote, odd-indexed recipients a vote for a fabricated hash.
    fn split_votes(&self, own: ValidatorId, outgoing: Vec<(NodeId, Message)>) -> Vec<(NodeId, Message)> {
        outgoing
            .into_iter()
            .map(|(to, msg)| {
                let NodeId::Validator(v) = to else { return (to, msg) };
                if v.0 % 2 == 0 {
                    return (to, msg);
                }
                let twisted = match &msg {
                    Message::Prepare(p) => {
                        let fake = conflict_hash(p.payload_hash);
                        let sig = crypto::sign(
                            &self.key,
                            &crypto::prepare_message(p.config_index, p.slot, p.attempt, fake),
                        );
                        Some(Message::Prepare(PrepareVote {
                            payload_hash: fake,
                            sig,
                            signer: own,
                            ..p.clone()
                        }))
                    }
                    Message::Commit(c) => {
                        let fake = conflict_hash(c.payload_hash);
                        let sig = crypto::sign(
                            &self.key,
                            &crypto::commit_message(c.config_index, c.slot, fake),
                        );
                        Some(Message::Commit(CommitVote {
                            payload_hash: fake,
                            sig,
                            signer: own,
                            ..c.clone()
                        }))
                    }
                    _ => None,
                };
                (to, twisted.unwrap_or(msg))
            })
            .collect()
    }
}

fn conflict_hash(h: Digest) -> Digest {
    let mut bytes = h.0.to_vec();
    bytes.push(0x5a);
    digest(&bytes)
}
