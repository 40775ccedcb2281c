//! Scripted clients: transfer pipelines with vote collection and epoch
//! retagging, the reconfiguration admin, and the equivocating client used to
//! probe double-spend resistance.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::codec::{Digest, Encode};
use crate::crypto::{self, KeyDirectory, SignDomain, Signature};
use crate::domain::{Certificate, Configuration, ReconfigRequest, Transaction, ValidatorId};
use crate::messages::{AckStatus, ClientId, Message, NodeId, Step, TimerKind};
use crate::simnet::scenario::{ClientSpec, EquivocateSpec, ReconfigSpec};
use crate::trace::Effect;

/// One transfer being pushed through the fast path.
#[derive(Debug, Clone)]
struct OutstandingTransfer {
    tx: Transaction,
    /// Votes per epoch, with the configuration the voters reported.
    votes: BTreeMap<u64, (Configuration, BTreeMap<ValidatorId, Signature>)>,
    cert: Option<Certificate<Transaction>>,
    exec_acks: BTreeSet<ValidatorId>,
    satisfied: bool,
}

impl OutstandingTransfer {
    fn new(tx: Transaction) -> Self {
        OutstandingTransfer {
            tx,
            votes: BTreeMap::new(),
            cert: None,
            exec_acks: BTreeSet::new(),
            satisfied: false,
        }
    }
}

#[derive(Debug, Clone)]
enum ClientKind {
    Transfers {
        queue: VecDeque<Transaction>,
        live: Vec<OutstandingTransfer>,
        completed: u64,
    },
    Equivocate {
        spec: EquivocateSpec,
        launched: bool,
        votes_a: BTreeMap<u64, (Configuration, BTreeMap<ValidatorId, Signature>)>,
        votes_b: BTreeMap<u64, (Configuration, BTreeMap<ValidatorId, Signature>)>,
        sent_a: bool,
        sent_b: bool,
    },
    Reconfig {
        queue: VecDeque<ReconfigSpec>,
        current: Option<ReconfigRequest>,
        votes: BTreeMap<u64, (Configuration, BTreeMap<ValidatorId, Signature>)>,
        cert_sent: bool,
    },
}

/// A scripted client process. Clients know all validator ids and the public
/// key directory (to verify votes before aggregating), track the installed
/// epoch through rejections, and retransmit until a quorum acknowledges.
#[derive(Debug, Clone)]
pub struct ClientNode {
    pub id: ClientId,
    kind: ClientKind,
    epoch_belief: u64,
    validators: Vec<ValidatorId>,
    directory: KeyDirectory,
    retry_interval: u64,
    retry_armed: bool,
    started: bool,
}

impl ClientNode {
    pub fn from_spec(
        spec: &ClientSpec,
        validators: Vec<ValidatorId>,
        directory: KeyDirectory,
        retry_interval: u64,
    ) -> Self {
        let kind = if let Some(eq) = &spec.equivocate {
            ClientKind::Equivocate {
                spec: eq.clone(),
                launched: false,
                votes_a: BTreeMap::new(),
                votes_b: BTreeMap::new(),
                sent_a: false,
                sent_b: false,
            }
        } else {
            ClientKind::Transfers {
                queue: spec
                    .transfers
                    .iter()
                    .map(|t| t.to_transaction().expect("validated at load"))
                    .collect(),
                live: Vec::new(),
                completed: 0,
            }
        };
        ClientNode {
            id: ClientId(spec.id),
            kind,
            epoch_belief: 0,
            validators,
            directory,
            retry_interval,
            retry_armed: false,
            started: false,
        }
    }

    pub fn reconfig_admin(
        id: ClientId,
        script: Vec<ReconfigSpec>,
        validators: Vec<ValidatorId>,
        directory: KeyDirectory,
        retry_interval: u64,
    ) -> Self {
        ClientNode {
            id,
            kind: ClientKind::Reconfig {
                queue: script.into(),
                current: None,
                votes: BTreeMap::new(),
                cert_sent: false,
            },
            epoch_belief: 0,
            validators,
            directory,
            retry_interval,
            retry_armed: false,
            started: false,
        }
    }

    /// Whether this client has finished everything it was scripted to do.
    pub fn is_idle(&self) -> bool {
        match &self.kind {
            ClientKind::Transfers { queue, live, .. } => {
                queue.is_empty() && live.is_empty()
            }
            ClientKind::Equivocate { launched, .. } => *launched,
            ClientKind::Reconfig { queue, current, cert_sent, .. } => {
                queue.is_empty() && (current.is_none() || *cert_sent)
            }
        }
    }

    pub fn state_digest(&self) -> Digest {
        let mut out = Vec::new();
        self.id.0.encode_into(&mut out);
        self.epoch_belief.encode_into(&mut out);
        self.started.encode_into(&mut out);
        match &self.kind {
            ClientKind::Transfers { queue, live, completed } => {
                (queue.len() as u64).encode_into(&mut out);
                completed.encode_into(&mut out);
                for t in live {
                    Encode::digest(&t.tx).encode_into(&mut out);
                    (t.votes.len() as u64).encode_into(&mut out);
                    for (e, (_, votes)) in &t.votes {
                        e.encode_into(&mut out);
                        votes.keys().cloned().collect::<Vec<_>>().encode_into(&mut out);
                    }
                    t.cert.is_some().encode_into(&mut out);
                    t.exec_acks.encode_into(&mut out);
                    t.satisfied.encode_into(&mut out);
                }
            }
            ClientKind::Equivocate { sent_a, sent_b, launched, votes_a, votes_b, .. } => {
                launched.encode_into(&mut out);
                sent_a.encode_into(&mut out);
                sent_b.encode_into(&mut out);
                (votes_a.len() as u64).encode_into(&mut out);
                (votes_b.len() as u64).encode_into(&mut out);
            }
            ClientKind::Reconfig { queue, current, votes, cert_sent } => {
                (queue.len() as u64).encode_into(&mut out);
                current.is_some().encode_into(&mut out);
                (votes.len() as u64).encode_into(&mut out);
                cert_sent.encode_into(&mut out);
            }
        }
        crate::codec::digest(&out)
    }

    fn broadcast(&self, step: &mut Step, msg: Message) {
        for &v in &self.validators {
            step.send(NodeId::Validator(v), msg.clone());
        }
    }

    fn arm_retry(&mut self, step: &mut Step) {
        if !self.retry_armed {
            self.retry_armed = true;
            step.arm(TimerKind::ClientRetry { token: 0 }, self.retry_interval);
        }
    }

    /// First scripted action (and each later reconfig trigger).
    pub fn start(&mut self, step: &mut Step) {
        self.started = true;
        match &mut self.kind {
            ClientKind::Transfers { .. } => {
                self.launch_next_transfer(step);
            }
            ClientKind::Equivocate { .. } => {
                self.launch_equivocation(step);
            }
            ClientKind::Reconfig { .. } => {
                self.launch_next_reconfig(step);
            }
        }
    }

    fn launch_next_transfer(&mut self, step: &mut Step) {
        let epoch = self.epoch_belief;
        let ClientKind::Transfers { queue, live, .. } = &mut self.kind else { return };
        let Some(tx) = queue.pop_front() else { return };
        let order = Message::TransferOrder { epoch, tx: tx.clone() };
        live.push(OutstandingTransfer::new(tx));
        self.broadcast(step, order);
        self.arm_retry(step);
    }

    fn launch_equivocation(&mut self, step: &mut Step) {
        let epoch = self.epoch_belief;
        let ClientKind::Equivocate { spec, launched, .. } = &mut self.kind else { return };
        *launched = true;
        let tx_a = spec.tx_a.to_transaction().expect("validated");
        let tx_b = spec.tx_b.to_transaction().expect("validated");
        let (to_a, to_b) = (spec.to_a.clone(), spec.to_b.clone());
        step.effect(Effect::ClientNote {
            description: format!(
                "equivocating: {} to {:?}, {} to {:?}",
                Encode::digest(&tx_a),
                to_a,
                Encode::digest(&tx_b),
                to_b
            ),
        });
        for id in to_a {
            step.send(
                NodeId::Validator(ValidatorId(id)),
                Message::TransferOrder { epoch, tx: tx_a.clone() },
            );
        }
        for id in to_b {
            step.send(
                NodeId::Validator(ValidatorId(id)),
                Message::TransferOrder { epoch, tx: tx_b.clone() },
            );
        }
    }

    fn launch_next_reconfig(&mut self, step: &mut Step) {
        let epoch = self.epoch_belief;
        let ClientKind::Reconfig { queue, current, votes, cert_sent } = &mut self.kind else {
            return;
        };
        let Some(spec) = queue.pop_front() else { return };
        let req = ReconfigRequest::new(
            epoch,
            spec.next_members.iter().copied().map(ValidatorId),
        )
        .expect("validated at load");
        *current = Some(req.clone());
        votes.clear();
        *cert_sent = false;
        self.broadcast(step, Message::ReconfigOrder { req });
        self.arm_retry(step);
    }

    pub fn handle_message(&mut self, from: NodeId, msg: Message, step: &mut Step) {
        let NodeId::Validator(signer_node) = from else { return };
        match msg {
            Message::TransferVote { epoch, tx_digest, config, signer, sig } => {
                self.on_transfer_vote(signer_node, epoch, tx_digest, config, signer, sig, step);
            }
            Message::TransferReject { installed, tx_digest, reason, .. } => {
                self.on_transfer_reject(installed, tx_digest, &reason, step);
            }
            Message::ExecAck { tx_digest, status, installed, .. } => {
                self.on_exec_ack(signer_node, tx_digest, status, installed, step);
            }
            Message::ReconfigVote { epoch, req_digest, config, signer, sig } => {
                self.on_reconfig_vote(epoch, req_digest, config, signer, sig, step);
            }
            Message::ReconfigReject { installed, reason, .. } => {
                self.on_reconfig_reject(installed, &reason, step);
            }
            _ => {}
        }
    }


    #[allow(clippy::too_many_arguments)]
    fn on_transfer_vote(
        &mut self,
        _from: ValidatorId,
        epoch: u64,
        tx_digest: Digest,
        config: Configuration,
        signer: ValidatorId,
        sig: Signature,
        step: &mut Step,
    ) {
        let directory = self.directory.clone();
        match &mut self.kind {
            ClientKind::Transfers { live, .. } => {
                let Some(t) = live.iter_mut().find(|t| {
                    Encode::digest(&t.tx) == tx_digest && t.cert.is_none()
                }) else {
                    return;
                };
                if !directory.verify(signer, &crypto::fast_vote_message(epoch, &t.tx), &sig) {
                    return;
                }
                let entry = t.votes.entry(epoch).or_insert_with(|| (config, BTreeMap::new()));
                entry.1.insert(signer, sig);
                let (cfg, votes) = entry;
                if votes.len() >= cfg.quorum() && cfg.index == epoch {
                    let vote_list: Vec<_> = votes.iter().map(|(id, s)| (*id, *s)).collect();
                    if let Ok(cert) = crypto::assemble_certificate(
                        cfg,
                        &directory,
                        SignDomain::FastVote,
                        epoch,
                        &t.tx,
                        &vote_list,
                    ) {
                        t.cert = Some(cert.clone());
                        step.effect(Effect::ClientNote {
                            description: format!(
                                "certificate formed for {} nonce {} epoch {epoch}",
                                t.tx.sender, t.tx.nonce
                            ),
                        });
                        let msg = Message::ConfirmCert { cert };
                        for &v in &self.validators.clone() {
                            step.send(NodeId::Validator(v), msg.clone());
                        }
                    }
                }
            }
            ClientKind::Equivocate { spec, votes_a, votes_b, sent_a, sent_b, .. } => {
                let tx_a = spec.tx_a.to_transaction().expect("validated");
                let tx_b = spec.tx_b.to_transaction().expect("validated");
                let (tx, votes, sent) = if Encode::digest(&tx_a) == tx_digest {
                    (tx_a, votes_a, sent_a)
                } else if Encode::digest(&tx_b) == tx_digest {
                    (tx_b, votes_b, sent_b)
                } else {
                    return;
                };
                if *sent
                    || !directory.verify(signer, &crypto::fast_vote_message(epoch, &tx), &sig)
                {
                    return;
                }
                let entry = votes.entry(epoch).or_insert_with(|| (config, BTreeMap::new()));
                entry.1.insert(signer, sig);
                let (cfg, collected) = entry;
                if collected.len() >= cfg.quorum() && cfg.index == epoch {
                    let vote_list: Vec<_> = collected.iter().map(|(id, s)| (*id, *s)).collect();
                    if let Ok(cert) = crypto::assemble_certificate(
                        cfg,
                        &directory,
                        SignDomain::FastVote,
                        epoch,
                        &tx,
                        &vote_list,
                    ) {
                        *sent = true;
                        step.effect(Effect::ClientNote {
                            description: format!(
                                "equivocation certificate formed for nonce {}",
                                tx.nonce
                            ),
                        });
                        let msg = Message::ConfirmCert { cert };
                        for &v in &self.validators.clone() {
                            step.send(NodeId::Validator(v), msg.clone());
                        }
                    }
                }
            }
            ClientKind::Reconfig { .. } => {}
        }
    }

    fn on_transfer_reject(
        &mut self,
        installed: u64,
        tx_digest: Digest,
        reason: &str,
        step: &mut Step,
    ) {
        if installed > self.epoch_belief {
            self.epoch_belief = installed;
            // Re-order every live transfer under the new epoch.
            let epoch = self.epoch_belief;
            let orders: Vec<Message> = match &self.kind {
                ClientKind::Transfers { live, .. } => live
                    .iter()
                    .filter(|t| !t.satisfied)
                    .map(|t| Message::TransferOrder { epoch, tx: t.tx.clone() })
                    .collect(),
                _ => Vec::new(),
            };
            for order in orders {
                self.broadcast(step, order);
            }
            self.arm_retry(step);
            return;
        }
        // Same-epoch rejection (bad nonce while a predecessor is in flight,
        // funds race): the retry timer will re-send.
        let _ = (tx_digest, reason);
        self.arm_retry(step);
    }

    fn on_exec_ack(
        &mut self,
        from: ValidatorId,
        tx_digest: Digest,
        status: AckStatus,
        installed: u64,
        step: &mut Step,
    ) {
        if installed > self.epoch_belief {
            self.epoch_belief = installed;
        }
        let epoch = self.epoch_belief;
        let total = self.validators.len();
        let mut advance = false;
        let mut reorder: Option<Message> = None;
        if let ClientKind::Transfers { live, completed, .. } = &mut self.kind {
            if let Some(pos) = live.iter().position(|t| Encode::digest(&t.tx) == tx_digest) {
                let t = &mut live[pos];
                match status {
                    AckStatus::Executed => {
                        t.exec_acks.insert(from);
                        let quorum = t
                            .votes
                            .values()
                            .map(|(c, _)| c.quorum())
                            .max()
                            .unwrap_or(total.div_ceil(2) + 1);
                        if !t.satisfied && t.exec_acks.len() >= quorum {
                            t.satisfied = true;
                            advance = true;
                        }
                        if t.exec_acks.len() >= total {
                            // Everyone applied it; nothing left to retry.
                            live.remove(pos);
                            *completed += 1;
                        }
                    }
                    AckStatus::StaleEpoch => {
                        // The certificate was built under an epoch that has
                        // closed: collect votes again under the new one.
                        t.cert = None;
                        reorder = Some(Message::TransferOrder { epoch, tx: t.tx.clone() });
                    }
                    AckStatus::FutureEpoch | AckStatus::Buffered | AckStatus::Invalid => {}
                }
            }
        }
        if let Some(order) = reorder {
            self.broadcast(step, order);
            self.arm_retry(step);
        }
        if advance {
            self.launch_next_transfer(step);
        }
    }

    fn on_reconfig_vote(
        &mut self,
        epoch: u64,
        req_digest: Digest,
        config: Configuration,
        signer: ValidatorId,
        sig: Signature,
        step: &mut Step,
    ) {
        let directory = self.directory.clone();
        let validators = self.validators.clone();
        let ClientKind::Reconfig { current, votes, cert_sent, .. } = &mut self.kind else {
            return;
        };
        let Some(req) = current else { return };
        if *cert_sent || Encode::digest(req) != req_digest {
            return;
        }
        if !directory.verify(signer, &crypto::reconfig_vote_message(epoch, req), &sig) {
            return;
        }
        let entry = votes.entry(epoch).or_insert_with(|| (config, BTreeMap::new()));
        entry.1.insert(signer, sig);
        let (cfg, collected) = entry;
        if collected.len() >= cfg.quorum() && cfg.index == epoch {
            let vote_list: Vec<_> = collected.iter().map(|(id, s)| (*id, *s)).collect();
            if let Ok(cert) = crypto::assemble_certificate(
                cfg,
                &directory,
                SignDomain::ReconfigVote,
                epoch,
                req,
                &vote_list,
            ) {
                *cert_sent = true;
                step.effect(Effect::ClientNote {
                    description: format!("reconfiguration certificate formed for epoch {epoch}"),
                });
                for &v in &validators {
                    step.send(NodeId::Validator(v), Message::ReconfigCert { cert: cert.clone() });
                }
            }
        }
    }

    fn on_reconfig_reject(&mut self, installed: u64, _reason: &str, step: &mut Step) {
        if installed > self.epoch_belief {
            self.epoch_belief = installed;
            let epoch = self.epoch_belief;
            let ClientKind::Reconfig { current, votes, cert_sent, .. } = &mut self.kind else {
                return;
            };
            if *cert_sent {
                return;
            }
            if let Some(req) = current {
                // Rebind the request to the current epoch and start over.
                let rebound = ReconfigRequest {
                    current_index: epoch,
                    next_members: req.next_members.clone(),
                };
                *current = Some(rebound.clone());
                votes.clear();
                self.broadcast(step, Message::ReconfigOrder { req: rebound });
                self.arm_retry(step);
            }
        }
    }

    pub fn handle_timer(&mut self, _kind: TimerKind, step: &mut Step) {
        self.retry_armed = false;
        let epoch = self.epoch_belief;
        let mut resend: Vec<Message> = Vec::new();
        let mut still_busy = false;
        match &self.kind {
            ClientKind::Transfers { live, queue, .. } => {
                for t in live.iter() {
                    still_busy = true;
                    match &t.cert {
                        None => resend.push(Message::TransferOrder { epoch, tx: t.tx.clone() }),
                        Some(cert) => resend.push(Message::ConfirmCert { cert: cert.clone() }),
                    }
                }
                still_busy |= !queue.is_empty();
            }
            ClientKind::Equivocate { .. } => {}
            ClientKind::Reconfig { current, cert_sent, .. } => {
                if let Some(req) = current {
                    if !*cert_sent {
                        still_busy = true;
                        resend.push(Message::ReconfigOrder { req: req.clone() });
                    }
                }
            }
        }
        for msg in resend {
            self.broadcast(step, msg);
        }
        if still_busy {
            self.arm_retry(step);
        }
    }
}
