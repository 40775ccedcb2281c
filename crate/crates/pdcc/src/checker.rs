//! Offline trace audits. The checker re-derives everything from the trace
//! and the scenario: it tracks each correct validator's installed epoch,
//! re-verifies every certificate and commit proof embedded in the trace with
//! its own key directory, and compares deliveries and configuration history
//! across validators byte for byte. It trusts no recorded verdict.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Digest, Encode};
use crate::crypto::{self, KeyDirectory, SignDomain};
use crate::domain::{AccountId, Configuration, Nonce, ValidatorId};
use crate::simnet::Scenario;
use crate::trace::{Effect, TraceRecord};

#[derive(Debug, Error)]
pub enum CheckError {
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    /// The scenario opted out of the fault model's assumptions; a liveness
    /// failure is reported but expected.
    ExpectedFail,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Witness {
    pub step: u64,
    pub node: String,
    pub description: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Verdict {
    pub property: String,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
}

impl Verdict {
    fn pass(property: &str) -> Self {
        Verdict { property: property.into(), status: Status::Pass, witness: None }
    }

    fn fail(property: &str, step: u64, node: &str, description: String) -> Self {
        Verdict {
            property: property.into(),
            status: Status::Fail,
            witness: Some(Witness { step, node: node.into(), description }),
        }
    }

    pub fn passed(&self) -> bool {
        self.status != Status::Fail
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub seed: Option<u64>,
    pub verdicts: Vec<Verdict>,
}

impl Report {
    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(Verdict::passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Offline auditor for one scenario's traces.
pub struct Checker {
    scenario: Scenario,
    directory: KeyDirectory,
    corrupt: BTreeSet<ValidatorId>,
    initial_supply: u128,
}

/// Node name ("v3") back to a validator id, if it is one.
fn parse_validator(node: &str) -> Option<ValidatorId> {
    node.strip_prefix('v').and_then(|n| n.parse().ok()).map(ValidatorId)
}

impl Checker {
    pub fn new(scenario: Scenario) -> Self {
        let directory = scenario.key_directory();
        let corrupt = scenario.corrupt_set();
        let initial_supply = scenario.genesis_accounts().total_supply();
        Checker { scenario, directory, corrupt, initial_supply }
    }

    fn is_correct(&self, id: ValidatorId) -> bool {
        !self.corrupt.contains(&id)
    }

    /// Iterates `(record, validator id)` over correct validators only; all
    /// invariants quantify over nodes outside the adversary specification.
    fn correct_records<'a>(
        &'a self,
        trace: &'a [TraceRecord],
    ) -> impl Iterator<Item = (&'a TraceRecord, ValidatorId)> + 'a {
        trace.iter().filter_map(move |r| {
            let id = parse_validator(&r.node)?;
            self.is_correct(id).then_some((r, id))
        })
    }

    /// Member sets per epoch: genesis from the scenario, later epochs from
    /// the installed history entries in the trace.
    fn members_by_epoch(&self, trace: &[TraceRecord]) -> BTreeMap<u64, Vec<ValidatorId>> {
        let mut members = BTreeMap::new();
        members.insert(0u64, self.scenario.genesis_config().members);
        for (r, _) in self.correct_records(trace) {
            for e in &r.effects {
                if let Effect::Installed { new_epoch, members: m, .. } = e {
                    members.entry(*new_epoch).or_insert_with(|| m.clone());
                }
            }
        }
        members
    }

    /// Invariant: a correct validator never accepts a certificate whose
    /// epoch differs from its installed epoch at that moment.
    pub fn check_invariant_certification(
        &self,
        trace: &[TraceRecord],
    ) -> Result<Verdict, CheckError> {
        let property = "invariant-i-configuration-bound-certification";
        let mut installed: BTreeMap<ValidatorId, u64> = BTreeMap::new();
        for (r, id) in self.correct_records(trace) {
            for e in &r.effects {
                match e {
                    Effect::CertAccepted { cert_epoch, .. } => {
                        let current = installed.get(&id).copied().unwrap_or(0);
                        if *cert_epoch != current {
                            return Ok(Verdict::fail(
                                property,
                                r.step,
                                &r.node,
                                format!(
                                    "accepted certificate for epoch {cert_epoch} while \
                                     installed at {current}"
                                ),
                            ));
                        }
                    }
                    Effect::Installed { new_epoch, .. } => {
                        let current = installed.entry(id).or_insert(0);
                        *current = (*current).max(*new_epoch);
                    }
                    Effect::SnapshotVerified { adopted: true, epoch, .. } => {
                        let current = installed.entry(id).or_insert(0);
                        *current = (*current).max(*epoch);
                    }
                    _ => {}
                }
            }
        }
        Ok(Verdict::pass(property))
    }

    /// Invariant: all correct validators deliver the same payload hash per
    /// (epoch, slot) and append byte-identical history entries per index.
    pub fn check_same_config_delivery(
        &self,
        trace: &[TraceRecord],
    ) -> Result<Verdict, CheckError> {
        let property = "invariant-ii-same-configuration-delivery";
        let mut delivered: BTreeMap<(u64, u64), Digest> = BTreeMap::new();
        let mut entries: BTreeMap<u64, String> = BTreeMap::new();
        for (r, _) in self.correct_records(trace) {
            for e in &r.effects {
                match e {
                    Effect::Delivered { epoch, slot, payload_hash, .. } => {
                        if let Some(prev) = delivered.insert((*epoch, *slot), *payload_hash) {
                            if prev != *payload_hash {
                                return Ok(Verdict::fail(
                                    property,
                                    r.step,
                                    &r.node,
                                    format!(
                                        "delivered {payload_hash} at ({epoch}, {slot}); \
                                         another correct validator delivered {prev}"
                                    ),
                                ));
                            }
                        }
                    }
                    Effect::Installed { new_epoch, entry_bytes, entry, .. } => {
                        if hex::encode(entry.encode()) != *entry_bytes {
                            return Err(CheckError::MalformedTrace(
                                "history entry bytes disagree with the embedded entry".into(),
                            ));
                        }
                        if let Some(prev) = entries.insert(*new_epoch, entry_bytes.clone()) {
                            if prev != *entry_bytes {
                                return Ok(Verdict::fail(
                                    property,
                                    r.step,
                                    &r.node,
                                    format!(
                                        "appended a different history entry at index {new_epoch}"
                                    ),
                                ));
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
        Ok(Verdict::pass(property))
    }

    /// Invariant: every certificate and commit proof recorded at a correct
    /// validator carries at least a quorum of distinct, valid signatures
    /// from the members of its epoch, and no tally ever counted an outsider.
    pub fn check_quorum_integrity(&self, trace: &[TraceRecord]) -> Result<Verdict, CheckError> {
        let property = "invariant-iii-no-quorum-pollution";
        let members = self.members_by_epoch(trace);
        let config_for = |epoch: u64| -> Option<Configuration> {
            members.get(&epoch).map(|m| Configuration { index: epoch, members: m.clone() })
        };
        let fail =
            |r: &TraceRecord, d: String| Ok(Verdict::fail(property, r.step, &r.node, d));

        for (r, _) in self.correct_records(trace) {
            for e in &r.effects {
                match e {
                    Effect::CertAccepted { cert, .. } => {
                        let Some(cfg) = config_for(cert.config_index) else {
                            return fail(
                                r,
                                format!("no member set for epoch {}", cert.config_index),
                            );
                        };
                        if let Err(err) = crypto::verify_certificate(
                            &cfg,
                            &self.directory,
                            SignDomain::FastVote,
                            cert,
                        ) {
                            return fail(r, format!("transaction certificate: {err}"));
                        }
                    }
                    Effect::ReconfigCertObserved { cert, .. } => {
                        let Some(cfg) = config_for(cert.config_index) else {
                            return fail(
                                r,
                                format!("no member set for epoch {}", cert.config_index),
                            );
                        };
                        if let Err(err) = crypto::verify_certificate(
                            &cfg,
                            &self.directory,
                            SignDomain::ReconfigVote,
                            cert,
                        ) {
                            return fail(r, format!("reconfiguration certificate: {err}"));
                        }
                    }
                    Effect::Delivered { proof, .. } => {
                        let Some(cfg) = config_for(proof.config_index) else {
                            return fail(
                                r,
                                format!("no member set for epoch {}", proof.config_index),
                            );
                        };
                        if let Err(err) =
                            crypto::verify_commit_proof(&cfg, &self.directory, proof)
                        {
                            return fail(r, format!("commit proof: {err}"));
                        }
                    }
                    Effect::Installed { entry, .. } => {
                        let epoch = entry.new_index.saturating_sub(1);
                        let Some(cfg) = config_for(epoch) else {
                            return fail(r, format!("no member set for epoch {epoch}"));
                        };
                        if let Err(err) =
                            crypto::verify_commit_proof(&cfg, &self.directory, &entry.proof)
                        {
                            return fail(r, format!("history entry proof: {err}"));
                        }
                    }
                    Effect::QuorumFormed { epoch, signers, kind, .. } => {
                        let Some(m) = members.get(epoch) else {
                            return fail(r, format!("no member set for epoch {epoch}"));
                        };
                        for s in signers {
                            if !m.contains(s) {
                                return fail(
                                    r,
                                    format!("tally for {kind:?} counted non-member {s}"),
                                );
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
        Ok(Verdict::pass(property))
    }

    /// Conservation of total supply at every execution, and per
    /// (account, nonce) a single transaction digest across all correct
    /// validators.
    pub fn check_conservation_and_no_double_spend(
        &self,
        trace: &[TraceRecord],
    ) -> Result<Verdict, CheckError> {
        let property = "conservation-and-no-double-spend";
        let mut global: BTreeMap<(AccountId, Nonce), Digest> = BTreeMap::new();
        for (r, _) in self.correct_records(trace) {
            for e in &r.effects {
                if let Effect::Executed { sender, nonce, tx_digest, total_supply, .. } = e {
                    if *total_supply != self.initial_supply {
                        return Ok(Verdict::fail(
                            property,
                            r.step,
                            &r.node,
                            format!(
                                "total supply {total_supply} differs from initial {}",
                                self.initial_supply
                            ),
                        ));
                    }
                    let key = (sender.clone(), *nonce);
                    if let Some(prev) = global.insert(key, *tx_digest) {
                        if prev != *tx_digest {
                            return Ok(Verdict::fail(
                                property,
                                r.step,
                                &r.node,
                                format!(
                                    "executed {tx_digest} at ({sender}, {nonce}); another \
                                     execution used {prev}"
                                ),
                            ));
                        }
                    }
                }
            }
        }
        Ok(Verdict::pass(property))
    }

    /// Liveness: every correct validator reached the epoch it is obliged to
    /// reach, and every scripted transfer is covered at every correct member
    /// of the final configuration.
    pub fn check_liveness(&self, trace: &[TraceRecord]) -> Result<Verdict, CheckError> {
        let property = "liveness-goals";
        let goals = self.scenario.effective_goals();
        let seq = self.scenario.config_sequence();
        let final_members: BTreeSet<ValidatorId> =
            seq.last().map(|m| m.iter().copied().collect()).unwrap_or_default();

        let mut installed: BTreeMap<ValidatorId, u64> = BTreeMap::new();
        let mut executed: BTreeMap<ValidatorId, BTreeMap<(AccountId, Nonce), Digest>> =
            BTreeMap::new();
        let mut nonce_floor: BTreeMap<ValidatorId, BTreeMap<AccountId, Nonce>> = BTreeMap::new();
        for (r, id) in self.correct_records(trace) {
            for e in &r.effects {
                match e {
                    Effect::Installed { new_epoch, .. } => {
                        let cur = installed.entry(id).or_insert(0);
                        *cur = (*cur).max(*new_epoch);
                    }
                    Effect::Executed { sender, nonce, tx_digest, .. } => {
                        executed
                            .entry(id)
                            .or_default()
                            .insert((sender.clone(), *nonce), *tx_digest);
                    }
                    Effect::SnapshotVerified { adopted: true, epoch, account_nonces, .. } => {
                        let cur = installed.entry(id).or_insert(0);
                        *cur = (*cur).max(*epoch);
                        let floor = nonce_floor.entry(id).or_default();
                        for (acct, n) in account_nonces {
                            let entry = floor.entry(acct.clone()).or_insert(0);
                            *entry = (*entry).max(*n);
                        }
                    }
                    _ => {}
                }
            }
        }

        let scripted = self.scenario.scripted_transfers();
        let fail_status = if self.scenario.allow_assumption_violations {
            Status::ExpectedFail
        } else {
            Status::Fail
        };
        let fail = |node: String, description: String| Verdict {
            property: property.into(),
            status: fail_status,
            witness: Some(Witness { step: 0, node, description }),
        };

        for vid in self.scenario.validator_ids() {
            if !self.is_correct(vid) {
                continue;
            }
            let last_member_epoch = seq
                .iter()
                .enumerate()
                .filter(|(_, m)| m.contains(&vid))
                .map(|(i, _)| i as u64)
                .next_back();
            let Some(last) = last_member_epoch else { continue };
            let obliged = goals.final_epoch.min(last + 1);
            let reached = installed.get(&vid).copied().unwrap_or(0);
            if reached < obliged {
                return Ok(fail(
                    vid.to_string(),
                    format!("installed epoch {reached}, obliged to reach {obliged}"),
                ));
            }
            if goals.all_transfers && final_members.contains(&vid) {
                let empty = BTreeMap::new();
                let local = executed.get(&vid).unwrap_or(&empty);
                let floors = nonce_floor.get(&vid);
                for ((sender, nonce), tx_digest) in &scripted {
                    let covered = local.get(&(sender.clone(), *nonce)) == Some(tx_digest)
                        || floors
                            .and_then(|f| f.get(sender))
                            .is_some_and(|floor| *floor > *nonce);
                    if !covered {
                        return Ok(fail(
                            vid.to_string(),
                            format!("transfer ({sender}, {nonce}) never executed"),
                        ));
                    }
                }
            }
        }
        Ok(Verdict::pass(property))
    }

    /// Extra property: installed epochs never decrease and advance by one.
    pub fn check_monotone_install(&self, trace: &[TraceRecord]) -> Result<Verdict, CheckError> {
        let property = "monotone-installation";
        let mut installed: BTreeMap<ValidatorId, u64> = BTreeMap::new();
        for (r, id) in self.correct_records(trace) {
            for e in &r.effects {
                match e {
                    Effect::Installed { new_epoch, .. } => {
                        let prev = installed.get(&id).copied().unwrap_or(0);
                        if *new_epoch != prev + 1 {
                            return Ok(Verdict::fail(
                                property,
                                r.step,
                                &r.node,
                                format!("install jumped from {prev} to {new_epoch}"),
                            ));
                        }
                        installed.insert(id, *new_epoch);
                    }
                    Effect::SnapshotVerified { adopted: true, epoch, .. } => {
                        // State transfer may fast-forward a joiner.
                        let cur = installed.entry(id).or_insert(0);
                        *cur = (*cur).max(*epoch);
                    }
                    _ => {}
                }
            }
        }
        Ok(Verdict::pass(property))
    }

    /// Extra property: every message between correct nodes sent at or after
    /// GST was delivered within delta.
    pub fn check_gst_contract(&self, trace: &[TraceRecord]) -> Result<Verdict, CheckError> {
        let property = "gst-delivery-bound";
        let gst = self.scenario.network.gst;
        let delta = self.scenario.network.delta;
        for r in trace {
            let (Some(sent), Some(src)) = (r.sent_at, r.src.as_deref()) else { continue };
            let src_corrupt = parse_validator(src).is_some_and(|v| !self.is_correct(v));
            let dst_corrupt = parse_validator(&r.node).is_some_and(|v| !self.is_correct(v));
            if src_corrupt || dst_corrupt {
                continue;
            }
            if sent >= gst && r.time.saturating_sub(sent) > delta {
                return Ok(Verdict::fail(
                    property,
                    r.step,
                    &r.node,
                    format!("message sent at {sent} delivered at {}", r.time),
                ));
            }
        }
        Ok(Verdict::pass(property))
    }

    /// Runs every check and assembles the report.
    pub fn check_all(
        &self,
        trace: &[TraceRecord],
        seed: Option<u64>,
    ) -> Result<Report, CheckError> {
        let verdicts = vec![
            self.check_invariant_certification(trace)?,
            self.check_same_config_delivery(trace)?,
            self.check_quorum_integrity(trace)?,
            self.check_conservation_and_no_double_spend(trace)?,
            self.check_liveness(trace)?,
            self.check_monotone_install(trace)?,
            self.check_gst_contract(trace)?,
        ];
        Ok(Report { scenario: self.scenario.name.clone(), seed, verdicts })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::{
        ClientSpec, GenesisSpec, NetworkSpec, ReconfigSpec, Scenario, Simulation, TransferSpec,
        ValidatorSpec,
    };

    fn scenario() -> Scenario {
        Scenario {
            name: "checker-test".into(),
            validators: (0..5).map(|id| ValidatorSpec { id, key: None }).collect(),
            genesis: GenesisSpec {
                members: vec![0, 1, 2, 3],
                accounts: std::collections::BTreeMap::from([
                    ("a".into(), 100),
                    ("b".into(), 100),
                ]),
            },
            network: NetworkSpec { gst: 0, ..NetworkSpec::default() },
            clients: vec![ClientSpec {
                id: 0,
                start: 5,
                transfers: vec![TransferSpec {
                    sender: "a".into(),
                    recipient: "b".into(),
                    amount: 7,
                    nonce: 0,
                }],
                equivocate: None,
            }],
            reconfigs: vec![ReconfigSpec { at: 60, next_members: vec![0, 1, 2, 3, 4] }],
            adversary: vec![],
            mutations: vec![],
            allow_assumption_violations: false,
            goals: None,
        }
    }

    #[test]
    fn healthy_run_passes_all_checks() {
        let s = scenario();
        let mut sim = Simulation::new(s.clone(), 11);
        sim.run(100_000);
        let report = Checker::new(s).check_all(&sim.trace, Some(11)).unwrap();
        assert!(report.all_pass(), "{}", report.to_json());
    }

    #[test]
    fn empty_trace_passes_vacuously() {
        let checker = Checker::new(scenario());
        assert!(checker.check_invariant_certification(&[]).unwrap().passed());
        assert!(checker.check_same_config_delivery(&[]).unwrap().passed());
        assert!(checker.check_quorum_integrity(&[]).unwrap().passed());
        assert!(checker.check_conservation_and_no_double_spend(&[]).unwrap().passed());
    }

    #[test]
    fn hand_corrupted_proof_is_detected() {
        let s = scenario();
        let mut sim = Simulation::new(s.clone(), 11);
        sim.run(100_000);
        let mut trace = sim.trace.clone();
        // Swap one signer in a recorded delivered proof for an outsider.
        let mut corrupted = false;
        'outer: for r in trace.iter_mut() {
            if parse_validator(&r.node).is_none() {
                continue;
            }
            for e in r.effects.iter_mut() {
                if let Effect::Delivered { proof, .. } = e {
                    proof.signatures[0].0 = ValidatorId(9);
                    corrupted = true;
                    break 'outer;
                }
            }
        }
        assert!(corrupted);
        let verdict = Checker::new(s).check_quorum_integrity(&trace).unwrap();
        assert_eq!(verdict.status, Status::Fail);
        assert!(verdict.witness.is_some());
    }

    #[test]
    fn verdicts_are_deterministic() {
        let s = scenario();
        let mut sim = Simulation::new(s.clone(), 5);
        sim.run(100_000);
        let checker = Checker::new(s);
        let a = checker.check_all(&sim.trace, Some(5)).unwrap().to_json();
        let b = checker.check_all(&sim.trace, Some(5)).unwrap().to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn round_trip_through_jsonl_preserves_verdicts() {
        let s = scenario();
        let mut sim = Simulation::new(s.clone(), 9);
        sim.run(100_000);
        let text = sim.trace_jsonl();
        let parsed = crate::trace::from_jsonl(&text).unwrap();
        let report = Checker::new(s).check_all(&parsed, Some(9)).unwrap();
        assert!(report.all_pass(), "{}", report.to_json());
    }
}
