//! Scenario files: validators and keys, genesis, network timing, scripted
//! clients and reconfigurations, the adversary specification, and load-time
//! validation of the fault bound and the membership overlap condition.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{KeyDirectory, KeyPair};
use crate::domain::{
    quorum_params, AccountId, AccountTable, Amount, Configuration, Nonce, Transaction,
    ValidatorId,
};
use crate::validator::{MutationFlags, ValidatorParams};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(
        "overlap violation at transition {transition} (epoch {from_epoch}): \
         {surviving} correct members survive into the next configuration, quorum is {quorum}"
    )]
    OverlapViolation { transition: usize, from_epoch: u64, surviving: usize, quorum: usize },
    #[error(
        "fault bound violation in epoch {epoch}: {corrupt} corrupt members, bound is {bound}"
    )]
    FaultBoundViolation { epoch: u64, corrupt: usize, bound: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidatorSpec {
    pub id: u32,
    /// 32-byte signing key as hex; derived from the id when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenesisSpec {
    pub members: Vec<u32>,
    pub accounts: BTreeMap<String, Amount>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    /// Post-GST delivery bound (logical units).
    pub delta: u64,
    /// Global stabilization time.
    pub gst: u64,
    /// Maximum pre-GST delay; deliveries are additionally capped so nothing
    /// sent before GST lands after `gst + delta`.
    pub pre_gst_delay_max: u64,
    pub attempt_timeout: u64,
    pub checkpoint_interval: u64,
    pub client_retry_interval: u64,
    pub leaver_grace: u64,
    pub default_seed: u64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            delta: 10,
            gst: 0,
            pre_gst_delay_max: 100,
            attempt_timeout: 80,
            checkpoint_interval: 60,
            client_retry_interval: 120,
            leaver_grace: 2000,
            default_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferSpec {
    pub sender: String,
    pub recipient: String,
    pub amount: Amount,
    pub nonce: Nonce,
}

impl TransferSpec {
    pub fn to_transaction(&self) -> Result<Transaction, ScenarioError> {
        Transaction::new(
            AccountId(self.sender.clone()),
            AccountId(self.recipient.clone()),
            self.amount,
            self.nonce,
        )
        .map_err(|e| ScenarioError::Invalid(e.to_string()))
    }
}

/// An equivocation attack script: two conflicting same-nonce transactions
/// pushed to disjoint validator subsets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivocateSpec {
    pub tx_a: TransferSpec,
    pub tx_b: TransferSpec,
    pub to_a: Vec<u32>,
    pub to_b: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientSpec {
    pub id: u32,
    /// Logical time of the client's first action.
    pub start: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transfers: Vec<TransferSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equivocate: Option<EquivocateSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconfigSpec {
    pub at: u64,
    pub next_members: Vec<u32>,
}

/// Catalog of Byzantine behaviors a corrupt validator can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Behavior {
    /// Signs any transfer order, ignoring locks, nonces, and balances.
    EquivocateFastpath,
    /// Re-broadcasts certificates from earlier epochs after installs.
    StaleCertReplay,
    /// A corrupt joiner that votes before its configuration is installed.
    PrematureLearnerVote,
    /// Sends conflicting PREPARE/COMMIT votes to different peers.
    ConflictingPrepare,
    /// Receives but never sends.
    Withhold,
    /// Stops processing anything at `crash_at`.
    Crash,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdversaryNodeSpec {
    pub id: u32,
    pub behavior: Behavior,
    /// Crash time for `crash`; ignored otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crash_at: Option<u64>,
}

/// Checker self-test switches, applied to every honest validator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MutationSpec {
    SkipEpochCheck,
    SkipLockedValue,
    SkipLearnerGate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoalSpec {
    /// Every correct validator installs at least this epoch.
    pub final_epoch: u64,
    /// Every scripted transfer executes at every correct validator.
    pub all_transfers: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub validators: Vec<ValidatorSpec>,
    pub genesis: GenesisSpec,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clients: Vec<ClientSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reconfigs: Vec<ReconfigSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adversary: Vec<AdversaryNodeSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mutations: Vec<MutationSpec>,
    #[serde(default)]
    pub allow_assumption_violations: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goals: Option<GoalSpec>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario =
            serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validator_ids(&self) -> Vec<ValidatorId> {
        self.validators.iter().map(|v| ValidatorId(v.id)).collect()
    }

    pub fn key_pair(&self, id: ValidatorId) -> KeyPair {
        self.validators
            .iter()
            .find(|v| v.id == id.0)
            .and_then(|v| v.key.as_deref())
            .and_then(KeyPair::from_hex)
            .unwrap_or_else(|| KeyPair::derive(id))
    }

    pub fn key_directory(&self) -> KeyDirectory {
        KeyDirectory::new(
            self.validators
                .iter()
                .map(|v| (ValidatorId(v.id), self.key_pair(ValidatorId(v.id)).public())),
        )
    }

    pub fn genesis_config(&self) -> Configuration {
        Configuration::new(0, self.genesis.members.iter().copied().map(ValidatorId))
            .expect("validated at load")
    }

    pub fn genesis_accounts(&self) -> AccountTable {
        AccountTable::from_balances(
            self.genesis
                .accounts
                .iter()
                .map(|(name, amount)| (AccountId(name.clone()), *amount)),
        )
    }

    pub fn corrupt_set(&self) -> BTreeSet<ValidatorId> {
        self.adversary.iter().map(|a| ValidatorId(a.id)).collect()
    }

    pub fn validator_params(&self) -> ValidatorParams {
        ValidatorParams {
            attempt_timeout: self.network.attempt_timeout,
            checkpoint_interval: self.network.checkpoint_interval,
            leaver_grace: self.network.leaver_grace,
        }
    }

    pub fn mutation_flags(&self) -> MutationFlags {
        let mut flags = MutationFlags::default();
        for m in &self.mutations {
            match m {
                MutationSpec::SkipEpochCheck => flags.accept_any_epoch = true,
                MutationSpec::SkipLockedValue => flags.skip_locked_value = true,
                MutationSpec::SkipLearnerGate => flags.skip_learner_gate = true,
            }
        }
        flags
    }

    /// The membership sequence the script will walk through.
    pub fn config_sequence(&self) -> Vec<Vec<ValidatorId>> {
        let mut seq = vec![self.genesis.members.iter().copied().map(ValidatorId).collect()];
        for r in &self.reconfigs {
            seq.push(r.next_members.iter().copied().map(ValidatorId).collect());
        }
        seq
    }

    /// Effective goals: explicit, or derived from the script.
    pub fn effective_goals(&self) -> GoalSpec {
        self.goals.clone().unwrap_or(GoalSpec {
            final_epoch: self.reconfigs.len() as u64,
            all_transfers: true,
        })
    }

    /// Scripted transfers, as `(sender, nonce) -> transaction digest`.
    pub fn scripted_transfers(&self) -> BTreeMap<(AccountId, Nonce), crate::codec::Digest> {
        let mut out = BTreeMap::new();
        for c in &self.clients {
            for t in &c.transfers {
                if let Ok(tx) = t.to_transaction() {
                    out.insert(
                        (tx.sender.clone(), tx.nonce),
                        crate::codec::Encode::digest(&tx),
                    );
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut ids = BTreeSet::new();
        for v in &self.validators {
            if !ids.insert(v.id) {
                return Err(ScenarioError::Invalid(format!("duplicate validator id {}", v.id)));
            }
            if let Some(k) = &v.key {
                if KeyPair::from_hex(k).is_none() {
                    return Err(ScenarioError::Invalid(format!("bad key hex for {}", v.id)));
                }
            }
        }
        let mut client_ids = BTreeSet::new();
        for c in &self.clients {
            if !client_ids.insert(c.id) {
                return Err(ScenarioError::Invalid(format!("duplicate client id {}", c.id)));
            }
            for t in &c.transfers {
                t.to_transaction()?;
            }
            if let Some(eq) = &c.equivocate {
                eq.tx_a.to_transaction()?;
                eq.tx_b.to_transaction()?;
            }
        }

        let corrupt: BTreeSet<u32> = self.adversary.iter().map(|a| a.id).collect();
        for a in &self.adversary {
            if !ids.contains(&a.id) {
                return Err(ScenarioError::Invalid(format!(
                    "adversary id {} is not a scenario validator",
                    a.id
                )));
            }
        }
        if self.adversary.len() != corrupt.len() {
            return Err(ScenarioError::Invalid("duplicate adversary id".into()));
        }

        // Membership sequence checks: every configuration well-formed, every
        // member a known validator.
        let seq = self.config_sequence();
        for (i, members) in seq.iter().enumerate() {
            let distinct: BTreeSet<_> = members.iter().collect();
            if distinct.len() != members.len() || members.is_empty() {
                return Err(ScenarioError::Invalid(format!(
                    "configuration {i} has empty or duplicate membership"
                )));
            }
            for m in members {
                if !ids.contains(&m.0) {
                    return Err(ScenarioError::Invalid(format!(
                        "configuration {i} includes unknown validator {m}"
                    )));
                }
            }
        }

        if !self.allow_assumption_violations {
            // Fault bound per configuration.
            for (i, members) in seq.iter().enumerate() {
                let (bound, _) = quorum_params(members.len())
                    .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
                let corrupt_here =
                    members.iter().filter(|m| corrupt.contains(&m.0)).count();
                if corrupt_here > bound {
                    return Err(ScenarioError::FaultBoundViolation {
                        epoch: i as u64,
                        corrupt: corrupt_here,
                        bound,
                    });
                }
            }
            // Overlap condition per transition: at least a quorum of correct
            // members of the old configuration survive into the new one.
            for (i, pair) in seq.windows(2).enumerate() {
                let (old, new) = (&pair[0], &pair[1]);
                let (_, quorum) = quorum_params(old.len())
                    .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
                let new_set: BTreeSet<_> = new.iter().collect();
                let surviving = old
                    .iter()
                    .filter(|m| !corrupt.contains(&m.0) && new_set.contains(m))
                    .count();
                if surviving < quorum {
                    return Err(ScenarioError::OverlapViolation {
                        transition: i,
                        from_epoch: i as u64,
                        surviving,
                        quorum,
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_scenario() -> Scenario {
        Scenario {
            name: "test".into(),
            validators: (0..5).map(|id| ValidatorSpec { id, key: None }).collect(),
            genesis: GenesisSpec {
                members: vec![0, 1, 2, 3],
                accounts: BTreeMap::from([("a".into(), 100), ("b".into(), 100)]),
            },
            network: NetworkSpec::default(),
            clients: vec![],
            reconfigs: vec![ReconfigSpec { at: 100, next_members: vec![0, 1, 2, 3, 4] }],
            adversary: vec![],
            mutations: vec![],
            allow_assumption_violations: false,
            goals: None,
        }
    }

    #[test]
    fn healthy_add_validator_scenario_loads() {
        let s = base_scenario();
        s.validate().unwrap();
        // Overlap: 4 surviving correct >= quorum 3.
        let round = Scenario::from_json(&s.to_json()).unwrap();
        assert_eq!(round.reconfigs.len(), 1);
    }

    #[test]
    fn overlap_violation_is_detected() {
        let mut s = base_scenario();
        // Keep only 2 of the original 4: below the quorum of 3.
        s.reconfigs = vec![ReconfigSpec { at: 100, next_members: vec![0, 1, 4] }];
        // 2 correct members survive (0 and 1) < 3.
        match s.validate() {
            Err(ScenarioError::OverlapViolation { surviving, quorum, .. }) => {
                assert_eq!((surviving, quorum), (2, 3));
            }
            other => panic!("expected overlap violation, got {other:?}"),
        }
        s.allow_assumption_violations = true;
        s.validate().unwrap();
    }

    #[test]
    fn fault_bound_violation_is_detected() {
        let mut s = base_scenario();
        s.adversary = vec![
            AdversaryNodeSpec { id: 0, behavior: Behavior::Withhold, crash_at: None },
            AdversaryNodeSpec { id: 1, behavior: Behavior::Crash, crash_at: Some(0) },
        ];
        match s.validate() {
            Err(ScenarioError::FaultBoundViolation { corrupt, bound, .. }) => {
                assert_eq!((corrupt, bound), (2, 1));
            }
            other => panic!("expected fault bound violation, got {other:?}"),
        }
    }

    #[test]
    fn bad_json_is_a_parse_error() {
        assert!(matches!(Scenario::from_json("{"), Err(ScenarioError::Parse(_))));
    }
}
