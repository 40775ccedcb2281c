//! Property tests for the core data layer: canonical-encoding injectivity,
//! digest behavior, quorum arithmetic, certificate assembly, and execution
//! idempotence.

use std::collections::BTreeMap;

use proptest::prelude::*;

use pdcc::crypto::{self, KeyDirectory, KeyPair, SignDomain};
use pdcc::messages::Step;
use pdcc::validator::{Validator, ValidatorParams};
use pdcc::{
    quorum_params, AccountId, AccountTable, Configuration, Encode, ReconfigRequest, Transaction,
    ValidatorId,
};

fn arb_account() -> impl Strategy<Value = AccountId> {
    "[a-d]{1,3}".prop_map(AccountId)
}

fn arb_transaction() -> impl Strategy<Value = Transaction> {
    (arb_account(), arb_account(), 1u64..1000, 0u64..50)
        .prop_filter("distinct accounts", |(s, r, _, _)| s != r)
        .prop_map(|(sender, recipient, amount, nonce)| Transaction {
            sender,
            recipient,
            amount,
            nonce,
        })
}

fn arb_members() -> impl Strategy<Value = Vec<ValidatorId>> {
    proptest::collection::btree_set(0u32..40, 1..12)
        .prop_map(|ids| ids.into_iter().map(ValidatorId).collect())
}

fn arb_configuration() -> impl Strategy<Value = Configuration> {
    (0u64..8, arb_members()).prop_map(|(index, members)| Configuration { index, members })
}

fn arb_reconfig_request() -> impl Strategy<Value = ReconfigRequest> {
    (0u64..8, arb_members())
        .prop_map(|(current_index, next_members)| ReconfigRequest { current_index, next_members })
}

fn arb_account_map() -> impl Strategy<Value = BTreeMap<AccountId, u64>> {
    proptest::collection::btree_map(arb_account(), 0u64..10_000, 0..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn encoding_is_injective_for_transactions(a in arb_transaction(), b in arb_transaction()) {
        prop_assume!(a != b);
        prop_assert_ne!(a.encode(), b.encode());
    }

    #[test]
    fn encoding_is_injective_for_configurations(a in arb_configuration(), b in arb_configuration()) {
        prop_assume!(a != b);
        prop_assert_ne!(a.encode(), b.encode());
    }

    #[test]
    fn encoding_is_injective_for_reconfig_requests(
        a in arb_reconfig_request(),
        b in arb_reconfig_request(),
    ) {
        prop_assume!(a != b);
        prop_assert_ne!(a.encode(), b.encode());
    }

    #[test]
    fn encoding_is_injective_for_account_tables(a in arb_account_map(), b in arb_account_map()) {
        prop_assume!(a != b);
        let ta = AccountTable::from_balances(a);
        let tb = AccountTable::from_balances(b);
        prop_assert_ne!(ta.encode(), tb.encode());
    }
}

proptest! {
    #[test]
    fn state_digest_is_permutation_invariant_and_content_sensitive(
        map in proptest::collection::btree_map(arb_account(), 0u64..10_000, 1..6),
    ) {
        let entries: Vec<(AccountId, u64)> = map.into_iter().collect();
        let forward = AccountTable::from_balances(entries.clone());
        let mut reversed_entries = entries.clone();
        reversed_entries.reverse();
        let reversed = AccountTable::from_balances(reversed_entries);
        prop_assert_eq!(forward.state_digest(), reversed.state_digest());

        // Bump one balance: the digest must move.
        let mut bumped = forward.clone();
        let key = entries[0].0.clone();
        bumped.accounts.get_mut(&key).unwrap().balance += 1;
        prop_assert_ne!(forward.state_digest(), bumped.state_digest());
    }

    #[test]
    fn quorum_arithmetic_matches_the_closed_forms(n in 1usize..=500) {
        let (f, q) = quorum_params(n).unwrap();
        prop_assert_eq!(f, (n - 1) / 3);
        prop_assert_eq!(q, 2 * f + 1);
        prop_assert!(q <= n);
        // Any two quorums intersect in at least 2q - n members; at full
        // replication (n = 3f + 1) that meets the f + 1 threshold needed to
        // pin a correct validator in the intersection.
        if n == 3 * f + 1 {
            prop_assert!(2 * q >= n + f + 1);
        }
    }

    /// Certificates need at least a quorum of distinct members: random vote
    /// multisets with duplicate or foreign signers never assemble below it.
    #[test]
    fn certificates_never_assemble_below_quorum(
        n in 1u32..8,
        signer_picks in proptest::collection::vec(0u32..12, 0..20),
    ) {
        let config = Configuration::new(0, (0..n).map(ValidatorId)).unwrap();
        let keys: Vec<KeyPair> = (0..12).map(|i| KeyPair::derive(ValidatorId(i))).collect();
        let directory = KeyDirectory::new(
            keys.iter().enumerate().map(|(i, k)| (ValidatorId(i as u32), k.public())),
        );
        let tx = Transaction::new("a".into(), "b".into(), 1, 0).unwrap();
        let message = crypto::certificate_message(SignDomain::FastVote, 0, &tx);
        let votes: Vec<_> = signer_picks
            .iter()
            .map(|&i| (ValidatorId(i), crypto::sign(&keys[i as usize], &message)))
            .collect();

        match crypto::assemble_certificate(
            &config,
            &directory,
            SignDomain::FastVote,
            0,
            &tx,
            &votes,
        ) {
            Ok(cert) => {
                let mut distinct: Vec<_> = cert.signer_ids();
                distinct.dedup();
                prop_assert!(distinct.len() >= config.quorum());
                prop_assert!(distinct.iter().all(|s| config.contains(*s)));
                prop_assert!(
                    crypto::verify_certificate(&config, &directory, SignDomain::FastVote, &cert)
                        .is_ok()
                );
            }
            Err(_) => {
                // Fine: not enough distinct members, or a foreign signer.
            }
        }
    }

    /// Signing locks are write-once: whatever orders arrive, one
    /// (account, nonce) never maps to two digests.
    #[test]
    fn signing_locks_are_never_remapped(
        amounts in proptest::collection::vec(1u64..30, 1..20),
    ) {
        let key = KeyPair::derive(ValidatorId(0));
        let directory = KeyDirectory::new([(ValidatorId(0), key.public())]);
        let config = Configuration::new(0, [ValidatorId(0)]).unwrap();
        let accounts = AccountTable::from_balances([("a".into(), 10_000), ("b".into(), 0)]);
        let mut v = Validator::new(
            ValidatorId(0),
            key,
            directory,
            config,
            accounts,
            ValidatorParams::default(),
        );
        let mut recorded: BTreeMap<(AccountId, u64), pdcc::Digest> = BTreeMap::new();
        for amount in amounts {
            // All orders target nonce 0; only the first distinct one locks.
            let tx = Transaction::new("a".into(), "b".into(), amount, 0).unwrap();
            let _ = v.handle_transfer_order(&tx, 0);
            for (k, lock) in &v.locks {
                if let Some(prev) = recorded.insert(k.clone(), lock.tx_digest) {
                    prop_assert_eq!(prev, lock.tx_digest, "lock remapped");
                }
            }
        }
    }
}

/// Executing a certificate twice is the same as executing it once, across a
/// random interleaving of two senders' certified transfers.
proptest! {
    #[test]
    fn execution_is_a_projection(order in proptest::collection::vec(0usize..2, 1..12)) {
        let n = 4u32;
        let keys: Vec<KeyPair> = (0..n).map(|i| KeyPair::derive(ValidatorId(i))).collect();
        let directory = KeyDirectory::new(
            keys.iter().enumerate().map(|(i, k)| (ValidatorId(i as u32), k.public())),
        );
        let config = Configuration::new(0, (0..n).map(ValidatorId)).unwrap();
        let accounts = AccountTable::from_balances([("a".into(), 100), ("b".into(), 100)]);
        let mut v = Validator::new(
            ValidatorId(3),
            keys[3].clone(),
            directory.clone(),
            config.clone(),
            accounts,
            ValidatorParams::default(),
        );

        let tx_a = Transaction::new("a".into(), "b".into(), 5, 0).unwrap();
        let tx_b = Transaction::new("b".into(), "a".into(), 9, 0).unwrap();
        let certs: Vec<_> = [tx_a, tx_b]
            .iter()
            .map(|tx| {
                let msg = crypto::certificate_message(SignDomain::FastVote, 0, tx);
                let votes: Vec<_> = (0..3)
                    .map(|i| (ValidatorId(i), crypto::sign(&keys[i as usize], &msg)))
                    .collect();
                crypto::assemble_certificate(
                    &config,
                    &directory,
                    SignDomain::FastVote,
                    0,
                    tx,
                    &votes,
                )
                .unwrap()
            })
            .collect();

        let mut step = Step::default();
        let mut snapshots = Vec::new();
        for pick in order {
            v.execute_certificate(&certs[pick], &mut step).unwrap();
            snapshots.push(v.live_accounts.clone());
            // Re-execution changes nothing.
            v.execute_certificate(&certs[pick], &mut step).unwrap();
            prop_assert_eq!(&v.live_accounts, snapshots.last().unwrap());
            prop_assert_eq!(v.live_accounts.total_supply(), 200);
        }
    }
}
