use pdcc::explore::*;
use pdcc::simnet::*;
use std::collections::BTreeMap;
use std::time::Instant;

fn tiny() -> Scenario {
    Scenario {
        name: "tiny".into(),
        validators: (0..5).map(|id| ValidatorSpec { id, key: None }).collect(),
        genesis: GenesisSpec {
            members: vec![0, 1, 2, 3],
            accounts: BTreeMap::from([("a".into(), 10), ("b".into(), 10)]),
        },
        network: NetworkSpec { gst: 0, ..NetworkSpec::default() },
        clients: vec![ClientSpec {
            id: 0,
            start: 1,
            transfers: vec![TransferSpec { sender: "a".into(), recipient: "b".into(), amount: 4, nonce: 0 }],
            equivocate: None,
        }],
        reconfigs: vec![ReconfigSpec { at: 2, next_members: vec![0, 1, 2, 3, 4] }],
        adversary: vec![],
        mutations: vec![],
        allow_assumption_violations: false,
        goals: None,
    }
}

#[test]
fn probe_explore_depth() {
    for depth in [8, 10, 12] {
        let t = Instant::now();
        let r = explore_interleavings(&tiny(), ExploreMode::Exhaustive { depth, max_states: 5_000_000 });
        println!(
            "depth {depth}: states={} dedup={} exhausted={} violation={:?} in {:?}",
            r.states_explored, r.dedup_hits, r.budget_exhausted, r.violation.as_ref().map(|v| &v.property), t.elapsed()
        );
    }
}
