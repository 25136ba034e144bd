mod common;

use std::collections::HashSet;
use std::sync::Arc;

use etir::cost::estimate_cost;
use etir::engine::{optimize, EngineConfig};
use etir::hardware::{capacity_check, Capacity, HardwareSpec};
use etir::ir::{Action, ActionKind, EtirState, OpSpec};
use etir::tree::{construct_tree, TreeConfig};
use proptest::prelude::*;

/// Every power-of-two tiling of `op` at the single tile level.
fn all_tilings(op: &Arc<OpSpec>) -> Vec<EtirState> {
    let mut states = vec![EtirState::initial(op.clone(), 1)];
    for axis in op.axes() {
        let mut next = Vec::new();
        for s in &states {
            let mut t = s.clone();
            next.push(t.clone());
            while let Ok(n) = t.apply_action(&Action::tile(&axis.name, 2)) {
                next.push(n.clone());
                t = n;
            }
        }
        states = next;
    }
    states
}

/// Tilings the tree reaches: they fit, and either nothing was tiled or
/// doubling some axis back overflows.
fn tree_reachable(op: &Arc<OpSpec>, hw: &HardwareSpec) -> HashSet<EtirState> {
    all_tilings(op)
        .into_iter()
        .filter(|s| {
            if !capacity_check(s, hw, 1) {
                return false;
            }
            let start = EtirState::initial(op.clone(), 1);
            s.etiles() == start.etiles()
                || op.axes().iter().any(|a| {
                    s.apply_action(&Action::inv_tile(&a.name, 2))
                        .is_ok_and(|p| !capacity_check(&p, hw, 1))
                })
        })
        .map(|s| s.apply_action(&Action::cache()).unwrap())
        .collect()
}

fn tight_one_level(bytes: u64) -> HardwareSpec {
    let mut hw = common::one_level();
    hw.levels[1].capacity_bytes = Capacity::Bytes(bytes);
    hw
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn exhaustive_beam_equals_enumeration(m in 1u64..=16, k in 1u64..=16, n in 1u64..=16, cap in 16u64..2048) {
        let hw = tight_one_level(cap);
        let op = Arc::new(OpSpec::gemm(m, k, n).unwrap());
        let got: HashSet<EtirState> = construct_tree(op.clone(), &hw, &TreeConfig { beam_width: 100_000 })
            .unwrap()
            .into_iter()
            .map(|r| r.state)
            .collect();
        prop_assert_eq!(got, tree_reachable(&op, &hw));
    }

    #[test]
    fn unidirectional_and_deterministic(kind in 0usize..4, seed in any::<u64>(), beam in 1usize..6) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let op = Arc::new(common::small_op(kind, &mut rng));
        let hw = common::generic();
        let cfg = TreeConfig { beam_width: beam };
        let a = construct_tree(op.clone(), &hw, &cfg).unwrap();
        prop_assert_eq!(&a, &construct_tree(op.clone(), &hw, &cfg).unwrap());
        for r in &a {
            prop_assert!(r.replays());
            let mut s = EtirState::initial(op.clone(), hw.num_level());
            for x in &r.trace {
                prop_assert!(matches!(x.kind, ActionKind::Tile | ActionKind::Cache));
                let next = s.apply_action(x).unwrap();
                for (before, after) in s.etiles().iter().zip(next.etiles()) {
                    prop_assert!(after.iter().zip(before).all(|(a, b)| a <= b));
                }
                s = next;
            }
            prop_assert!(r.state.ev_threads().iter().all(|&v| v == 1));
        }
        for w in a.windows(2) {
            prop_assert!(w[0].cost.est_seconds <= w[1].cost.est_seconds);
        }
    }
}

#[test]
fn gemm64_graph_no_worse_than_tree() {
    let hw = common::generic();
    let op = Arc::new(OpSpec::gemm(64, 64, 64).unwrap());
    let tree = construct_tree(op.clone(), &hw, &TreeConfig { beam_width: 1 }).unwrap();
    assert_eq!(tree.len(), 1);
    let graph = optimize(op, &hw, &EngineConfig::default()).unwrap();
    assert!(graph[0].cost.est_seconds <= tree[0].cost.est_seconds);
}

/// Cheapest complete schedule of a 16^3 GEMM over every monotone
/// power-of-two two-level tiling and vthread choice.
#[test]
fn brute_force_optimum_bounds_both_engines() {
    let hw = common::generic();
    let op = Arc::new(OpSpec::gemm(16, 16, 16).unwrap());
    let mut frontier = vec![EtirState::initial(op.clone(), 2)];
    let mut seen: HashSet<EtirState> = frontier.iter().cloned().collect();
    let mut best = f64::INFINITY;
    while let Some(s) = frontier.pop() {
        if s.is_complete() {
            best = best.min(estimate_cost(&s, &hw).unwrap().est_seconds);
            continue;
        }
        let fits = capacity_check(&s, &hw, s.cur_mem_level() + 1);
        for a in common::all_actions(&s) {
            if a.kind == ActionKind::InvTile || (a.kind == ActionKind::Cache && !fits) {
                continue;
            }
            if let Ok(n) = s.apply_action(&a) {
                if seen.insert(n.clone()) {
                    frontier.push(n);
                }
            }
        }
    }
    let tree = construct_tree(op.clone(), &hw, &TreeConfig::default()).unwrap();
    let graph = optimize(op, &hw, &EngineConfig::default()).unwrap();
    assert!(best <= tree[0].cost.est_seconds);
    assert!(best <= graph[0].cost.est_seconds);
    assert!(graph[0].cost.est_seconds <= tree[0].cost.est_seconds);
}

#[test]
fn single_level_hardware_is_trivial() {
    let mut hw = common::generic();
    hw.levels.truncate(1);
    let op = Arc::new(OpSpec::gemm(8, 8, 8).unwrap());
    let tree = construct_tree(op.clone(), &hw, &TreeConfig::default()).unwrap();
    let graph = optimize(op, &hw, &EngineConfig::default()).unwrap();
    assert_eq!(tree.len(), 1);
    assert_eq!(tree[0].state, graph[0].state);
    assert_eq!(tree[0].cost, graph[0].cost);
}
