#![allow(dead_code)]

pub mod chain;

use std::sync::Arc;

use etir::hardware::{bundled, HardwareSpec};
use etir::ir::{parse_op_suite, Action, EtirState, OpSpec};
use rand::seq::SliceRandom;
use rand::Rng;

pub const DESK: &str = include_str!("../../../../ops/desk.json");

pub fn desk_ops() -> Vec<Arc<OpSpec>> {
    parse_op_suite(DESK)
        .unwrap()
        .into_iter()
        .map(Arc::new)
        .collect()
}

pub fn generic() -> HardwareSpec {
    bundled("generic-gpu").unwrap()
}

/// Generic profile cut down to one tile level.
pub fn one_level() -> HardwareSpec {
    let mut hw = generic();
    hw.levels.truncate(2);
    hw
}

/// Small operator of the given kind (0..4) with extents drawn from `rng`.
pub fn small_op(kind: usize, rng: &mut impl Rng) -> OpSpec {
    let e = |rng: &mut dyn rand::RngCore, lo: u64, hi: u64| rng.gen_range(lo..=hi);
    match kind % 4 {
        0 => OpSpec::gemm(e(rng, 1, 64), e(rng, 1, 64), e(rng, 1, 64)).unwrap(),
        1 => OpSpec::gemv(e(rng, 1, 64), e(rng, 1, 64)).unwrap(),
        2 => {
            let r = e(rng, 1, 3);
            let s = e(rng, 1, 2);
            let h = e(rng, r, 20);
            let w = e(rng, r, 20);
            let c = e(rng, 1, 4);
            OpSpec::conv2d([e(rng, 1, 2), c, h, w], [e(rng, 1, 4), c, r, r], s).unwrap()
        }
        _ => {
            let f = e(rng, 1, 3);
            let s = e(rng, 1, 3);
            OpSpec::avgpool2d(
                [e(rng, 1, 2), e(rng, 1, 8), e(rng, f, 40), e(rng, f, 40)],
                f,
                s,
            )
            .unwrap()
        }
    }
}

/// Every action that [`EtirState::apply_action`] may accept from `state`.
pub fn all_actions(state: &EtirState) -> Vec<Action> {
    let mut out = vec![Action::cache()];
    for axis in state.op().axes() {
        for f in [2, 4] {
            out.push(Action::tile(&axis.name, f));
            out.push(Action::inv_tile(&axis.name, f));
        }
        for v in [1, 2, 4, 8] {
            out.push(Action::set_vthread(&axis.name, v));
        }
    }
    out
}

/// Applies up to `steps` random legal actions, ignoring capacity.
pub fn random_walk(
    op: Arc<OpSpec>,
    levels: usize,
    steps: usize,
    rng: &mut impl Rng,
) -> (EtirState, Vec<Action>) {
    let mut state = EtirState::initial(op, levels);
    let mut trace = Vec::new();
    for _ in 0..steps {
        let mut actions = all_actions(&state);
        actions.shuffle(rng);
        let Some((a, next)) = actions
            .into_iter()
            .find_map(|a| state.apply_action(&a).ok().map(|n| (a, n)))
        else {
            break;
        };
        // Cache rarely so tiles get edited at every level.
        if a == Action::cache() && rng.gen_bool(0.7) {
            continue;
        }
        state = next;
        trace.push(a);
    }
    (state, trace)
}

/// Random walk followed by Cache up to a complete state.
pub fn random_complete(
    op: Arc<OpSpec>,
    levels: usize,
    steps: usize,
    rng: &mut impl Rng,
) -> EtirState {
    let (mut s, _) = random_walk(op, levels, steps, rng);
    while !s.is_complete() {
        s = s.apply_action(&Action::cache()).unwrap();
    }
    s
}
