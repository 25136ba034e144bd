//! Greedy tree construction with a single objective (memory traffic).
//!
//! Level by level, tiles are halved only while the current tile overflows the
//! level being scheduled. Partial states are ranked by their traffic into
//! that level and the best `beam_width` survive. No randomness, no inverse
//! tiling and no virtual threads.

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{self, CostError};
use crate::engine::{rank_results, Engine, EngineError, ScheduleResult, Snapshot};
use crate::hardware::{capacity_check, HardwareSpec};
use crate::ir::{Action, EtirState, IrError, OpSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("beam_width must be at least 1")]
    InvalidBeam,
    #[error("no tiling fits level {0}")]
    NoFit(usize),
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub beam_width: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig { beam_width: 4 }
    }
}

fn rank_by_traffic(
    mut snaps: Vec<Snapshot>,
    level: usize,
    keep: usize,
) -> Result<Vec<Snapshot>, TreeError> {
    let mut seen = HashSet::new();
    snaps.retain(|s| seen.insert(s.state.clone()));
    let mut keyed = snaps
        .into_iter()
        .map(|s| Ok((cost::memory_traffic(&s.state, level)?, s)))
        .collect::<Result<Vec<_>, CostError>>()?;
    keyed.sort_by(|(qa, a), (qb, b)| qa.cmp(qb).then_with(|| a.trace.cmp(&b.trace)));
    keyed.truncate(keep);
    Ok(keyed.into_iter().map(|(_, s)| s).collect())
}

/// Builds schedules top-down and returns them ranked by estimated cost.
pub fn construct_tree(
    op: Arc<OpSpec>,
    hw: &HardwareSpec,
    cfg: &TreeConfig,
) -> Result<Vec<ScheduleResult>, TreeError> {
    if cfg.beam_width == 0 {
        return Err(TreeError::InvalidBeam);
    }
    let start = EtirState::initial(op, hw.num_level());
    let mut beam = vec![Snapshot {
        state: start,
        trace: Vec::new(),
        iterations: 0,
    }];
    for level in 1..=hw.num_level() {
        let mut fitting = Vec::new();
        let mut frontier = beam;
        while !frontier.is_empty() {
            let mut children = Vec::new();
            for snap in frontier {
                if capacity_check(&snap.state, hw, level) {
                    fitting.push(snap);
                    continue;
                }
                for axis in snap.state.op().axes() {
                    let action = Action::tile(&axis.name, 2);
                    if let Ok(next) = snap.state.apply_action(&action) {
                        let mut trace = snap.trace.clone();
                        trace.push(action);
                        children.push(Snapshot {
                            state: next,
                            trace,
                            iterations: snap.iterations + 1,
                        });
                    }
                }
            }
            frontier = rank_by_traffic(children, level, cfg.beam_width)?;
        }
        if fitting.is_empty() {
            return Err(TreeError::NoFit(level));
        }
        beam = rank_by_traffic(fitting, level, cfg.beam_width)?
            .into_iter()
            .map(|mut s| {
                let cache = Action::cache();
                s.state = s.state.apply_action(&cache)?;
                s.trace.push(cache);
                s.iterations += 1;
                Ok(s)
            })
            .collect::<Result<_, IrError>>()?;
    }
    let results = beam
        .into_iter()
        .map(|s| ScheduleResult::from_snapshot(s, hw, Engine::Tree, 0, 0))
        .collect::<Result<Vec<_>, EngineError>>()?;
    Ok(rank_results(results, usize::MAX))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hardware::bundled;
    use crate::ir::ActionKind;

    #[test]
    fn gemm_tree_is_deterministic_and_unidirectional() {
        let hw = bundled("generic-gpu").unwrap();
        let op = Arc::new(OpSpec::gemm(64, 64, 64).unwrap());
        let a = construct_tree(op.clone(), &hw, &TreeConfig { beam_width: 1 }).unwrap();
        let b = construct_tree(op, &hw, &TreeConfig { beam_width: 1 }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);
        for r in &a {
            assert!(r.replays());
            assert!(r
                .trace
                .iter()
                .all(|x| matches!(x.kind, ActionKind::Tile | ActionKind::Cache)));
        }
    }

    #[test]
    fn wider_beam_is_no_worse() {
        let hw = bundled("generic-gpu").unwrap();
        let op = Arc::new(OpSpec::conv2d([1, 8, 30, 30], [8, 8, 3, 3], 2).unwrap());
        let narrow = construct_tree(op.clone(), &hw, &TreeConfig { beam_width: 1 }).unwrap();
        let wide = construct_tree(op, &hw, &TreeConfig { beam_width: 4 }).unwrap();
        assert!(wide[0].cost.est_seconds <= narrow[0].cost.est_seconds);
    }

    #[test]
    fn zero_beam_rejected() {
        let hw = bundled("generic-gpu").unwrap();
        let op = Arc::new(OpSpec::gemm(4, 4, 4).unwrap());
        assert_eq!(
            construct_tree(op, &hw, &TreeConfig { beam_width: 0 }),
            Err(TreeError::InvalidBeam)
        );
    }
}
