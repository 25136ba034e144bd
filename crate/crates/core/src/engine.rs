//! Annealed graph traversal over schedule states.
//!
//! Each step scores every legal action from the current state with its
//! benefit formula, zeroes out candidates rejected by the memory check,
//! normalizes the rest into a distribution and draws one action by roulette.
//! The temperature halves every step; intermediate states are collected as
//! candidate results with a temperature-dependent probability.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::sync::Arc;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{self, CostError, CostEstimate};
use crate::hardware::{capacity_check, HardwareSpec};
use crate::ir::{Action, ActionKind, EtirState, IrError, OpSpec, StateRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("invalid engine config: {0}")]
    InvalidConfig(String),
    #[error("no legal action from this state")]
    NoLegalAction,
    #[error("candidate list is empty")]
    EmptyCandidates,
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub t0: f64,
    pub threshold: f64,
    pub restarts: u64,
    pub seed: u64,
    pub top_k: usize,
    pub vthread_options: Vec<u64>,
    /// Largest tile step; steps are the powers of two in `2..=max_tile_factor`.
    pub max_tile_factor: u64,
    #[serde(default = "default_true")]
    pub enable_inv_tile: bool,
}

fn default_true() -> bool {
    true
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            t0: (1u64 << 20) as f64,
            threshold: 1.0,
            restarts: 8,
            seed: 0,
            top_k: 10,
            vthread_options: vec![1, 2, 4, 8],
            max_tile_factor: 2,
            enable_inv_tile: true,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::InvalidConfig(m.to_string()));
        if self.threshold.is_nan()
            || self.threshold <= 0.0
            || self.t0.is_nan()
            || self.t0 <= self.threshold
            || !self.t0.is_finite()
        {
            return bad("t0 > threshold > 0 is required");
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1");
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if self.max_tile_factor < 2 || !self.max_tile_factor.is_power_of_two() {
            return bad("max_tile_factor must be a power of two >= 2");
        }
        if self
            .vthread_options
            .iter()
            .any(|&v| v == 0 || !v.is_power_of_two())
        {
            return bad("vthread_options must be powers of two");
        }
        Ok(())
    }

    pub fn moves(&self) -> MoveSet {
        MoveSet {
            vthread_options: self.vthread_options.clone(),
            max_tile_factor: self.max_tile_factor,
            inv_tile: self.enable_inv_tile,
        }
    }

    /// Iterations a single restart performs before the temperature drops to
    /// the threshold.
    pub fn iteration_budget(&self) -> usize {
        let mut t = self.t0;
        let mut n = 0;
        while t > self.threshold {
            t /= 2.0;
            n += 1;
        }
        n
    }
}

/// Which actions the candidate enumeration offers.
#[derive(Debug, Clone, PartialEq)]
pub struct MoveSet {
    pub vthread_options: Vec<u64>,
    pub max_tile_factor: u64,
    pub inv_tile: bool,
}

impl Default for MoveSet {
    fn default() -> Self {
        EngineConfig::default().moves()
    }
}

impl MoveSet {
    fn tile_factors(&self) -> impl Iterator<Item = u64> {
        let max = self.max_tile_factor;
        (1..64).map(|b| 1u64 << b).take_while(move |&f| f <= max)
    }
}

#[derive(Debug, Clone)]
pub struct ActionCandidate {
    pub action: Action,
    pub benefit: f64,
    pub probability: f64,
    /// Rejected by the memory check.
    pub gated: bool,
    pub next: EtirState,
}

/// Multiplier on the Cache benefit at iteration `iter` (0-based):
/// `3 / (1 + exp(-(ln 5 / 10) (iter - 10)))`.
pub fn anneal_multiplier(iter: usize) -> f64 {
    3.0 / (1.0 + (-(5f64.ln() / 10.0) * (iter as f64 - 10.0)).exp())
}

/// Probability of keeping a visited state as a result at temperature `t`:
/// `1 - 1 / (1 + exp(-0.5 (-ln t - 10)))`.
pub fn acceptance_probability(t: f64) -> f64 {
    1.0 - 1.0 / (1.0 + (-0.5 * (-t.ln() - 10.0)).exp())
}

/// Scores every legal action from `state`.
///
/// Tile edits target level `cur_mem_level + 1`. A candidate is gated when its
/// post-state overflows that level, except for Tile steps taken while the
/// current tile already overflows (those are the only way back under the
/// capacity). Cache is gated while the edited tile overflows.
pub fn enumerate_candidates(
    state: &EtirState,
    hw: &HardwareSpec,
    moves: &MoveSet,
    iter: usize,
) -> Result<Vec<ActionCandidate>, EngineError> {
    if state.is_complete() {
        return Err(EngineError::NoLegalAction);
    }
    let cur = state.cur_mem_level();
    let edit = cur + 1;
    let fits_now = capacity_check(state, hw, edit);
    let op = state.op();
    let mut out = Vec::new();

    for axis in op.axes() {
        for factor in moves.tile_factors() {
            let mut kinds = vec![Action::tile(&axis.name, factor)];
            if moves.inv_tile {
                kinds.push(Action::inv_tile(&axis.name, factor));
            }
            for action in kinds {
                let Ok(next) = state.apply_action(&action) else {
                    continue;
                };
                let benefit = cost::benefit_tiling(state, &next, edit)?;
                let overflow = !capacity_check(&next, hw, edit);
                let repair = action.kind == ActionKind::Tile && !fits_now;
                out.push(ActionCandidate {
                    action,
                    benefit,
                    probability: 0.0,
                    gated: overflow && !repair,
                    next,
                });
            }
        }
    }
    for a in op.spatial_axes() {
        let name = &op.axes()[a].name;
        for &v in &moves.vthread_options {
            if !hw.vthread_options.contains(&v) {
                continue;
            }
            let action = Action::set_vthread(name, v);
            let Ok(next) = state.apply_action(&action) else {
                continue;
            };
            let benefit = cost::benefit_vthread(&next, hw, a, v);
            let gated = !capacity_check(&next, hw, edit);
            out.push(ActionCandidate {
                action,
                benefit,
                probability: 0.0,
                gated,
                next,
            });
        }
    }
    let cache = Action::cache();
    let next = state.apply_action(&cache)?;
    let benefit = cost::benefit_caching(state, hw, cur, edit) * anneal_multiplier(iter);
    out.push(ActionCandidate {
        action: cache,
        benefit,
        probability: 0.0,
        gated: !fits_now,
        next,
    });

    normalize(&mut out)?;
    Ok(out)
}

/// Turns benefits into probabilities; gated candidates get exactly 0.
fn normalize(cands: &mut [ActionCandidate]) -> Result<(), EngineError> {
    let max = cands
        .iter()
        .filter(|c| !c.gated)
        .map(|c| c.benefit)
        .fold(0.0f64, f64::max);
    if max.is_nan() || max <= 0.0 {
        return Err(EngineError::NoLegalAction);
    }
    let total: f64 = cands
        .iter()
        .filter(|c| !c.gated)
        .map(|c| c.benefit / max)
        .sum();
    for c in cands.iter_mut() {
        c.probability = if c.gated {
            0.0
        } else {
            (c.benefit / max) / total
        };
    }
    Ok(())
}

/// Index of the candidate whose cumulative interval contains `u ∈ [0, 1)`.
pub fn roulette_select(cands: &[ActionCandidate], u: f64) -> Result<usize, EngineError> {
    roulette_index(cands.iter().map(|c| c.probability), u)
}

/// Roulette over a bare probability list.
pub fn roulette_index(probs: impl IntoIterator<Item = f64>, u: f64) -> Result<usize, EngineError> {
    let mut acc = 0.0;
    let mut last_positive = None;
    for (i, p) in probs.into_iter().enumerate() {
        if p > 0.0 {
            last_positive = Some(i);
        }
        acc += p;
        if p > 0.0 && u < acc {
            return Ok(i);
        }
    }
    // Rounding can leave the cumulative sum a hair under 1.
    last_positive.ok_or(EngineError::EmptyCandidates)
}

/// A state captured during traversal with the actions that led to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub state: EtirState,
    pub trace: Vec<Action>,
    /// Traversal iterations performed when the snapshot was taken.
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct ConstructRun {
    /// Collected top results followed by the final state.
    pub snapshots: Vec<Snapshot>,
    pub iterations: usize,
}

/// One restart of the annealed traversal. `observe` sees every visited state
/// together with its scored candidates.
pub fn construct_run(
    op: Arc<OpSpec>,
    hw: &HardwareSpec,
    cfg: &EngineConfig,
    restart: u64,
    mut observe: impl FnMut(&EtirState, &[ActionCandidate]),
) -> Result<ConstructRun, EngineError> {
    cfg.validate()?;
    let moves = cfg.moves();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(restart);

    let mut state = EtirState::initial(op, hw.num_level());
    let mut trace = Vec::new();
    let mut snapshots = Vec::new();
    let mut t = cfg.t0;
    let mut iter = 0;
    while t > cfg.threshold {
        let cands = match enumerate_candidates(&state, hw, &moves, iter) {
            Ok(c) => c,
            Err(EngineError::NoLegalAction) => break,
            Err(e) => return Err(e),
        };
        observe(&state, &cands);
        let pick = roulette_select(&cands, rng.gen::<f64>())?;
        let chosen = &cands[pick];
        debug!(
            "iter {iter} t={t:e}: {} (p={:.4})",
            chosen.action, chosen.probability
        );
        state = chosen.next.clone();
        trace.push(chosen.action.clone());
        iter += 1;
        if rng.gen::<f64>() < acceptance_probability(t) {
            snapshots.push(Snapshot {
                state: state.clone(),
                trace: trace.clone(),
                iterations: iter,
            });
        }
        t /= 2.0;
    }
    snapshots.push(Snapshot {
        state,
        trace,
        iterations: iter,
    });
    Ok(ConstructRun {
        snapshots,
        iterations: iter,
    })
}

/// Finishes a partial schedule by caching down to the innermost level. An
/// overflowing tile is first halved along the axis that adds the least
/// traffic. Returns `None` when no tiling fits.
pub fn complete_snapshot(
    snap: &Snapshot,
    hw: &HardwareSpec,
) -> Result<Option<Snapshot>, EngineError> {
    let mut state = snap.state.clone();
    let mut trace = snap.trace.clone();
    while !state.is_complete() {
        let edit = state.cur_mem_level() + 1;
        let action = if capacity_check(&state, hw, edit) {
            Action::cache()
        } else {
            let mut best: Option<(u64, Action)> = None;
            for axis in state.op().axes() {
                let action = Action::tile(&axis.name, 2);
                if let Ok(next) = state.apply_action(&action) {
                    let q = cost::memory_traffic(&next, edit)?;
                    if best.as_ref().is_none_or(|(bq, _)| q < *bq) {
                        best = Some((q, action));
                    }
                }
            }
            match best {
                Some((_, a)) => a,
                None => return Ok(None),
            }
        };
        state = state.apply_action(&action)?;
        trace.push(action);
    }
    Ok(Some(Snapshot {
        state,
        trace,
        iterations: snap.iterations,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Graph,
    Tree,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleResult {
    pub engine: Engine,
    pub state: EtirState,
    pub cost: CostEstimate,
    pub trace: Vec<Action>,
    pub seed: u64,
    pub restart: u64,
    pub iterations: usize,
}

impl ScheduleResult {
    pub fn from_snapshot(
        snap: Snapshot,
        hw: &HardwareSpec,
        engine: Engine,
        seed: u64,
        restart: u64,
    ) -> Result<Self, EngineError> {
        let cost = cost::estimate_cost(&snap.state, hw)?;
        Ok(ScheduleResult {
            engine,
            state: snap.state,
            cost,
            trace: snap.trace,
            seed,
            restart,
            iterations: snap.iterations,
        })
    }

    pub fn to_record(&self) -> ScheduleRecord {
        ScheduleRecord {
            engine: self.engine,
            op: self.state.op().label(),
            seed: self.seed,
            restart: self.restart,
            iterations: self.iterations,
            est_seconds: self.cost.est_seconds,
            cost: self.cost.clone(),
            trace: self.trace.clone(),
            state: self.state.to_record(),
        }
    }

    /// Replays the trace from the initial state; true iff it reproduces the
    /// stored state.
    pub fn replays(&self) -> bool {
        EtirState::replay(
            self.state.op_arc().clone(),
            self.state.num_level(),
            &self.trace,
        )
        .map(|s| s == self.state)
        .unwrap_or(false)
    }
}

/// Serialized [`ScheduleResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub engine: Engine,
    pub op: String,
    pub seed: u64,
    pub restart: u64,
    pub iterations: usize,
    pub est_seconds: f64,
    pub cost: CostEstimate,
    pub trace: Vec<Action>,
    pub state: StateRecord,
}

/// Ascending cost; ties go to the shorter trace, then the lexicographically
/// smaller trace.
pub fn rank_order(a: &ScheduleResult, b: &ScheduleResult) -> Ordering {
    a.cost
        .est_seconds
        .total_cmp(&b.cost.est_seconds)
        .then_with(|| a.trace.len().cmp(&b.trace.len()))
        .then_with(|| a.trace.cmp(&b.trace))
        .then_with(|| a.restart.cmp(&b.restart))
        .then_with(|| a.iterations.cmp(&b.iterations))
}

/// Sorts by [`rank_order`], drops repeated end states and keeps `top_k`.
pub fn rank_results(mut results: Vec<ScheduleResult>, top_k: usize) -> Vec<ScheduleResult> {
    results.sort_by(rank_order);
    let mut seen = HashSet::new();
    results.retain(|r| seen.insert(r.state.clone()));
    results.truncate(top_k);
    results
}

fn complete_run(
    run: ConstructRun,
    hw: &HardwareSpec,
    cfg: &EngineConfig,
    restart: u64,
) -> Result<Vec<ScheduleResult>, EngineError> {
    let mut out = Vec::new();
    for snap in &run.snapshots {
        if let Some(done) = complete_snapshot(snap, hw)? {
            out.push(ScheduleResult::from_snapshot(
                done,
                hw,
                Engine::Graph,
                cfg.seed,
                restart,
            )?);
        }
    }
    Ok(out)
}

/// Single restart: collected results (completed and costed), in collection
/// order.
pub fn construct(
    op: Arc<OpSpec>,
    hw: &HardwareSpec,
    cfg: &EngineConfig,
) -> Result<Vec<ScheduleResult>, EngineError> {
    let run = construct_run(op, hw, cfg, 0, |_, _| {})?;
    complete_run(run, hw, cfg, 0)
}

/// Runs `cfg.restarts` independent traversals and returns the `top_k` best
/// distinct schedules.
pub fn optimize(
    op: Arc<OpSpec>,
    hw: &HardwareSpec,
    cfg: &EngineConfig,
) -> Result<Vec<ScheduleResult>, EngineError> {
    cfg.validate()?;
    let per_restart: Vec<Vec<ScheduleResult>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let run = construct_run(op.clone(), hw, cfg, r, |_, _| {})?;
            complete_run(run, hw, cfg, r)
        })
        .collect::<Result<_, EngineError>>()?;
    Ok(rank_results(
        per_restart.into_iter().flatten().collect(),
        cfg.top_k,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hardware::bundled;

    fn gemm(e: u64) -> Arc<OpSpec> {
        Arc::new(OpSpec::gemm(e, e, e).unwrap())
    }

    #[test]
    fn anneal_and_acceptance_values() {
        assert!((anneal_multiplier(10) - 1.5).abs() < 1e-12);
        assert!((anneal_multiplier(10_000) - 3.0).abs() < 1e-12);
        assert!((acceptance_probability((-10f64).exp()) - 0.5).abs() < 1e-12);
    }

    fn cands_with(probs: &[f64]) -> Vec<ActionCandidate> {
        let s = EtirState::initial(gemm(2), 1);
        probs
            .iter()
            .map(|&p| ActionCandidate {
                action: Action::cache(),
                benefit: p,
                probability: p,
                gated: p == 0.0,
                next: s.clone(),
            })
            .collect()
    }

    #[test]
    fn roulette_intervals() {
        let c = cands_with(&[0.5, 0.3, 0.2]);
        assert_eq!(roulette_select(&c, 0.6).unwrap(), 1);
        assert_eq!(roulette_select(&c, 0.0).unwrap(), 0);
        assert_eq!(roulette_select(&c, 0.85).unwrap(), 2);
        let one = cands_with(&[1.0]);
        for u in [0.0, 0.5, 0.999_999] {
            assert_eq!(roulette_select(&one, u).unwrap(), 0);
        }
        assert_eq!(roulette_select(&[], 0.1), Err(EngineError::EmptyCandidates));
        // Gated candidates are never drawn, even at interval edges.
        let g = cands_with(&[0.0, 1.0, 0.0]);
        assert_eq!(roulette_select(&g, 0.0).unwrap(), 1);
        assert_eq!(roulette_select(&g, 0.999_999_999_999).unwrap(), 1);
    }

    #[test]
    fn candidates_sum_to_one_and_gate() {
        let hw = bundled("generic-gpu").unwrap();
        // 128^3 overflows shared memory: only tile steps are allowed.
        let s = EtirState::initial(gemm(128), hw.num_level());
        let cands = enumerate_candidates(&s, &hw, &MoveSet::default(), 0).unwrap();
        let total: f64 = cands.iter().map(|c| c.probability).sum();
        assert!((total - 1.0).abs() < 1e-9);
        for c in &cands {
            if c.action.kind == ActionKind::Tile {
                assert!(!c.gated);
            } else {
                assert!(c.gated, "{} should be gated", c.action);
                assert_eq!(c.probability, 0.0);
            }
        }
    }

    #[test]
    fn complete_state_is_terminal() {
        let hw = bundled("generic-gpu").unwrap();
        let s = EtirState::initial(gemm(4), hw.num_level());
        let s = s
            .apply_action(&Action::cache())
            .unwrap()
            .apply_action(&Action::cache())
            .unwrap();
        assert!(matches!(
            enumerate_candidates(&s, &hw, &MoveSet::default(), 3),
            Err(EngineError::NoLegalAction)
        ));
    }

    #[test]
    fn everything_gated_is_terminal() {
        let mut hw = bundled("generic-gpu").unwrap();
        hw.levels.truncate(2);
        // Unit GEMM whose single tile exceeds a 8-byte level.
        hw.levels[1].capacity_bytes = crate::hardware::Capacity::Bytes(8);
        let s = EtirState::initial(Arc::new(OpSpec::gemm(1, 1, 1).unwrap()), 1);
        let moves = MoveSet {
            vthread_options: vec![1],
            ..MoveSet::default()
        };
        assert!(matches!(
            enumerate_candidates(&s, &hw, &moves, 0),
            Err(EngineError::NoLegalAction)
        ));
    }

    #[test]
    fn default_budget_is_twenty() {
        assert_eq!(EngineConfig::default().iteration_budget(), 20);
        let cfg = EngineConfig {
            t0: 3.0,
            threshold: 1.0,
            ..Default::default()
        };
        assert_eq!(cfg.iteration_budget(), 2);
    }

    #[test]
    fn construct_is_deterministic() {
        let hw = bundled("generic-gpu").unwrap();
        let cfg = EngineConfig {
            seed: 7,
            ..Default::default()
        };
        let a = construct(gemm(32), &hw, &cfg).unwrap();
        let b = construct(gemm(32), &hw, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        for r in &a {
            assert!(r.replays());
            assert!(r.state.is_complete());
        }
    }

    #[test]
    fn optimize_ranks_and_bounds() {
        let hw = bundled("generic-gpu").unwrap();
        let cfg = EngineConfig {
            top_k: 1,
            ..Default::default()
        };
        let best = optimize(gemm(64), &hw, &cfg).unwrap();
        assert_eq!(best.len(), 1);
        let all = optimize(
            gemm(64),
            &hw,
            &EngineConfig {
                top_k: 1000,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(all[0], best[0]);
        for w in all.windows(2) {
            assert_ne!(rank_order(&w[0], &w[1]), Ordering::Greater);
        }
    }

    #[test]
    fn single_restart_matches_ranked_construct() {
        let hw = bundled("generic-gpu").unwrap();
        let cfg = EngineConfig {
            restarts: 1,
            top_k: 50,
            seed: 3,
            ..Default::default()
        };
        let ranked = rank_results(construct(gemm(16), &hw, &cfg).unwrap(), cfg.top_k);
        assert_eq!(optimize(gemm(16), &hw, &cfg).unwrap(), ranked);
    }

    #[test]
    fn config_validation() {
        let bad = EngineConfig {
            t0: 1.0,
            threshold: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(EngineConfig {
            restarts: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(EngineConfig {
            max_tile_factor: 3,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
