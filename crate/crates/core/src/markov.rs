//! Explicit construction chains on small state spaces.
//!
//! Every reachable state becomes a chain state; its outgoing probabilities are
//! the candidate distribution of the graph engine at a fixed iteration. States
//! without a legal action (complete schedules and dead ends) absorb.
//!
//! At one memory level the Cache edge is the only way out, and it is one-way,
//! so connectivity is examined per level and per cell: the states of a level
//! that share the tiles already committed at outer levels. Tiles that overflow
//! the level under construction are transient (they can only be tiled down)
//! and are left out of the recurrent part.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde::Serialize;
use thiserror::Error;

use crate::cost::{estimate_cost, CostError};
use crate::engine::{enumerate_candidates, EngineError, MoveSet};
use crate::hardware::{capacity_check, HardwareSpec};
use crate::ir::{Action, ActionKind, EtirState, OpSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkovError {
    #[error("state space too large: about {estimate} states (limit {limit})")]
    SpaceTooLarge { estimate: u64, limit: usize },
    #[error("level {level} is not ergodic: {reason}")]
    NotErgodic { level: usize, reason: String },
    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpaceCaps {
    pub max_states: usize,
    /// Iteration index at which candidate benefits are evaluated.
    pub iteration: usize,
}

impl Default for SpaceCaps {
    fn default() -> Self {
        SpaceCaps {
            max_states: 50_000,
            iteration: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub to: usize,
    pub prob: f64,
    /// `None` for the self-loop of an absorbing state.
    pub action: Option<Action>,
}

#[derive(Debug, Clone)]
pub struct ChainModel {
    pub states: Vec<EtirState>,
    pub transitions: Vec<Vec<Transition>>,
    pub level_of: Vec<usize>,
    /// State 0 is the initial state.
    pub initial: usize,
    /// Whether the tile under construction fits its level.
    pub fits: Vec<bool>,
    pub num_level: usize,
}

impl ChainModel {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn is_absorbing(&self, i: usize) -> bool {
        self.transitions[i].iter().all(|t| t.action.is_none())
    }

    pub fn dense_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.len();
        let mut p = vec![vec![0.0; n]; n];
        for (i, row) in self.transitions.iter().enumerate() {
            for t in row {
                p[i][t.to] += t.prob;
            }
        }
        p
    }

    /// Removes every edge matching `drop` and renormalizes the rows; rows left
    /// empty become absorbing.
    pub fn without_edges(&self, drop: impl Fn(&Action) -> bool) -> ChainModel {
        let mut out = self.clone();
        for (i, row) in out.transitions.iter_mut().enumerate() {
            row.retain(|t| t.action.as_ref().is_none_or(|a| !drop(a)));
            let total: f64 = row.iter().map(|t| t.prob).sum();
            if row.is_empty() {
                row.push(Transition {
                    to: i,
                    prob: 1.0,
                    action: None,
                });
            } else {
                for t in row.iter_mut() {
                    t.prob /= total;
                }
            }
        }
        out
    }

    /// Key shared by the states of one cell.
    fn cell_key(&self, i: usize) -> (usize, Vec<Vec<u64>>) {
        let s = &self.states[i];
        let c = s.cur_mem_level();
        let committed = s.etiles().iter().map(|t| t[..c].to_vec()).collect();
        (c, committed)
    }

    /// Recurrent states of `level` grouped into cells, in state order.
    pub fn cells(&self, level: usize) -> Vec<Vec<usize>> {
        let mut index: HashMap<(usize, Vec<Vec<u64>>), usize> = HashMap::new();
        let mut cells: Vec<Vec<usize>> = Vec::new();
        for i in 0..self.len() {
            if self.level_of[i] != level || !self.fits[i] {
                continue;
            }
            let key = self.cell_key(i);
            let slot = *index.entry(key).or_insert_with(|| {
                cells.push(Vec::new());
                cells.len() - 1
            });
            cells[slot].push(i);
        }
        cells
    }

    /// Edges that stay within the cell of `i` (self-loops excluded).
    fn in_cell_edges(&self, i: usize) -> impl Iterator<Item = &Transition> + '_ {
        let key = self.cell_key(i);
        self.transitions[i].iter().filter(move |t| {
            t.action
                .as_ref()
                .is_some_and(|a| a.kind != ActionKind::Cache)
                && self.fits[t.to]
                && self.cell_key(t.to) == key
        })
    }
}

/// Upper bound on the reachable state count.
pub fn space_estimate(op: &OpSpec, hw: &HardwareSpec, moves: &MoveSet) -> u64 {
    let levels = hw.num_level() as u64;
    let mut est: u64 = levels + 1;
    for axis in op.axes() {
        let choices = axis.padded.trailing_zeros() as u64 + 1;
        // Non-increasing chains of length `levels` over `choices` values.
        est = est.saturating_mul(binomial(choices + levels - 1, levels));
        if axis.is_spatial() {
            est = est.saturating_mul(moves.vthread_options.len().max(1) as u64);
        }
    }
    est
}

fn binomial(n: u64, k: u64) -> u64 {
    let mut r: u64 = 1;
    for i in 0..k {
        r = r.saturating_mul(n - i) / (i + 1);
    }
    r
}

/// Breadth-first enumeration of every state reachable with positive
/// probability.
pub fn enumerate_space(
    op: Arc<OpSpec>,
    hw: &HardwareSpec,
    moves: &MoveSet,
    caps: &SpaceCaps,
) -> Result<ChainModel, MarkovError> {
    let estimate = space_estimate(&op, hw, moves);
    let initial = EtirState::initial(op, hw.num_level());
    let mut index: HashMap<EtirState, usize> = HashMap::new();
    let mut states = vec![initial.clone()];
    index.insert(initial, 0);
    let mut transitions = Vec::new();
    let mut queue = VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        let row = match enumerate_candidates(&states[i], hw, moves, caps.iteration) {
            Ok(cands) => {
                let mut row = Vec::new();
                for c in cands.into_iter().filter(|c| c.probability > 0.0) {
                    let to = match index.get(&c.next) {
                        Some(&j) => j,
                        None => {
                            if states.len() >= caps.max_states {
                                return Err(MarkovError::SpaceTooLarge {
                                    estimate: estimate.max(states.len() as u64 + 1),
                                    limit: caps.max_states,
                                });
                            }
                            let j = states.len();
                            index.insert(c.next.clone(), j);
                            states.push(c.next);
                            queue.push_back(j);
                            j
                        }
                    };
                    row.push(Transition {
                        to,
                        prob: c.probability,
                        action: Some(c.action),
                    });
                }
                row
            }
            Err(EngineError::NoLegalAction) => vec![Transition {
                to: i,
                prob: 1.0,
                action: None,
            }],
            Err(e) => return Err(e.into()),
        };
        if transitions.len() <= i {
            transitions.resize(i + 1, Vec::new());
        }
        transitions[i] = row;
    }
    let level_of = states.iter().map(|s| s.cur_mem_level()).collect();
    let fits = states
        .iter()
        .map(|s| s.is_complete() || capacity_check(s, hw, s.cur_mem_level() + 1))
        .collect();
    Ok(ChainModel {
        states,
        transitions,
        level_of,
        initial: 0,
        fits,
        num_level: hw.num_level(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelReport {
    pub level: usize,
    pub states: usize,
    pub transient_states: usize,
    pub cells: usize,
    pub scc_count: usize,
    pub irreducible: bool,
    /// Largest period over the cells (0 for a cell without cycles).
    pub period: u64,
    /// Every cell has period 1.
    pub aperiodic: bool,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Strongly connected components of one cell.
fn cell_sccs(model: &ChainModel, cell: &[usize]) -> usize {
    let local: HashMap<usize, usize> = cell.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let mut g = DiGraph::<(), ()>::new();
    let nodes: Vec<_> = cell.iter().map(|_| g.add_node(())).collect();
    for &i in cell {
        for t in model.in_cell_edges(i) {
            g.add_edge(nodes[local[&i]], nodes[local[&t.to]], ());
        }
    }
    tarjan_scc(&g).len()
}

/// Period of a strongly connected cell: gcd of `d(u) + 1 - d(v)` over its
/// edges, with `d` the BFS depth from the first state.
fn cell_period(model: &ChainModel, cell: &[usize]) -> u64 {
    let mut depth: HashMap<usize, u64> = HashMap::new();
    depth.insert(cell[0], 0);
    let mut queue = VecDeque::from([cell[0]]);
    while let Some(u) = queue.pop_front() {
        for t in model.in_cell_edges(u) {
            if !depth.contains_key(&t.to) {
                depth.insert(t.to, depth[&u] + 1);
                queue.push_back(t.to);
            }
        }
    }
    let mut g = 0;
    for &u in cell {
        for t in model.in_cell_edges(u) {
            if let (Some(&du), Some(&dv)) = (depth.get(&u), depth.get(&t.to)) {
                g = gcd(g, (du + 1).abs_diff(dv));
            }
        }
    }
    g
}

/// Per-level statistics for levels `0..num_level`.
pub fn level_reports(model: &ChainModel) -> Vec<LevelReport> {
    (0..model.num_level)
        .map(|level| {
            let cells = model.cells(level);
            let states = model.level_of.iter().filter(|&&l| l == level).count();
            let recurrent: usize = cells.iter().map(Vec::len).sum();
            let sccs: Vec<usize> = cells.iter().map(|c| cell_sccs(model, c)).collect();
            let irreducible = !cells.is_empty() && sccs.iter().all(|&n| n == 1);
            let periods: Vec<u64> = if irreducible {
                cells.iter().map(|c| cell_period(model, c)).collect()
            } else {
                Vec::new()
            };
            LevelReport {
                level,
                states,
                transient_states: states - recurrent,
                cells: cells.len(),
                scc_count: sccs.iter().sum(),
                irreducible,
                period: periods.iter().copied().max().unwrap_or(0),
                aperiodic: irreducible && periods.iter().all(|&p| p == 1),
            }
        })
        .collect()
}

/// For each schedulable level: every cell is strongly connected.
pub fn check_irreducible_per_level(model: &ChainModel) -> Vec<bool> {
    level_reports(model).iter().map(|r| r.irreducible).collect()
}

/// True iff every cell of every level has period 1. Cells of a single state
/// without a self-loop have no cycles and count as periodic.
pub fn check_aperiodic(model: &ChainModel) -> bool {
    let reports = level_reports(model);
    !reports.is_empty() && reports.iter().all(|r| r.aperiodic)
}

/// Stationary distribution of the level-restricted chain, as a vector over
/// all model states (zero outside the level's recurrent cell).
pub fn stationary_distribution(model: &ChainModel, level: usize) -> Result<Vec<f64>, MarkovError> {
    let not_ergodic = |reason: &str| MarkovError::NotErgodic {
        level,
        reason: reason.to_string(),
    };
    let cells = model.cells(level);
    let [cell] = cells.as_slice() else {
        return Err(not_ergodic(&format!("{} cells", cells.len())));
    };
    if cell_sccs(model, cell) != 1 {
        return Err(not_ergodic("not strongly connected"));
    }
    if cell_period(model, cell) != 1 {
        return Err(not_ergodic("periodic"));
    }
    let local: HashMap<usize, usize> = cell.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let rows: Vec<Vec<(usize, f64)>> = cell
        .iter()
        .map(|&i| {
            let edges: Vec<_> = model
                .in_cell_edges(i)
                .map(|t| (local[&t.to], t.prob))
                .collect();
            let total: f64 = edges.iter().map(|e| e.1).sum();
            edges.into_iter().map(|(j, p)| (j, p / total)).collect()
        })
        .collect();
    let n = cell.len();
    let step = |pi: &[f64]| {
        let mut next = vec![0.0; n];
        for (i, row) in rows.iter().enumerate() {
            for &(j, p) in row {
                next[j] += pi[i] * p;
            }
        }
        next
    };
    let mut pi = vec![1.0 / n as f64; n];
    let cap = 1_000_000;
    for _ in 0..cap {
        let next = step(&pi);
        let residual = next
            .iter()
            .zip(&pi)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        pi = next;
        if residual < 1e-12 {
            let total: f64 = pi.iter().sum();
            let mut full = vec![0.0; model.len()];
            for (k, &i) in cell.iter().enumerate() {
                full[i] = pi[k] / total;
            }
            return Ok(full);
        }
    }
    Err(MarkovError::NoConvergence { iterations: cap })
}

/// `max_j |(πP_ℓ)_j - π_j|` for a distribution returned by
/// [`stationary_distribution`].
pub fn stationary_residual(model: &ChainModel, pi: &[f64]) -> f64 {
    let mut next = vec![0.0; model.len()];
    for (i, &p) in pi.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let edges: Vec<_> = model.in_cell_edges(i).collect();
        let total: f64 = edges.iter().map(|t| t.prob).sum();
        for t in edges {
            next[t.to] += p * t.prob / total;
        }
    }
    next.iter()
        .zip(pi)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Shannon entropy (nats) of a distribution.
pub fn entropy(pi: &[f64]) -> f64 {
    -pi.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub values: Vec<f64>,
    /// Chosen transition index per state; `None` at absorbing states.
    pub policy: Vec<Option<usize>>,
    pub terminal: Vec<Option<f64>>,
    pub iterations: usize,
}

impl ValueTable {
    pub fn action<'a>(&self, model: &'a ChainModel, state: usize) -> Option<&'a Action> {
        self.policy[state].and_then(|k| model.transitions[state][k].action.as_ref())
    }

    /// Follows the policy from `start`; returns the end state and the product
    /// of probabilities along the way.
    pub fn follow(&self, model: &ChainModel, start: usize) -> (usize, f64) {
        let mut i = start;
        let mut prob = 1.0;
        for _ in 0..model.len() {
            let Some(k) = self.policy[i] else { break };
            let t = &model.transitions[i][k];
            prob *= t.prob;
            i = t.to;
        }
        (i, prob)
    }

    /// Payoff of the policy path: path probability times terminal value.
    pub fn policy_payoff(&self, model: &ChainModel, start: usize) -> f64 {
        let (end, prob) = self.follow(model, start);
        prob * self.terminal[end].unwrap_or(0.0)
    }
}

/// Terminal payoffs: `min_cost / cost` at complete states, 0 at dead ends.
pub fn terminal_values(
    model: &ChainModel,
    hw: &HardwareSpec,
) -> Result<Vec<Option<f64>>, MarkovError> {
    let mut costs = vec![None; model.len()];
    for (i, cost) in costs.iter_mut().enumerate() {
        if model.is_absorbing(i) && model.states[i].is_complete() {
            *cost = Some(estimate_cost(&model.states[i], hw)?.est_seconds);
        }
    }
    let best = costs
        .iter()
        .flatten()
        .copied()
        .fold(f64::INFINITY, f64::min);
    Ok((0..model.len())
        .map(|i| {
            if !model.is_absorbing(i) {
                None
            } else {
                Some(costs[i].map_or(0.0, |c| best / c))
            }
        })
        .collect())
}

/// Product-form value iteration `V(i) = max_a π(a|i) V(j)`, starting from 0
/// at transient states so the values rise monotonically to the best-path
/// payoff.
pub fn value_iteration(model: &ChainModel, hw: &HardwareSpec) -> Result<ValueTable, MarkovError> {
    value_iteration_with(model, hw, |_| {})
}

/// [`value_iteration`], calling `sweep` with the values after every sweep.
pub fn value_iteration_with(
    model: &ChainModel,
    hw: &HardwareSpec,
    mut sweep: impl FnMut(&[f64]),
) -> Result<ValueTable, MarkovError> {
    let terminal = terminal_values(model, hw)?;
    let n = model.len();
    let mut values: Vec<f64> = terminal.iter().map(|t| t.unwrap_or(0.0)).collect();
    let cap = 10 * n.max(1);
    for iter in 1..=cap {
        let mut next = values.clone();
        for i in 0..n {
            if terminal[i].is_none() {
                next[i] = model.transitions[i]
                    .iter()
                    .map(|t| t.prob * values[t.to])
                    .fold(0.0, f64::max);
            }
        }
        let diff = next
            .iter()
            .zip(&values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        values = next;
        sweep(&values);
        if diff < 1e-12 {
            let policy = (0..n)
                .map(|i| {
                    if terminal[i].is_some() {
                        return None;
                    }
                    let mut best: Option<(usize, f64)> = None;
                    for (k, t) in model.transitions[i].iter().enumerate() {
                        let v = t.prob * values[t.to];
                        if best.is_none_or(|(_, b)| v > b) {
                            best = Some((k, v));
                        }
                    }
                    best.map(|(k, _)| k)
                })
                .collect();
            return Ok(ValueTable {
                values,
                policy,
                terminal,
                iterations: iter,
            });
        }
    }
    Err(MarkovError::NoConvergence { iterations: cap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hardware::bundled;

    fn one_level_hw() -> HardwareSpec {
        let mut hw = bundled("generic-gpu").unwrap();
        hw.levels.truncate(2);
        hw
    }

    fn two_state() -> ChainModel {
        let op = Arc::new(OpSpec::gemv(2, 1).unwrap());
        let moves = MoveSet {
            vthread_options: vec![1],
            ..MoveSet::default()
        };
        enumerate_space(op, &one_level_hw(), &moves, &SpaceCaps::default()).unwrap()
    }

    #[test]
    fn two_state_chain() {
        let m = two_state();
        // Two states at level 0 and their two cached counterparts.
        assert_eq!(m.len(), 4);
        assert_eq!(m.cells(0), vec![vec![0, 1]]);
        assert_eq!(check_irreducible_per_level(&m), vec![true]);
        assert!(!check_aperiodic(&m));
        assert!(stationary_distribution(&m, 0).is_err());
        for row in &m.transitions {
            let s: f64 = row.iter().map(|t| t.prob).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dropping_inverse_edges_breaks_connectivity() {
        let m = two_state().without_edges(|a| a.kind == ActionKind::InvTile);
        assert_eq!(check_irreducible_per_level(&m), vec![false]);
    }

    #[test]
    fn oversized_space() {
        let op = Arc::new(OpSpec::gemm(64, 64, 64).unwrap());
        let hw = bundled("generic-gpu").unwrap();
        let caps = SpaceCaps {
            max_states: 1000,
            ..SpaceCaps::default()
        };
        assert!(matches!(
            enumerate_space(op, &hw, &MoveSet::default(), &caps),
            Err(MarkovError::SpaceTooLarge { .. })
        ));
    }

    #[test]
    fn binomial_values() {
        assert_eq!(binomial(5, 2), 10);
        assert_eq!(binomial(4, 1), 4);
        assert_eq!(binomial(7, 0), 1);
    }
}
