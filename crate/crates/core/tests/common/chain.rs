//! Independent oracles for chain models.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::sync::Arc;

use etir::engine::MoveSet;
use etir::hardware::HardwareSpec;
use etir::ir::{ActionKind, OpSpec};
use etir::markov::{enumerate_space, ChainModel, SpaceCaps};
use nalgebra::{DMatrix, DVector};

pub struct Case {
    pub name: &'static str,
    pub model: ChainModel,
    pub hw: HardwareSpec,
    /// Whether some level has cycles of coprime lengths.
    pub mixed_cycles: bool,
}

fn build(
    name: &'static str,
    op: OpSpec,
    hw: HardwareSpec,
    moves: MoveSet,
    mixed_cycles: bool,
) -> Case {
    let model = enumerate_space(Arc::new(op), &hw, &moves, &SpaceCaps::default()).unwrap();
    Case {
        name,
        model,
        hw,
        mixed_cycles,
    }
}

fn moves(vthreads: &[u64], max_tile_factor: u64) -> MoveSet {
    MoveSet {
        vthread_options: vthreads.to_vec(),
        max_tile_factor,
        inv_tile: true,
    }
}

/// Enumerable models used by the chain tests.
pub fn cases() -> Vec<Case> {
    let one = super::one_level();
    let two = super::generic();
    vec![
        build(
            "gemv-2x1",
            OpSpec::gemv(2, 1).unwrap(),
            one.clone(),
            moves(&[1], 2),
            false,
        ),
        build(
            "gemm-4",
            OpSpec::gemm(4, 4, 4).unwrap(),
            one.clone(),
            moves(&[1, 2, 4], 2),
            true,
        ),
        build(
            "gemm-8",
            OpSpec::gemm(8, 8, 8).unwrap(),
            one.clone(),
            moves(&[1, 2], 2),
            false,
        ),
        build(
            "gemv-8",
            OpSpec::gemv(8, 8).unwrap(),
            one.clone(),
            moves(&[1, 2], 4),
            true,
        ),
        build(
            "conv-small",
            OpSpec::conv2d([1, 2, 6, 6], [2, 2, 3, 3], 1).unwrap(),
            one.clone(),
            moves(&[1, 2, 4], 2),
            true,
        ),
        build(
            "pool-small",
            OpSpec::avgpool2d([1, 2, 8, 8], 2, 2).unwrap(),
            one,
            moves(&[1, 2], 4),
            true,
        ),
        build(
            "gemm-4-two-level",
            OpSpec::gemm(4, 4, 4).unwrap(),
            two,
            moves(&[1, 2], 2),
            false,
        ),
    ]
}

/// Edges of the level-restricted chain: non-Cache, target at the same level
/// and fitting.
pub fn restricted_edges(model: &ChainModel, i: usize) -> Vec<(usize, f64)> {
    let key = |j: usize| {
        let s = &model.states[j];
        let c = s.cur_mem_level();
        (
            c,
            s.etiles()
                .iter()
                .map(|t| t[..c].to_vec())
                .collect::<Vec<_>>(),
        )
    };
    let here = key(i);
    model.transitions[i]
        .iter()
        .filter(|t| {
            t.action
                .as_ref()
                .is_some_and(|a| a.kind != ActionKind::Cache)
                && model.fits[t.to]
                && key(t.to) == here
        })
        .map(|t| (t.to, t.prob))
        .collect()
}

pub fn restricted_graph(model: &ChainModel) -> Vec<Vec<(usize, f64)>> {
    (0..model.len())
        .map(|i| restricted_edges(model, i))
        .collect()
}

fn sweep(adj: &[Vec<usize>], from: usize) -> HashSet<usize> {
    let mut seen = HashSet::from([from]);
    let mut stack = vec![from];
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if seen.insert(v) {
                stack.push(v);
            }
        }
    }
    seen
}

/// Strong connectivity of `group`: everything reachable from its first state
/// forwards and backwards.
pub fn strongly_connected(graph: &[Vec<(usize, f64)>], group: &[usize]) -> bool {
    let fwd: Vec<Vec<usize>> = graph
        .iter()
        .map(|e| e.iter().map(|x| x.0).collect())
        .collect();
    let mut bwd = vec![Vec::new(); graph.len()];
    for (u, edges) in graph.iter().enumerate() {
        for &(v, _) in edges {
            bwd[v].push(u);
        }
    }
    let Some(&root) = group.first() else {
        return true;
    };
    let (f, b) = (sweep(&fwd, root), sweep(&bwd, root));
    group.iter().all(|v| f.contains(v) && b.contains(v))
}

/// gcd of the lengths of closed walks up to `max_len` through `start`,
/// found by stepping the set of walk endpoints.
pub fn return_gcd(graph: &[Vec<(usize, f64)>], start: usize, max_len: usize) -> u64 {
    let mut cur: HashSet<usize> = HashSet::from([start]);
    let mut g = 0u64;
    for len in 1..=max_len {
        let next: HashSet<usize> = cur
            .iter()
            .flat_map(|&u| graph[u].iter().map(|e| e.0))
            .collect();
        if next.contains(&start) {
            g = gcd(g, len as u64);
        }
        cur = next;
    }
    g
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Stationary vector of the row-renormalized restricted chain on `group`,
/// by a direct linear solve of `pi (P - I) = 0, sum pi = 1`.
pub fn solve_stationary(graph: &[Vec<(usize, f64)>], group: &[usize]) -> Vec<f64> {
    let n = group.len();
    let pos: std::collections::HashMap<usize, usize> =
        group.iter().enumerate().map(|(k, &g)| (g, k)).collect();
    let mut p = DMatrix::<f64>::zeros(n, n);
    for (r, &i) in group.iter().enumerate() {
        let edges = &graph[i];
        let total: f64 = edges.iter().map(|e| e.1).sum();
        for &(j, w) in edges {
            p[(r, pos[&j])] += w / total;
        }
    }
    let mut a = p.transpose() - DMatrix::<f64>::identity(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for c in 0..n {
        a[(n - 1, c)] = 1.0;
    }
    b[n - 1] = 1.0;
    let x = a.lu().solve(&b).expect("singular stationary system");
    x.iter().copied().collect()
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

/// Best payoff from `start`: max over absorbing states of the largest path
/// probability product times the terminal value (Dijkstra on -ln p).
pub fn best_payoff(model: &ChainModel, terminal: &[Option<f64>], start: usize) -> f64 {
    let mut dist = vec![f64::INFINITY; model.len()];
    dist[start] = 0.0;
    let mut heap = BinaryHeap::from([Entry(0.0, start)]);
    while let Some(Entry(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for t in &model.transitions[u] {
            if t.action.is_none() {
                continue;
            }
            let nd = d - t.prob.ln();
            if nd < dist[t.to] {
                dist[t.to] = nd;
                heap.push(Entry(nd, t.to));
            }
        }
    }
    (0..model.len())
        .filter_map(|j| terminal[j].map(|v| (-dist[j]).exp() * v))
        .fold(0.0, f64::max)
}

/// Same quantity by enumerating every simple path (tiny models only).
pub fn best_payoff_exhaustive(model: &ChainModel, terminal: &[Option<f64>], start: usize) -> f64 {
    fn go(
        model: &ChainModel,
        terminal: &[Option<f64>],
        u: usize,
        prob: f64,
        on_path: &mut Vec<bool>,
    ) -> f64 {
        if let Some(v) = terminal[u] {
            return prob * v;
        }
        let mut best = 0.0f64;
        on_path[u] = true;
        for t in &model.transitions[u] {
            if !on_path[t.to] {
                best = best.max(go(model, terminal, t.to, prob * t.prob, on_path));
            }
        }
        on_path[u] = false;
        best
    }
    go(model, terminal, start, 1.0, &mut vec![false; model.len()])
}
