//! Traffic/footprint model, the per-action benefit formulas and the final
//! analytical cost estimate.
//!
//! Traffic `Q` at level `l` counts elements moved from level `l - 1` into
//! level `l` over the whole program, in the padded iteration domain:
//!
//! * every input tensor is re-loaded by every level-`l` tile instance (no reuse
//!   across tile instances),
//! * output tensors are written once, at reduction completion.
//!
//! The footprint `F` is the element count of one level-`l` tile.
//! [`traffic_oracle`] recomputes `Q` by walking the tiled loop nest.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hardware::{HardwareSpec, MemoryLevel};
use crate::ir::{DimAccess, EtirState, IrError, TensorRole};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error("state is not complete (cur_mem_level {cur} of {levels})")]
    IncompleteState { cur: usize, levels: usize },
    #[error("{points} iteration points exceed the enumeration limit {limit}")]
    TooLargeToEnumerate { points: u64, limit: u64 },
}

/// Upper bound on iteration points [`traffic_oracle`] will walk.
pub const ORACLE_LIMIT: u64 = 1 << 20;

/// Number of level-`level` tile instances covering the padded domain.
pub fn tile_instances(state: &EtirState, level: usize) -> u64 {
    state
        .op()
        .axes()
        .iter()
        .enumerate()
        .map(|(a, axis)| axis.padded / state.tile(a, level))
        .product()
}

/// Per-tensor traffic into `level`, in `op.tensors()` order.
pub fn traffic_by_tensor(state: &EtirState, level: usize) -> Result<Vec<u64>, CostError> {
    let regions = state.tile_regions(level)?;
    let full = state.regions_at(0);
    let instances = tile_instances(state, level);
    Ok(state
        .op()
        .tensors()
        .iter()
        .zip(regions.iter().zip(&full))
        .map(|(t, (&region, &whole))| match t.role {
            TensorRole::Input => region * instances,
            TensorRole::Output => whole,
        })
        .collect())
}

/// `Q(T)` at `level`.
pub fn memory_traffic(state: &EtirState, level: usize) -> Result<u64, CostError> {
    Ok(traffic_by_tensor(state, level)?.iter().sum())
}

/// `F(T)` at `level`.
pub fn footprint(state: &EtirState, level: usize) -> Result<u64, CostError> {
    Ok(state.tile_regions(level)?.iter().sum())
}

/// Counts traffic by simulating the tiled loop nest: each input element is
/// counted once per tile instance that touches it, each output element once.
pub fn traffic_oracle(state: &EtirState, level: usize) -> Result<u64, CostError> {
    let op = state.op();
    state.tile_regions(level)?;
    let points = op.padded_points();
    if points > ORACLE_LIMIT {
        return Err(CostError::TooLargeToEnumerate {
            points,
            limit: ORACLE_LIMIT,
        });
    }
    let padded = op.padded_extents();
    let tiles = state.tiles_at(level);
    let counts: Vec<u64> = padded.iter().zip(&tiles).map(|(p, t)| p / t).collect();

    struct Buffer {
        dims: Vec<(DimAccess, u64)>,
        input: bool,
        stamp: Vec<u32>,
    }
    let mut buffers: Vec<Buffer> = op
        .tensors()
        .iter()
        .map(|t| {
            let dims: Vec<(DimAccess, u64)> = t
                .dims
                .iter()
                .map(|&d| {
                    let extent = match d {
                        DimAccess::Axis(a) => padded[a],
                        DimAccess::Window {
                            outer,
                            inner,
                            stride,
                        } => (padded[outer] - 1) * stride + padded[inner],
                    };
                    (d, extent)
                })
                .collect();
            let size: u64 = dims.iter().map(|(_, e)| e).product();
            Buffer {
                dims,
                input: t.role == TensorRole::Input,
                stamp: vec![0; size as usize],
            }
        })
        .collect();

    let n = padded.len();
    let mut total = 0u64;
    let mut tile_idx = vec![0u64; n];
    let mut offset = vec![0u64; n];
    let mut point = vec![0u64; n];
    let mut instance: u32 = 0;
    loop {
        instance += 1;
        offset.iter_mut().for_each(|o| *o = 0);
        loop {
            for a in 0..n {
                point[a] = tile_idx[a] * tiles[a] + offset[a];
            }
            for buf in &mut buffers {
                let mut flat = 0u64;
                for &(d, extent) in &buf.dims {
                    let i = match d {
                        DimAccess::Axis(a) => point[a],
                        DimAccess::Window {
                            outer,
                            inner,
                            stride,
                        } => point[outer] * stride + point[inner],
                    };
                    flat = flat * extent + i;
                }
                let slot = &mut buf.stamp[flat as usize];
                if buf.input {
                    if *slot != instance {
                        *slot = instance;
                        total += 1;
                    }
                } else if *slot == 0 {
                    *slot = 1;
                    total += 1;
                }
            }
            if !advance(&mut offset, &tiles) {
                break;
            }
        }
        if !advance(&mut tile_idx, &counts) {
            break;
        }
    }
    Ok(total)
}

/// Odometer increment, last digit fastest. Returns false on wrap-around.
fn advance(digits: &mut [u64], limits: &[u64]) -> bool {
    for i in (0..digits.len()).rev() {
        digits[i] += 1;
        if digits[i] < limits[i] {
            return true;
        }
        digits[i] = 0;
    }
    false
}

/// `Q(T) F(T') / (Q(T') F(T))` at `level`.
pub fn benefit_tiling(
    before: &EtirState,
    after: &EtirState,
    level: usize,
) -> Result<f64, CostError> {
    let (q, q2) = (
        memory_traffic(before, level)? as f64,
        memory_traffic(after, level)? as f64,
    );
    let (f, f2) = (
        footprint(before, level)? as f64,
        footprint(after, level)? as f64,
    );
    Ok((q * f2) / (q2 * f))
}

/// `(L_low + S/B_low) / (L_high + S/B_high)`.
pub fn caching_ratio(low: &MemoryLevel, high: &MemoryLevel, s_bytes: f64) -> f64 {
    (low.latency_cycles + s_bytes / low.bandwidth_bytes_per_cycle)
        / (high.latency_cycles + s_bytes / high.bandwidth_bytes_per_cycle)
}

/// Caching benefit of moving one tile's working set from `from_level` to
/// `to_level = from_level + 1`.
pub fn benefit_caching(
    state: &EtirState,
    hw: &HardwareSpec,
    from_level: usize,
    to_level: usize,
) -> f64 {
    debug_assert_eq!(to_level, from_level + 1);
    let s_bytes = (state.footprint_elems(to_level) * state.op().dtype_bytes() as u64) as f64;
    caching_ratio(hw.level(from_level), hw.level(to_level), s_bytes)
}

/// `ceil(x/W) / ceil(x/(V W))`; 1 for unbanked storage.
pub fn vthread_ratio(x: u64, bank_width: u64, v: u64) -> f64 {
    if bank_width == 0 {
        return 1.0;
    }
    let conflicts = x.div_ceil(bank_width);
    let with_v = x.div_ceil(v * bank_width);
    conflicts as f64 / with_v as f64
}

/// Bank-conflict reduction from running `v` vthreads along `axis`, evaluated
/// on the tile width at the deepest banked level.
pub fn benefit_vthread(state: &EtirState, hw: &HardwareSpec, axis: usize, v: u64) -> f64 {
    match hw.banked_level() {
        Some(level) if level <= state.num_level() => {
            let w = hw.level(level).bank_width_elems as u64;
            vthread_ratio(state.tile(axis, level), w, v)
        }
        _ => 1.0,
    }
}

/// Shared-memory efficiency used by the compute estimate: the inverse of the
/// remaining bank conflicts per spatial axis, clamped to `[0.1, 1]`.
pub fn utilization(state: &EtirState, hw: &HardwareSpec) -> f64 {
    let Some(level) = hw.banked_level().filter(|&l| l <= state.num_level()) else {
        return 1.0;
    };
    let w = hw.level(level).bank_width_elems as u64;
    let raw: f64 = state
        .op()
        .spatial_axes()
        .map(|a| {
            let remaining = state.tile(a, level).div_ceil(state.vthread(a) * w);
            1.0 / remaining as f64
        })
        .product();
    raw.clamp(0.1, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTime {
    pub level: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub est_seconds: f64,
    pub memory_seconds: Vec<LevelTime>,
    pub compute_seconds: f64,
    pub utilization: f64,
    pub bottleneck: String,
}

/// Roofline-style estimate of a complete schedule: the max of the compute
/// time and the time to stream each level's traffic through the bandwidth of
/// the level it comes from.
pub fn estimate_cost(state: &EtirState, hw: &HardwareSpec) -> Result<CostEstimate, CostError> {
    if !state.is_complete() {
        return Err(CostError::IncompleteState {
            cur: state.cur_mem_level(),
            levels: state.num_level(),
        });
    }
    let bytes = state.op().dtype_bytes() as f64;
    let seconds = |elems: u64, source: usize| {
        elems as f64 * bytes / hw.level(source).bandwidth_bytes_per_cycle / hw.clock_hz
    };
    let memory_seconds: Vec<LevelTime> = if state.num_level() == 0 {
        vec![LevelTime {
            level: hw.level(0).name.clone(),
            seconds: seconds(state.footprint_elems(0), 0),
        }]
    } else {
        (1..=state.num_level())
            .map(|l| {
                Ok(LevelTime {
                    level: hw.level(l - 1).name.clone(),
                    seconds: seconds(memory_traffic(state, l)?, l - 1),
                })
            })
            .collect::<Result<_, CostError>>()?
    };
    let util = utilization(state, hw);
    let compute_seconds = state.op().flops() / hw.peak_flops / util;
    let mut est = compute_seconds;
    let mut bottleneck = "compute".to_string();
    for t in &memory_seconds {
        if t.seconds > est {
            est = t.seconds;
            bottleneck = t.level.clone();
        }
    }
    Ok(CostEstimate {
        est_seconds: est,
        memory_seconds,
        compute_seconds,
        utilization: util,
        bottleneck,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorTraffic {
    pub tensor: String,
    pub region_elems: u64,
    pub traffic_elems: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelTraffic {
    pub level: usize,
    pub name: String,
    pub traffic_elems: u64,
    pub footprint_elems: u64,
    pub tensors: Vec<TensorTraffic>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrafficReport {
    pub levels: Vec<LevelTraffic>,
}

pub fn traffic_report(state: &EtirState, hw: &HardwareSpec) -> Result<TrafficReport, CostError> {
    let mut levels = Vec::new();
    for l in 1..=state.num_level() {
        let regions = state.tile_regions(l)?;
        let traffic = traffic_by_tensor(state, l)?;
        let tensors = state
            .op()
            .tensors()
            .iter()
            .zip(regions.iter().zip(&traffic))
            .map(|(t, (&r, &q))| TensorTraffic {
                tensor: t.name.clone(),
                region_elems: r,
                traffic_elems: q,
            })
            .collect();
        levels.push(LevelTraffic {
            level: l,
            name: hw.level(l).name.clone(),
            traffic_elems: traffic.iter().sum(),
            footprint_elems: regions.iter().sum(),
            tensors,
        });
    }
    Ok(TrafficReport { levels })
}
