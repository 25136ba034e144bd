//! Declarative memory/compute hierarchy.
//!
//! Level 0 is the memory farthest from compute (global memory); each later
//! level is smaller and faster. A hierarchy with `n` levels exposes `n - 1`
//! schedulable tile levels.

use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::EtirState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HardwareError {
    #[error("monotonicity violation: {0}")]
    MonotonicityViolation(String),
    #[error("hardware spec defines no memory levels")]
    MissingLevel,
    #[error("invalid hardware spec: {0}")]
    Invalid(String),
    #[error("unknown bundled profile `{0}`")]
    UnknownProfile(String),
}

/// Capacity of one level; only level 0 may be unlimited.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Capacity {
    Bytes(u64),
    Unlimited,
}

impl Capacity {
    pub fn fits(self, bytes: u64) -> bool {
        match self {
            Capacity::Bytes(cap) => bytes <= cap,
            Capacity::Unlimited => true,
        }
    }
}

impl Serialize for Capacity {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Capacity::Bytes(b) => s.serialize_u64(*b),
            Capacity::Unlimited => s.serialize_str("unlimited"),
        }
    }
}

impl<'de> Deserialize<'de> for Capacity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct CapVisitor;
        impl Visitor<'_> for CapVisitor {
            type Value = Capacity;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a positive byte count or \"unlimited\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Capacity, E> {
                if v == 0 {
                    Err(E::custom("capacity must be positive"))
                } else {
                    Ok(Capacity::Bytes(v))
                }
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Capacity, E> {
                if v <= 0 {
                    Err(E::custom("capacity must be positive"))
                } else {
                    Ok(Capacity::Bytes(v as u64))
                }
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Capacity, E> {
                if v == "unlimited" {
                    Ok(Capacity::Unlimited)
                } else {
                    Err(E::custom(format!("unknown capacity `{v}`")))
                }
            }
        }
        d.deserialize_any(CapVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryLevel {
    pub name: String,
    pub capacity_bytes: Capacity,
    pub bandwidth_bytes_per_cycle: f64,
    pub latency_cycles: f64,
    /// Bank width in elements; 0 for unbanked storage.
    #[serde(default)]
    pub bank_width_elems: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub name: String,
    pub levels: Vec<MemoryLevel>,
    pub peak_flops: f64,
    /// Converts per-cycle bandwidths into seconds.
    pub clock_hz: f64,
    pub max_threads_per_block: u32,
    pub vthread_options: Vec<u64>,
}

impl HardwareSpec {
    pub fn validate(&self) -> Result<(), HardwareError> {
        if self.levels.is_empty() {
            return Err(HardwareError::MissingLevel);
        }
        for (i, level) in self.levels.iter().enumerate() {
            if !level.bandwidth_bytes_per_cycle.is_finite()
                || level.bandwidth_bytes_per_cycle <= 0.0
            {
                return Err(HardwareError::Invalid(format!(
                    "levels[{i}].bandwidth_bytes_per_cycle must be positive"
                )));
            }
            if !level.latency_cycles.is_finite() || level.latency_cycles < 0.0 {
                return Err(HardwareError::Invalid(format!(
                    "levels[{i}].latency_cycles must be nonnegative"
                )));
            }
            if i > 0 && level.capacity_bytes == Capacity::Unlimited {
                return Err(HardwareError::MonotonicityViolation(format!(
                    "level `{}` is unlimited but only level 0 may be",
                    level.name
                )));
            }
        }
        for (i, pair) in self.levels.windows(2).enumerate() {
            let (outer, inner) = (&pair[0], &pair[1]);
            if let (Capacity::Bytes(a), Capacity::Bytes(b)) =
                (outer.capacity_bytes, inner.capacity_bytes)
            {
                if b >= a {
                    return Err(HardwareError::MonotonicityViolation(format!(
                        "levels[{}].capacity_bytes ({b}) must be smaller than levels[{i}] ({a})",
                        i + 1
                    )));
                }
            }
            if inner.bandwidth_bytes_per_cycle <= outer.bandwidth_bytes_per_cycle {
                return Err(HardwareError::MonotonicityViolation(format!(
                    "levels[{}].bandwidth_bytes_per_cycle must exceed levels[{i}]",
                    i + 1
                )));
            }
        }
        if self.peak_flops.is_nan()
            || self.peak_flops <= 0.0
            || self.clock_hz.is_nan()
            || self.clock_hz <= 0.0
        {
            return Err(HardwareError::Invalid(
                "peak_flops and clock_hz must be positive".into(),
            ));
        }
        if self.max_threads_per_block == 0 {
            return Err(HardwareError::Invalid(
                "max_threads_per_block must be positive".into(),
            ));
        }
        if self.vthread_options.is_empty()
            || self
                .vthread_options
                .iter()
                .any(|&v| v == 0 || !v.is_power_of_two())
        {
            return Err(HardwareError::Invalid(
                "vthread_options must be a nonempty list of powers of two".into(),
            ));
        }
        Ok(())
    }

    /// Number of schedulable tile levels.
    pub fn num_level(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, index: usize) -> &MemoryLevel {
        &self.levels[index]
    }

    /// Deepest schedulable level with banked storage, if any.
    pub fn banked_level(&self) -> Option<usize> {
        (1..self.levels.len())
            .rev()
            .find(|&l| self.levels[l].bank_width_elems > 0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("hardware spec serializes")
    }
}

pub fn load_hardware_spec(text: &str) -> Result<HardwareSpec, HardwareError> {
    let spec: HardwareSpec =
        serde_json::from_str(text).map_err(|e| HardwareError::Invalid(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

const GENERIC: &str = include_str!("../../../hw/generic.json");
const SERVER: &str = include_str!("../../../hw/server.json");
const EDGE: &str = include_str!("../../../hw/edge.json");

pub const BUNDLED_PROFILES: [&str; 3] = ["generic-gpu", "server-gpu-like", "edge-gpu-like"];

/// Bundled configuration defaults. These are plausible hierarchies, not
/// measurements of any particular device.
pub fn bundled(name: &str) -> Result<HardwareSpec, HardwareError> {
    let text = match name {
        "generic-gpu" => GENERIC,
        "server-gpu-like" => SERVER,
        "edge-gpu-like" => EDGE,
        other => return Err(HardwareError::UnknownProfile(other.to_string())),
    };
    load_hardware_spec(text)
}

/// True iff one tile of `state` at `level` fits that level's capacity.
/// Level 0 is checked against the whole (padded) tensors.
pub fn capacity_check(state: &EtirState, hw: &HardwareSpec, level: usize) -> bool {
    let bytes = state.footprint_elems(level) * state.op().dtype_bytes() as u64;
    hw.levels[level].capacity_bytes.fits(bytes)
}
