//! Schedule search over tiled tensor programs.
//!
//! [`ir`] describes operators and schedule states, [`hardware`] the memory
//! hierarchy, [`cost`] the analytical traffic and latency model. Schedules
//! are found by the annealed graph traversal in [`engine`] or the beam
//! baseline in [`tree`]; [`markov`] analyzes the traversal as a chain and
//! [`codegen`] lowers and executes a schedule.

pub mod codegen;
pub mod cost;
pub mod engine;
pub mod hardware;
pub mod ir;
pub mod markov;
pub mod tree;

pub use cost::{estimate_cost, CostError, CostEstimate};
pub use engine::{optimize, EngineConfig, EngineError, ScheduleResult};
pub use hardware::{load_hardware_spec, HardwareError, HardwareSpec};
pub use ir::{parse_op_spec, Action, EtirState, IrError, OpSpec};
