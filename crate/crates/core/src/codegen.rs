//! Lowering of complete schedules to explicit loop nests, an interpreter for
//! them, naive references, and C source emission.

use std::fmt::Write as _;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::ir::{AxisKind, DimAccess, EtirState, OpShape, OpSpec, TensorRole};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodegenError {
    #[error("state is incomplete (level {cur} of {levels})")]
    IncompleteState { cur: usize, levels: usize },
    #[error("shape mismatch for `{tensor}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("expected {expected} input tensors, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("{points} iteration points exceed the interpreter limit {limit}")]
    TooLarge { points: u64, limit: u64 },
}

/// Largest padded iteration space the interpreter accepts.
pub const INTERPRET_LIMIT: u64 = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoopKind {
    TileOuter,
    VThread,
    Unrolled,
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Loop {
    pub axis: usize,
    pub name: String,
    /// Tile level for tile loops, `num_level + 1` for vthread and scalar loops.
    pub level: usize,
    pub extent: u64,
    /// Contribution of one step of this loop to the axis index.
    pub stride: u64,
    pub kind: LoopKind,
}

/// `idx < extent` for an axis whose extent was padded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Guard {
    pub axis: usize,
    pub name: String,
    pub extent: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopProgram {
    pub op: OpSpec,
    pub loops: Vec<Loop>,
    pub guards: Vec<Guard>,
    pub vthreads: Vec<u64>,
    /// Tiles per axis, outermost level first.
    pub tiles: Vec<Vec<u64>>,
}

impl LoopProgram {
    /// Product of loop extents along one axis.
    pub fn axis_extent(&self, axis: usize) -> u64 {
        self.loops
            .iter()
            .filter(|l| l.axis == axis)
            .map(|l| l.extent)
            .product()
    }

    pub fn iteration_points(&self) -> u64 {
        self.loops.iter().map(|l| l.extent).product()
    }

    /// Points skipped by the guards.
    pub fn guarded_points(&self) -> u64 {
        let true_points: u64 = self.op.axes().iter().map(|a| a.extent).product();
        self.iteration_points() - true_points
    }
}

const UNROLL_MAX: u64 = 16;

pub fn lower(state: &EtirState) -> Result<LoopProgram, CodegenError> {
    if !state.is_complete() {
        return Err(CodegenError::IncompleteState {
            cur: state.cur_mem_level(),
            levels: state.num_level(),
        });
    }
    let op = state.op();
    let levels = state.num_level();
    let order: Vec<usize> = op.spatial_axes().chain(op.reduce_axes()).collect();
    let mut loops = Vec::new();
    for level in 1..=levels {
        for &a in &order {
            let extent = state.tile(a, level - 1) / state.tile(a, level);
            if extent > 1 {
                loops.push(Loop {
                    axis: a,
                    name: op.axes()[a].name.clone(),
                    level,
                    extent,
                    stride: state.tile(a, level),
                    kind: LoopKind::TileOuter,
                });
            }
        }
    }
    for &a in &order {
        let v = state.vthread(a);
        if v > 1 {
            loops.push(Loop {
                axis: a,
                name: op.axes()[a].name.clone(),
                level: levels + 1,
                extent: v,
                stride: 1,
                kind: LoopKind::VThread,
            });
        }
    }
    for &a in &order {
        let v = state.vthread(a);
        let extent = state.innermost_tile(a) / v;
        loops.push(Loop {
            axis: a,
            name: op.axes()[a].name.clone(),
            level: levels + 1,
            extent,
            stride: v,
            kind: if extent <= UNROLL_MAX {
                LoopKind::Unrolled
            } else {
                LoopKind::Scalar
            },
        });
    }
    let guards = op
        .axes()
        .iter()
        .enumerate()
        .filter(|(_, ax)| ax.is_padded())
        .map(|(a, ax)| Guard {
            axis: a,
            name: ax.name.clone(),
            extent: ax.extent,
        })
        .collect();
    Ok(LoopProgram {
        op: op.clone(),
        loops,
        guards,
        vthreads: state.ev_threads().to_vec(),
        tiles: state.etiles().to_vec(),
    })
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Copy> Tensor<T> {
    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// Shapes of the input tensors, in access-map order.
pub fn input_shapes(op: &OpSpec) -> Vec<(String, Vec<usize>)> {
    tensor_shapes(op)
        .into_iter()
        .filter(|(_, _, role)| *role == TensorRole::Input)
        .map(|(n, s, _)| (n, s))
        .collect()
}

pub fn output_shape(op: &OpSpec) -> Vec<usize> {
    tensor_shapes(op)
        .into_iter()
        .find(|t| t.2 == TensorRole::Output)
        .map(|t| t.1)
        .unwrap()
}

fn tensor_shapes(op: &OpSpec) -> Vec<(String, Vec<usize>, TensorRole)> {
    let u = |x: u64| x as usize;
    let shape_of = |name: &str| -> Vec<usize> {
        match (op.shape(), name) {
            (
                OpShape::Conv2d {
                    batch,
                    in_channels,
                    height,
                    width,
                    ..
                },
                "I",
            )
            | (
                OpShape::Avgpool2d {
                    batch,
                    channels: in_channels,
                    height,
                    width,
                    ..
                },
                "I",
            ) => {
                vec![u(*batch), u(*in_channels), u(*height), u(*width)]
            }
            (
                OpShape::Conv2d {
                    out_channels,
                    in_channels,
                    kernel_h,
                    kernel_w,
                    ..
                },
                "K",
            ) => {
                vec![
                    u(*out_channels),
                    u(*in_channels),
                    u(*kernel_h),
                    u(*kernel_w),
                ]
            }
            _ => vec![],
        }
    };
    op.tensors()
        .iter()
        .map(|t| {
            let mut shape = shape_of(&t.name);
            if shape.is_empty() {
                shape = t
                    .dims
                    .iter()
                    .map(|d| match *d {
                        DimAccess::Axis(a) => u(op.axes()[a].extent),
                        DimAccess::Window {
                            outer,
                            inner,
                            stride,
                        } => u((op.axes()[outer].extent - 1) * stride + op.axes()[inner].extent),
                    })
                    .collect();
            }
            (t.name.clone(), shape, t.role)
        })
        .collect()
}

/// Uniform values in `[-1, 1)` for every input, deterministic in `seed`.
pub fn random_inputs(op: &OpSpec, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    input_shapes(op)
        .into_iter()
        .map(|(_, shape)| {
            let n = shape.iter().product();
            Tensor {
                shape,
                data: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            }
        })
        .collect()
}

fn check_inputs<T>(
    op: &OpSpec,
    inputs: &[Tensor<T>],
    init: Option<&Tensor<T>>,
) -> Result<(), CodegenError> {
    let shapes = input_shapes(op);
    if shapes.len() != inputs.len() {
        return Err(CodegenError::InputCount {
            expected: shapes.len(),
            got: inputs.len(),
        });
    }
    for ((name, expected), t) in shapes.iter().zip(inputs) {
        if *expected != t.shape {
            return Err(CodegenError::ShapeMismatch {
                tensor: name.clone(),
                expected: expected.clone(),
                got: t.shape.clone(),
            });
        }
    }
    if let Some(c) = init {
        let expected = output_shape(op);
        if c.shape != expected {
            return Err(CodegenError::ShapeMismatch {
                tensor: "init".into(),
                expected,
                got: c.shape.clone(),
            });
        }
    }
    Ok(())
}

/// Scale applied to each product, and the weight of the initial output.
fn body_scales(op: &OpSpec) -> (f64, f64) {
    match op.shape() {
        OpShape::Avgpool2d { window, .. } => (1.0 / (window * window) as f64, 0.0),
        OpShape::Conv2d { .. } => (1.0, 0.0),
        _ => (op.alpha(), op.beta()),
    }
}

/// Executes the loop nest. `init` seeds the output for a nonzero beta.
pub fn interpret<T: Float>(
    prog: &LoopProgram,
    inputs: &[Tensor<T>],
    init: Option<&Tensor<T>>,
) -> Result<Tensor<T>, CodegenError> {
    let op = &prog.op;
    check_inputs(op, inputs, init)?;
    let points = prog.iteration_points();
    if points > INTERPRET_LIMIT {
        return Err(CodegenError::TooLarge {
            points,
            limit: INTERPRET_LIMIT,
        });
    }
    let (scale, beta) = body_scales(op);
    let scale = T::from(scale).unwrap();
    let beta = T::from(beta).unwrap();
    let reduce: Vec<usize> = op.reduce_axes().collect();
    let accesses: Vec<_> = op.tensors().iter().collect();
    let out_access = accesses
        .iter()
        .find(|t| t.role == TensorRole::Output)
        .unwrap();
    let in_access: Vec<_> = accesses
        .iter()
        .filter(|t| t.role == TensorRole::Input)
        .collect();
    let mut out = Tensor::filled(output_shape(op), T::zero());

    let naxes = op.axes().len();
    let mut counters = vec![0u64; prog.loops.len()];
    let mut idx = vec![0usize; naxes];
    let mut tidx = Vec::with_capacity(4);
    'outer: loop {
        idx.iter_mut().for_each(|x| *x = 0);
        for (l, &c) in prog.loops.iter().zip(&counters) {
            idx[l.axis] += (c * l.stride) as usize;
        }
        let guarded = prog.guards.iter().any(|g| idx[g.axis] as u64 >= g.extent);
        if !guarded {
            let element = |t: &crate::ir::TensorAccess, tidx: &mut Vec<usize>| {
                tidx.clear();
                for d in &t.dims {
                    tidx.push(match *d {
                        DimAccess::Axis(a) => idx[a],
                        DimAccess::Window {
                            outer,
                            inner,
                            stride,
                        } => idx[outer] * stride as usize + idx[inner],
                    });
                }
            };
            let mut prod = scale;
            for (t, data) in in_access.iter().zip(inputs) {
                element(t, &mut tidx);
                prod = prod * data.at(&tidx);
            }
            element(out_access, &mut tidx);
            let o = out.offset(&tidx);
            if reduce.iter().all(|&r| idx[r] == 0) {
                out.data[o] = match init {
                    Some(c) if beta != T::zero() => beta * c.data[o],
                    _ => T::zero(),
                };
            }
            out.data[o] = out.data[o] + prod;
        }
        for k in (0..counters.len()).rev() {
            counters[k] += 1;
            if counters[k] < prog.loops[k].extent {
                continue 'outer;
            }
            counters[k] = 0;
        }
        break;
    }
    Ok(out)
}

/// Naive evaluation of the defining formula of each operator.
pub fn reference_compute(
    op: &OpSpec,
    inputs: &[Tensor<f64>],
    init: Option<&Tensor<f64>>,
) -> Result<Tensor<f64>, CodegenError> {
    check_inputs(op, inputs, init)?;
    let mut out = Tensor::filled(output_shape(op), 0.0);
    let seed = |o: usize| init.map_or(0.0, |c| op.beta() * c.data[o]);
    match *op.shape() {
        OpShape::Gemm { m, k, n } => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let (m, k, n) = (m as usize, k as usize, n as usize);
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a.data[i * k + p] * b.data[p * n + j];
                    }
                    out.data[i * n + j] = op.alpha() * acc + seed(i * n + j);
                }
            }
        }
        OpShape::Gemv { m, n } => {
            let (a, x) = (&inputs[0], &inputs[1]);
            let (m, n) = (m as usize, n as usize);
            for i in 0..m {
                let acc: f64 = (0..n).map(|j| a.data[i * n + j] * x.data[j]).sum();
                out.data[i] = op.alpha() * acc + seed(i);
            }
        }
        OpShape::Conv2d { .. } => {
            let (inp, ker) = (&inputs[0], &inputs[1]);
            let s = stride_of(op);
            let [nb, f, oh, ow] = dims4(&out.shape);
            let [_, c, r, q] = dims4(&ker.shape);
            for b in 0..nb {
                for fo in 0..f {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..c {
                                for dy in 0..r {
                                    for dx in 0..q {
                                        acc += inp.at(&[b, ci, y * s + dy, x * s + dx])
                                            * ker.at(&[fo, ci, dy, dx]);
                                    }
                                }
                            }
                            let o = out.offset(&[b, fo, y, x]);
                            out.data[o] = acc;
                        }
                    }
                }
            }
        }
        OpShape::Avgpool2d { window, .. } => {
            let inp = &inputs[0];
            let s = stride_of(op);
            let w = window as usize;
            let [nb, c, oh, ow] = dims4(&out.shape);
            for b in 0..nb {
                for ci in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut acc = 0.0;
                            for dy in 0..w {
                                for dx in 0..w {
                                    acc += inp.at(&[b, ci, y * s + dy, x * s + dx]);
                                }
                            }
                            let o = out.offset(&[b, ci, y, x]);
                            out.data[o] = acc / (w * w) as f64;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn stride_of(op: &OpSpec) -> usize {
    match *op.shape() {
        OpShape::Conv2d { stride, .. } | OpShape::Avgpool2d { stride, .. } => stride as usize,
        _ => 1,
    }
}

fn dims4(shape: &[usize]) -> [usize; 4] {
    [shape[0], shape[1], shape[2], shape[3]]
}

/// `max |a - b| / max |b|` (absolute when `b` is all zeros).
pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = b.data.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Lowers, interprets on random inputs and compares against the reference.
/// Returns the relative error.
pub fn check_schedule(state: &EtirState, seed: u64, single: bool) -> Result<f64, CodegenError> {
    let prog = lower(state)?;
    let inputs = random_inputs(state.op(), seed);
    let init = if state.op().beta() != 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let shape = output_shape(state.op());
        let n = shape.iter().product();
        Some(Tensor {
            shape,
            data: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        })
    } else {
        None
    };
    let expected = reference_compute(state.op(), &inputs, init.as_ref())?;
    let got = if single {
        let inputs32: Vec<_> = inputs.iter().map(|t| t.map(|x| x as f32)).collect();
        let init32 = init.as_ref().map(|t| t.map(|x| x as f32));
        interpret(&prog, &inputs32, init32.as_ref())?.map(|x| x as f64)
    } else {
        interpret(&prog, &inputs, init.as_ref())?
    };
    Ok(relative_error(&got, &expected))
}

fn index_expr(prog: &LoopProgram, axis: usize) -> String {
    let terms: Vec<String> = prog
        .loops
        .iter()
        .enumerate()
        .filter(|(_, l)| l.axis == axis)
        .map(|(i, l)| {
            if l.stride == 1 {
                format!("i{i}")
            } else {
                format!("i{i} * {}", l.stride)
            }
        })
        .collect();
    terms.join(" + ")
}

fn c_index(prog: &LoopProgram, t: &crate::ir::TensorAccess, shape: &[usize]) -> String {
    let dims: Vec<String> = t
        .dims
        .iter()
        .map(|d| match *d {
            DimAccess::Axis(a) => prog.op.axes()[a].name.clone(),
            DimAccess::Window {
                outer,
                inner,
                stride,
            } => {
                format!(
                    "({} * {stride} + {})",
                    prog.op.axes()[outer].name,
                    prog.op.axes()[inner].name
                )
            }
        })
        .collect();
    let mut expr = dims[0].clone();
    for (d, size) in dims.iter().zip(shape).skip(1) {
        expr = format!("({expr}) * {size} + {d}");
    }
    expr
}

/// C99 source for the loop nest. Deterministic for a given program.
pub fn emit_source(prog: &LoopProgram) -> String {
    let op = &prog.op;
    let shapes = tensor_shapes(op);
    let mut s = String::new();
    let _ = writeln!(s, "/* {} ({})", op.label(), op.kind().as_str());
    for (a, ax) in op.axes().iter().enumerate() {
        let kind = if ax.kind == AxisKind::Spatial {
            "spatial"
        } else {
            "reduce"
        };
        let _ = writeln!(
            s,
            " * axis {}: extent {} padded {} {kind} tiles {:?} vthread {}",
            ax.name, ax.extent, ax.padded, prog.tiles[a], prog.vthreads[a]
        );
    }
    let _ = writeln!(s, " */");
    let params: Vec<String> = shapes
        .iter()
        .map(|(name, _, role)| match role {
            TensorRole::Input => format!("const double *restrict {name}"),
            TensorRole::Output => format!("double *restrict {name}"),
        })
        .collect();
    let _ = writeln!(s, "void kernel({}) {{", params.join(", "));
    let mut depth = 1;
    let pad = |d: usize| "  ".repeat(d);
    for (i, l) in prog.loops.iter().enumerate() {
        if l.kind == LoopKind::Unrolled {
            let _ = writeln!(s, "{}#pragma unroll", pad(depth));
        }
        let tag = match l.kind {
            LoopKind::TileOuter => format!("tile L{}", l.level),
            LoopKind::VThread => "vthread".into(),
            LoopKind::Unrolled | LoopKind::Scalar => "scalar".into(),
        };
        let _ = writeln!(
            s,
            "{}for (long i{i} = 0; i{i} < {}; ++i{i}) {{ /* {} {tag} */",
            pad(depth),
            l.extent,
            l.name
        );
        depth += 1;
    }
    for (a, ax) in op.axes().iter().enumerate() {
        let _ = writeln!(
            s,
            "{}const long {} = {};",
            pad(depth),
            ax.name,
            index_expr(prog, a)
        );
    }
    if !prog.guards.is_empty() {
        let preds: Vec<String> = prog
            .guards
            .iter()
            .map(|g| format!("!({} < {})", g.name, g.extent))
            .collect();
        let _ = writeln!(s, "{}if ({}) continue;", pad(depth), preds.join(" || "));
    }
    let (scale, beta) = body_scales(op);
    let out = op
        .tensors()
        .iter()
        .zip(&shapes)
        .find(|(t, _)| t.role == TensorRole::Output)
        .unwrap();
    let out_idx = c_index(prog, out.0, &out.1 .1);
    let reduce: Vec<String> = op
        .reduce_axes()
        .map(|r| format!("{} == 0", op.axes()[r].name))
        .collect();
    let init = if beta != 0.0 {
        format!("{} * {}[{out_idx}]", fmt_f64(beta), out.0.name)
    } else {
        "0.0".into()
    };
    if !reduce.is_empty() {
        let _ = writeln!(
            s,
            "{}if ({}) {}[{out_idx}] = {init};",
            pad(depth),
            reduce.join(" && "),
            out.0.name
        );
    }
    let factors: Vec<String> = op
        .tensors()
        .iter()
        .zip(&shapes)
        .filter(|(t, _)| t.role == TensorRole::Input)
        .map(|(t, sh)| format!("{}[{}]", t.name, c_index(prog, t, &sh.1)))
        .collect();
    let rhs = if scale == 1.0 {
        factors.join(" * ")
    } else {
        format!("{} * {}", fmt_f64(scale), factors.join(" * "))
    };
    let _ = writeln!(s, "{}{}[{out_idx}] += {rhs};", pad(depth), out.0.name);
    while depth > 0 {
        depth -= 1;
        let _ = writeln!(s, "{}}}", pad(depth));
    }
    s
}

fn fmt_f64(x: f64) -> String {
    let t = format!("{x:?}");
    if t.contains('.') || t.contains('e') {
        t
    } else {
        format!("{t}.0")
    }
}
