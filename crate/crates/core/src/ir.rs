//! Operator specifications and the tiled schedule state (ETIR).
//!
//! An [`OpSpec`] describes one of the four supported operator families as an
//! iteration domain: a list of spatial and reduce axes plus the affine access
//! map of every tensor. An [`EtirState`] is an immutable snapshot of a
//! schedule over that domain: per-axis tile sizes for every schedulable memory
//! level, per-axis virtual-thread factors and the memory level currently being
//! scheduled.
//!
//! Tile levels are numbered by the memory level they are staged into: level 1
//! is the level right below global memory, level `L` is the one closest to the
//! compute units. Tile sizes therefore shrink with the level number:
//!
//! ```text
//! padded extent >= T(1) >= T(2) >= ... >= T(L) >= vthread >= 1
//! ```
//!
//! While the state sits at `cur_mem_level = c`, tile edits target level
//! `c + 1`; the levels below it have not been scheduled yet and mirror the
//! edited level.

use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IrError {
    #[error("unknown operator kind `{0}`")]
    UnknownKind(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` must be a positive extent (got {value})")]
    NonPositiveExtent { name: String, value: i64 },
    #[error("malformed operator document: {0}")]
    Malformed(String),
    #[error("illegal action {action}: {reason}")]
    IllegalAction { action: String, reason: String },
    #[error("axis `{0}` not found")]
    AxisNotFound(String),
    #[error("level {level} out of range 1..={max}")]
    LevelOutOfRange { level: usize, max: usize },
    #[error("invalid state: {0}")]
    InvalidState(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Gemm,
    Gemv,
    Conv2d,
    Avgpool2d,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Gemm => "gemm",
            OpKind::Gemv => "gemv",
            OpKind::Conv2d => "conv2d",
            OpKind::Avgpool2d => "avgpool2d",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisKind {
    Spatial,
    Reduce,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    /// True extent of the iteration domain.
    pub extent: u64,
    /// Extent rounded up to a power of two; the scheduling domain.
    pub padded: u64,
    pub kind: AxisKind,
}

impl Axis {
    fn new(name: &str, extent: u64, kind: AxisKind) -> Self {
        Axis {
            name: name.to_string(),
            extent,
            padded: extent.next_power_of_two(),
            kind,
        }
    }

    pub fn is_spatial(&self) -> bool {
        self.kind == AxisKind::Spatial
    }

    pub fn is_padded(&self) -> bool {
        self.padded != self.extent
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorRole {
    Input,
    Output,
}

/// How one tensor dimension is indexed by the iteration axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DimAccess {
    /// `index = axis`
    Axis(usize),
    /// `index = stride * outer + inner` (sliding-window access).
    Window {
        outer: usize,
        inner: usize,
        stride: u64,
    },
}

impl DimAccess {
    /// Distinct indices touched along this dimension by a box of the given
    /// per-axis sizes.
    pub fn span(&self, sizes: &[u64]) -> u64 {
        match *self {
            DimAccess::Axis(a) => sizes[a],
            DimAccess::Window {
                outer,
                inner,
                stride,
            } => {
                let (to, ti) = (sizes[outer], sizes[inner]);
                if ti >= stride {
                    (to - 1) * stride + ti
                } else {
                    to * ti
                }
            }
        }
    }

    pub fn axes(&self) -> Vec<usize> {
        match *self {
            DimAccess::Axis(a) => vec![a],
            DimAccess::Window { outer, inner, .. } => vec![outer, inner],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TensorAccess {
    pub name: String,
    pub role: TensorRole,
    pub dims: Vec<DimAccess>,
}

impl TensorAccess {
    /// Number of distinct elements touched by a box of per-axis sizes.
    pub fn region(&self, sizes: &[u64]) -> u64 {
        self.dims.iter().map(|d| d.span(sizes)).product()
    }

    pub fn depends_on(&self, axis: usize) -> bool {
        self.dims.iter().any(|d| d.axes().contains(&axis))
    }
}

/// Operator shape parameters, in the units of the benchmark table.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum OpShape {
    Gemm {
        m: u64,
        k: u64,
        n: u64,
    },
    Gemv {
        m: u64,
        n: u64,
    },
    Conv2d {
        batch: u64,
        in_channels: u64,
        height: u64,
        width: u64,
        out_channels: u64,
        kernel_h: u64,
        kernel_w: u64,
        stride: u64,
    },
    Avgpool2d {
        batch: u64,
        channels: u64,
        height: u64,
        width: u64,
        window: u64,
        stride: u64,
    },
}

/// A validated operator: iteration axes plus tensor access maps.
#[derive(Debug, Clone, PartialEq)]
pub struct OpSpec {
    kind: OpKind,
    label: Option<String>,
    dtype_bytes: u32,
    alpha: f64,
    beta: f64,
    shape: OpShape,
    axes: Vec<Axis>,
    tensors: Vec<TensorAccess>,
}

fn window_out(input: u64, window: u64, stride: u64) -> Option<u64> {
    if input < window {
        None
    } else {
        Some((input - window) / stride + 1)
    }
}

impl OpSpec {
    pub fn new(shape: OpShape) -> Result<Self, IrError> {
        use AxisKind::{Reduce, Spatial};
        let positive = |name: &str, v: u64| {
            if v == 0 {
                Err(IrError::NonPositiveExtent {
                    name: name.into(),
                    value: 0,
                })
            } else {
                Ok(())
            }
        };
        let (kind, axes, tensors) = match shape {
            OpShape::Gemm { m, k, n } => {
                positive("M", m)?;
                positive("K", k)?;
                positive("N", n)?;
                let axes = vec![
                    Axis::new("m", m, Spatial),
                    Axis::new("n", n, Spatial),
                    Axis::new("k", k, Reduce),
                ];
                let tensors = vec![
                    tensor(
                        "A",
                        TensorRole::Input,
                        vec![DimAccess::Axis(0), DimAccess::Axis(2)],
                    ),
                    tensor(
                        "B",
                        TensorRole::Input,
                        vec![DimAccess::Axis(2), DimAccess::Axis(1)],
                    ),
                    tensor(
                        "C",
                        TensorRole::Output,
                        vec![DimAccess::Axis(0), DimAccess::Axis(1)],
                    ),
                ];
                (OpKind::Gemm, axes, tensors)
            }
            OpShape::Gemv { m, n } => {
                positive("M", m)?;
                positive("N", n)?;
                let axes = vec![Axis::new("m", m, Spatial), Axis::new("n", n, Reduce)];
                let tensors = vec![
                    tensor(
                        "A",
                        TensorRole::Input,
                        vec![DimAccess::Axis(0), DimAccess::Axis(1)],
                    ),
                    tensor("x", TensorRole::Input, vec![DimAccess::Axis(1)]),
                    tensor("y", TensorRole::Output, vec![DimAccess::Axis(0)]),
                ];
                (OpKind::Gemv, axes, tensors)
            }
            OpShape::Conv2d {
                batch,
                in_channels,
                height,
                width,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
            } => {
                for (name, v) in [
                    ("N", batch),
                    ("C", in_channels),
                    ("H", height),
                    ("W", width),
                    ("F", out_channels),
                    ("R", kernel_h),
                    ("S", kernel_w),
                    ("stride", stride),
                ] {
                    positive(name, v)?;
                }
                let oh =
                    window_out(height, kernel_h, stride).ok_or(IrError::NonPositiveExtent {
                        name: "OH".into(),
                        value: 0,
                    })?;
                let ow = window_out(width, kernel_w, stride).ok_or(IrError::NonPositiveExtent {
                    name: "OW".into(),
                    value: 0,
                })?;
                let axes = vec![
                    Axis::new("n", batch, Spatial),
                    Axis::new("f", out_channels, Spatial),
                    Axis::new("oh", oh, Spatial),
                    Axis::new("ow", ow, Spatial),
                    Axis::new("c", in_channels, Reduce),
                    Axis::new("r", kernel_h, Reduce),
                    Axis::new("s", kernel_w, Reduce),
                ];
                let tensors = vec![
                    tensor(
                        "I",
                        TensorRole::Input,
                        vec![
                            DimAccess::Axis(0),
                            DimAccess::Axis(4),
                            DimAccess::Window {
                                outer: 2,
                                inner: 5,
                                stride,
                            },
                            DimAccess::Window {
                                outer: 3,
                                inner: 6,
                                stride,
                            },
                        ],
                    ),
                    tensor(
                        "K",
                        TensorRole::Input,
                        vec![
                            DimAccess::Axis(1),
                            DimAccess::Axis(4),
                            DimAccess::Axis(5),
                            DimAccess::Axis(6),
                        ],
                    ),
                    tensor(
                        "O",
                        TensorRole::Output,
                        vec![
                            DimAccess::Axis(0),
                            DimAccess::Axis(1),
                            DimAccess::Axis(2),
                            DimAccess::Axis(3),
                        ],
                    ),
                ];
                (OpKind::Conv2d, axes, tensors)
            }
            OpShape::Avgpool2d {
                batch,
                channels,
                height,
                width,
                window,
                stride,
            } => {
                for (name, v) in [
                    ("N", batch),
                    ("C", channels),
                    ("H", height),
                    ("W", width),
                    ("F", window),
                    ("S", stride),
                ] {
                    positive(name, v)?;
                }
                let oh = window_out(height, window, stride).ok_or(IrError::NonPositiveExtent {
                    name: "OH".into(),
                    value: 0,
                })?;
                let ow = window_out(width, window, stride).ok_or(IrError::NonPositiveExtent {
                    name: "OW".into(),
                    value: 0,
                })?;
                let axes = vec![
                    Axis::new("n", batch, Spatial),
                    Axis::new("c", channels, Spatial),
                    Axis::new("oh", oh, Spatial),
                    Axis::new("ow", ow, Spatial),
                    Axis::new("i", window, Reduce),
                    Axis::new("j", window, Reduce),
                ];
                let tensors = vec![
                    tensor(
                        "I",
                        TensorRole::Input,
                        vec![
                            DimAccess::Axis(0),
                            DimAccess::Axis(1),
                            DimAccess::Window {
                                outer: 2,
                                inner: 4,
                                stride,
                            },
                            DimAccess::Window {
                                outer: 3,
                                inner: 5,
                                stride,
                            },
                        ],
                    ),
                    tensor(
                        "O",
                        TensorRole::Output,
                        vec![
                            DimAccess::Axis(0),
                            DimAccess::Axis(1),
                            DimAccess::Axis(2),
                            DimAccess::Axis(3),
                        ],
                    ),
                ];
                (OpKind::Avgpool2d, axes, tensors)
            }
        };
        Ok(OpSpec {
            kind,
            label: None,
            dtype_bytes: 4,
            alpha: 1.0,
            beta: 0.0,
            shape,
            axes,
            tensors,
        })
    }

    pub fn gemm(m: u64, k: u64, n: u64) -> Result<Self, IrError> {
        Self::new(OpShape::Gemm { m, k, n })
    }

    pub fn gemv(m: u64, n: u64) -> Result<Self, IrError> {
        Self::new(OpShape::Gemv { m, n })
    }

    /// `input = [N, C, H, W]`, `kernel = [F, C, R, S]`.
    pub fn conv2d(input: [u64; 4], kernel: [u64; 4], stride: u64) -> Result<Self, IrError> {
        if input[1] != kernel[1] {
            return Err(IrError::Malformed(format!(
                "input channels {} do not match kernel channels {}",
                input[1], kernel[1]
            )));
        }
        Self::new(OpShape::Conv2d {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            out_channels: kernel[0],
            kernel_h: kernel[2],
            kernel_w: kernel[3],
            stride,
        })
    }

    /// `input = [N, C, H, W]`, square pooling window.
    pub fn avgpool2d(input: [u64; 4], window: u64, stride: u64) -> Result<Self, IrError> {
        Self::new(OpShape::Avgpool2d {
            batch: input[0],
            channels: input[1],
            height: input[2],
            width: input[3],
            window,
            stride,
        })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn with_dtype_bytes(mut self, bytes: u32) -> Self {
        self.dtype_bytes = bytes;
        self
    }

    pub fn with_scaling(mut self, alpha: f64, beta: f64) -> Self {
        self.alpha = alpha;
        self.beta = beta;
        self
    }

    pub fn kind(&self) -> OpKind {
        self.kind
    }

    pub fn shape(&self) -> &OpShape {
        &self.shape
    }

    /// Label from the document, or a generated `kind[extents]` description.
    pub fn label(&self) -> String {
        match &self.label {
            Some(l) => l.clone(),
            None => {
                let extents: Vec<String> = self.axes.iter().map(|a| a.extent.to_string()).collect();
                format!("{}[{}]", self.kind, extents.join(","))
            }
        }
    }

    pub fn dtype_bytes(&self) -> u32 {
        self.dtype_bytes
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn tensors(&self) -> &[TensorAccess] {
        &self.tensors
    }

    pub fn axis_index(&self, name: &str) -> Result<usize, IrError> {
        self.axes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| IrError::AxisNotFound(name.to_string()))
    }

    pub fn spatial_axes(&self) -> impl Iterator<Item = usize> + '_ {
        self.axes
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_spatial())
            .map(|(i, _)| i)
    }

    pub fn reduce_axes(&self) -> impl Iterator<Item = usize> + '_ {
        self.axes
            .iter()
            .enumerate()
            .filter(|(_, a)| !a.is_spatial())
            .map(|(i, _)| i)
    }

    pub fn padded_extents(&self) -> Vec<u64> {
        self.axes.iter().map(|a| a.padded).collect()
    }

    pub fn is_padded(&self) -> bool {
        self.axes.iter().any(Axis::is_padded)
    }

    /// Iteration points of the padded domain.
    pub fn padded_points(&self) -> u64 {
        self.axes.iter().map(|a| a.padded).product()
    }

    /// Floating-point operations of the true (unpadded) domain; one multiply
    /// and one add per point, except pooling which only adds.
    pub fn flops(&self) -> f64 {
        let points: f64 = self.axes.iter().map(|a| a.extent as f64).product();
        match self.kind {
            OpKind::Avgpool2d => points,
            _ => 2.0 * points,
        }
    }

    /// Serializes back into the operator document format.
    pub fn to_document(&self) -> Value {
        let mut doc = match self.shape {
            OpShape::Gemm { m, k, n } => json!({ "kind": "gemm", "M": m, "K": k, "N": n }),
            OpShape::Gemv { m, n } => json!({ "kind": "gemv", "M": m, "N": n }),
            OpShape::Conv2d {
                batch,
                in_channels,
                height,
                width,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
            } => json!({
                "kind": "conv2d",
                "I": [batch, in_channels, height, width],
                "K": [out_channels, in_channels, kernel_h, kernel_w],
                "S": stride,
            }),
            OpShape::Avgpool2d {
                batch,
                channels,
                height,
                width,
                window,
                stride,
            } => json!({
                "kind": "avgpool2d",
                "I": [batch, channels, height, width],
                "F": window,
                "S": stride,
            }),
        };
        let obj = doc.as_object_mut().expect("object literal");
        if let Some(label) = &self.label {
            obj.insert("label".into(), json!(label));
        }
        obj.insert("dtype_bytes".into(), json!(self.dtype_bytes));
        if matches!(self.kind, OpKind::Gemm | OpKind::Gemv) {
            obj.insert("alpha".into(), json!(self.alpha));
            obj.insert("beta".into(), json!(self.beta));
        }
        doc
    }
}

fn tensor(name: &str, role: TensorRole, dims: Vec<DimAccess>) -> TensorAccess {
    TensorAccess {
        name: name.to_string(),
        role,
        dims,
    }
}

fn get_extent(obj: &Map<String, Value>, key: &str) -> Result<u64, IrError> {
    let v = obj
        .get(key)
        .ok_or_else(|| IrError::MissingParam(key.to_string()))?;
    extent_value(key, v)
}

fn extent_value(key: &str, v: &Value) -> Result<u64, IrError> {
    match v.as_i64() {
        Some(i) if i >= 1 => Ok(i as u64),
        Some(i) => Err(IrError::NonPositiveExtent {
            name: key.to_string(),
            value: i,
        }),
        None => Err(IrError::Malformed(format!(
            "parameter `{key}` must be an integer"
        ))),
    }
}

fn get_list<const N: usize>(obj: &Map<String, Value>, key: &str) -> Result<[u64; N], IrError> {
    let v = obj
        .get(key)
        .ok_or_else(|| IrError::MissingParam(key.to_string()))?;
    let arr = v
        .as_array()
        .filter(|a| a.len() == N)
        .ok_or_else(|| IrError::Malformed(format!("`{key}` must be a list of {N} integers")))?;
    let mut out = [0u64; N];
    for (i, item) in arr.iter().enumerate() {
        out[i] = extent_value(&format!("{key}[{i}]"), item)?;
    }
    Ok(out)
}

/// Extents either as separate keys (`M`, `K`, `N`) or as one combined list
/// (`MKN: [M, K, N]`), as written in the benchmark table.
fn get_named<const N: usize>(
    obj: &Map<String, Value>,
    names: [&str; N],
) -> Result<[u64; N], IrError> {
    let combined: String = names.concat();
    if obj.contains_key(&combined) {
        return get_list::<N>(obj, &combined);
    }
    let mut out = [0u64; N];
    for (i, name) in names.iter().enumerate() {
        out[i] = get_extent(obj, name)?;
    }
    Ok(out)
}

/// Parses one operator document.
pub fn parse_op_value(value: &Value) -> Result<OpSpec, IrError> {
    let obj = value
        .as_object()
        .ok_or_else(|| IrError::Malformed("operator document must be an object".into()))?;
    let kind = obj
        .get("kind")
        .ok_or_else(|| IrError::MissingParam("kind".into()))?
        .as_str()
        .ok_or_else(|| IrError::Malformed("`kind` must be a string".into()))?;
    let mut op = match kind.to_ascii_lowercase().as_str() {
        "gemm" => {
            let [m, k, n] = get_named(obj, ["M", "K", "N"])?;
            OpSpec::gemm(m, k, n)?
        }
        "gemv" => {
            let [m, n] = get_named(obj, ["M", "N"])?;
            OpSpec::gemv(m, n)?
        }
        "conv2d" => {
            let input = get_list::<4>(obj, "I")?;
            let kernel = get_list::<4>(obj, "K")?;
            let stride = stride_of(obj)?;
            OpSpec::conv2d(input, kernel, stride)?
        }
        "avgpool2d" => {
            let input = get_list::<4>(obj, "I")?;
            let window = get_extent(obj, "F")?;
            let stride = stride_of(obj)?;
            OpSpec::avgpool2d(input, window, stride)?
        }
        other => return Err(IrError::UnknownKind(other.to_string())),
    };
    if let Some(label) = obj.get("label") {
        let label = label
            .as_str()
            .ok_or_else(|| IrError::Malformed("`label` must be a string".into()))?;
        op.label = Some(label.to_string());
    }
    if let Some(bytes) = obj.get("dtype_bytes") {
        op.dtype_bytes = extent_value("dtype_bytes", bytes)? as u32;
    }
    for (key, slot) in [("alpha", &mut op.alpha), ("beta", &mut op.beta)] {
        if let Some(v) = obj.get(key) {
            *slot = v
                .as_f64()
                .ok_or_else(|| IrError::Malformed(format!("`{key}` must be a number")))?;
        }
    }
    Ok(op)
}

fn stride_of(obj: &Map<String, Value>) -> Result<u64, IrError> {
    if obj.contains_key("S") {
        get_extent(obj, "S")
    } else {
        get_extent(obj, "stride")
    }
}

/// Parses an operator document from JSON text.
pub fn parse_op_spec(text: &str) -> Result<OpSpec, IrError> {
    let value: Value = serde_json::from_str(text).map_err(|e| IrError::Malformed(e.to_string()))?;
    parse_op_value(&value)
}

/// Parses a suite file: either a JSON list of operator documents or an object
/// with an `ops` list.
pub fn parse_op_suite(text: &str) -> Result<Vec<OpSpec>, IrError> {
    let value: Value = serde_json::from_str(text).map_err(|e| IrError::Malformed(e.to_string()))?;
    let list = match &value {
        Value::Array(items) => items,
        Value::Object(obj) => obj
            .get("ops")
            .and_then(Value::as_array)
            .ok_or_else(|| IrError::Malformed("suite object needs an `ops` list".into()))?,
        _ => {
            return Err(IrError::Malformed(
                "suite must be a list or an object".into(),
            ))
        }
    };
    list.iter().map(parse_op_value).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionKind {
    Tile,
    InvTile,
    SetVThread,
    Cache,
}

/// One scheduling primitive; an edge of the construction graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action {
    pub kind: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<String>,
    /// Tile step for Tile/InvTile, the vthread count V for SetVThread.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<u64>,
}

impl Action {
    pub fn tile(axis: &str, factor: u64) -> Self {
        Action {
            kind: ActionKind::Tile,
            axis: Some(axis.into()),
            factor: Some(factor),
        }
    }

    pub fn inv_tile(axis: &str, factor: u64) -> Self {
        Action {
            kind: ActionKind::InvTile,
            axis: Some(axis.into()),
            factor: Some(factor),
        }
    }

    pub fn set_vthread(axis: &str, v: u64) -> Self {
        Action {
            kind: ActionKind::SetVThread,
            axis: Some(axis.into()),
            factor: Some(v),
        }
    }

    pub fn cache() -> Self {
        Action {
            kind: ActionKind::Cache,
            axis: None,
            factor: None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            ActionKind::Tile => "tile",
            ActionKind::InvTile => "invTile",
            ActionKind::SetVThread => "setVThread",
            ActionKind::Cache => "cache",
        };
        match (&self.axis, self.factor) {
            (Some(a), Some(k)) => write!(f, "{name}({a},{k})"),
            _ => write!(f, "{name}()"),
        }
    }
}

/// Immutable schedule snapshot.
#[derive(Debug, Clone)]
pub struct EtirState {
    op: Arc<OpSpec>,
    num_level: usize,
    cur_mem_level: usize,
    /// Per axis: tile sizes for levels 1..=L (outermost first).
    etiles: Vec<Vec<u64>>,
    /// Per axis vthread factor; fixed to 1 on reduce axes.
    ev_threads: Vec<u64>,
}

impl PartialEq for EtirState {
    fn eq(&self, other: &Self) -> bool {
        self.num_level == other.num_level
            && self.cur_mem_level == other.cur_mem_level
            && self.etiles == other.etiles
            && self.ev_threads == other.ev_threads
            && (Arc::ptr_eq(&self.op, &other.op) || *self.op == *other.op)
    }
}

impl Eq for EtirState {}

impl Hash for EtirState {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.num_level.hash(state);
        self.cur_mem_level.hash(state);
        self.etiles.hash(state);
        self.ev_threads.hash(state);
    }
}

fn illegal(action: &Action, reason: impl Into<String>) -> IrError {
    IrError::IllegalAction {
        action: action.to_string(),
        reason: reason.into(),
    }
}

impl EtirState {
    /// The unscheduled state: every tile spans the whole (padded) axis, no
    /// vthreads, nothing cached.
    pub fn initial(op: Arc<OpSpec>, num_level: usize) -> Self {
        let etiles = op
            .axes()
            .iter()
            .map(|a| vec![a.padded; num_level])
            .collect();
        let ev_threads = vec![1; op.axes().len()];
        EtirState {
            op,
            num_level,
            cur_mem_level: 0,
            etiles,
            ev_threads,
        }
    }

    pub fn op(&self) -> &OpSpec {
        &self.op
    }

    pub fn op_arc(&self) -> &Arc<OpSpec> {
        &self.op
    }

    pub fn num_level(&self) -> usize {
        self.num_level
    }

    pub fn cur_mem_level(&self) -> usize {
        self.cur_mem_level
    }

    /// All levels have been cached; the schedule is final.
    pub fn is_complete(&self) -> bool {
        self.cur_mem_level == self.num_level
    }

    pub fn etiles(&self) -> &[Vec<u64>] {
        &self.etiles
    }

    pub fn ev_threads(&self) -> &[u64] {
        &self.ev_threads
    }

    pub fn vthread(&self, axis: usize) -> u64 {
        self.ev_threads[axis]
    }

    /// Tile size of `axis` at `level`; level 0 is the whole padded axis.
    pub fn tile(&self, axis: usize, level: usize) -> u64 {
        if level == 0 {
            self.op.axes()[axis].padded
        } else {
            self.etiles[axis][level - 1]
        }
    }

    /// Tile sizes of every axis at `level` (0 = whole domain).
    pub fn tiles_at(&self, level: usize) -> Vec<u64> {
        (0..self.etiles.len())
            .map(|a| self.tile(a, level))
            .collect()
    }

    /// Innermost scheduled tile of `axis`.
    pub fn innermost_tile(&self, axis: usize) -> u64 {
        self.tile(axis, self.num_level)
    }

    fn check_level(&self, level: usize) -> Result<(), IrError> {
        if level == 0 || level > self.num_level {
            Err(IrError::LevelOutOfRange {
                level,
                max: self.num_level,
            })
        } else {
            Ok(())
        }
    }

    /// Distinct elements of each tensor (in `op.tensors()` order) touched by
    /// one tile instance at `level`.
    pub fn tile_regions(&self, level: usize) -> Result<Vec<u64>, IrError> {
        self.check_level(level)?;
        Ok(self.regions_at(level))
    }

    /// Like [`tile_regions`](Self::tile_regions) but also accepts level 0,
    /// meaning the whole padded tensors.
    pub fn regions_at(&self, level: usize) -> Vec<u64> {
        let sizes = self.tiles_at(level);
        self.op.tensors().iter().map(|t| t.region(&sizes)).collect()
    }

    /// Sum of [`regions_at`](Self::regions_at): resident elements of one tile.
    pub fn footprint_elems(&self, level: usize) -> u64 {
        self.regions_at(level).iter().sum()
    }

    /// Applies an action, returning a new state.
    pub fn apply_action(&self, action: &Action) -> Result<EtirState, IrError> {
        if self.is_complete() {
            return Err(illegal(action, "schedule is complete"));
        }
        let mut next = self.clone();
        match action.kind {
            ActionKind::Cache => {
                next.cur_mem_level += 1;
            }
            ActionKind::Tile | ActionKind::InvTile => {
                let axis = self.resolve_axis(action)?;
                let factor = action
                    .factor
                    .ok_or_else(|| illegal(action, "missing factor"))?;
                if factor < 2 || !factor.is_power_of_two() {
                    return Err(illegal(action, "factor must be a power of two >= 2"));
                }
                let edit = self.cur_mem_level;
                let current = self.etiles[axis][edit];
                let new = if action.kind == ActionKind::Tile {
                    if !current.is_multiple_of(factor) || current / factor < self.ev_threads[axis] {
                        return Err(illegal(action, "tile would drop below the inner level"));
                    }
                    current / factor
                } else {
                    let outer = self.tile(axis, edit);
                    if current * factor > outer {
                        return Err(illegal(action, "tile would exceed the outer level"));
                    }
                    current * factor
                };
                for t in &mut next.etiles[axis][edit..] {
                    *t = new;
                }
            }
            ActionKind::SetVThread => {
                let axis = self.resolve_axis(action)?;
                if !self.op.axes()[axis].is_spatial() {
                    return Err(illegal(action, "vthreads only apply to spatial axes"));
                }
                let v = action
                    .factor
                    .ok_or_else(|| illegal(action, "missing vthread count"))?;
                if v == 0 || !v.is_power_of_two() {
                    return Err(illegal(action, "vthread count must be a power of two"));
                }
                if v == self.ev_threads[axis] {
                    return Err(illegal(action, "vthread count unchanged"));
                }
                if v > self.innermost_tile(axis) {
                    return Err(illegal(action, "vthread count exceeds innermost tile"));
                }
                next.ev_threads[axis] = v;
            }
        }
        Ok(next)
    }

    fn resolve_axis(&self, action: &Action) -> Result<usize, IrError> {
        let name = action
            .axis
            .as_deref()
            .ok_or_else(|| illegal(action, "missing axis"))?;
        self.op.axis_index(name)
    }

    /// Folds a trace over the initial state.
    pub fn replay(
        op: Arc<OpSpec>,
        num_level: usize,
        trace: &[Action],
    ) -> Result<EtirState, IrError> {
        trace
            .iter()
            .try_fold(EtirState::initial(op, num_level), |s, a| s.apply_action(a))
    }

    /// Checks the structural invariants: divisibility chain, mirrored
    /// unscheduled levels and vthread placement.
    pub fn validate(&self) -> Result<(), IrError> {
        let bad = |msg: String| Err(IrError::InvalidState(msg));
        if self.cur_mem_level > self.num_level {
            return bad(format!(
                "cur_mem_level {} > {}",
                self.cur_mem_level, self.num_level
            ));
        }
        for (a, axis) in self.op.axes().iter().enumerate() {
            let tiles = &self.etiles[a];
            if tiles.len() != self.num_level {
                return bad(format!(
                    "axis {} has {} tile levels",
                    axis.name,
                    tiles.len()
                ));
            }
            let mut outer = axis.padded;
            for &t in tiles {
                if t == 0 || !t.is_power_of_two() || t > outer || outer % t != 0 {
                    return bad(format!("axis {} breaks the divisibility chain", axis.name));
                }
                outer = t;
            }
            let v = self.ev_threads[a];
            if v == 0 || !v.is_power_of_two() || v > outer {
                return bad(format!("axis {} has an invalid vthread factor", axis.name));
            }
            if !axis.is_spatial() && v != 1 {
                return bad(format!("reduce axis {} carries a vthread", axis.name));
            }
            if self.cur_mem_level < self.num_level {
                let edited = tiles[self.cur_mem_level];
                if tiles[self.cur_mem_level..].iter().any(|&t| t != edited) {
                    return bad(format!(
                        "axis {} has scheduled levels below the edit level",
                        axis.name
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_record(&self) -> StateRecord {
        StateRecord {
            op: self.op.label(),
            num_level: self.num_level,
            cur_mem_level: self.cur_mem_level,
            axes: self
                .op
                .axes()
                .iter()
                .enumerate()
                .map(|(a, axis)| AxisRecord {
                    name: axis.name.clone(),
                    tiles: self.etiles[a].clone(),
                    vthread: self.ev_threads[a],
                })
                .collect(),
        }
    }

    pub fn from_record(op: Arc<OpSpec>, record: &StateRecord) -> Result<EtirState, IrError> {
        if record.axes.len() != op.axes().len() {
            return Err(IrError::InvalidState(
                "axis count does not match operator".into(),
            ));
        }
        let mut etiles = Vec::with_capacity(record.axes.len());
        let mut ev_threads = Vec::with_capacity(record.axes.len());
        for (axis, rec) in op.axes().iter().zip(&record.axes) {
            if axis.name != rec.name {
                return Err(IrError::AxisNotFound(rec.name.clone()));
            }
            etiles.push(rec.tiles.clone());
            ev_threads.push(rec.vthread);
        }
        let state = EtirState {
            op,
            num_level: record.num_level,
            cur_mem_level: record.cur_mem_level,
            etiles,
            ev_threads,
        };
        state.validate()?;
        Ok(state)
    }
}

/// Serialized form of an [`EtirState`]; the operator is referenced by label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateRecord {
    pub op: String,
    pub num_level: usize,
    pub cur_mem_level: usize,
    pub axes: Vec<AxisRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisRecord {
    pub name: String,
    pub tiles: Vec<u64>,
    pub vthread: u64,
}
