//! DAG model representation: vertices are tensors, edges are operators.
//!
//! A vertex with more than one incoming edge carries a [`Merge`] describing
//! how the incoming results are combined: an ordered binary `MatMul`, or an
//! elementwise `Add` followed by a `BatchNorm` with vertex-level parameters.

mod json;
mod metrics;
mod shape;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::{Shape, Tensor};

pub use json::{from_json, to_json, ParseError};
pub use metrics::{edit_distance, levenshtein, mean_edit_distance, operator_sequence, structure_hash, MetricError, StructureHash};
pub use shape::{infer_shapes, merge_shape, op_output_shape, pooled_extent, ShapeError, ShapeMap, Site};

pub type VertexId = u32;
pub type EdgeId = u32;

/// Default BatchNorm epsilon.
pub const BN_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperatorKind {
    Identity,
    #[serde(rename = "None")]
    NoneOp,
    Conv2D,
    DepthwiseConv2D,
    SeparableConv2D,
    BatchNorm,
    Scale,
    ReLU,
    Sigmoid,
    Softmax,
    MaxPool,
    AveragePool,
    ReduceMeanHW,
    Transpose,
    Reshape,
    MatMul,
    ScalarAdd,
    ScalarMul,
    Add,
    Dropout,
    FusedCBR,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 21] = [
        OperatorKind::Identity,
        OperatorKind::NoneOp,
        OperatorKind::Conv2D,
        OperatorKind::DepthwiseConv2D,
        OperatorKind::SeparableConv2D,
        OperatorKind::BatchNorm,
        OperatorKind::Scale,
        OperatorKind::ReLU,
        OperatorKind::Sigmoid,
        OperatorKind::Softmax,
        OperatorKind::MaxPool,
        OperatorKind::AveragePool,
        OperatorKind::ReduceMeanHW,
        OperatorKind::Transpose,
        OperatorKind::Reshape,
        OperatorKind::MatMul,
        OperatorKind::ScalarAdd,
        OperatorKind::ScalarMul,
        OperatorKind::Add,
        OperatorKind::Dropout,
        OperatorKind::FusedCBR,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::Identity => "Identity",
            OperatorKind::NoneOp => "None",
            OperatorKind::Conv2D => "Conv2D",
            OperatorKind::DepthwiseConv2D => "DepthwiseConv2D",
            OperatorKind::SeparableConv2D => "SeparableConv2D",
            OperatorKind::BatchNorm => "BatchNorm",
            OperatorKind::Scale => "Scale",
            OperatorKind::ReLU => "ReLU",
            OperatorKind::Sigmoid => "Sigmoid",
            OperatorKind::Softmax => "Softmax",
            OperatorKind::MaxPool => "MaxPool",
            OperatorKind::AveragePool => "AveragePool",
            OperatorKind::ReduceMeanHW => "ReduceMeanHW",
            OperatorKind::Transpose => "Transpose",
            OperatorKind::Reshape => "Reshape",
            OperatorKind::MatMul => "MatMul",
            OperatorKind::ScalarAdd => "ScalarAdd",
            OperatorKind::ScalarMul => "ScalarMul",
            OperatorKind::Add => "Add",
            OperatorKind::Dropout => "Dropout",
            OperatorKind::FusedCBR => "FusedCBR",
        }
    }

    pub fn from_name(name: &str) -> Option<OperatorKind> {
        OperatorKind::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Binary/n-ary operators live on merge vertices, never on edges.
    pub fn is_merge_only(self) -> bool {
        matches!(self, OperatorKind::MatMul | OperatorKind::Add)
    }

    pub fn is_pass_through(self) -> bool {
        matches!(self, OperatorKind::Identity | OperatorKind::NoneOp | OperatorKind::Dropout)
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Operand of `ScalarAdd` / `ScalarMul`: either still a zero-dimensional
/// tensor, or folded into a constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", content = "value", rename_all = "snake_case")]
pub enum ScalarOperand {
    Tensor0d(f64),
    Constant(f64),
}

impl ScalarOperand {
    pub fn value(self) -> f64 {
        match self {
            ScalarOperand::Tensor0d(v) | ScalarOperand::Constant(v) => v,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OperatorAttrs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<Padding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bn_epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation: Option<[usize; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_shape: Option<Shape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scalar: Option<ScalarOperand>,
}

impl OperatorAttrs {
    pub fn window(kernel: (usize, usize), stride: (usize, usize), padding: Padding) -> OperatorAttrs {
        OperatorAttrs {
            kernel: Some(kernel),
            stride: Some(stride),
            padding: Some(padding),
            ..Default::default()
        }
    }
}

/// Named weight tensors, serialized with the model.
pub type Params = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub id: EdgeId,
    pub src: VertexId,
    pub dst: VertexId,
    pub op: OperatorKind,
    pub attrs: OperatorAttrs,
    pub params: Params,
}

impl Edge {
    pub fn new(id: EdgeId, src: VertexId, dst: VertexId, op: OperatorKind) -> Edge {
        Edge {
            id,
            src,
            dst,
            op,
            attrs: OperatorAttrs::default(),
            params: Params::new(),
        }
    }

    pub fn with_attrs(mut self, attrs: OperatorAttrs) -> Edge {
        self.attrs = attrs;
        self
    }

    pub fn with_params(mut self, params: Params) -> Edge {
        self.params = params;
        self
    }
}

/// Combination rule of a vertex with several incoming edges.
#[derive(Debug, Clone, PartialEq)]
pub enum Merge {
    /// Sum of the incoming results (in edge-id order), then BatchNorm with
    /// `gamma`/`beta`/`mean`/`var` stored here.
    AddBatchNorm { epsilon: f64, params: Params },
    /// `lhs × rhs` over the last two axes; operands ordered by edge id.
    MatMul,
}

impl Merge {
    pub fn op(&self) -> OperatorKind {
        match self {
            Merge::AddBatchNorm { .. } => OperatorKind::Add,
            Merge::MatMul => OperatorKind::MatMul,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vertex {
    pub id: VertexId,
    pub merge: Option<Merge>,
}

impl Vertex {
    pub fn new(id: VertexId) -> Vertex {
        Vertex { id, merge: None }
    }
}

/// A single-source, single-sink DAG of operators.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphModel {
    pub vertices: BTreeMap<VertexId, Vertex>,
    pub edges: BTreeMap<EdgeId, Edge>,
    pub source: VertexId,
    pub sink: VertexId,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Violation {
    Cycle,
    MultipleSources(Vec<VertexId>),
    MultipleSinks(Vec<VertexId>),
    Disconnected,
    DanglingEdge(EdgeId),
    SourceMismatch { declared: VertexId },
    SinkMismatch { declared: VertexId },
    BadAttrs { edge: EdgeId, reason: String },
    BadMerge { vertex: VertexId, reason: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Cycle => write!(f, "graph contains a cycle"),
            Violation::MultipleSources(v) => write!(f, "multiple source vertices {v:?}"),
            Violation::MultipleSinks(v) => write!(f, "multiple sink vertices {v:?}"),
            Violation::Disconnected => write!(f, "graph is not connected"),
            Violation::DanglingEdge(e) => write!(f, "edge {e} references a missing vertex"),
            Violation::SourceMismatch { declared } => write!(f, "declared source {declared} is not the unique source"),
            Violation::SinkMismatch { declared } => write!(f, "declared sink {declared} is not the unique sink"),
            Violation::BadAttrs { edge, reason } => write!(f, "edge {edge}: {reason}"),
            Violation::BadMerge { vertex, reason } => write!(f, "vertex {vertex}: {reason}"),
        }
    }
}

impl GraphModel {
    /// A path of `ops.len()` edges from vertex 0 to vertex `ops.len()`.
    pub fn chain(ops: &[OperatorKind]) -> GraphModel {
        let edges = ops
            .iter()
            .enumerate()
            .map(|(i, &op)| Edge::new(i as EdgeId, i as VertexId, i as VertexId + 1, op))
            .collect();
        GraphModel::from_parts((0..=ops.len() as VertexId).map(Vertex::new).collect(), edges, 0, ops.len() as VertexId)
    }

    pub fn from_parts(vertices: Vec<Vertex>, edges: Vec<Edge>, source: VertexId, sink: VertexId) -> GraphModel {
        GraphModel {
            vertices: vertices.into_iter().map(|v| (v.id, v)).collect(),
            edges: edges.into_iter().map(|e| (e.id, e)).collect(),
            source,
            sink,
        }
    }

    pub fn in_edges(&self, v: VertexId) -> Vec<EdgeId> {
        self.edges.values().filter(|e| e.dst == v).map(|e| e.id).collect()
    }

    pub fn out_edges(&self, v: VertexId) -> Vec<EdgeId> {
        self.edges.values().filter(|e| e.src == v).map(|e| e.id).collect()
    }

    pub fn next_vertex_id(&self) -> VertexId {
        self.vertices.keys().next_back().map_or(0, |v| v + 1)
    }

    pub fn next_edge_id(&self) -> EdgeId {
        self.edges.keys().next_back().map_or(0, |e| e + 1)
    }

    pub fn add_vertex(&mut self) -> VertexId {
        let id = self.next_vertex_id();
        self.vertices.insert(id, Vertex::new(id));
        id
    }

    pub fn edge(&self, id: EdgeId) -> &Edge {
        &self.edges[&id]
    }

    /// Number of edges that carry a real operator (not the `None` placeholder).
    pub fn operator_count(&self) -> usize {
        self.edges.values().filter(|e| e.op != OperatorKind::NoneOp).count()
    }

    /// Edges in canonical topological order: Kahn's algorithm, always taking
    /// the ready edge with the smallest id. Returns `None` on a cycle.
    pub fn topological_edges(&self) -> Option<Vec<EdgeId>> {
        self.topological_edges_by(|ready| *ready.iter().next().unwrap())
    }

    /// Kahn's algorithm with a caller-chosen pick among ready edges.
    pub fn topological_edges_by(&self, mut pick: impl FnMut(&BTreeSet<EdgeId>) -> EdgeId) -> Option<Vec<EdgeId>> {
        let mut pending_in: BTreeMap<VertexId, usize> = self.vertices.keys().map(|&v| (v, 0)).collect();
        for e in self.edges.values() {
            *pending_in.entry(e.dst).or_default() += 1;
        }
        let mut ready: BTreeSet<EdgeId> = self
            .edges
            .values()
            .filter(|e| pending_in.get(&e.src) == Some(&0))
            .map(|e| e.id)
            .collect();
        let mut order = Vec::with_capacity(self.edges.len());
        while !ready.is_empty() {
            let id = pick(&ready);
            ready.remove(&id);
            order.push(id);
            let dst = self.edges[&id].dst;
            let left = pending_in.get_mut(&dst)?;
            *left -= 1;
            if *left == 0 {
                ready.extend(self.edges.values().filter(|e| e.src == dst).map(|e| e.id));
            }
        }
        (order.len() == self.edges.len()).then_some(order)
    }

    /// Every violated structural constraint; empty iff the graph is valid.
    pub fn validate(&self) -> Vec<Violation> {
        validate_graph(self)
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }
}

/// Checks the DAG constraints, edge attributes, and merge declarations.
pub fn validate_graph(g: &GraphModel) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut dangling = false;
    for e in g.edges.values() {
        if !g.vertices.contains_key(&e.src) || !g.vertices.contains_key(&e.dst) {
            out.push(Violation::DanglingEdge(e.id));
            dangling = true;
        }
    }
    if g.vertices.is_empty() {
        out.push(Violation::Disconnected);
        return out;
    }
    let indeg = |v: VertexId| g.edges.values().filter(|e| e.dst == v).count();
    let outdeg = |v: VertexId| g.edges.values().filter(|e| e.src == v).count();
    let sources: Vec<VertexId> = g.vertices.keys().copied().filter(|&v| indeg(v) == 0).collect();
    let sinks: Vec<VertexId> = g.vertices.keys().copied().filter(|&v| outdeg(v) == 0).collect();
    if sources.len() > 1 {
        out.push(Violation::MultipleSources(sources.clone()));
    }
    if sinks.len() > 1 {
        out.push(Violation::MultipleSinks(sinks.clone()));
    }
    if sources != [g.source] {
        out.push(Violation::SourceMismatch { declared: g.source });
    }
    if sinks != [g.sink] {
        out.push(Violation::SinkMismatch { declared: g.sink });
    }
    if !dangling {
        if g.topological_edges().is_none() {
            out.push(Violation::Cycle);
        }
        if !is_weakly_connected(g) {
            out.push(Violation::Disconnected);
        }
    }
    for e in g.edges.values() {
        if let Err(reason) = check_edge_attrs(e) {
            out.push(Violation::BadAttrs { edge: e.id, reason });
        }
    }
    for v in g.vertices.values() {
        if let Err(reason) = check_merge(v, indeg(v.id)) {
            out.push(Violation::BadMerge { vertex: v.id, reason });
        }
    }
    // A graph with a cycle has no source/sink mismatch worth reporting on its own.
    if out.contains(&Violation::Cycle) {
        out.retain(|v| !matches!(v, Violation::SourceMismatch { .. } | Violation::SinkMismatch { .. }) || sources.len() != 1 || sinks.len() != 1);
    }
    out
}

fn is_weakly_connected(g: &GraphModel) -> bool {
    let mut adj: BTreeMap<VertexId, Vec<VertexId>> = BTreeMap::new();
    for e in g.edges.values() {
        adj.entry(e.src).or_default().push(e.dst);
        adj.entry(e.dst).or_default().push(e.src);
    }
    let start = *g.vertices.keys().next().unwrap();
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        for &u in adj.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
            if seen.insert(u) {
                queue.push_back(u);
            }
        }
    }
    seen.len() == g.vertices.len()
}

fn require_params(params: &Params, names: &[&str]) -> Result<(), String> {
    let have: Vec<&str> = params.keys().map(String::as_str).collect();
    let mut want = names.to_vec();
    want.sort_unstable();
    if have != want {
        return Err(format!("expected params {want:?}, found {have:?}"));
    }
    Ok(())
}

fn check_edge_attrs(e: &Edge) -> Result<(), String> {
    use OperatorKind::*;
    let a = &e.attrs;
    let window = a.kernel.is_some() && a.stride.is_some() && a.padding.is_some();
    let present = [
        ("kernel", a.kernel.is_some()),
        ("stride", a.stride.is_some()),
        ("padding", a.padding.is_some()),
        ("bn_epsilon", a.bn_epsilon.is_some()),
        ("permutation", a.permutation.is_some()),
        ("target_shape", a.target_shape.is_some()),
        ("scalar", a.scalar.is_some()),
    ];
    let allowed: &[&str] = match e.op {
        Conv2D | DepthwiseConv2D | SeparableConv2D | FusedCBR | MaxPool | AveragePool => &["kernel", "stride", "padding"],
        BatchNorm => &["bn_epsilon"],
        Transpose => &["permutation"],
        Reshape => &["target_shape"],
        ScalarAdd | ScalarMul => &["scalar"],
        MatMul | Add => return Err(format!("{} is a merge operator and cannot label an edge", e.op)),
        _ => &[],
    };
    for (name, set) in present {
        if set != allowed.contains(&name) {
            return Err(if set {
                format!("unexpected attribute {name} for {}", e.op)
            } else {
                format!("missing attribute {name} for {}", e.op)
            });
        }
    }
    if let Some((kh, kw)) = a.kernel {
        if kh == 0 || kw == 0 {
            return Err("kernel extents must be positive".into());
        }
    }
    if let Some((sh, sw)) = a.stride {
        if sh == 0 || sw == 0 {
            return Err("stride must be positive".into());
        }
    }
    if let Some(eps) = a.bn_epsilon {
        if !(eps > 0.0) {
            return Err("bn_epsilon must be positive".into());
        }
    }
    if let Some(p) = a.permutation {
        let mut sorted = p;
        sorted.sort_unstable();
        if sorted != [0, 1, 2, 3] {
            return Err(format!("{p:?} is not a permutation of the four axes"));
        }
    }
    let _ = window;
    let kernel_of = |t: &Tensor| {
        let s = t.shape();
        (s.h, s.w)
    };
    match e.op {
        Conv2D | FusedCBR | DepthwiseConv2D => {
            require_params(&e.params, &["weight", "bias"])?;
            if Some(kernel_of(&e.params["weight"])) != a.kernel {
                return Err("kernel attribute does not match weight extents".into());
            }
            if e.op == DepthwiseConv2D && e.params["weight"].shape().c != 1 {
                return Err("depthwise weight must have one input channel per group".into());
            }
        }
        SeparableConv2D => {
            require_params(&e.params, &["depthwise", "depthwise_bias", "pointwise", "bias"])?;
            if Some(kernel_of(&e.params["depthwise"])) != a.kernel {
                return Err("kernel attribute does not match depthwise extents".into());
            }
        }
        BatchNorm => require_params(&e.params, &["gamma", "beta", "mean", "var"])?,
        Scale => require_params(&e.params, &["alpha", "beta"])?,
        _ => require_params(&e.params, &[])?,
    }
    Ok(())
}

fn check_merge(v: &Vertex, indeg: usize) -> Result<(), String> {
    match (&v.merge, indeg) {
        (None, 0 | 1) => Ok(()),
        (None, n) => Err(format!("{n} incoming edges but no merge rule")),
        (Some(_), 0 | 1) => Err("merge rule on a vertex with fewer than two incoming edges".into()),
        (Some(Merge::MatMul), 2) => Ok(()),
        (Some(Merge::MatMul), n) => Err(format!("MatMul merge needs exactly 2 operands, found {n}")),
        (Some(Merge::AddBatchNorm { epsilon, params }), _) => {
            if !(*epsilon > 0.0) {
                return Err("bn_epsilon must be positive".into());
            }
            require_params(params, &["gamma", "beta", "mean", "var"])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use OperatorKind::*;

    #[test]
    fn identity_chain_is_valid() {
        assert!(GraphModel::chain(&[Identity; 3]).validate().is_empty());
    }

    #[test]
    fn disjoint_chains() {
        let g = GraphModel::from_parts(
            (0..4).map(Vertex::new).collect(),
            vec![Edge::new(0, 0, 1, Identity), Edge::new(1, 2, 3, Identity)],
            0,
            1,
        );
        let v = g.validate();
        assert!(v.contains(&Violation::Disconnected));
        assert!(v.contains(&Violation::MultipleSources(vec![0, 2])));
        assert!(v.contains(&Violation::MultipleSinks(vec![1, 3])));
    }

    #[test]
    fn back_edge_is_a_cycle() {
        let mut g = GraphModel::chain(&[Identity; 3]);
        g.edges.insert(3, Edge::new(3, 2, 1, Identity));
        assert!(g.validate().contains(&Violation::Cycle));
    }

    #[test]
    fn dangling_edge() {
        let mut g = GraphModel::chain(&[Identity; 2]);
        g.edges.insert(5, Edge::new(5, 2, 9, Identity));
        assert!(g.validate().contains(&Violation::DanglingEdge(5)));
    }

    #[test]
    fn merge_requirements() {
        let mut g = GraphModel::from_parts(
            (0..2).map(Vertex::new).collect(),
            vec![Edge::new(0, 0, 1, Identity), Edge::new(1, 0, 1, ReLU)],
            0,
            1,
        );
        assert!(matches!(g.validate().as_slice(), [Violation::BadMerge { vertex: 1, .. }]));
        g.vertices.get_mut(&1).unwrap().merge = Some(Merge::MatMul);
        assert!(g.validate().is_empty());
    }

    #[test]
    fn attrs_are_checked() {
        let mut g = GraphModel::chain(&[Transpose]);
        assert!(matches!(g.validate().as_slice(), [Violation::BadAttrs { edge: 0, .. }]));
        g.edges.get_mut(&0).unwrap().attrs.permutation = Some([0, 1, 3, 2]);
        assert!(g.validate().is_empty());
        g.edges.get_mut(&0).unwrap().attrs.bn_epsilon = Some(1e-3);
        assert!(!g.validate().is_empty());
    }

    #[test]
    fn canonical_order_breaks_ties_by_edge_id() {
        let mut g = GraphModel::from_parts(
            (0..3).map(Vertex::new).collect(),
            vec![Edge::new(4, 0, 1, Sigmoid), Edge::new(2, 0, 1, ReLU), Edge::new(7, 1, 2, Identity)],
            0,
            2,
        );
        g.vertices.get_mut(&1).unwrap().merge = Some(Merge::MatMul);
        assert_eq!(g.topological_edges().unwrap(), vec![2, 4, 7]);
    }
}
