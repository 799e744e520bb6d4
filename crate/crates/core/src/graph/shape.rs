//! Static shape propagation.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use super::{Edge, EdgeId, GraphModel, Merge, OperatorKind, Padding, VertexId};
use crate::tensor::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    Edge(EdgeId),
    Vertex(VertexId),
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Edge(e) => write!(f, "edge {e}"),
            Site::Vertex(v) => write!(f, "vertex {v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("shape error at {site}: {reason}")]
pub struct ShapeError {
    pub site: Site,
    pub reason: String,
}

/// Shapes of every vertex, plus the output shape of every edge (which
/// differs from its destination's shape only at merge vertices).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ShapeMap {
    pub vertices: BTreeMap<VertexId, Shape>,
    pub edges: BTreeMap<EdgeId, Shape>,
}

impl ShapeMap {
    pub fn vertex(&self, v: VertexId) -> Shape {
        self.vertices[&v]
    }

    pub fn edge_input(&self, g: &GraphModel, e: EdgeId) -> Shape {
        self.vertices[&g.edges[&e].src]
    }
}

/// Output extent of a sliding window along one axis, with the leading pad
/// for `Same`. `None` if a `Valid` window does not fit.
pub fn pooled_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => (input >= kernel).then(|| ((input - kernel) / stride + 1, 0)),
    }
}

fn err(e: &Edge, reason: impl Into<String>) -> ShapeError {
    ShapeError {
        site: Site::Edge(e.id),
        reason: reason.into(),
    }
}

fn shape(e: &Edge, dims: [usize; 4]) -> Result<Shape, ShapeError> {
    Shape::from_dims(dims).map_err(|x| err(e, x.to_string()))
}

fn window_out(e: &Edge, s: Shape, channels: usize) -> Result<Shape, ShapeError> {
    let (kh, kw) = e.attrs.kernel.ok_or_else(|| err(e, "missing kernel"))?;
    let (sh, sw) = e.attrs.stride.ok_or_else(|| err(e, "missing stride"))?;
    let pad = e.attrs.padding.ok_or_else(|| err(e, "missing padding"))?;
    let (h, _) = pooled_extent(s.h, kh, sh, pad).ok_or_else(|| err(e, format!("kernel height {kh} exceeds input height {}", s.h)))?;
    let (w, _) = pooled_extent(s.w, kw, sw, pad).ok_or_else(|| err(e, format!("kernel width {kw} exceeds input width {}", s.w)))?;
    shape(e, [s.n, channels, h, w])
}

fn channel_param(e: &Edge, name: &str, c: usize) -> Result<(), ShapeError> {
    match e.params.get(name) {
        Some(p) if p.shape().dims() == [1, c, 1, 1] => Ok(()),
        Some(p) => Err(err(e, format!("param {name} has shape {}, expected (1,{c},1,1)", p.shape()))),
        None => Err(err(e, format!("missing param {name}"))),
    }
}

fn weight(e: &Edge, name: &str) -> Result<Shape, ShapeError> {
    e.params.get(name).map(|t| t.shape()).ok_or_else(|| err(e, format!("missing param {name}")))
}

/// Output shape of a single edge given its input shape.
pub fn op_output_shape(e: &Edge, s: Shape) -> Result<Shape, ShapeError> {
    use OperatorKind::*;
    match e.op {
        Identity | NoneOp | Dropout | ReLU | Sigmoid | Softmax | ScalarAdd | ScalarMul => Ok(s),
        BatchNorm => {
            for p in ["gamma", "beta", "mean", "var"] {
                channel_param(e, p, s.c)?;
            }
            Ok(s)
        }
        Scale => {
            channel_param(e, "alpha", s.c)?;
            channel_param(e, "beta", s.c)?;
            Ok(s)
        }
        Conv2D | FusedCBR => {
            let w = weight(e, "weight")?;
            if w.c != s.c {
                return Err(err(e, format!("weight expects {} input channels, input has {}", w.c, s.c)));
            }
            channel_param(e, "bias", w.n)?;
            window_out(e, s, w.n)
        }
        DepthwiseConv2D => {
            let w = weight(e, "weight")?;
            if w.n != s.c || w.c != 1 {
                return Err(err(e, format!("depthwise weight {} does not match {} channels", w, s.c)));
            }
            channel_param(e, "bias", s.c)?;
            window_out(e, s, s.c)
        }
        SeparableConv2D => {
            let d = weight(e, "depthwise")?;
            let p = weight(e, "pointwise")?;
            if d.n != s.c || d.c != 1 {
                return Err(err(e, format!("depthwise weight {} does not match {} channels", d, s.c)));
            }
            if p.c != s.c || p.h != 1 || p.w != 1 {
                return Err(err(e, format!("pointwise weight {} does not match {} channels", p, s.c)));
            }
            channel_param(e, "depthwise_bias", s.c)?;
            channel_param(e, "bias", p.n)?;
            window_out(e, s, p.n)
        }
        MaxPool | AveragePool => window_out(e, s, s.c),
        ReduceMeanHW => shape(e, [s.n, s.c, 1, 1]),
        Transpose => {
            let p = e.attrs.permutation.ok_or_else(|| err(e, "missing permutation"))?;
            let d = s.dims();
            shape(e, [d[p[0]], d[p[1]], d[p[2]], d[p[3]]])
        }
        Reshape => {
            let t = e.attrs.target_shape.ok_or_else(|| err(e, "missing target_shape"))?;
            if t.element_count() != s.element_count() {
                return Err(err(e, format!("cannot reshape {s} into {t}")));
            }
            Ok(t)
        }
        MatMul | Add => Err(err(e, format!("{} cannot label an edge", e.op))),
    }
}

fn broadcast(a: usize, b: usize) -> Option<usize> {
    match (a, b) {
        _ if a == b => Some(a),
        (1, x) | (x, 1) => Some(x),
        _ => None,
    }
}

/// Shape produced at a merge vertex from its operand shapes (edge-id order).
pub fn merge_shape(v: VertexId, merge: &Merge, inputs: &[Shape]) -> Result<Shape, ShapeError> {
    let fail = |reason: String| ShapeError {
        site: Site::Vertex(v),
        reason,
    };
    match merge {
        Merge::MatMul => {
            let [a, b] = inputs else {
                return Err(fail(format!("MatMul needs 2 operands, got {}", inputs.len())));
            };
            if a.w != b.h {
                return Err(fail(format!("MatMul inner dimension mismatch: {a} x {b}")));
            }
            let n = broadcast(a.n, b.n).ok_or_else(|| fail(format!("cannot broadcast batch of {a} and {b}")))?;
            let c = broadcast(a.c, b.c).ok_or_else(|| fail(format!("cannot broadcast channels of {a} and {b}")))?;
            Shape::new(n, c, a.h, b.w).map_err(|e| fail(e.to_string()))
        }
        Merge::AddBatchNorm { params, .. } => {
            let first = inputs[0];
            if let Some(bad) = inputs.iter().find(|s| **s != first) {
                return Err(fail(format!("Add operands differ: {first} vs {bad}")));
            }
            for (name, p) in params {
                if p.shape().dims() != [1, first.c, 1, 1] {
                    return Err(fail(format!("param {name} has shape {}, expected (1,{},1,1)", p.shape(), first.c)));
                }
            }
            Ok(first)
        }
    }
}

/// Propagates shapes from the source in canonical topological order.
pub fn infer_shapes(g: &GraphModel, input: Shape) -> Result<ShapeMap, ShapeError> {
    let order = g.topological_edges().ok_or(ShapeError {
        site: Site::Vertex(g.source),
        reason: "graph contains a cycle".into(),
    })?;
    let mut map = ShapeMap::default();
    map.vertices.insert(g.source, input);
    let mut arrived: BTreeMap<VertexId, Vec<(EdgeId, Shape)>> = BTreeMap::new();
    let mut expected: BTreeMap<VertexId, usize> = BTreeMap::new();
    for e in g.edges.values() {
        *expected.entry(e.dst).or_default() += 1;
    }
    for id in order {
        let e = &g.edges[&id];
        let s = *map.vertices.get(&e.src).ok_or_else(|| err(e, "source vertex has no shape"))?;
        let out = op_output_shape(e, s)?;
        map.edges.insert(id, out);
        let slot = arrived.entry(e.dst).or_default();
        slot.push((id, out));
        if slot.len() == expected[&e.dst] {
            let vertex = g.vertices.get(&e.dst).ok_or_else(|| err(e, "dangling destination"))?;
            let shape = match &vertex.merge {
                None if slot.len() == 1 => out,
                None => {
                    return Err(ShapeError {
                        site: Site::Vertex(e.dst),
                        reason: "several incoming edges without a merge rule".into(),
                    })
                }
                Some(m) => {
                    slot.sort_by_key(|(id, _)| *id);
                    let shapes: Vec<Shape> = slot.iter().map(|(_, s)| *s).collect();
                    merge_shape(e.dst, m, &shapes)?
                }
            };
            map.vertices.insert(e.dst, shape);
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{OperatorAttrs, Vertex};

    fn s(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape::new(n, c, h, w).unwrap()
    }

    #[test]
    fn identity_chain_keeps_shape() {
        let g = GraphModel::chain(&[OperatorKind::Identity; 3]);
        let m = infer_shapes(&g, s(1, 3, 8, 8)).unwrap();
        assert!(m.vertices.values().all(|&v| v == s(1, 3, 8, 8)));
    }

    #[test]
    fn valid_maxpool_halves() {
        let mut g = GraphModel::chain(&[OperatorKind::MaxPool]);
        g.edges.get_mut(&0).unwrap().attrs = OperatorAttrs::window((2, 2), (2, 2), Padding::Valid);
        assert_eq!(infer_shapes(&g, s(1, 3, 8, 8)).unwrap().vertex(1), s(1, 3, 4, 4));
    }

    #[test]
    fn same_padding_rounds_up() {
        assert_eq!(pooled_extent(5, 2, 2, Padding::Same), Some((3, 0)));
        assert_eq!(pooled_extent(8, 3, 1, Padding::Same), Some((8, 1)));
        assert_eq!(pooled_extent(1, 3, 1, Padding::Valid), None);
    }

    #[test]
    fn matmul_inner_mismatch() {
        let err = merge_shape(3, &Merge::MatMul, &[s(1, 1, 4, 5), s(1, 1, 3, 6)]).unwrap_err();
        assert_eq!(err.site, Site::Vertex(3));
        assert!(err.reason.contains("inner"));
        assert_eq!(merge_shape(3, &Merge::MatMul, &[s(2, 1, 4, 5), s(1, 3, 5, 6)]).unwrap(), s(2, 3, 4, 6));
    }

    #[test]
    fn merge_vertex_in_graph() {
        let mut p = [0, 1, 3, 2];
        let mut t1 = crate::graph::Edge::new(0, 0, 1, OperatorKind::Transpose);
        t1.attrs.permutation = Some(p);
        p = [0, 1, 2, 3];
        let mut t2 = crate::graph::Edge::new(1, 0, 1, OperatorKind::Transpose);
        t2.attrs.permutation = Some(p);
        let mut g = GraphModel::from_parts(vec![Vertex::new(0), Vertex::new(1)], vec![t1, t2], 0, 1);
        g.vertices.get_mut(&1).unwrap().merge = Some(Merge::MatMul);
        let m = infer_shapes(&g, s(1, 1, 3, 4)).unwrap();
        assert_eq!(m.edges[&0], s(1, 1, 4, 3));
        assert_eq!(m.vertex(1), s(1, 1, 4, 4));
    }
}
