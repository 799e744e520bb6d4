//! Graph interpretation and the trusted reference executor.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use thiserror::Error;

use crate::graph::{infer_shapes, EdgeId, GraphModel, ShapeMap, VertexId};
use crate::kernels::{eval_edge, eval_merge, Buffer, ExecError, ExecErrorKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RunError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("deadline exceeded")]
    TimedOut,
}

/// Identity of a value produced during execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ValueKey {
    /// The value held by a vertex (the input, an edge output on a plain
    /// vertex, or a merge result).
    Vertex(VertexId),
    /// An operand waiting at a merge vertex.
    Operand(EdgeId),
    /// The `n`th parameter (in name order) of an edge.
    Param(EdgeId, u32),
}

/// Where produced tensors are kept during one execution.
pub trait TensorStore<T> {
    /// Records a produced value and returns the value consumers will see.
    fn store(&mut self, key: ValueKey, value: Buffer<T>) -> Result<Buffer<T>, ExecError>;

    /// The value has no remaining consumers.
    fn release(&mut self, key: ValueKey);

    /// Makes a model parameter resident for the whole execution. Parameters
    /// are loaded by identity and never replaced.
    fn preload(&mut self, _key: ValueKey, _value: Buffer<T>) {}
}

/// Keeps nothing: every produced value is passed through.
#[derive(Debug, Default)]
pub struct PassThrough;

impl<T> TensorStore<T> for PassThrough {
    fn store(&mut self, _: ValueKey, value: Buffer<T>) -> Result<Buffer<T>, ExecError> {
        Ok(value)
    }

    fn release(&mut self, _: ValueKey) {}
}

/// Edge scheduling among ready edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Smallest ready edge id first (the canonical order).
    Canonical,
    /// Largest ready edge id first.
    Reverse,
}

impl Schedule {
    pub fn order(self, g: &GraphModel) -> Option<Vec<EdgeId>> {
        match self {
            Schedule::Canonical => g.topological_edges(),
            Schedule::Reverse => g.topological_edges_by(|r: &BTreeSet<EdgeId>| *r.iter().next_back().unwrap()),
        }
    }
}

/// Evaluates `g` on `x` in `T` and returns the sink value at `x.dtype()`.
pub fn run_graph<T: Scalar, S: TensorStore<T>>(g: &GraphModel, x: &Tensor, schedule: Schedule, store: &mut S, deadline: Option<Instant>) -> Result<Tensor, RunError> {
    let shapes = infer_shapes(g, x.shape()).map_err(ExecError::from)?;
    let order = schedule
        .order(g)
        .ok_or_else(|| ExecError::new(ExecErrorKind::InternalInvariant, "graph contains a cycle"))?;
    let out = run_ordered::<T, S>(g, x, &shapes, &order, store, deadline)?;
    Ok(out.to_tensor(x.dtype()))
}

pub(crate) fn run_ordered<T: Scalar, S: TensorStore<T>>(
    g: &GraphModel,
    x: &Tensor,
    shapes: &ShapeMap,
    order: &[EdgeId],
    store: &mut S,
    deadline: Option<Instant>,
) -> Result<Buffer<T>, RunError> {
    let mut consumers: BTreeMap<VertexId, usize> = BTreeMap::new();
    let mut operands_left: BTreeMap<VertexId, usize> = BTreeMap::new();
    for e in g.edges.values() {
        *consumers.entry(e.src).or_default() += 1;
        *operands_left.entry(e.dst).or_default() += 1;
    }
    let mut values: BTreeMap<VertexId, Buffer<T>> = BTreeMap::new();
    let mut operands: BTreeMap<VertexId, Vec<(EdgeId, Buffer<T>)>> = BTreeMap::new();
    for &id in order {
        for (i, p) in g.edges[&id].params.values().enumerate() {
            store.preload(ValueKey::Param(id, i as u32), Buffer::from_tensor(p));
        }
    }
    let input = store.store(ValueKey::Vertex(g.source), Buffer::from_tensor(x))?;
    check_declared(&input, shapes.vertex(g.source), None)?;
    values.insert(g.source, input);

    for &id in order {
        if deadline.is_some_and(|d| Instant::now() >= d) {
            return Err(RunError::TimedOut);
        }
        let e = &g.edges[&id];
        let out = {
            let src = values
                .get(&e.src)
                .ok_or_else(|| ExecError::new(ExecErrorKind::InternalInvariant, format!("vertex {} has no value", e.src)).at(e))?;
            eval_edge(e, src)?
        };
        let left = consumers.get_mut(&e.src).unwrap();
        *left -= 1;
        if *left == 0 {
            values.remove(&e.src);
            store.release(ValueKey::Vertex(e.src));
        }
        let vertex = &g.vertices[&e.dst];
        match &vertex.merge {
            None => {
                let out = store.store(ValueKey::Vertex(e.dst), out)?;
                check_declared(&out, shapes.vertex(e.dst), Some(id))?;
                values.insert(e.dst, out);
            }
            Some(merge) => {
                let out = store.store(ValueKey::Operand(id), out)?;
                check_declared(&out, shapes.edges[&id], Some(id))?;
                let slot = operands.entry(e.dst).or_default();
                slot.push((id, out));
                let pending = operands_left.get_mut(&e.dst).unwrap();
                *pending -= 1;
                if *pending == 0 {
                    let mut slot = operands.remove(&e.dst).unwrap();
                    slot.sort_by_key(|(id, _)| *id);
                    let bufs: Vec<&Buffer<T>> = slot.iter().map(|(_, b)| b).collect();
                    let merged = eval_merge(merge, &bufs)?;
                    for (id, _) in &slot {
                        store.release(ValueKey::Operand(*id));
                    }
                    let merged = store.store(ValueKey::Vertex(e.dst), merged)?;
                    check_declared(&merged, shapes.vertex(e.dst), None)?;
                    values.insert(e.dst, merged);
                }
            }
        }
    }
    values
        .remove(&g.sink)
        .ok_or_else(|| ExecError::new(ExecErrorKind::InternalInvariant, "sink was never produced").into())
}

fn check_declared<T>(b: &Buffer<T>, declared: crate::tensor::Shape, edge: Option<EdgeId>) -> Result<(), ExecError> {
    if b.shape != declared {
        let mut err = ExecError::new(ExecErrorKind::InternalInvariant, format!("value of shape {} where {} was declared", b.shape, declared));
        err.edge = edge;
        return Err(err);
    }
    Ok(())
}

/// Unoptimized evaluation at `f64` in canonical order; the output is
/// converted to `x.dtype()`.
pub fn execute_reference(g: &GraphModel, x: &Tensor) -> Result<Tensor, ExecError> {
    match run_graph::<f64, _>(g, x, Schedule::Canonical, &mut PassThrough, None) {
        Ok(t) => Ok(t),
        Err(RunError::Exec(e)) => Err(e),
        Err(RunError::TimedOut) => unreachable!("no deadline"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Edge, Merge, OperatorKind, Vertex};
    use crate::scalar::DType;
    use crate::tensor::{random_seed_tensor, Shape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_chain_is_exact() {
        let g = GraphModel::chain(&[OperatorKind::Identity; 3]);
        for dtype in DType::ALL {
            let x = random_seed_tensor(Shape::new(1, 3, 4, 4).unwrap(), dtype, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert!(execute_reference(&g, &x).unwrap().bit_eq(&x));
        }
    }

    #[test]
    fn schedules_agree_on_diamond() {
        let mut t1 = Edge::new(0, 0, 1, OperatorKind::Transpose);
        t1.attrs.permutation = Some([0, 1, 3, 2]);
        let mut t2 = Edge::new(1, 0, 1, OperatorKind::Sigmoid);
        t2.attrs = Default::default();
        let e3 = Edge::new(2, 1, 2, OperatorKind::ReLU);
        let mut g = GraphModel::from_parts((0..3).map(Vertex::new).collect(), vec![t1, t2, e3], 0, 2);
        g.vertices.get_mut(&1).unwrap().merge = Some(Merge::MatMul);
        let x = random_seed_tensor(Shape::new(1, 2, 3, 3).unwrap(), DType::F32, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let a = run_graph::<f64, _>(&g, &x, Schedule::Canonical, &mut PassThrough, None).unwrap();
        let b = run_graph::<f64, _>(&g, &x, Schedule::Reverse, &mut PassThrough, None).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn expired_deadline() {
        let g = GraphModel::chain(&[OperatorKind::Identity]);
        let x = Tensor::zeros(Shape::new(1, 1, 1, 1).unwrap(), DType::F32);
        let r = run_graph::<f32, _>(&g, &x, Schedule::Canonical, &mut PassThrough, Some(Instant::now()));
        assert_eq!(r, Err(RunError::TimedOut));
    }
}
