//! Structure hashing and sequence edit distance.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{json, GraphModel, OperatorKind, VertexId};

/// Hex-encoded SHA-256 digest.
pub type StructureHash = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("at least two models are required")]
    NeedTwoModels,
}

/// Digest of the canonical serialization with all parameter tensors removed.
pub fn structure_hash(g: &GraphModel) -> StructureHash {
    let text = serde_json::to_string(&json::to_value(g, false)).expect("graph serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Operators in canonical topological order, `None` placeholders dropped.
/// A merge vertex contributes its operator right after its last operand.
pub fn operator_sequence(g: &GraphModel) -> Vec<OperatorKind> {
    let order = g.topological_edges().unwrap_or_else(|| g.edges.keys().copied().collect());
    let mut pending: BTreeMap<VertexId, usize> = BTreeMap::new();
    for e in g.edges.values() {
        *pending.entry(e.dst).or_default() += 1;
    }
    let mut seq = Vec::with_capacity(order.len());
    for id in order {
        let e = &g.edges[&id];
        if e.op != OperatorKind::NoneOp {
            seq.push(e.op);
        }
        let left = pending.get_mut(&e.dst).unwrap();
        *left -= 1;
        if *left == 0 {
            if let Some(m) = g.vertices.get(&e.dst).and_then(|v| v.merge.as_ref()) {
                seq.push(m.op());
            }
        }
    }
    seq
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let next = (row[j + 1] + 1).min(row[j] + 1).min(diag + usize::from(x != y));
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

/// Levenshtein distance of the canonical operator sequences; an upper bound
/// on the graph edit distance.
pub fn edit_distance(g1: &GraphModel, g2: &GraphModel) -> usize {
    levenshtein(&operator_sequence(g1), &operator_sequence(g2))
}

/// Mean of `edit_distance` over all unordered pairs.
pub fn mean_edit_distance(models: &[GraphModel]) -> Result<f64, MetricError> {
    if models.len() < 2 {
        return Err(MetricError::NeedTwoModels);
    }
    let seqs: Vec<Vec<OperatorKind>> = models.iter().map(operator_sequence).collect();
    let mut total = 0u64;
    let mut pairs = 0u64;
    for i in 0..seqs.len() {
        for j in i + 1..seqs.len() {
            total += levenshtein(&seqs[i], &seqs[j]) as u64;
            pairs += 1;
        }
    }
    Ok(total as f64 / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::OperatorKind::*;

    #[test]
    fn distance_examples() {
        let g = GraphModel::chain(&[Identity, ReLU]);
        assert_eq!(edit_distance(&g, &g), 0);
        assert_eq!(edit_distance(&g, &GraphModel::chain(&[Identity, ReLU, Sigmoid])), 1);
        assert_eq!(edit_distance(&g, &GraphModel::chain(&[Identity, NoneOp, ReLU])), 0);
    }

    #[test]
    fn mean_examples() {
        let a = GraphModel::chain(&[ReLU]);
        assert_eq!(mean_edit_distance(&[a.clone()]), Err(MetricError::NeedTwoModels));
        assert_eq!(mean_edit_distance(&[a.clone(), a.clone()]).unwrap(), 0.0);
        let b = GraphModel::chain(&[ReLU, Sigmoid]);
        assert_eq!(mean_edit_distance(&[a.clone(), b]).unwrap(), 1.0);
        // pairwise distances 1, 2, 3
        let x = GraphModel::chain(&[ReLU]);
        let y = GraphModel::chain(&[ReLU, Sigmoid]);
        let z = GraphModel::chain(&[Sigmoid, Sigmoid, Sigmoid]);
        assert_eq!(edit_distance(&x, &z), 3);
        assert_eq!(edit_distance(&y, &z), 2);
        assert_eq!(mean_edit_distance(&[x, y, z]).unwrap(), 2.0);
    }

    #[test]
    fn hash_ignores_params_but_not_length() {
        let a = GraphModel::chain(&[Identity; 3]);
        let b = GraphModel::chain(&[Identity; 4]);
        assert_ne!(structure_hash(&a), structure_hash(&b));
        assert_eq!(structure_hash(&a), structure_hash(&super::super::from_json(&super::super::to_json(&a)).unwrap()));
    }
}
