mod common;

use std::collections::BTreeMap;

use common::{random_graph, shape};
use graphfuzz_core::graph::{edit_distance, from_json, infer_shapes, structure_hash, to_json, GraphModel, OperatorKind};
use graphfuzz_core::model_mutation::{apply_model_mutation, ModelMutationRule, MutationContext};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn graph(seed: u64) -> GraphModel {
    random_graph(&mut ChaCha8Rng::seed_from_u64(seed), 8).0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn edit_distance_is_a_metric(a in any::<u64>(), b in any::<u64>(), c in any::<u64>()) {
        let (x, y, z) = (graph(a), graph(b), graph(c));
        prop_assert_eq!(edit_distance(&x, &x), 0);
        prop_assert_eq!(edit_distance(&x, &y), edit_distance(&y, &x));
        prop_assert!(edit_distance(&x, &z) <= edit_distance(&x, &y) + edit_distance(&y, &z));
    }

    #[test]
    fn shape_inference_is_deterministic(seed in any::<u64>()) {
        let (g, input) = random_graph(&mut ChaCha8Rng::seed_from_u64(seed), 12);
        let a = infer_shapes(&g, input).unwrap();
        let b = infer_shapes(&g, input).unwrap();
        for &v in g.vertices.keys() {
            prop_assert_eq!(a.vertex(v), b.vertex(v));
        }
    }

    #[test]
    fn json_roundtrip_preserves_the_graph(seed in any::<u64>()) {
        let (g, _) = random_graph(&mut ChaCha8Rng::seed_from_u64(seed), 12);
        let text = to_json(&g);
        let back = from_json(&text).unwrap();
        prop_assert_eq!(to_json(&back), text);
        prop_assert_eq!(structure_hash(&back), structure_hash(&g));
    }

    #[test]
    fn mutation_products_are_valid_and_leave_the_parent_alone(seed in any::<u64>(), rule_index in 0usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (parent, input) = random_graph(&mut rng, 10);
        let rule = ModelMutationRule::expanded()[rule_index];
        let before_hash = structure_hash(&parent);
        let before = parent.clone();
        if let Ok(child) = apply_model_mutation(&parent, rule, input, MutationContext::default(), &mut rng) {
            prop_assert!(child.validate().is_empty());
            prop_assert!(infer_shapes(&child, input).is_ok());
            prop_assert!(edit_distance(&parent, &child) >= 1, "{} left the sequence unchanged", rule);
        }
        prop_assert_eq!(structure_hash(&parent), before_hash);
        prop_assert_eq!(parent, before);
    }
}

#[test]
fn insertion_rules_apply_on_some_random_parent() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for rule in ModelMutationRule::INSERTIONS {
        let applied = (0..200).any(|_| {
            let (parent, input) = random_graph(&mut rng, 8);
            apply_model_mutation(&parent, rule, input, MutationContext::default(), &mut rng).is_ok()
        });
        assert!(applied, "{rule} never applied");
    }
}

#[test]
fn chains_up_to_four_over_five_ops_hash_apart() {
    use OperatorKind::*;
    let ops = [Identity, ReLU, Sigmoid, Softmax, Dropout];
    let mut seen: BTreeMap<String, Vec<OperatorKind>> = BTreeMap::new();
    let mut frontier: Vec<Vec<OperatorKind>> = vec![vec![]];
    let mut count = 0;
    for _ in 0..4 {
        frontier = frontier
            .iter()
            .flat_map(|c| {
                ops.iter().map(move |&op| {
                    let mut c = c.clone();
                    c.push(op);
                    c
                })
            })
            .collect();
        for chain in &frontier {
            count += 1;
            let h = structure_hash(&GraphModel::chain(chain));
            if let Some(prev) = seen.insert(h, chain.clone()) {
                panic!("{prev:?} and {chain:?} share a structure hash");
            }
        }
    }
    assert_eq!(count, 5 + 25 + 125 + 625);
    assert_eq!(seen.len(), count);
}

#[test]
fn ipt_on_a_double_unit_shape_swaps_batch_and_channel() {
    let parent = GraphModel::chain(&[OperatorKind::Identity]);
    let child = apply_model_mutation(&parent, ModelMutationRule::IPT, shape(1, 1, 4, 4), MutationContext::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let t: Vec<_> = child.edges.values().filter(|e| e.op == OperatorKind::Transpose).collect();
    assert_eq!(t.len(), 1);
    assert_eq!(t[0].attrs.permutation, Some([1, 0, 2, 3]));
}

#[test]
fn ipt_is_inapplicable_without_two_unit_axes() {
    let parent = GraphModel::chain(&[OperatorKind::Identity]);
    let r = apply_model_mutation(&parent, ModelMutationRule::IPT, shape(1, 3, 4, 4), MutationContext::default(), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(r.is_err());
}

#[test]
fn ror_never_picks_the_same_operator() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..200 {
        let (parent, input) = random_graph(&mut rng, 8);
        let ops: Vec<OperatorKind> = graphfuzz_core::model_mutation::ROR_CANDIDATES.to_vec();
        let op = ops[rng.gen_range(0..ops.len())];
        if let Ok(child) = apply_model_mutation(&parent, ModelMutationRule::ROR(op), input, MutationContext::default(), &mut rng) {
            let changed: Vec<_> = child.edges.values().filter(|e| parent.edges.get(&e.id).is_some_and(|p| p.op != e.op)).collect();
            assert!(changed.len() <= 1);
            assert!(edit_distance(&parent, &child) >= 1);
        }
    }
}
