#![allow(dead_code)]

use graphfuzz_core::graph::{GraphModel, OperatorKind};
use graphfuzz_core::model_mutation::{apply_model_mutation, ModelMutationRule, MutationContext};
use graphfuzz_core::Shape;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w).unwrap()
}

pub fn random_shape(rng: &mut ChaCha8Rng) -> Shape {
    let side = rng.gen_range(1..=6);
    if rng.gen_bool(0.5) {
        shape(1, rng.gen_range(1..=3), side, side)
    } else {
        shape(rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=6), rng.gen_range(1..=6))
    }
}

/// A valid graph of at most `max_edges` edges grown from an Identity chain
/// by random mutations, together with an input shape it accepts.
pub fn random_graph(rng: &mut ChaCha8Rng, max_edges: usize) -> (GraphModel, Shape) {
    let input = random_shape(rng);
    let mut g = GraphModel::chain(&vec![OperatorKind::Identity; rng.gen_range(1..=3)]);
    let rules = ModelMutationRule::expanded();
    for _ in 0..rng.gen_range(1..=6) {
        let rule = rules[rng.gen_range(0..rules.len())];
        if let Ok(child) = apply_model_mutation(&g, rule, input, MutationContext::default(), rng) {
            if child.edges.len() <= max_edges {
                g = child;
            }
        }
    }
    (g, input)
}
