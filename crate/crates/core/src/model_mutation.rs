//! Seed models and the model mutation rules.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::graph::{infer_shapes, Edge, EdgeId, GraphModel, Merge, OperatorAttrs, OperatorKind, Padding, Params, ScalarOperand, BN_EPSILON};
use crate::scalar::DType;
use crate::tensor::{Shape, Tensor};

/// Bound of the uniform distribution fresh parameters are drawn from.
pub const PARAM_RANGE: f64 = 0.5;

/// Operators a ROR mutation may substitute in.
pub const ROR_CANDIDATES: [OperatorKind; 18] = [
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
    OperatorKind::ScalarAdd,
    OperatorKind::ScalarMul,
    OperatorKind::Dropout,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelMutationRule {
    /// Operator carrying a zero-dimensional tensor.
    ZDT,
    /// Transpose that moves no data.
    IPT,
    /// Mean reduction over height and width.
    HWR,
    /// Transpose/MatMul diamond.
    TOR,
    /// Monotone activation followed by MaxPool.
    MOR,
    /// Depthwise plus pointwise convolution.
    ESC,
    /// Convolution, BatchNorm, ReLU.
    ECB,
    /// Replace one operator.
    ROR(OperatorKind),
}

impl ModelMutationRule {
    pub const INSERTIONS: [ModelMutationRule; 7] = [
        ModelMutationRule::ZDT,
        ModelMutationRule::IPT,
        ModelMutationRule::HWR,
        ModelMutationRule::TOR,
        ModelMutationRule::MOR,
        ModelMutationRule::ESC,
        ModelMutationRule::ECB,
    ];

    /// The insertion rules followed by one ROR rule per candidate operator.
    pub fn expanded() -> Vec<ModelMutationRule> {
        let mut all = ModelMutationRule::INSERTIONS.to_vec();
        all.extend(ROR_CANDIDATES.iter().map(|&op| ModelMutationRule::ROR(op)));
        all
    }

    pub fn name(&self) -> String {
        match self {
            ModelMutationRule::ZDT => "ZDT".into(),
            ModelMutationRule::IPT => "IPT".into(),
            ModelMutationRule::HWR => "HWR".into(),
            ModelMutationRule::TOR => "TOR".into(),
            ModelMutationRule::MOR => "MOR".into(),
            ModelMutationRule::ESC => "ESC".into(),
            ModelMutationRule::ECB => "ECB".into(),
            ModelMutationRule::ROR(op) => format!("ROR({op})"),
        }
    }
}

impl fmt::Display for ModelMutationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for ModelMutationRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(r) = ModelMutationRule::INSERTIONS.iter().find(|r| r.name() == s) {
            return Ok(*r);
        }
        s.strip_prefix("ROR(")
            .and_then(|rest| rest.strip_suffix(')'))
            .and_then(OperatorKind::from_name)
            .filter(|op| ROR_CANDIDATES.contains(op))
            .map(ModelMutationRule::ROR)
            .ok_or_else(|| format!("unknown model mutation rule {s:?}"))
    }
}

impl Serialize for ModelMutationRule {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for ModelMutationRule {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MutationError {
    #[error("inapplicable: {0}")]
    Inapplicable(String),
}

fn inapplicable<T>(reason: impl Into<String>) -> Result<T, MutationError> {
    Err(MutationError::Inapplicable(reason.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedConfig {
    pub chain_length: usize,
    pub input_shape: Shape,
}

/// A path of `chain_length` Identity edges.
pub fn generate_seed_model(cfg: &SeedConfig) -> GraphModel {
    assert!(cfg.chain_length >= 1, "chain length must be positive");
    GraphModel::chain(&vec![OperatorKind::Identity; cfg.chain_length])
}

/// Switches that widen the set of constructs a mutation may produce.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MutationContext {
    /// Allow MOR to insert Softmax instead of Sigmoid.
    pub allow_softmax_mor: bool,
}

struct Construct {
    op: OperatorKind,
    attrs: OperatorAttrs,
    params: Params,
}

impl Construct {
    fn new(op: OperatorKind) -> Construct {
        Construct {
            op,
            attrs: OperatorAttrs::default(),
            params: Params::new(),
        }
    }

    fn attrs(mut self, attrs: OperatorAttrs) -> Construct {
        self.attrs = attrs;
        self
    }

    fn params(mut self, params: Params) -> Construct {
        self.params = params;
        self
    }
}

fn uniform<R: Rng + ?Sized>(shape: Shape, rng: &mut R, offset: f64) -> Tensor {
    let data: Vec<f64> = (0..shape.element_count()).map(|_| offset + rng.gen_range(-PARAM_RANGE..=PARAM_RANGE)).collect();
    Tensor::from_f64(shape, DType::F32, &data).expect("parameter shape")
}

fn dims(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w).expect("parameter extents are positive")
}

fn conv_params<R: Rng + ?Sized>(out: usize, inp: usize, k: usize, rng: &mut R) -> Params {
    Params::from([("weight".to_string(), uniform(dims(out, inp, k, k), rng, 0.0)), ("bias".to_string(), uniform(dims(1, out, 1, 1), rng, 0.0))])
}

fn bn_params<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Params {
    let ch = dims(1, c, 1, 1);
    Params::from([
        ("gamma".to_string(), uniform(ch, rng, 0.0)),
        ("beta".to_string(), uniform(ch, rng, 0.0)),
        ("mean".to_string(), uniform(ch, rng, 0.0)),
        ("var".to_string(), uniform(ch, rng, 1.0)),
    ])
}

fn conv(c: usize, k: usize, rng: &mut (impl Rng + ?Sized)) -> Construct {
    Construct::new(OperatorKind::Conv2D)
        .attrs(OperatorAttrs::window((k, k), (1, 1), Padding::Same))
        .params(conv_params(c, c, k, rng))
}

fn depthwise(c: usize, rng: &mut (impl Rng + ?Sized)) -> Construct {
    Construct::new(OperatorKind::DepthwiseConv2D)
        .attrs(OperatorAttrs::window((3, 3), (1, 1), Padding::Same))
        .params(conv_params(c, 1, 3, rng))
}

fn batchnorm(c: usize, rng: &mut (impl Rng + ?Sized)) -> Construct {
    Construct::new(OperatorKind::BatchNorm)
        .attrs(OperatorAttrs {
            bn_epsilon: Some(BN_EPSILON),
            ..Default::default()
        })
        .params(bn_params(c, rng))
}

fn transpose(perm: [usize; 4]) -> Construct {
    Construct::new(OperatorKind::Transpose).attrs(OperatorAttrs {
        permutation: Some(perm),
        ..Default::default()
    })
}

fn scalar_value<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    DType::F32.quantize(rng.gen_range(-1.0..=1.0))
}

const PERMUTATIONS: [[usize; 4]; 24] = [
    [0, 1, 2, 3],
    [0, 1, 3, 2],
    [0, 2, 1, 3],
    [0, 2, 3, 1],
    [0, 3, 1, 2],
    [0, 3, 2, 1],
    [1, 0, 2, 3],
    [1, 0, 3, 2],
    [1, 2, 0, 3],
    [1, 2, 3, 0],
    [1, 3, 0, 2],
    [1, 3, 2, 0],
    [2, 0, 1, 3],
    [2, 0, 3, 1],
    [2, 1, 0, 3],
    [2, 1, 3, 0],
    [2, 3, 0, 1],
    [2, 3, 1, 0],
    [3, 0, 1, 2],
    [3, 0, 2, 1],
    [3, 1, 0, 2],
    [3, 1, 2, 0],
    [3, 2, 0, 1],
    [3, 2, 1, 0],
];

/// Non-identity permutations that only exchange axes of extent 1.
pub fn unit_axis_permutations(s: Shape) -> Vec<[usize; 4]> {
    let d = s.dims();
    PERMUTATIONS
        .iter()
        .copied()
        .filter(|p| *p != [0, 1, 2, 3] && (0..4).all(|a| p[a] == a || d[a] == 1))
        .collect()
}

/// Attributes and parameters for `op` applied to an input of shape `s`,
/// keeping the channel count.
fn replacement<R: Rng + ?Sized>(op: OperatorKind, s: Shape, rng: &mut R) -> Construct {
    use OperatorKind::*;
    let c = s.c;
    match op {
        Conv2D => conv(c, 3, rng),
        DepthwiseConv2D => depthwise(c, rng),
        SeparableConv2D => Construct::new(SeparableConv2D)
            .attrs(OperatorAttrs::window((3, 3), (1, 1), Padding::Same))
            .params(Params::from([
                ("depthwise".to_string(), uniform(dims(c, 1, 3, 3), rng, 0.0)),
                ("depthwise_bias".to_string(), uniform(dims(1, c, 1, 1), rng, 0.0)),
                ("pointwise".to_string(), uniform(dims(c, c, 1, 1), rng, 0.0)),
                ("bias".to_string(), uniform(dims(1, c, 1, 1), rng, 0.0)),
            ])),
        BatchNorm => batchnorm(c, rng),
        Scale => {
            let ch = dims(1, c, 1, 1);
            Construct::new(Scale).params(Params::from([("alpha".to_string(), uniform(ch, rng, 0.0)), ("beta".to_string(), uniform(ch, rng, 0.0))]))
        }
        MaxPool | AveragePool => Construct::new(op).attrs(OperatorAttrs::window((2, 2), (2, 2), Padding::Same)),
        Transpose => transpose(*PERMUTATIONS[1..].choose(rng).unwrap()),
        Reshape => {
            let d = s.dims();
            let p = PERMUTATIONS[1..].choose(rng).unwrap();
            let target = Shape::from_dims([d[p[0]], d[p[1]], d[p[2]], d[p[3]]]).expect("same element count");
            Construct::new(Reshape).attrs(OperatorAttrs {
                target_shape: Some(target),
                ..Default::default()
            })
        }
        ScalarAdd | ScalarMul => Construct::new(op).attrs(OperatorAttrs {
            scalar: Some(ScalarOperand::Constant(scalar_value(rng))),
            ..Default::default()
        }),
        _ => Construct::new(op),
    }
}

fn push_edge(g: &mut GraphModel, src: u32, dst: u32, c: Construct) -> EdgeId {
    let id = g.next_edge_id();
    g.edges.insert(id, Edge::new(id, src, dst, c.op).with_attrs(c.attrs).with_params(c.params));
    id
}

/// Inserts `path` between the site's source vertex and the site edge.
fn insert_path(g: &mut GraphModel, site: EdgeId, path: Vec<Construct>) {
    let mut at = g.edges[&site].src;
    for c in path {
        let v = g.add_vertex();
        push_edge(g, at, v, c);
        at = v;
    }
    g.edges.get_mut(&site).unwrap().src = at;
}

fn finish(g: GraphModel, input: Shape) -> Result<GraphModel, MutationError> {
    if let Some(v) = g.validate().first() {
        return inapplicable(format!("mutation produced an invalid graph: {v}"));
    }
    match infer_shapes(&g, input) {
        Ok(_) => Ok(g),
        Err(e) => inapplicable(e.to_string()),
    }
}

/// Applies `rule` at a uniformly chosen edge. The parent graph is not modified.
pub fn apply_model_mutation<R: Rng + ?Sized>(
    parent: &GraphModel,
    rule: ModelMutationRule,
    input: Shape,
    ctx: MutationContext,
    rng: &mut R,
) -> Result<GraphModel, MutationError> {
    let shapes = infer_shapes(parent, input).map_err(|e| MutationError::Inapplicable(e.to_string()))?;
    let mut g = parent.clone();
    let ids: Vec<EdgeId> = match rule {
        ModelMutationRule::ROR(op) => g.edges.values().filter(|e| e.op != op).map(|e| e.id).collect(),
        _ => g.edges.keys().copied().collect(),
    };
    let Some(&site) = ids.choose(rng) else {
        return inapplicable("no eligible edge");
    };
    let s = shapes.vertex(g.edges[&site].src);
    match rule {
        ModelMutationRule::ZDT => {
            let op = if rng.gen_bool(0.5) { OperatorKind::ScalarAdd } else { OperatorKind::ScalarMul };
            let c = Construct::new(op).attrs(OperatorAttrs {
                scalar: Some(ScalarOperand::Tensor0d(scalar_value(rng))),
                ..Default::default()
            });
            insert_path(&mut g, site, vec![c]);
        }
        ModelMutationRule::IPT => {
            let perms = unit_axis_permutations(s);
            let Some(&p) = perms.choose(rng) else {
                return inapplicable(format!("no unit axes to exchange at {s}"));
            };
            insert_path(&mut g, site, vec![transpose(p)]);
        }
        ModelMutationRule::HWR => insert_path(&mut g, site, vec![Construct::new(OperatorKind::ReduceMeanHW)]),
        ModelMutationRule::TOR => {
            if s.h != s.w {
                return inapplicable(format!("site {s} is not square"));
            }
            let u = g.edges[&site].src;
            let m = g.add_vertex();
            g.vertices.get_mut(&m).unwrap().merge = Some(Merge::MatMul);
            let b = g.add_vertex();
            for _ in 0..2 {
                push_edge(&mut g, u, m, transpose([0, 1, 3, 2]));
            }
            push_edge(&mut g, m, b, transpose([0, 1, 3, 2]));
            g.edges.get_mut(&site).unwrap().src = b;
        }
        ModelMutationRule::MOR => {
            if s.h < 2 || s.w < 2 {
                return inapplicable(format!("site {s} is too small to pool"));
            }
            let act = if ctx.allow_softmax_mor && rng.gen_bool(0.5) { OperatorKind::Softmax } else { OperatorKind::Sigmoid };
            let pool = Construct::new(OperatorKind::MaxPool).attrs(OperatorAttrs::window((2, 2), (2, 2), Padding::Valid));
            insert_path(&mut g, site, vec![Construct::new(act), pool]);
        }
        ModelMutationRule::ESC => {
            let dw = depthwise(s.c, rng);
            let pw = conv(s.c, 1, rng);
            insert_path(&mut g, site, vec![dw, pw]);
        }
        ModelMutationRule::ECB => {
            let cv = conv(s.c, 3, rng);
            let bn = batchnorm(s.c, rng);
            insert_path(&mut g, site, vec![cv, bn, Construct::new(OperatorKind::ReLU)]);
        }
        ModelMutationRule::ROR(op) => {
            let c = replacement(op, s, rng);
            let e = g.edges.get_mut(&site).unwrap();
            e.op = c.op;
            e.attrs = c.attrs;
            e.params = c.params;
        }
    }
    finish(g, input)
}
