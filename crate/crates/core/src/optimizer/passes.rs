//! Rewrite rules for node optimization, operator reordering and fusion.

use crate::graph::{infer_shapes, Edge, EdgeId, GraphModel, Merge, OperatorAttrs, OperatorKind, Padding, Params, ScalarOperand, VertexId};
use crate::scalar::DType;
use crate::tensor::{Shape, Tensor};

use super::{Fault, FaultSet, Pass, PassReport};

const SWAP_HW: [usize; 4] = [0, 1, 3, 2];

fn f64_tensor(shape: Shape, values: &[f64]) -> Tensor {
    Tensor::from_f64(shape, DType::F64, values).expect("folded parameter shape")
}

fn channel(c: usize) -> Shape {
    Shape::new(1, c, 1, 1).expect("positive channel count")
}

fn values(p: &Params, name: &str) -> Vec<f64> {
    p[name].to_f64_vec()
}

/// `alpha = gamma / sqrt(var + eps)`, `beta = beta - gamma * mean / sqrt(var + eps)`.
pub fn fold_batchnorm(bn: &Params, epsilon: f64) -> Params {
    let (gamma, beta, mean, var) = (values(bn, "gamma"), values(bn, "beta"), values(bn, "mean"), values(bn, "var"));
    let c = gamma.len();
    let inv: Vec<f64> = (0..c).map(|i| gamma[i] / (var[i] + epsilon).sqrt()).collect();
    let shift: Vec<f64> = (0..c).map(|i| beta[i] - gamma[i] * mean[i] / (var[i] + epsilon).sqrt()).collect();
    Params::from([("alpha".to_string(), f64_tensor(channel(c), &inv)), ("beta".to_string(), f64_tensor(channel(c), &shift))])
}

/// Folds a per-channel affine stage into convolution weights. `affine` is a
/// BatchNorm (with its epsilon) or a Scale parameter set. With `drop_beta`
/// the shift term of the affine stage is left out.
pub fn fold_cbr(conv: &Params, affine: &Params, bn_epsilon: Option<f64>, drop_beta: bool) -> Params {
    let scale = match bn_epsilon {
        Some(eps) => fold_batchnorm(affine, eps),
        None => affine.clone(),
    };
    let alpha = values(&scale, "alpha");
    let w = &conv["weight"];
    let ws = w.shape();
    let per_out = ws.c * ws.h * ws.w;
    let weight: Vec<f64> = w.to_f64_vec().iter().enumerate().map(|(i, v)| v * alpha[i / per_out]).collect();
    let bias_in = values(conv, "bias");
    let bias: Vec<f64> = match bn_epsilon {
        Some(eps) => {
            let (gamma, beta, mean, var) = (values(affine, "gamma"), values(affine, "beta"), values(affine, "mean"), values(affine, "var"));
            (0..ws.n)
                .map(|o| {
                    let folded = (bias_in[o] - mean[o]) * gamma[o] / (var[o] + eps).sqrt();
                    if drop_beta {
                        folded
                    } else {
                        folded + beta[o]
                    }
                })
                .collect()
        }
        None => {
            let beta = values(affine, "beta");
            (0..ws.n).map(|o| if drop_beta { bias_in[o] * alpha[o] } else { bias_in[o] * alpha[o] + beta[o] }).collect()
        }
    };
    Params::from([("weight".to_string(), f64_tensor(ws, &weight)), ("bias".to_string(), f64_tensor(channel(ws.n), &bias))])
}

/// An intermediate vertex that a fused/reordered pattern may swallow.
fn plain(g: &GraphModel, v: VertexId) -> bool {
    v != g.source && v != g.sink && g.vertices[&v].merge.is_none() && g.in_edges(v).len() == 1 && g.out_edges(v).len() == 1
}

fn next_edge(g: &GraphModel, e: &Edge) -> Option<EdgeId> {
    plain(g, e.dst).then(|| g.out_edges(e.dst)[0])
}

pub(super) fn apply_once(pass: Pass, g: &mut GraphModel, input: Shape, faults: &FaultSet, report: &mut PassReport) -> bool {
    let Some(order) = g.topological_edges() else { return false };
    match pass {
        Pass::NodeOpt => {
            let Ok(shapes) = infer_shapes(g, input) else { return false };
            order.into_iter().any(|id| node_opt(g, id, shapes.vertex(g.edges[&id].src), report))
        }
        Pass::Reorder => {
            if tor(g, &order, report) {
                return true;
            }
            order.into_iter().any(|id| swap_pool(g, id, faults, report))
        }
        Pass::Fusion => order.into_iter().any(|id| fuse(g, id, faults, report)),
    }
}

fn node_opt(g: &mut GraphModel, id: EdgeId, in_shape: Shape, report: &mut PassReport) -> bool {
    let e = g.edges.get_mut(&id).unwrap();
    let rule = match e.op {
        OperatorKind::ScalarAdd | OperatorKind::ScalarMul => match e.attrs.scalar {
            Some(ScalarOperand::Tensor0d(v)) => {
                e.attrs.scalar = Some(ScalarOperand::Constant(v));
                "node_opt.scalar_fold"
            }
            _ => return false,
        },
        OperatorKind::Transpose => {
            let Some(p) = e.attrs.permutation else { return false };
            let d = in_shape.dims();
            let moved: Vec<usize> = p.iter().copied().filter(|&a| d[a] != 1).collect();
            if !moved.windows(2).all(|w| w[0] < w[1]) {
                return false;
            }
            let target = Shape::from_dims([d[p[0]], d[p[1]], d[p[2]], d[p[3]]]).expect("permuted shape");
            e.op = OperatorKind::Reshape;
            e.attrs = OperatorAttrs {
                target_shape: Some(target),
                ..Default::default()
            };
            "node_opt.transpose_to_reshape"
        }
        OperatorKind::ReduceMeanHW => {
            e.op = OperatorKind::AveragePool;
            e.attrs = OperatorAttrs::window((in_shape.h, in_shape.w), (in_shape.h, in_shape.w), Padding::Valid);
            "node_opt.reduce_mean_to_avg_pool"
        }
        OperatorKind::BatchNorm => {
            let eps = e.attrs.bn_epsilon.unwrap_or(crate::graph::BN_EPSILON);
            e.params = fold_batchnorm(&e.params, eps);
            e.op = OperatorKind::Scale;
            e.attrs = OperatorAttrs::default();
            "node_opt.batchnorm_to_scale"
        }
        _ => return false,
    };
    report.record(rule, vec![id], vec![id]);
    true
}

fn is_swap_hw(e: &Edge) -> bool {
    e.op == OperatorKind::Transpose && e.attrs.permutation == Some(SWAP_HW)
}

/// `Aᵀ × Bᵀ = (B × A)ᵀ`: a MatMul merge fed by two H/W transposes becomes a
/// MatMul of the swapped, untransposed operands followed by one transpose.
fn tor(g: &mut GraphModel, order: &[EdgeId], report: &mut PassReport) -> bool {
    let site = order.iter().find_map(|&id| {
        let m = g.edges[&id].dst;
        if g.vertices[&m].merge != Some(Merge::MatMul) {
            return None;
        }
        let ins = g.in_edges(m);
        (ins.len() == 2 && ins.iter().all(|i| is_swap_hw(&g.edges[i]))).then_some((m, ins[0], ins[1]))
    });
    let Some((m, lhs, rhs)) = site else { return false };
    let (a_src, b_src) = (g.edges[&lhs].src, g.edges[&rhs].src);
    let p = g.add_vertex();
    g.vertices.get_mut(&p).unwrap().merge = Some(Merge::MatMul);
    g.vertices.get_mut(&m).unwrap().merge = None;
    for (id, src) in [(lhs, b_src), (rhs, a_src)] {
        let e = g.edges.get_mut(&id).unwrap();
        e.op = OperatorKind::Identity;
        e.attrs = OperatorAttrs::default();
        e.src = src;
        e.dst = p;
    }
    let t = g.next_edge_id();
    let mut transpose = Edge::new(t, p, m, OperatorKind::Transpose);
    transpose.attrs.permutation = Some(SWAP_HW);
    g.edges.insert(t, transpose);
    report.record("reorder.transpose_matmul", vec![lhs, rhs], vec![lhs, rhs, t]);
    true
}

/// Moves MaxPool ahead of a monotone elementwise operator.
fn swap_pool(g: &mut GraphModel, id: EdgeId, faults: &FaultSet, report: &mut PassReport) -> bool {
    let e = &g.edges[&id];
    let rule = match e.op {
        OperatorKind::Sigmoid => "reorder.sigmoid_maxpool",
        OperatorKind::Softmax if faults.contains(&Fault::SoftmaxMaxpoolReorder) => "reorder.softmax_maxpool",
        _ => return false,
    };
    let Some(next) = next_edge(g, e) else { return false };
    if g.edges[&next].op != OperatorKind::MaxPool {
        return false;
    }
    let a = g.edges[&id].clone();
    let b = g.edges[&next].clone();
    let first = g.edges.get_mut(&id).unwrap();
    first.op = b.op;
    first.attrs = b.attrs;
    first.params = b.params;
    let second = g.edges.get_mut(&next).unwrap();
    second.op = a.op;
    second.attrs = a.attrs;
    second.params = a.params;
    report.record(rule, vec![id, next], vec![id, next]);
    true
}

/// Rewires `head` to end where `tail` ends and removes everything between.
fn splice(g: &mut GraphModel, head: EdgeId, removed: &[EdgeId]) {
    let end = g.edges[removed.last().unwrap()].dst;
    for id in removed {
        let e = g.edges.remove(id).unwrap();
        g.vertices.remove(&e.src);
    }
    g.edges.get_mut(&head).unwrap().dst = end;
}

fn fuse(g: &mut GraphModel, id: EdgeId, faults: &FaultSet, report: &mut PassReport) -> bool {
    let e = &g.edges[&id];
    match e.op {
        OperatorKind::DepthwiseConv2D => {
            let Some(next) = next_edge(g, e) else { return false };
            let pw = &g.edges[&next];
            let ws = match pw.params.get("weight") {
                Some(w) if pw.op == OperatorKind::Conv2D => w.shape(),
                _ => return false,
            };
            if ws.h != 1 || ws.w != 1 || pw.attrs.stride != Some((1, 1)) {
                return false;
            }
            let params = Params::from([
                ("depthwise".to_string(), e.params["weight"].clone()),
                ("depthwise_bias".to_string(), e.params["bias"].clone()),
                ("pointwise".to_string(), pw.params["weight"].clone()),
                ("bias".to_string(), pw.params["bias"].clone()),
            ]);
            let head = g.edges.get_mut(&id).unwrap();
            head.op = OperatorKind::SeparableConv2D;
            head.params = params;
            splice(g, id, &[next]);
            report.record("fusion.separable_conv", vec![id, next], vec![id]);
            true
        }
        OperatorKind::Conv2D => {
            let Some(mid) = next_edge(g, e) else { return false };
            let m = &g.edges[&mid];
            let bn_eps = match m.op {
                OperatorKind::BatchNorm => Some(m.attrs.bn_epsilon.unwrap_or(crate::graph::BN_EPSILON)),
                OperatorKind::Scale => None,
                _ => return false,
            };
            let Some(last) = next_edge(g, m) else { return false };
            if g.edges[&last].op != OperatorKind::ReLU {
                return false;
            }
            let params = fold_cbr(&e.params, &m.params, bn_eps, faults.contains(&Fault::FusedParamError));
            let head = g.edges.get_mut(&id).unwrap();
            head.op = OperatorKind::FusedCBR;
            head.params = params;
            splice(g, id, &[mid, last]);
            report.record("fusion.cbr", vec![id, mid, last], vec![id]);
            true
        }
        _ => false,
    }
}
