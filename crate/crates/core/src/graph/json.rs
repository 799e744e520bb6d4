//! Canonical JSON encoding of models.
//!
//! Objects are emitted with sorted keys, vertices and edges in ascending id
//! order, and numbers in shortest round-trip form, so equal graphs encode to
//! identical bytes.

use serde_json::{json, Map, Number, Value};
use thiserror::Error;

use super::{Edge, GraphModel, Merge, OperatorAttrs, OperatorKind, Params, Vertex, BN_EPSILON};
use crate::scalar::DType;
use crate::tensor::{Shape, Tensor};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{location}: {message}")]
pub struct ParseError {
    pub location: String,
    pub message: String,
}

impl ParseError {
    fn at(location: impl Into<String>, message: impl Into<String>) -> ParseError {
        ParseError {
            location: location.into(),
            message: message.into(),
        }
    }
}

fn number(x: f64) -> Value {
    match Number::from_f64(x) {
        Some(n) => Value::Number(n),
        None if x.is_nan() => Value::String("NaN".into()),
        None if x > 0.0 => Value::String("inf".into()),
        None => Value::String("-inf".into()),
    }
}

fn tensor_value(t: &Tensor) -> Value {
    json!({
        "dtype": t.dtype().name(),
        "shape": t.shape().dims(),
        "data": t.to_f64_vec().into_iter().map(number).collect::<Vec<_>>(),
    })
}

fn params_value(params: &Params) -> Value {
    Value::Object(params.iter().map(|(k, t)| (k.clone(), tensor_value(t))).collect())
}

/// `params` lists are omitted when `with_params` is false (structure hashing).
pub(crate) fn to_value(g: &GraphModel, with_params: bool) -> Value {
    let vertices: Vec<Value> = g
        .vertices
        .values()
        .map(|v| {
            let mut obj = Map::new();
            obj.insert("id".into(), json!(v.id));
            match &v.merge {
                None => {}
                Some(Merge::MatMul) => {
                    obj.insert("merge".into(), json!({"op": "MatMul"}));
                }
                Some(Merge::AddBatchNorm { epsilon, params }) => {
                    let mut m = Map::new();
                    m.insert("op".into(), json!("Add"));
                    m.insert("attrs".into(), json!({"bn_epsilon": number(*epsilon)}));
                    if with_params {
                        m.insert("params".into(), params_value(params));
                    }
                    obj.insert("merge".into(), Value::Object(m));
                }
            }
            Value::Object(obj)
        })
        .collect();
    let edges: Vec<Value> = g
        .edges
        .values()
        .map(|e| {
            let mut obj = Map::new();
            obj.insert("id".into(), json!(e.id));
            obj.insert("src".into(), json!(e.src));
            obj.insert("dst".into(), json!(e.dst));
            obj.insert("op".into(), json!(e.op.name()));
            obj.insert("attrs".into(), serde_json::to_value(&e.attrs).expect("attrs serialize"));
            if with_params {
                obj.insert("params".into(), params_value(&e.params));
            }
            Value::Object(obj)
        })
        .collect();
    json!({
        "version": FORMAT_VERSION,
        "source": g.source,
        "sink": g.sink,
        "vertices": vertices,
        "edges": edges,
    })
}

pub fn to_json(g: &GraphModel) -> String {
    serde_json::to_string(&to_value(g, true)).expect("graph serializes")
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str, at: &str) -> Result<&'a Value, ParseError> {
    obj.get(key).ok_or_else(|| ParseError::at(at, format!("missing field \"{key}\"")))
}

fn object<'a>(v: &'a Value, at: &str) -> Result<&'a Map<String, Value>, ParseError> {
    v.as_object().ok_or_else(|| ParseError::at(at, "expected an object"))
}

fn array<'a>(v: &'a Value, at: &str) -> Result<&'a Vec<Value>, ParseError> {
    v.as_array().ok_or_else(|| ParseError::at(at, "expected an array"))
}

fn id(v: &Value, at: &str) -> Result<u32, ParseError> {
    v.as_u64()
        .and_then(|x| u32::try_from(x).ok())
        .ok_or_else(|| ParseError::at(at, "expected a non-negative 32-bit integer"))
}

fn float(v: &Value, at: &str) -> Result<f64, ParseError> {
    match v {
        Value::Number(n) => n.as_f64().ok_or_else(|| ParseError::at(at, "number out of range")),
        Value::String(s) if s == "NaN" => Ok(f64::NAN),
        Value::String(s) if s == "inf" => Ok(f64::INFINITY),
        Value::String(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
        _ => Err(ParseError::at(at, "expected a number")),
    }
}

fn tensor(v: &Value, at: &str) -> Result<Tensor, ParseError> {
    let obj = object(v, at)?;
    let dtype_name = field(obj, "dtype", at)?
        .as_str()
        .ok_or_else(|| ParseError::at(format!("{at}.dtype"), "expected a string"))?;
    let dtype = DType::from_name(dtype_name).ok_or_else(|| ParseError::at(format!("{at}.dtype"), format!("unknown dtype \"{dtype_name}\"")))?;
    let shape_at = format!("{at}.shape");
    let dims = array(field(obj, "shape", at)?, &shape_at)?;
    if dims.len() != 4 {
        return Err(ParseError::at(shape_at, "shape must have 4 extents"));
    }
    let mut d = [0usize; 4];
    for (i, x) in dims.iter().enumerate() {
        d[i] = x.as_u64().ok_or_else(|| ParseError::at(format!("{shape_at}[{i}]"), "expected a positive integer"))? as usize;
    }
    let shape = Shape::from_dims(d).map_err(|e| ParseError::at(&shape_at, e.to_string()))?;
    let data_at = format!("{at}.data");
    let data = array(field(obj, "data", at)?, &data_at)?
        .iter()
        .enumerate()
        .map(|(i, x)| float(x, &format!("{data_at}[{i}]")))
        .collect::<Result<Vec<f64>, _>>()?;
    let t = Tensor::from_f64(shape, dtype, &data).map_err(|e| ParseError::at(&data_at, e.to_string()))?;
    let exact = t.to_f64_vec().iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
    if !exact {
        return Err(ParseError::at(data_at, format!("values are not representable in {dtype}")));
    }
    Ok(t)
}

fn params(v: Option<&Value>, at: &str) -> Result<Params, ParseError> {
    let Some(v) = v else { return Ok(Params::new()) };
    object(v, at)?
        .iter()
        .map(|(k, t)| Ok((k.clone(), tensor(t, &format!("{at}.{k}"))?)))
        .collect()
}

fn vertex(v: &Value, at: &str) -> Result<Vertex, ParseError> {
    let obj = object(v, at)?;
    let vid = id(field(obj, "id", at)?, &format!("{at}.id"))?;
    let merge = match obj.get("merge") {
        None => None,
        Some(m) => {
            let mat = format!("{at}.merge");
            let mobj = object(m, &mat)?;
            match field(mobj, "op", &mat)?.as_str() {
                Some("MatMul") => Some(Merge::MatMul),
                Some("Add") => {
                    let epsilon = match mobj.get("attrs").and_then(|a| a.get("bn_epsilon")) {
                        Some(e) => float(e, &format!("{mat}.attrs.bn_epsilon"))?,
                        None => BN_EPSILON,
                    };
                    Some(Merge::AddBatchNorm {
                        epsilon,
                        params: params(mobj.get("params"), &format!("{mat}.params"))?,
                    })
                }
                _ => return Err(ParseError::at(format!("{mat}.op"), "expected \"MatMul\" or \"Add\"")),
            }
        }
    };
    Ok(Vertex { id: vid, merge })
}

fn edge(v: &Value, at: &str) -> Result<Edge, ParseError> {
    let obj = object(v, at)?;
    let op_at = format!("{at}.op");
    let op_name = field(obj, "op", at)?.as_str().ok_or_else(|| ParseError::at(&op_at, "expected a string"))?;
    let op = OperatorKind::from_name(op_name).ok_or_else(|| ParseError::at(&op_at, format!("unknown operator \"{op_name}\"")))?;
    let attrs: OperatorAttrs = match obj.get("attrs") {
        None => OperatorAttrs::default(),
        Some(a) => serde_json::from_value(a.clone()).map_err(|e| ParseError::at(format!("{at}.attrs"), e.to_string()))?,
    };
    Ok(Edge {
        id: id(field(obj, "id", at)?, &format!("{at}.id"))?,
        src: id(field(obj, "src", at)?, &format!("{at}.src"))?,
        dst: id(field(obj, "dst", at)?, &format!("{at}.dst"))?,
        op,
        attrs,
        params: params(obj.get("params"), &format!("{at}.params"))?,
    })
}

/// Parses a model. The result is not validated; see [`GraphModel::validate`].
pub fn from_json(text: &str) -> Result<GraphModel, ParseError> {
    let root: Value = serde_json::from_str(text).map_err(|e| ParseError::at(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    let obj = object(&root, "$")?;
    let version = field(obj, "version", "$")?.as_u64();
    if version != Some(FORMAT_VERSION) {
        return Err(ParseError::at("$.version", format!("unsupported model version {:?}", obj["version"])));
    }
    let source = id(field(obj, "source", "$")?, "$.source")?;
    let sink = id(field(obj, "sink", "$")?, "$.sink")?;
    let mut g = GraphModel::from_parts(Vec::new(), Vec::new(), source, sink);
    for (i, v) in array(field(obj, "vertices", "$")?, "$.vertices")?.iter().enumerate() {
        let at = format!("$.vertices[{i}]");
        let v = vertex(v, &at)?;
        if g.vertices.insert(v.id, v).is_some() {
            return Err(ParseError::at(at, "duplicate vertex id"));
        }
    }
    for (i, e) in array(field(obj, "edges", "$")?, "$.edges")?.iter().enumerate() {
        let at = format!("$.edges[{i}]");
        let e = edge(e, &at)?;
        if g.edges.insert(e.id, e).is_some() {
            return Err(ParseError::at(at, "duplicate edge id"));
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{OperatorKind::*, Padding};

    fn conv_graph(scale: f64) -> GraphModel {
        let mut g = GraphModel::chain(&[Identity, Conv2D, ReLU]);
        let e = g.edges.get_mut(&1).unwrap();
        e.attrs = OperatorAttrs::window((1, 1), (1, 1), Padding::Same);
        e.params.insert("weight".into(), Tensor::from_f64(Shape::new(1, 1, 1, 1).unwrap(), DType::F32, &[0.1 * scale]).unwrap());
        e.params.insert("bias".into(), Tensor::from_f64(Shape::new(1, 1, 1, 1).unwrap(), DType::F32, &[0.0]).unwrap());
        g
    }

    #[test]
    fn roundtrip_identical() {
        let g = conv_graph(1.0);
        assert!(g.is_valid());
        let text = to_json(&g);
        let back = from_json(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(to_json(&back), text);
    }

    #[test]
    fn keys_are_sorted() {
        let text = to_json(&GraphModel::chain(&[Identity]));
        assert_eq!(
            text,
            r#"{"edges":[{"attrs":{},"dst":1,"id":0,"op":"Identity","params":{},"src":0}],"sink":1,"source":0,"version":1,"vertices":[{"id":0},{"id":1}]}"#
        );
    }

    #[test]
    fn missing_sink() {
        let mut v: Value = serde_json::from_str(&to_json(&GraphModel::chain(&[Identity]))).unwrap();
        v.as_object_mut().unwrap().remove("sink");
        let err = from_json(&v.to_string()).unwrap_err();
        assert_eq!(err.location, "$");
        assert!(err.message.contains("sink"));
    }

    #[test]
    fn syntax_error_has_line() {
        let err = from_json("{\n  \"version\": 1,\n  oops").unwrap_err();
        assert!(err.location.starts_with("line 3"), "{}", err.location);
    }

    #[test]
    fn unknown_op() {
        let text = to_json(&GraphModel::chain(&[ReLU])).replace("ReLU", "Gelu");
        let err = from_json(&text).unwrap_err();
        assert_eq!(err.location, "$.edges[0].op");
    }
}
