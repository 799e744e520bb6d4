//! Differential oracle: backend outcomes, bug classification and dedup.

mod backends;
mod corpus;
pub mod wire;

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{structure_hash, GraphModel};
use crate::scalar::DType;
use crate::tensor::{Shape, Tensor};

pub use backends::{OptimizingBackend, ReferenceBackend};
pub use corpus::{corpus_digest, entry_dirs, read_entry, write_entry, BugEntry, CorpusError};
pub use wire::{ExternBackend, WireRequest, WireResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Trusted,
    UnderTest,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackendId {
    pub name: String,
    pub role: Role,
}

impl BackendId {
    pub fn trusted(name: impl Into<String>) -> BackendId {
        BackendId { name: name.into(), role: Role::Trusted }
    }

    pub fn under_test(name: impl Into<String>) -> BackendId {
        BackendId {
            name: name.into(),
            role: Role::UnderTest,
        }
    }
}

/// Replaces every run of ASCII digits with `#`.
pub fn normalize_message(message: &str) -> String {
    let mut out = String::with_capacity(message.len());
    let mut in_digits = false;
    for ch in message.chars() {
        if ch.is_ascii_digit() {
            if !in_digits {
                out.push('#');
            }
            in_digits = true;
        } else {
            out.push(ch);
            in_digits = false;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CrashSignature {
    pub error_kind: String,
    pub op_kind: String,
    pub message_template: String,
}

impl CrashSignature {
    pub fn new(error_kind: impl Into<String>, op_kind: impl Into<String>, message: &str) -> CrashSignature {
        CrashSignature {
            error_kind: error_kind.into(),
            op_kind: op_kind.into(),
            message_template: normalize_message(message),
        }
    }

    pub fn timeout() -> CrashSignature {
        CrashSignature::new("Timeout", "", "execution exceeded its time budget")
    }

    pub fn shape_mismatch() -> CrashSignature {
        CrashSignature::new("ShapeMismatch", "", "output shape mismatch")
    }

    pub fn key(&self) -> String {
        let text = format!("{}\n{}\n{}", self.error_kind, self.op_kind, self.message_template);
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}

impl fmt::Display for CrashSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.error_kind)?;
        if !self.op_kind.is_empty() {
            write!(f, " ({})", self.op_kind)?;
        }
        write!(f, ": {}", self.message_template)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendStatus {
    Ok(Tensor),
    Crash(CrashSignature),
    Timeout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendOutcome {
    pub status: BackendStatus,
    pub duration: Duration,
}

impl BackendOutcome {
    pub fn output(&self) -> Option<&Tensor> {
        match &self.status {
            BackendStatus::Ok(t) => Some(t),
            _ => None,
        }
    }
}

pub trait Backend {
    fn id(&self) -> BackendId;
    fn execute(&mut self, g: &GraphModel, x: &Tensor, timeout: Duration) -> BackendOutcome;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffConfig {
    pub epsilon: f64,
    pub stability_reruns: u32,
    pub timeout_secs: f64,
}

impl Default for DiffConfig {
    fn default() -> DiffConfig {
        DiffConfig {
            epsilon: 0.15,
            stability_reruns: 3,
            timeout_secs: 10.0,
        }
    }
}

impl DiffConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DiffError {
    #[error("at least two trusted backends are required, got {0}")]
    TooFewTrusted(usize),
    #[error("epsilon must be positive")]
    BadEpsilon,
    #[error("output shapes differ: {0} vs {1}")]
    ShapeMismatch(Shape, Shape),
}

/// Maximum elementwise absolute difference at `f64`. Two NaNs count as
/// equal; a NaN against a number counts as an infinite difference.
pub fn compute_inconsistency(a: &Tensor, b: &Tensor) -> Result<f64, DiffError> {
    if a.shape() != b.shape() {
        return Err(DiffError::ShapeMismatch(a.shape(), b.shape()));
    }
    let mut worst = 0.0f64;
    for i in 0..a.len() {
        let (x, y) = (a.get_f64(i), b.get_f64(i));
        let d = if x == y || (x.is_nan() && y.is_nan()) {
            0.0
        } else if x.is_nan() || y.is_nan() {
            f64::INFINITY
        } else {
            (x - y).abs()
        };
        worst = worst.max(d);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BugKind {
    Crash,
    NaN,
    Inconsistency,
}

impl BugKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            BugKind::Crash => "crash",
            BugKind::NaN => "nan",
            BugKind::Inconsistency => "inconsistency",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RootLabel {
    CacheReuse,
    ImplementationBug,
    InferenceAcceleration,
    Precision,
    Environment,
    Random,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub shape: Shape,
    pub dtype: DType,
    pub mean: f64,
}

impl TensorMeta {
    pub fn of(x: &Tensor) -> TensorMeta {
        TensorMeta {
            shape: x.shape(),
            dtype: x.dtype(),
            mean: x.mean(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BugReport {
    pub kind: BugKind,
    pub model_hash: String,
    pub dedup_key: String,
    pub tensor_meta: TensorMeta,
    /// Keyed `"<trusted>|<under test>"`.
    #[serde(with = "lossless_floats")]
    pub inconsistency_values: BTreeMap<String, f64>,
    pub crash: Option<CrashSignature>,
    pub root_label: Option<RootLabel>,
    pub duplicates: u64,
}

impl BugReport {
    fn new(kind: BugKind, g: &GraphModel, x: &Tensor) -> BugReport {
        let model_hash = structure_hash(g);
        BugReport {
            kind,
            dedup_key: model_hash.clone(),
            model_hash,
            tensor_meta: TensorMeta::of(x),
            inconsistency_values: BTreeMap::new(),
            crash: None,
            root_label: None,
            duplicates: 0,
        }
    }

    fn crash(g: &GraphModel, x: &Tensor, sig: CrashSignature) -> BugReport {
        let mut r = BugReport::new(BugKind::Crash, g, x);
        r.dedup_key = sig.key();
        r.crash = Some(sig);
        r
    }

    pub fn max_inconsistency(&self) -> f64 {
        self.inconsistency_values.values().copied().fold(0.0, f64::max)
    }
}

/// Encodes non-finite values as strings so they survive JSON.
pub(crate) mod lossless_floats {
    use std::collections::BTreeMap;

    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};
    use serde_json::Value;

    pub fn serialize<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(m.iter().map(|(k, &v)| {
            let value = if v.is_finite() {
                serde_json::json!(v)
            } else if v.is_nan() {
                Value::from("NaN")
            } else if v > 0.0 {
                Value::from("inf")
            } else {
                Value::from("-inf")
            };
            (k, value)
        }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, f64>, D::Error> {
        let raw = BTreeMap::<String, Value>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, v)| {
                let x = match &v {
                    Value::Number(n) => n.as_f64(),
                    Value::String(s) if s == "NaN" => Some(f64::NAN),
                    Value::String(s) if s == "inf" => Some(f64::INFINITY),
                    Value::String(s) if s == "-inf" => Some(f64::NEG_INFINITY),
                    _ => None,
                };
                x.map(|x| (k, x)).ok_or_else(|| D::Error::custom(format!("bad inconsistency value {v}")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Clean,
    Bug(BugReport),
    /// Trusted backends kept disagreeing; the model is dropped.
    Discarded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffResult {
    pub outcomes: Vec<(BackendId, BackendOutcome)>,
    pub verdict: Verdict,
    /// Extra executions of trusted backends made to reach agreement.
    pub reruns: u32,
}

fn agree(a: &Tensor, b: &Tensor, epsilon: f64) -> bool {
    compute_inconsistency(a, b).is_ok_and(|d| d <= epsilon)
}

fn trusted_agree(outs: &[BackendOutcome], epsilon: f64) -> bool {
    let tensors: Vec<&Tensor> = outs.iter().filter_map(BackendOutcome::output).collect();
    (0..tensors.len()).all(|i| (i + 1..tensors.len()).all(|j| agree(tensors[i], tensors[j], epsilon)))
}

/// Classifies one round from its outcomes. Pure: equal inputs give equal
/// verdicts.
pub fn classify(g: &GraphModel, x: &Tensor, trusted: &[(BackendId, BackendOutcome)], sut: &(BackendId, BackendOutcome), epsilon: f64) -> Verdict {
    let outs: Vec<&Tensor> = trusted.iter().filter_map(|(_, o)| o.output()).collect();
    if outs.len() != trusted.len() || outs.is_empty() {
        return Verdict::Clean;
    }
    let sut_out = match &sut.1.status {
        BackendStatus::Crash(sig) => return Verdict::Bug(BugReport::crash(g, x, sig.clone())),
        BackendStatus::Timeout => return Verdict::Bug(BugReport::crash(g, x, CrashSignature::timeout())),
        BackendStatus::Ok(t) => t,
    };
    if sut_out.has_nan() && !outs.iter().any(|t| t.has_nan()) {
        return Verdict::Bug(BugReport::new(BugKind::NaN, g, x));
    }
    let mut values = BTreeMap::new();
    for (id, o) in trusted {
        match compute_inconsistency(o.output().unwrap(), sut_out) {
            Ok(d) => {
                values.insert(format!("{}|{}", id.name, sut.0.name), d);
            }
            Err(_) => return Verdict::Bug(BugReport::crash(g, x, CrashSignature::shape_mismatch())),
        }
    }
    if values.values().all(|&d| d > epsilon) {
        let mut r = BugReport::new(BugKind::Inconsistency, g, x);
        r.inconsistency_values = values;
        return Verdict::Bug(r);
    }
    Verdict::Clean
}

/// Runs every backend on `(g, x)` and classifies the result. Trusted
/// backends that disagree by more than epsilon are re-run up to
/// `stability_reruns` times; persistent disagreement discards the model.
pub fn run_differential(g: &GraphModel, x: &Tensor, trusted: &mut [Box<dyn Backend + '_>], sut: &mut dyn Backend, cfg: &DiffConfig) -> Result<DiffResult, DiffError> {
    if trusted.len() < 2 {
        return Err(DiffError::TooFewTrusted(trusted.len()));
    }
    if !(cfg.epsilon > 0.0) {
        return Err(DiffError::BadEpsilon);
    }
    let timeout = cfg.timeout();
    let mut trusted_outs: Vec<BackendOutcome> = trusted.iter_mut().map(|b| b.execute(g, x, timeout)).collect();
    let mut reruns = 0;
    while !trusted_agree(&trusted_outs, cfg.epsilon) {
        if reruns == cfg.stability_reruns {
            let mut outcomes: Vec<(BackendId, BackendOutcome)> = trusted.iter().map(|b| b.id()).zip(trusted_outs).collect();
            outcomes.sort_by(|a, b| a.0.name.cmp(&b.0.name));
            return Ok(DiffResult {
                outcomes,
                verdict: Verdict::Discarded,
                reruns,
            });
        }
        reruns += 1;
        trusted_outs = trusted.iter_mut().map(|b| b.execute(g, x, timeout)).collect();
    }
    let sut_outcome = (sut.id(), sut.execute(g, x, timeout));
    let trusted_pairs: Vec<(BackendId, BackendOutcome)> = trusted.iter().map(|b| b.id()).zip(trusted_outs).collect();
    let verdict = classify(g, x, &trusted_pairs, &sut_outcome, cfg.epsilon);
    let mut outcomes = trusted_pairs;
    outcomes.push(sut_outcome);
    Ok(DiffResult { outcomes, verdict, reruns })
}

/// Keeps the first report per `(kind, dedup_key)` and counts the rest.
pub fn dedup_bugs(reports: &[BugReport]) -> Vec<BugReport> {
    let mut index: BTreeMap<(BugKind, String), usize> = BTreeMap::new();
    let mut out: Vec<BugReport> = Vec::new();
    for r in reports {
        match index.get(&(r.kind, r.dedup_key.clone())) {
            Some(&i) => out[i].duplicates += 1 + r.duplicates,
            None => {
                index.insert((r.kind, r.dedup_key.clone()), out.len());
                out.push(r.clone());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_f64(Shape::new(1, 1, 1, v.len()).unwrap(), DType::F64, v).unwrap()
    }

    #[test]
    fn inconsistency_examples() {
        assert!((compute_inconsistency(&t(&[1.0, 1.2]), &t(&[1.0, 1.0])).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(compute_inconsistency(&t(&[1.0, 1.2]), &t(&[1.0, 1.2])).unwrap(), 0.0);
        let a = Tensor::zeros(Shape::new(1, 1, 2, 2).unwrap(), DType::F32);
        let b = Tensor::zeros(Shape::new(1, 1, 2, 3).unwrap(), DType::F32);
        assert!(matches!(compute_inconsistency(&a, &b), Err(DiffError::ShapeMismatch(..))));
        assert_eq!(compute_inconsistency(&t(&[f64::NAN]), &t(&[f64::NAN])).unwrap(), 0.0);
        assert_eq!(compute_inconsistency(&t(&[f64::NAN]), &t(&[0.0])).unwrap(), f64::INFINITY);
    }

    #[test]
    fn digits_are_normalized() {
        assert_eq!(normalize_message("shape (1,3,8,8) vs 12"), "shape (#,#,#,#) vs #");
        let a = CrashSignature::new("ShapeMismatch", "Conv2D", "expected 3 channels, got 4");
        let b = CrashSignature::new("ShapeMismatch", "Conv2D", "expected 13 channels, got 40");
        assert_eq!(a.key(), b.key());
    }
}
