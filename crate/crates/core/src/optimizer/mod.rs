//! The default system under test: a rewriting optimizer plus a
//! reduced-precision executor with a tensor cache and injectable faults.

mod cache;
mod passes;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Instant;

use half::bf16;
use serde::{Deserialize, Serialize};

use crate::exec::{run_ordered, RunError};
use crate::graph::{infer_shapes, EdgeId, GraphModel};
use crate::kernels::{ExecError, ExecErrorKind};
use crate::scalar::{DType, Scalar};
use crate::tensor::{Shape, Tensor};

pub use cache::{CacheStats, TensorCache};
pub use passes::{fold_batchnorm, fold_cbr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pass {
    NodeOpt,
    Reorder,
    Fusion,
}

impl Pass {
    pub const ALL: [Pass; 3] = [Pass::NodeOpt, Pass::Reorder, Pass::Fusion];

    /// Prefix of this pass's entries in [`PassReport::fire_counts`].
    pub fn prefix(self) -> &'static str {
        match self {
            Pass::NodeOpt => "node_opt",
            Pass::Reorder => "reorder",
            Pass::Fusion => "fusion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Fault {
    #[serde(rename = "shape-cache")]
    ShapeKeyedCache,
    #[serde(rename = "softmax-reorder")]
    SoftmaxMaxpoolReorder,
    #[serde(rename = "fused-param")]
    FusedParamError,
}

impl Fault {
    pub const ALL: [Fault; 3] = [Fault::ShapeKeyedCache, Fault::SoftmaxMaxpoolReorder, Fault::FusedParamError];

    pub fn name(self) -> &'static str {
        match self {
            Fault::ShapeKeyedCache => "shape-cache",
            Fault::SoftmaxMaxpoolReorder => "softmax-reorder",
            Fault::FusedParamError => "fused-param",
        }
    }

    pub fn from_name(s: &str) -> Option<Fault> {
        Fault::ALL.into_iter().find(|f| f.name() == s)
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub type FaultSet = BTreeSet<Fault>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeyMode {
    ById,
    ByShapeDtype,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub capacity_bytes: usize,
    pub key_mode: KeyMode,
}

impl Default for CacheConfig {
    fn default() -> CacheConfig {
        CacheConfig {
            capacity_bytes: 1 << 20,
            key_mode: KeyMode::ById,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeConfig {
    pub passes: BTreeSet<Pass>,
    pub exec_dtype: DType,
    pub cache: CacheConfig,
    pub faults: FaultSet,
}

impl Default for OptimizeConfig {
    fn default() -> OptimizeConfig {
        OptimizeConfig {
            passes: Pass::ALL.into_iter().collect(),
            exec_dtype: DType::F32,
            cache: CacheConfig::default(),
            faults: FaultSet::new(),
        }
    }
}

impl OptimizeConfig {
    pub fn with_faults(faults: impl IntoIterator<Item = Fault>) -> OptimizeConfig {
        OptimizeConfig {
            faults: faults.into_iter().collect(),
            ..OptimizeConfig::default()
        }
    }

    /// The cache key mode in effect; the shape-keyed fault overrides the
    /// configured mode.
    pub fn effective_key_mode(&self) -> KeyMode {
        if self.faults.contains(&Fault::ShapeKeyedCache) {
            KeyMode::ByShapeDtype
        } else {
            self.cache.key_mode
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if self.exec_dtype == DType::F64 {
            return Err("exec_dtype must be f32 or bf16".into());
        }
        if self.cache.capacity_bytes == 0 {
            return Err("cache capacity must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rewrite {
    pub rule: String,
    pub before: Vec<EdgeId>,
    pub after: Vec<EdgeId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassReport {
    /// Keyed `"<pass>.<rewrite>"`, e.g. `"fusion.cbr"`.
    pub fire_counts: BTreeMap<String, u64>,
    pub rewrites: Vec<Rewrite>,
}

impl PassReport {
    pub fn record(&mut self, rule: &str, before: Vec<EdgeId>, after: Vec<EdgeId>) {
        *self.fire_counts.entry(rule.to_string()).or_default() += 1;
        self.rewrites.push(Rewrite {
            rule: rule.to_string(),
            before,
            after,
        });
    }

    pub fn count(&self, rule: &str) -> u64 {
        self.fire_counts.get(rule).copied().unwrap_or(0)
    }

    pub fn pass_total(&self, pass: Pass) -> u64 {
        let prefix = format!("{}.", pass.prefix());
        self.fire_counts.iter().filter(|(k, _)| k.starts_with(&prefix)).map(|(_, v)| v).sum()
    }

    pub fn total(&self) -> u64 {
        self.fire_counts.values().sum()
    }

    pub fn merge(&mut self, other: &PassReport) {
        for (k, v) in &other.fire_counts {
            *self.fire_counts.entry(k.clone()).or_default() += v;
        }
        self.rewrites.extend(other.rewrites.iter().cloned());
    }
}

/// Upper bound on rewrite sweeps; every rewrite strictly shrinks a finite
/// measure, so this is never reached on valid graphs.
const MAX_SWEEPS: usize = 10_000;

/// Applies the enabled passes to a fixpoint, NodeOpt, then Reorder, then
/// Fusion. Graphs whose shapes cannot be inferred are returned unchanged.
pub fn optimize_graph(g: &GraphModel, input: Shape, cfg: &OptimizeConfig) -> (GraphModel, PassReport) {
    let mut g = g.clone();
    let mut report = PassReport::default();
    if infer_shapes(&g, input).is_err() {
        return (g, report);
    }
    for _ in 0..MAX_SWEEPS {
        let mut changed = false;
        for pass in Pass::ALL {
            if !cfg.passes.contains(&pass) {
                continue;
            }
            while passes::apply_once(pass, &mut g, input, &cfg.faults, &mut report) {
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    (g, report)
}

/// Optimizes `g`, then evaluates it at `cfg.exec_dtype` through the tensor
/// cache. The output is converted to `x.dtype()`.
pub fn execute_optimized(g: &GraphModel, x: &Tensor, cfg: &OptimizeConfig) -> Result<(Tensor, PassReport), ExecError> {
    match execute_optimized_until(g, x, cfg, None) {
        Ok(r) => Ok(r),
        Err(RunError::Exec(e)) => Err(e),
        Err(RunError::TimedOut) => unreachable!("no deadline"),
    }
}

pub fn execute_optimized_until(g: &GraphModel, x: &Tensor, cfg: &OptimizeConfig, deadline: Option<Instant>) -> Result<(Tensor, PassReport), RunError> {
    fn run<T: Scalar>(g: &GraphModel, x: &Tensor, cfg: &OptimizeConfig, deadline: Option<Instant>) -> Result<Tensor, RunError> {
        let shapes = infer_shapes(g, x.shape()).map_err(ExecError::from)?;
        let order = g
            .topological_edges()
            .ok_or_else(|| ExecError::new(ExecErrorKind::InternalInvariant, "graph contains a cycle"))?;
        let mut cache = TensorCache::<T>::new(cfg.cache.capacity_bytes, cfg.effective_key_mode());
        let out = run_ordered::<T, _>(g, x, &shapes, &order, &mut cache, deadline)?;
        Ok(out.to_tensor(x.dtype()))
    }
    let (opt, report) = optimize_graph(g, x.shape(), cfg);
    let out = match cfg.exec_dtype {
        DType::F32 => run::<f32>(&opt, x, cfg, deadline)?,
        DType::BF16 => run::<bf16>(&opt, x, cfg, deadline)?,
        DType::F64 => {
            return Err(ExecError::new(ExecErrorKind::UnsupportedDType, "the optimizing executor does not run at f64").into());
        }
    };
    Ok((out, report))
}
