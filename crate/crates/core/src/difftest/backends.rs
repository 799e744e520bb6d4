//! In-process backends: the reference interpreter and the optimizing executor.

use std::time::{Duration, Instant};

use super::{Backend, BackendId, BackendOutcome, BackendStatus, CrashSignature};
use crate::exec::{run_graph, PassThrough, RunError, Schedule};
use crate::graph::GraphModel;
use crate::kernels::ExecError;
use crate::optimizer::{execute_optimized_until, OptimizeConfig, PassReport};
use crate::tensor::Tensor;

impl From<&ExecError> for CrashSignature {
    fn from(e: &ExecError) -> CrashSignature {
        CrashSignature::new(e.kind.name(), e.op.map_or("", |op| op.name()), &e.message)
    }
}

fn status(r: Result<Tensor, RunError>) -> BackendStatus {
    match r {
        Ok(t) => BackendStatus::Ok(t),
        Err(RunError::Exec(e)) => BackendStatus::Crash(CrashSignature::from(&e)),
        Err(RunError::TimedOut) => BackendStatus::Timeout,
    }
}

/// Unoptimized `f64` interpretation; trusted.
#[derive(Debug, Clone)]
pub struct ReferenceBackend {
    name: String,
    schedule: Schedule,
}

impl ReferenceBackend {
    pub fn new(name: impl Into<String>, schedule: Schedule) -> ReferenceBackend {
        ReferenceBackend { name: name.into(), schedule }
    }

    /// The two trusted backends used by default, differing in edge schedule.
    pub fn default_pair() -> [ReferenceBackend; 2] {
        [ReferenceBackend::new("reference", Schedule::Canonical), ReferenceBackend::new("reference-dfs", Schedule::Reverse)]
    }
}

impl Backend for ReferenceBackend {
    fn id(&self) -> BackendId {
        BackendId::trusted(self.name.clone())
    }

    fn execute(&mut self, g: &GraphModel, x: &Tensor, timeout: Duration) -> BackendOutcome {
        let start = Instant::now();
        let r = run_graph::<f64, _>(g, x, self.schedule, &mut PassThrough, Some(start + timeout));
        BackendOutcome {
            status: status(r),
            duration: start.elapsed(),
        }
    }
}

/// The built-in system under test.
#[derive(Debug, Clone)]
pub struct OptimizingBackend {
    name: String,
    pub cfg: OptimizeConfig,
    /// Rewrites applied during the most recent execution.
    pub last_report: PassReport,
}

impl OptimizingBackend {
    pub fn new(cfg: OptimizeConfig) -> OptimizingBackend {
        OptimizingBackend {
            name: "optimizer".into(),
            cfg,
            last_report: PassReport::default(),
        }
    }
}

impl Backend for OptimizingBackend {
    fn id(&self) -> BackendId {
        BackendId::under_test(self.name.clone())
    }

    fn execute(&mut self, g: &GraphModel, x: &Tensor, timeout: Duration) -> BackendOutcome {
        let start = Instant::now();
        let r = execute_optimized_until(g, x, &self.cfg, Some(start + timeout)).map(|(t, report)| {
            self.last_report = report;
            t
        });
        if r.is_err() {
            self.last_report = PassReport::default();
        }
        BackendOutcome {
            status: status(r),
            duration: start.elapsed(),
        }
    }
}
