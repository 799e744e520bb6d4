//! The fuzz loop: seed selection, tensor and model mutation, differential
//! execution and heuristic feedback, plus replay and corpus diversity.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::difftest::{
    classify, compute_inconsistency, corpus_digest, dedup_bugs, lossless_floats, run_differential, write_entry, Backend, BackendId, BackendOutcome, BugReport, CorpusError,
    DiffConfig, DiffError, DiffResult, ExternBackend, OptimizingBackend, ReferenceBackend, RootLabel, Verdict,
};
use crate::dljt;
use crate::graph::{from_json, infer_shapes, levenshtein, mean_edit_distance, operator_sequence, to_json, GraphModel, MetricError};
use crate::heuristic::{compute_fitness, select_parent, RuleSnapshot, RuleStats, SeedPool, DEFAULT_POOL_CAPACITY, DEFAULT_TOURNAMENT_SIZE};
use crate::model_mutation::{apply_model_mutation, generate_seed_model, MutationContext, SeedConfig};
use crate::optimizer::{Fault, FaultSet, OptimizeConfig, PassReport};
use crate::scalar::DType;
use crate::tensor::{random_seed_tensor, Shape, Tensor};
use crate::tensor_mutation::{mutate_tensor, TensorMutationRule};

/// Model mutation attempts per round before the parent is tested unmutated.
pub const MUTATION_ATTEMPTS: usize = 8;

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn config_error<T>(message: impl Into<String>) -> Result<T, CampaignError> {
    Err(CampaignError::Config(message.into()))
}

/// Which system under test receives the models.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum BackendSpec {
    #[default]
    Builtin,
    /// A shell command speaking the wire protocol.
    Extern(String),
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Builtin => f.write_str("builtin"),
            BackendSpec::Extern(cmd) => write!(f, "extern:{cmd}"),
        }
    }
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<BackendSpec, String> {
        match s.strip_prefix("extern:") {
            Some(cmd) if !cmd.trim().is_empty() => Ok(BackendSpec::Extern(cmd.to_string())),
            Some(_) => Err("extern backend needs a command".into()),
            None if s == "builtin" => Ok(BackendSpec::Builtin),
            None => Err(format!("unknown backend {s:?}, expected builtin or extern:<cmd>")),
        }
    }
}

impl Serialize for BackendSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BackendSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<BackendSpec, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Every round draws a fresh random tensor.
    pub disable_tensor_mutation: bool,
    /// Every round tests the initial seed model.
    pub disable_model_mutation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub rounds: Option<u64>,
    pub duration_secs: Option<f64>,
    pub seed: u64,
    pub chain_length: usize,
    pub input_shape: Shape,
    pub input_dtype: DType,
    pub diff: DiffConfig,
    pub optimizer: OptimizeConfig,
    pub tournament_size: usize,
    pub pool_capacity: usize,
    /// Mutations producing more edges than this are rejected.
    pub max_model_edges: usize,
    /// Tensors growing past this many elements are replaced by a fresh seed tensor.
    pub max_tensor_elements: usize,
    /// Rounds between stats snapshots; 0 disables them.
    pub stats_every: u64,
    pub ablations: Ablations,
    pub backend: BackendSpec,
    pub out_dir: Option<PathBuf>,
    /// Write every generated model under `models/`.
    pub save_models: bool,
}

impl Default for CampaignConfig {
    fn default() -> CampaignConfig {
        CampaignConfig {
            rounds: None,
            duration_secs: None,
            seed: 0,
            chain_length: 4,
            input_shape: Shape::new(1, 3, 8, 8).expect("default shape"),
            input_dtype: DType::F32,
            diff: DiffConfig::default(),
            optimizer: OptimizeConfig::default(),
            tournament_size: DEFAULT_TOURNAMENT_SIZE,
            pool_capacity: DEFAULT_POOL_CAPACITY,
            max_model_edges: 12,
            max_tensor_elements: 4096,
            stats_every: 50,
            ablations: Ablations::default(),
            backend: BackendSpec::Builtin,
            out_dir: None,
            save_models: true,
        }
    }
}

impl CampaignConfig {
    pub fn with_rounds(rounds: u64, seed: u64) -> CampaignConfig {
        CampaignConfig {
            rounds: Some(rounds),
            seed,
            ..CampaignConfig::default()
        }
    }

    pub fn from_json(text: &str) -> Result<CampaignConfig, CampaignError> {
        serde_json::from_str(text).or_else(|e| config_error(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CampaignError> {
        match (self.rounds, self.duration_secs) {
            (Some(_), Some(_)) => return config_error("set exactly one of rounds and duration_secs, not both"),
            (None, None) => return config_error("set one of rounds and duration_secs"),
            (None, Some(d)) if !(d.is_finite() && d > 0.0) => return config_error("duration_secs must be positive"),
            _ => {}
        }
        if !(self.diff.epsilon.is_finite() && self.diff.epsilon > 0.0) {
            return config_error("epsilon must be positive");
        }
        if !(self.diff.timeout_secs.is_finite() && self.diff.timeout_secs > 0.0) {
            return config_error("timeout_secs must be positive");
        }
        if self.chain_length == 0 {
            return config_error("chain_length must be positive");
        }
        if self.tournament_size == 0 {
            return config_error("tournament_size must be positive");
        }
        if self.pool_capacity == 0 {
            return config_error("pool_capacity must be positive");
        }
        if self.max_model_edges < self.chain_length {
            return config_error("max_model_edges must be at least chain_length");
        }
        if self.input_shape.element_count() > self.max_tensor_elements {
            return config_error("input_shape exceeds max_tensor_elements");
        }
        self.optimizer.check().or_else(config_error)
    }
}

struct Harness {
    trusted: Vec<Box<dyn Backend>>,
    sut: Sut,
    diff: DiffConfig,
}

enum Sut {
    Builtin(OptimizingBackend),
    Extern(ExternBackend),
}

impl Sut {
    fn backend(&mut self) -> &mut dyn Backend {
        match self {
            Sut::Builtin(b) => b,
            Sut::Extern(b) => b,
        }
    }
}

fn label_for(fault: Fault) -> RootLabel {
    match fault {
        Fault::ShapeKeyedCache => RootLabel::CacheReuse,
        Fault::SoftmaxMaxpoolReorder | Fault::FusedParamError => RootLabel::InferenceAcceleration,
    }
}

impl Harness {
    fn new(cfg: &CampaignConfig) -> Result<Harness, CampaignError> {
        let trusted: Vec<Box<dyn Backend>> = ReferenceBackend::default_pair().into_iter().map(|b| Box::new(b) as Box<dyn Backend>).collect();
        let sut = match &cfg.backend {
            BackendSpec::Builtin => Sut::Builtin(OptimizingBackend::new(cfg.optimizer.clone())),
            BackendSpec::Extern(cmd) => Sut::Extern(ExternBackend::new(cmd.clone())?),
        };
        Ok(Harness { trusted, sut, diff: cfg.diff })
    }

    fn run(&mut self, g: &GraphModel, x: &Tensor) -> Result<DiffResult, DiffError> {
        let mut result = run_differential(g, x, &mut self.trusted, self.sut.backend(), &self.diff)?;
        if let Verdict::Bug(report) = &mut result.verdict {
            report.root_label = self.attribute(g, x, &result.outcomes, report.kind);
        }
        Ok(result)
    }

    fn last_passes(&self) -> Option<&PassReport> {
        match &self.sut {
            Sut::Builtin(b) => Some(&b.last_report),
            Sut::Extern(_) => None,
        }
    }

    /// Re-runs the built-in SUT with faults cleared and then one fault at a
    /// time. A label is assigned only when the clean run loses the finding
    /// and a single fault brings it back.
    fn attribute(&self, g: &GraphModel, x: &Tensor, outcomes: &[(BackendId, BackendOutcome)], kind: crate::difftest::BugKind) -> Option<RootLabel> {
        let Sut::Builtin(b) = &self.sut else { return None };
        if b.cfg.faults.is_empty() {
            return None;
        }
        let trusted = &outcomes[..outcomes.len() - 1];
        let reproduces = |faults: FaultSet| {
            let mut probe = OptimizingBackend::new(OptimizeConfig { faults, ..b.cfg.clone() });
            let sut = (probe.id(), probe.execute(g, x, self.diff.timeout()));
            matches!(classify(g, x, trusted, &sut, self.diff.epsilon), Verdict::Bug(r) if r.kind == kind)
        };
        if reproduces(FaultSet::new()) {
            return None;
        }
        b.cfg.faults.iter().copied().find(|&f| reproduces(FaultSet::from([f]))).map(label_for)
    }
}

/// Largest SUT-versus-reference deviation of a round, when both produced output.
fn deviation(result: &DiffResult) -> Option<f64> {
    let reference = result.outcomes.first()?.1.output()?;
    let sut = result.outcomes.last()?.1.output()?;
    if result.outcomes.len() < 3 {
        return None;
    }
    compute_inconsistency(reference, sut).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub round: u64,
    #[serde(flatten)]
    pub rules: RuleSnapshot,
    pub pool_fitness_histogram: BTreeMap<String, u64>,
}

/// Deterministic summary of a campaign. Wall-clock figures live in
/// [`CampaignOutcome`] instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub seed: u64,
    pub rounds: u64,
    pub models_generated: u64,
    pub models_discarded: u64,
    /// Rounds whose parent was tested unmutated after every attempt failed.
    pub mutation_fallbacks: u64,
    pub tensor_resets: u64,
    pub unique_bugs: BTreeMap<String, u64>,
    pub bugs: Vec<BugReport>,
    pub med: Option<f64>,
    pub pass_fire_counts: BTreeMap<String, u64>,
    pub pass_totals: BTreeMap<String, u64>,
    pub model_rule_uses: BTreeMap<String, u64>,
    pub tensor_rule_uses: BTreeMap<String, u64>,
    pub rule_stats: RuleSnapshot,
    pub pool_fitness_histogram: BTreeMap<String, u64>,
    /// Largest SUT-versus-reference deviation per input dtype.
    #[serde(with = "lossless_floats")]
    pub max_deviation: BTreeMap<String, f64>,
    pub corpus_digest: Option<String>,
}

impl CampaignReport {
    pub fn unique(&self, kind: crate::difftest::BugKind) -> u64 {
        self.bugs.iter().filter(|b| b.kind == kind).count() as u64
    }

    pub fn total_unique(&self) -> u64 {
        self.bugs.len() as u64
    }

    /// Sorted-key JSON, identical for identical campaigns.
    pub fn to_canonical_json(&self) -> String {
        canonical(self)
    }
}

fn canonical<T: Serialize>(v: &T) -> String {
    let value = serde_json::to_value(v).expect("report serializes");
    serde_json::to_string(&value).expect("value serializes")
}

#[derive(Debug, Clone)]
pub struct CampaignOutcome {
    pub report: CampaignReport,
    pub elapsed: Duration,
    /// Every model produced by a successful mutation, in generation order.
    pub generated: Vec<GraphModel>,
}

impl CampaignOutcome {
    pub fn rounds_per_sec(&self) -> f64 {
        self.report.rounds as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }
}

struct Found {
    model: GraphModel,
    input: Tensor,
}

fn fits(g: &GraphModel, x: &Tensor) -> bool {
    infer_shapes(g, x.shape()).is_ok()
}

fn bump(map: &mut BTreeMap<String, u64>, key: impl Into<String>) {
    *map.entry(key.into()).or_default() += 1;
}

fn write_text(path: &Path, text: &str) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)
}

/// Runs a campaign to completion.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignOutcome, CampaignError> {
    cfg.validate()?;
    let start = Instant::now();
    let deadline = cfg.duration_secs.map(|d| start + Duration::from_secs_f64(d));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut harness = Harness::new(cfg)?;
    let fresh = |rng: &mut ChaCha8Rng| random_seed_tensor(cfg.input_shape, cfg.input_dtype, rng).expect("validated input shape");
    let seed_model = generate_seed_model(&SeedConfig {
        chain_length: cfg.chain_length,
        input_shape: cfg.input_shape,
    });
    let mut prev_x = fresh(&mut rng);
    let mut pool = SeedPool::new(seed_model.clone(), prev_x.clone(), cfg.pool_capacity);
    let mut stats = RuleStats::default();
    let ctx = MutationContext {
        allow_softmax_mor: cfg.optimizer.faults.contains(&Fault::SoftmaxMaxpoolReorder),
    };
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir)?;
    }

    let mut report = CampaignReport {
        seed: cfg.seed,
        rounds: 0,
        models_generated: 0,
        models_discarded: 0,
        mutation_fallbacks: 0,
        tensor_resets: 0,
        unique_bugs: BTreeMap::new(),
        bugs: Vec::new(),
        med: None,
        pass_fire_counts: BTreeMap::new(),
        pass_totals: BTreeMap::new(),
        model_rule_uses: BTreeMap::new(),
        tensor_rule_uses: BTreeMap::new(),
        rule_stats: stats.snapshot(),
        pool_fitness_histogram: BTreeMap::new(),
        max_deviation: BTreeMap::new(),
        corpus_digest: None,
    };
    let mut passes = PassReport::default();
    let mut generated: Vec<GraphModel> = Vec::new();
    let mut all_bugs: Vec<BugReport> = Vec::new();
    let mut first_seen: BTreeMap<(crate::difftest::BugKind, String), Found> = BTreeMap::new();

    let mut round: u64 = 0;
    loop {
        match (cfg.rounds, deadline) {
            (Some(n), _) if round >= n => break,
            (None, Some(d)) if Instant::now() >= d => break,
            _ => {}
        }

        let parent = if cfg.ablations.disable_model_mutation {
            pool.initial_seed().expect("seed stays pooled without model mutation").clone()
        } else {
            select_parent(&pool, round, cfg.tournament_size, &mut rng).expect("pool is never empty").clone()
        };

        let x = if cfg.ablations.disable_tensor_mutation {
            fresh(&mut rng)
        } else {
            let rule = TensorMutationRule::sample(&mut rng);
            bump(&mut report.tensor_rule_uses, rule.name());
            let small = |t: &Tensor| t.len() <= cfg.max_tensor_elements;
            let candidate = mutate_tensor(&prev_x, rule, &mut rng).ok().filter(|t| small(t) && fits(&parent.model, t));
            match candidate {
                Some(t) => t,
                None => match mutate_tensor(&parent.input, rule, &mut rng).ok().filter(|t| small(t) && fits(&parent.model, t)) {
                    Some(t) => t,
                    None => {
                        report.tensor_resets += 1;
                        let t = fresh(&mut rng);
                        if fits(&parent.model, &t) {
                            t
                        } else {
                            parent.input.clone()
                        }
                    }
                },
            }
        };

        let mut mutated = None;
        if !cfg.ablations.disable_model_mutation {
            for _ in 0..MUTATION_ATTEMPTS {
                let rule = stats.sample(&mut rng);
                if let Ok(child) = apply_model_mutation(&parent.model, rule, x.shape(), ctx, &mut rng) {
                    if child.edges.len() <= cfg.max_model_edges {
                        mutated = Some((rule, child));
                        break;
                    }
                }
            }
            if mutated.is_none() {
                report.mutation_fallbacks += 1;
            }
        }
        let model = mutated.as_ref().map_or(&parent.model, |m| &m.1);

        let result = harness.run(model, &x)?;
        if let Some(p) = harness.last_passes() {
            passes.merge(p);
        }
        if let Some(d) = deviation(&result) {
            let slot = report.max_deviation.entry(x.dtype().name().to_string()).or_insert(0.0);
            if d > *slot || d.is_nan() {
                *slot = d;
            }
        }
        let fitness = compute_fitness(&result.verdict, &x);
        match &result.verdict {
            Verdict::Bug(r) => {
                first_seen.entry((r.kind, r.dedup_key.clone())).or_insert_with(|| Found {
                    model: model.clone(),
                    input: x.clone(),
                });
                all_bugs.push(r.clone());
            }
            Verdict::Discarded => report.models_discarded += 1,
            Verdict::Clean => {}
        }

        if let Some((rule, child)) = mutated {
            report.models_generated += 1;
            bump(&mut report.model_rule_uses, rule.name());
            stats.update(rule, fitness, parent.fitness);
            if cfg.save_models {
                if let Some(dir) = &cfg.out_dir {
                    write_text(&dir.join("models").join(format!("model-{round:06}.json")), &to_json(&child))?;
                }
            }
            if result.verdict != Verdict::Discarded {
                pool.insert(child.clone(), x.clone(), fitness);
            }
            generated.push(child);
        }
        prev_x = x;
        round += 1;

        if cfg.stats_every > 0 && round % cfg.stats_every == 0 {
            if let Some(dir) = &cfg.out_dir {
                let snap = StatsSnapshot {
                    round,
                    rules: stats.snapshot(),
                    pool_fitness_histogram: pool.fitness_histogram(),
                };
                write_text(&dir.join("stats").join(format!("round-{round:06}.json")), &canonical(&snap))?;
            }
        }
    }

    report.rounds = round;
    report.bugs = dedup_bugs(&all_bugs);
    for kind in ["crash", "nan", "inconsistency"] {
        report.unique_bugs.insert(kind.to_string(), 0);
    }
    for b in &report.bugs {
        bump(&mut report.unique_bugs, b.kind.dir_name());
    }
    report.med = if generated.len() >= 2 { Some(mean_edit_distance(&generated)?) } else { None };
    report.pass_fire_counts = passes.fire_counts.clone();
    for (rule, n) in &passes.fire_counts {
        let pass = rule.split('.').next().unwrap_or(rule);
        *report.pass_totals.entry(pass.to_string()).or_default() += n;
    }
    report.rule_stats = stats.snapshot();
    report.pool_fitness_histogram = pool.fitness_histogram();

    if let Some(dir) = &cfg.out_dir {
        for b in &report.bugs {
            let found = &first_seen[&(b.kind, b.dedup_key.clone())];
            write_entry(dir, b, &found.model, &found.input)?;
        }
        report.corpus_digest = Some(corpus_digest(dir)?);
        write_text(&dir.join("report.json"), &report.to_canonical_json())?;
    }
    let outcome = CampaignOutcome {
        report,
        elapsed: start.elapsed(),
        generated,
    };
    if let Some(dir) = &cfg.out_dir {
        let throughput = serde_json::json!({
            "elapsed_secs": outcome.elapsed.as_secs_f64(),
            "rounds_per_sec": outcome.rounds_per_sec(),
        });
        write_text(&dir.join("throughput.json"), &throughput.to_string())?;
    }
    Ok(outcome)
}

pub fn load_model(path: &Path) -> Result<GraphModel, CampaignError> {
    let text = fs::read_to_string(path)?;
    from_json(&text).map_err(|e| CampaignError::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_tensor(path: &Path) -> Result<Tensor, CampaignError> {
    dljt::read_file(path).map_err(|e| CampaignError::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Runs the differential test once on a stored pair.
pub fn replay(model: &GraphModel, x: &Tensor, cfg: &CampaignConfig) -> Result<DiffResult, CampaignError> {
    if let Some(v) = model.validate().first() {
        return Err(CampaignError::Config(format!("invalid model: {v}")));
    }
    let mut harness = Harness::new(cfg)?;
    Ok(harness.run(model, x)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub models: usize,
    pub med: f64,
    /// Pairwise edit distance → number of pairs.
    pub histogram: BTreeMap<usize, u64>,
}

/// Mean pairwise edit distance over every `*.json` model in `dir`.
pub fn diversity_report(dir: &Path) -> Result<DiversityReport, CampaignError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    let models = paths.iter().map(|p| load_model(p)).collect::<Result<Vec<_>, _>>()?;
    let med = mean_edit_distance(&models)?;
    let seqs: Vec<_> = models.iter().map(operator_sequence).collect();
    let mut histogram = BTreeMap::new();
    for i in 0..seqs.len() {
        for j in i + 1..seqs.len() {
            *histogram.entry(levenshtein(&seqs[i], &seqs[j])).or_default() += 1;
        }
    }
    Ok(DiversityReport {
        models: models.len(),
        med,
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backend_spec_parses() {
        assert_eq!("builtin".parse::<BackendSpec>().unwrap(), BackendSpec::Builtin);
        assert_eq!("extern:node a.js".parse::<BackendSpec>().unwrap(), BackendSpec::Extern("node a.js".into()));
        assert!("extern:".parse::<BackendSpec>().is_err());
        assert!("tfjs".parse::<BackendSpec>().is_err());
    }

    #[test]
    fn budget_must_be_exclusive() {
        let mut cfg = CampaignConfig::with_rounds(5, 1);
        assert!(cfg.validate().is_ok());
        cfg.duration_secs = Some(1.0);
        assert!(matches!(cfg.validate(), Err(CampaignError::Config(_))));
        cfg.rounds = None;
        cfg.duration_secs = None;
        assert!(matches!(cfg.validate(), Err(CampaignError::Config(_))));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(CampaignConfig::from_json(r#"{"rounds": 3, "bogus": 1}"#).is_err());
        let cfg = CampaignConfig::from_json(r#"{"rounds": 3, "optimizer": {"faults": ["shape-cache"]}}"#).unwrap();
        assert!(cfg.optimizer.faults.contains(&Fault::ShapeKeyedCache));
    }

    #[test]
    fn short_campaign_runs() {
        let out = run_campaign(&CampaignConfig::with_rounds(10, 7)).unwrap();
        assert_eq!(out.report.rounds, 10);
        assert_eq!(out.report.total_unique(), 0);
    }
}
