//! Fitness, tournament seed selection and contribution-weighted rule
//! probabilities.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::difftest::{BugKind, Verdict};
use crate::graph::{structure_hash, GraphModel};
use crate::model_mutation::ModelMutationRule;
use crate::tensor::Tensor;

pub const INITIAL_CONTRIBUTION: f64 = 1.0;
pub const CONTRIBUTION_FLOOR: f64 = 1e-3;
pub const DEFAULT_TOURNAMENT_SIZE: usize = 3;
pub const DEFAULT_POOL_CAPACITY: usize = 100;
/// Magnitude bound applied to fitness so contributions stay finite.
pub const FITNESS_CAP: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum HeuristicError {
    #[error("the seed pool is empty")]
    EmptyPool,
    #[error("tournament size must be at least 1")]
    ZeroTournament,
}

fn capped(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-FITNESS_CAP, FITNESS_CAP)
    }
}

/// Crash and NaN rounds score the mean of the input tensor, inconsistency
/// rounds their largest inconsistency, everything else 0.
pub fn compute_fitness(verdict: &Verdict, x: &Tensor) -> f64 {
    match verdict {
        Verdict::Bug(r) => match r.kind {
            BugKind::Crash | BugKind::NaN => capped(x.mean()),
            BugKind::Inconsistency => capped(r.max_inconsistency()),
        },
        Verdict::Clean | Verdict::Discarded => 0.0,
    }
}

/// Per-rule contributions over the expanded rule set.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleStats {
    rules: Vec<ModelMutationRule>,
    contributions: Vec<f64>,
}

impl Default for RuleStats {
    fn default() -> Self {
        RuleStats::new(ModelMutationRule::expanded())
    }
}

impl RuleStats {
    pub fn new(rules: Vec<ModelMutationRule>) -> RuleStats {
        assert!(!rules.is_empty(), "rule set must not be empty");
        let contributions = vec![INITIAL_CONTRIBUTION; rules.len()];
        RuleStats { rules, contributions }
    }

    pub fn with_contributions(entries: &[(ModelMutationRule, f64)]) -> RuleStats {
        assert!(!entries.is_empty(), "rule set must not be empty");
        RuleStats {
            rules: entries.iter().map(|e| e.0).collect(),
            contributions: entries.iter().map(|e| e.1.max(CONTRIBUTION_FLOOR)).collect(),
        }
    }

    pub fn rules(&self) -> &[ModelMutationRule] {
        &self.rules
    }

    fn index(&self, rule: ModelMutationRule) -> usize {
        self.rules.iter().position(|&r| r == rule).unwrap_or_else(|| panic!("unknown rule {rule}"))
    }

    pub fn contribution(&self, rule: ModelMutationRule) -> f64 {
        self.contributions[self.index(rule)]
    }

    /// `c ← max(floor, c + fitness_new − fitness_old)`.
    pub fn update(&mut self, rule: ModelMutationRule, fitness_new: f64, fitness_old: f64) {
        let i = self.index(rule);
        let next = self.contributions[i] + (fitness_new - fitness_old);
        self.contributions[i] = if next.is_nan() { CONTRIBUTION_FLOOR } else { next.max(CONTRIBUTION_FLOOR) };
    }

    pub fn probabilities(&self) -> Vec<(ModelMutationRule, f64)> {
        let total: f64 = self.contributions.iter().sum();
        self.rules.iter().zip(&self.contributions).map(|(&r, &c)| (r, c / total)).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelMutationRule {
        let dist = WeightedIndex::new(&self.contributions).expect("contributions are positive and finite");
        self.rules[dist.sample(rng)]
    }

    pub fn snapshot(&self) -> RuleSnapshot {
        let by_name = |f: &dyn Fn(usize) -> f64| self.rules.iter().enumerate().map(|(i, r)| (r.name(), f(i))).collect();
        let probs = self.probabilities();
        RuleSnapshot {
            contributions: by_name(&|i| self.contributions[i]),
            probabilities: by_name(&|i| probs[i].1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSnapshot {
    pub contributions: BTreeMap<String, f64>,
    pub probabilities: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub model: GraphModel,
    /// The input the model was tested with.
    pub input: Tensor,
    pub model_hash: String,
    pub fitness: f64,
    /// Insertion order; 0 is the initial seed.
    pub age: u64,
}

/// Fitness-ranked models kept for seed selection.
#[derive(Debug, Clone)]
pub struct SeedPool {
    entries: Vec<PoolEntry>,
    capacity: usize,
    inserted: u64,
}

impl SeedPool {
    /// A pool holding only the initial seed, with fitness 0.
    pub fn new(seed: GraphModel, input: Tensor, capacity: usize) -> SeedPool {
        let mut pool = SeedPool {
            entries: Vec::new(),
            capacity: capacity.max(1),
            inserted: 0,
        };
        pool.insert(seed, input, 0.0);
        pool
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn initial_seed(&self) -> Option<&PoolEntry> {
        self.entries.iter().find(|e| e.age == 0)
    }

    /// Adds a model, evicting the lowest-fitness (then oldest) entry when
    /// over capacity.
    pub fn insert(&mut self, model: GraphModel, input: Tensor, fitness: f64) {
        self.entries.push(PoolEntry {
            model_hash: structure_hash(&model),
            model,
            input,
            fitness,
            age: self.inserted,
        });
        self.inserted += 1;
        if self.entries.len() > self.capacity {
            let victim = (0..self.entries.len())
                .min_by(|&a, &b| {
                    let (x, y) = (&self.entries[a], &self.entries[b]);
                    x.fitness.total_cmp(&y.fitness).then(x.age.cmp(&y.age))
                })
                .unwrap();
            self.entries.remove(victim);
        }
    }

    pub fn fitness_histogram(&self) -> BTreeMap<String, u64> {
        let mut h: BTreeMap<String, u64> = ["<0", "0", "(0,0.15]", "(0.15,1]", "(1,10]", ">10"].iter().map(|b| (b.to_string(), 0)).collect();
        for e in &self.entries {
            let f = e.fitness;
            let bucket = if f < 0.0 {
                "<0"
            } else if f == 0.0 {
                "0"
            } else if f <= 0.15 {
                "(0,0.15]"
            } else if f <= 1.0 {
                "(0.15,1]"
            } else if f <= 10.0 {
                "(1,10]"
            } else {
                ">10"
            };
            *h.get_mut(bucket).unwrap() += 1;
        }
        h
    }
}

/// Draws `k` entries uniformly with replacement and returns the fittest,
/// preferring the most recent on ties.
pub fn tournament_select<'a, R: Rng + ?Sized>(pool: &'a SeedPool, k: usize, rng: &mut R) -> Result<&'a PoolEntry, HeuristicError> {
    if pool.is_empty() {
        return Err(HeuristicError::EmptyPool);
    }
    if k == 0 {
        return Err(HeuristicError::ZeroTournament);
    }
    let best = (0..k)
        .map(|_| &pool.entries[rng.gen_range(0..pool.len())])
        .max_by(|a, b| a.fitness.total_cmp(&b.fitness).then(a.age.cmp(&b.age)))
        .unwrap();
    Ok(best)
}

/// Seed choice for round `round` (0-based): the initial seed first, a
/// tournament afterwards.
pub fn select_parent<'a, R: Rng + ?Sized>(pool: &'a SeedPool, round: u64, k: usize, rng: &mut R) -> Result<&'a PoolEntry, HeuristicError> {
    if round == 0 {
        if let Some(seed) = pool.initial_seed() {
            return Ok(seed);
        }
    }
    tournament_select(pool, k, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::OperatorKind;
    use crate::scalar::DType;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn x() -> Tensor {
        Tensor::from_f64(Shape::new(1, 1, 2, 2).unwrap(), DType::F64, &[2.0, 4.0, 6.0, 8.0]).unwrap()
    }

    #[test]
    fn update_examples() {
        let r = ModelMutationRule::ZDT;
        let mut s = RuleStats::default();
        s.update(r, 0.5, 0.0);
        assert_eq!(s.contribution(r), 1.5);
        let mut s = RuleStats::default();
        s.update(r, 0.0, 2.0);
        assert_eq!(s.contribution(r), CONTRIBUTION_FLOOR);
        let mut s = RuleStats::default();
        s.update(r, 0.3, 0.3);
        assert_eq!(s.contribution(r), 1.0);
    }

    #[test]
    fn plus_one_on_four_uniform() {
        let rules = ModelMutationRule::INSERTIONS[..4].to_vec();
        let mut s = RuleStats::new(rules.clone());
        s.update(rules[0], 1.0, 0.0);
        let p: Vec<f64> = s.probabilities().iter().map(|e| e.1).collect();
        assert_eq!(p, vec![0.4, 0.2, 0.2, 0.2]);
    }

    #[test]
    fn pool_evicts_lowest_then_oldest() {
        let seed = GraphModel::chain(&[OperatorKind::Identity]);
        let mut pool = SeedPool::new(seed.clone(), x(), 2);
        pool.insert(GraphModel::chain(&[OperatorKind::ReLU]), x(), 0.0);
        pool.insert(GraphModel::chain(&[OperatorKind::Sigmoid]), x(), 1.0);
        assert_eq!(pool.len(), 2);
        let ages: Vec<u64> = pool.entries().iter().map(|e| e.age).collect();
        assert_eq!(ages, vec![1, 2]);
    }

    #[test]
    fn first_round_is_the_seed() {
        let seed = GraphModel::chain(&[OperatorKind::Identity]);
        let mut pool = SeedPool::new(seed, x(), 10);
        pool.insert(GraphModel::chain(&[OperatorKind::ReLU]), x(), 9.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(select_parent(&pool, 0, 3, &mut rng).unwrap().age, 0);
        let mut single = SeedPool::new(GraphModel::chain(&[OperatorKind::ReLU]), x(), 10);
        single.entries[0].age = 5;
        assert_eq!(tournament_select(&single, 7, &mut rng).unwrap().age, 5);
    }

    #[test]
    fn tournament_ties_prefer_recent() {
        let mut pool = SeedPool::new(GraphModel::chain(&[OperatorKind::Identity]), x(), 10);
        pool.insert(GraphModel::chain(&[OperatorKind::ReLU]), x(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let newest = (0..200).filter(|_| tournament_select(&pool, 2, &mut rng).unwrap().age == 1).count();
        assert!(newest > 100);
    }

    #[test]
    fn fitness_examples() {
        assert_eq!(compute_fitness(&Verdict::Clean, &x()), 0.0);
        assert_eq!(compute_fitness(&Verdict::Discarded, &x()), 0.0);
    }
}
