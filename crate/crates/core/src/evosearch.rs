//! Budget-constrained evolutionary search over genomes.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archspace::{check_budget, ArchGenome, ModelDims, ParamBudget, SearchSpace};
use crate::corpus::{Batch, Objective};
use crate::error::{ElmError, Result};
use crate::metrics::Metrics;
use crate::supernet::Supernet;

/// Draws allowed per slot before a ceiling is declared infeasible.
pub const MAX_TRIES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvoConfig {
    pub population: usize,
    pub generations: usize,
    pub crossover_p: f64,
    pub mutation_p: f64,
    pub parents: usize,
    pub elites: usize,
    pub budget: ParamBudget,
    pub seed: u64,
}

impl EvoConfig {
    pub fn new(budget: ParamBudget, seed: u64) -> Self {
        EvoConfig {
            population: 50,
            generations: 40,
            crossover_p: 1.0,
            mutation_p: 0.1,
            parents: 10,
            elites: 2,
            budget,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ElmError::Config(m.to_string()));
        if self.parents < 2 || self.population < self.parents {
            return bad("evolution needs population >= parents >= 2");
        }
        if self.elites > self.population {
            return bad("evolution elites exceed the population");
        }
        if !(0.0..=1.0).contains(&self.crossover_p) || !(0.0..=1.0).contains(&self.mutation_p) {
            return bad("evolution probabilities must lie in [0, 1]");
        }
        if self.budget.ceiling == 0 {
            return bad("parameter ceiling must be positive");
        }
        Ok(())
    }
}

/// Scores a genome; higher is better. Implementations must be deterministic.
pub trait Fitness: Sync {
    fn score(&self, genome: &ArchGenome) -> Result<f64>;
}

/// Accuracy on masked positions (MLM) or negative loss (CLM), using inherited supernet weights.
pub struct SupernetFitness {
    net: Arc<Supernet>,
    batches: Vec<Batch>,
}

impl SupernetFitness {
    pub fn new(net: Arc<Supernet>, batches: Vec<Batch>) -> Self {
        SupernetFitness { net, batches }
    }

    pub fn metrics(&self, genome: &ArchGenome) -> Result<Metrics> {
        let mut m = Metrics::default();
        for b in &self.batches {
            let (logits, _) = self.net.forward_path(genome, b, false)?;
            m.add(&logits, b)?;
        }
        Ok(m)
    }
}

impl Fitness for SupernetFitness {
    fn score(&self, genome: &ArchGenome) -> Result<f64> {
        let m = self.metrics(genome)?;
        Ok(match self.batches.first().map(|b| b.objective) {
            Some(Objective::Clm) => -m.loss(),
            _ => m.accuracy(),
        })
    }
}

/// Fitness read from a table keyed by the choice sequence; for testing the search itself.
pub struct LookupFitness {
    table: HashMap<Vec<usize>, f64>,
}

impl LookupFitness {
    pub fn new(table: HashMap<Vec<usize>, f64>) -> Self {
        LookupFitness { table }
    }
}

impl Fitness for LookupFitness {
    fn score(&self, genome: &ArchGenome) -> Result<f64> {
        let key: Vec<usize> = genome.layers.iter().map(|g| g.choice.index()).collect();
        self.table
            .get(&key)
            .copied()
            .ok_or_else(|| ElmError::Contract(format!("no fitness entry for {genome}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub generation: usize,
    pub genome: ArchGenome,
    pub fitness: f64,
    pub params: u64,
}

/// One line of the search log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchLogLine {
    pub generation: usize,
    pub genome: String,
    pub fitness: f64,
    pub params: u64,
}

impl From<&EvalRecord> for SearchLogLine {
    fn from(r: &EvalRecord) -> Self {
        SearchLogLine {
            generation: r.generation,
            genome: r.genome.to_text(),
            fitness: r.fitness,
            params: r.params,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvoResult {
    pub best: EvalRecord,
    /// Every population member of every generation.
    pub log: Vec<EvalRecord>,
    /// Best fitness seen up to and including each generation.
    pub best_so_far: Vec<f64>,
}

/// Uniform per-layer inheritance of block choices; widths and heads come from `space`.
pub fn crossover<R: Rng + ?Sized>(a: &ArchGenome, b: &ArchGenome, space: &SearchSpace, rng: &mut R) -> Result<ArchGenome> {
    if a.len() != b.len() {
        return Err(ElmError::Contract(format!(
            "crossover of genomes with {} and {} layers",
            a.len(),
            b.len()
        )));
    }
    let choices: Vec<_> = a
        .layers
        .iter()
        .zip(&b.layers)
        .map(|(x, y)| if rng.random_bool(0.5) { x.choice } else { y.choice })
        .collect();
    Ok(space.genome_from_choices(&choices))
}

/// Re-rolls each layer to a uniform candidate with probability `p`.
pub fn mutate<R: Rng + ?Sized>(g: &ArchGenome, p: f64, space: &SearchSpace, rng: &mut R) -> ArchGenome {
    let choices: Vec<_> = g
        .layers
        .iter()
        .map(|gene| {
            if rng.random::<f64>() < p {
                space.choices[rng.random_range(0..space.choices.len())]
            } else {
                gene.choice
            }
        })
        .collect();
    space.genome_from_choices(&choices)
}

fn infeasible(budget: &ParamBudget) -> ElmError {
    ElmError::Config(format!(
        "ceiling infeasible: no genome under {} parameters found in {MAX_TRIES} draws",
        budget.ceiling
    ))
}

fn sample_feasible<R: Rng + ?Sized>(space: &SearchSpace, dims: &ModelDims, budget: &ParamBudget, rng: &mut R) -> Result<ArchGenome> {
    for _ in 0..MAX_TRIES {
        let g = space.random_genome(rng);
        if check_budget(&g, dims, budget).pass {
            return Ok(g);
        }
    }
    Err(infeasible(budget))
}

pub fn run_evolution(space: &SearchSpace, dims: &ModelDims, fitness: &dyn Fitness, cfg: &EvoConfig) -> Result<EvoResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut population = (0..cfg.population)
        .map(|_| sample_feasible(space, dims, &cfg.budget, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut memo: HashMap<String, f64> = HashMap::new();
    let mut log = Vec::new();
    let mut best: Option<EvalRecord> = None;
    let mut best_so_far = Vec::with_capacity(cfg.generations);

    for generation in 0..cfg.generations {
        // Unique, not-yet-scored genomes in population order.
        let mut pending: Vec<(String, &ArchGenome)> = Vec::new();
        for g in &population {
            let key = g.to_text();
            if !memo.contains_key(&key) && !pending.iter().any(|(k, _)| *k == key) {
                pending.push((key, g));
            }
        }
        let scores: Vec<Result<f64>> = pending.par_iter().map(|(_, g)| fitness.score(g)).collect();
        for ((key, _), s) in pending.iter().zip(scores) {
            memo.insert(key.clone(), s?);
        }

        let mut scored: Vec<(usize, f64)> = population
            .iter()
            .enumerate()
            .map(|(i, g)| (i, memo[&g.to_text()]))
            .collect();
        for (i, f) in &scored {
            let g = &population[*i];
            log.push(EvalRecord {
                generation,
                genome: g.clone(),
                fitness: *f,
                params: check_budget(g, dims, &cfg.budget).count,
            });
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let (top_i, top_f) = scored[0];
        if best.as_ref().is_none_or(|b| top_f > b.fitness) {
            let g = population[top_i].clone();
            best = Some(EvalRecord {
                generation,
                params: check_budget(&g, dims, &cfg.budget).count,
                genome: g,
                fitness: top_f,
            });
        }
        best_so_far.push(best.as_ref().map(|b| b.fitness).unwrap_or(f64::NEG_INFINITY));
        if generation + 1 == cfg.generations {
            break;
        }

        let ranked: Vec<ArchGenome> = scored.iter().map(|(i, _)| population[*i].clone()).collect();
        let pool = &ranked[..cfg.parents.min(ranked.len())];
        let mut next: Vec<ArchGenome> = ranked.iter().take(cfg.elites).cloned().collect();
        while next.len() < cfg.population {
            // Children already scored or already in the next population are
            // re-bred; one is kept only if nothing new turns up.
            let mut accepted = None;
            let mut fallback = None;
            for _ in 0..MAX_TRIES {
                let a = &pool[rng.random_range(0..pool.len())];
                let b = &pool[rng.random_range(0..pool.len())];
                let child = if rng.random::<f64>() < cfg.crossover_p {
                    crossover(a, b, space, &mut rng)?
                } else {
                    a.clone()
                };
                let child = mutate(&child, cfg.mutation_p, space, &mut rng);
                if !check_budget(&child, dims, &cfg.budget).pass {
                    continue;
                }
                if memo.contains_key(&child.to_text()) || next.contains(&child) {
                    fallback.get_or_insert(child);
                    continue;
                }
                accepted = Some(child);
                break;
            }
            next.push(accepted.or(fallback).ok_or_else(|| infeasible(&cfg.budget))?);
        }
        population = next;
    }

    Ok(EvoResult {
        best: best.ok_or_else(|| ElmError::Config("evolution ran zero generations".into()))?,
        log,
        best_so_far,
    })
}
