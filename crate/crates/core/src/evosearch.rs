//! Constrained evolutionary search over genes.
//!
//! Each iteration scores the new genes, keeps the top `K` of everything
//! scored so far (elitism), and breeds the next generation from them by
//! mutation and uniform crossover. Every candidate is rejection-sampled
//! until it meets the budget; children repeating a scored gene are redrawn
//! a bounded number of times.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::Constraint;
use crate::error::{Error, Result};
use crate::netdef::{sample_gene, Gene, NetworkTemplate};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub population: usize,
    pub top_k: usize,
    pub mutations: usize,
    pub crossovers: usize,
    pub iterations: usize,
    pub p_mut: f64,
    /// Rejection-sampling attempts per candidate.
    pub max_attempts: usize,
    pub seed: u64,
    /// Threads used to score a generation; results do not depend on it.
    pub workers: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            population: 128,
            top_k: 32,
            mutations: 64,
            crossovers: 64,
            iterations: 20,
            p_mut: 0.1,
            max_attempts: 10_000,
            seed: 0,
            workers: 1,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("search config: {m}")));
        if self.population == 0 || self.top_k == 0 || self.max_attempts == 0 || self.workers == 0 {
            return bad("population, top_k, max_attempts and workers must be >= 1");
        }
        if self.top_k > self.population {
            return bad("top_k must not exceed population");
        }
        if self.mutations + self.crossovers == 0 {
            return bad("mutations + crossovers must be >= 1");
        }
        if !(self.p_mut > 0.0 && self.p_mut <= 1.0) {
            return bad("p_mut must lie in (0, 1]");
        }
        Ok(())
    }
}

/// A scored gene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub gene: Gene,
    pub fitness: f64,
    pub cost: f64,
}

/// Fitness descending, then cost ascending, then gene ascending.
pub fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.fitness
        .total_cmp(&a.fitness)
        .then(a.cost.total_cmp(&b.cost))
        .then_with(|| a.gene.cmp(&b.gene))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub best_acc: f64,
    pub best_cost: f64,
    pub gene: String,
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub best: Candidate,
    pub history: Vec<HistoryRow>,
    /// Every distinct gene scored, in order of first evaluation.
    pub evaluated: Vec<Candidate>,
}

/// Redraws of a child that repeats an already-scored gene before the
/// repeat is accepted.
const NOVELTY_ATTEMPTS: usize = 64;

fn infeasible(template: &NetworkTemplate, constraint: &Constraint, attempts: usize) -> Error {
    let min_cost = constraint.cost(template, &template.min_gene()).unwrap_or(f64::NAN);
    Error::Infeasible {
        min_cost,
        budget: constraint.budget(),
        attempts,
    }
}

fn random_feasible<R: Rng + ?Sized>(
    template: &NetworkTemplate,
    constraint: &Constraint,
    max_attempts: usize,
    rng: &mut R,
) -> Result<Gene> {
    for _ in 0..max_attempts {
        let g = sample_gene(template, rng);
        if constraint.satisfied_by(template, &g)? {
            return Ok(g);
        }
    }
    Err(infeasible(template, constraint, max_attempts))
}

/// `size` genes from [`sample_gene`], each resampled until it meets the
/// constraint.
pub fn random_population<R: Rng + ?Sized>(
    template: &NetworkTemplate,
    constraint: &Constraint,
    size: usize,
    max_attempts: usize,
    rng: &mut R,
) -> Result<Vec<Gene>> {
    (0..size)
        .map(|_| random_feasible(template, constraint, max_attempts, rng))
        .collect()
}

/// Retries `draw` until the result meets the constraint, falling back to a
/// fresh feasible random gene.
fn constrained<R: Rng + ?Sized>(
    template: &NetworkTemplate,
    constraint: &Constraint,
    max_attempts: usize,
    rng: &mut R,
    mut draw: impl FnMut(&mut R) -> Gene,
) -> Result<Gene> {
    for _ in 0..max_attempts {
        let g = draw(rng);
        if constraint.satisfied_by(template, &g)? {
            return Ok(g);
        }
    }
    random_feasible(template, constraint, max_attempts, rng)
}

/// Each axis is, with probability `p_mut`, moved to a different value of
/// its grid (axes with a single grid value never change).
pub fn mutate<R: Rng + ?Sized>(
    template: &NetworkTemplate,
    gene: &Gene,
    p_mut: f64,
    constraint: &Constraint,
    max_attempts: usize,
    rng: &mut R,
) -> Result<Gene> {
    let space = template.channel_space();
    if gene.len() != space.len() {
        return Err(Error::InvalidGene(format!("expected {} entries, got {}", space.len(), gene.len())));
    }
    constrained(template, constraint, max_attempts, rng, |rng| {
        Gene(
            gene.0
                .iter()
                .zip(&space)
                .map(|(&c, r)| {
                    if r.len() < 2 || !rng.random_bool(p_mut) {
                        return c;
                    }
                    loop {
                        let v = r.sample(rng);
                        if v != c {
                            return v;
                        }
                    }
                })
                .collect(),
        )
    })
}

/// Uniform crossover: each axis from `a` or `b` with probability 1/2.
pub fn crossover<R: Rng + ?Sized>(
    template: &NetworkTemplate,
    a: &Gene,
    b: &Gene,
    constraint: &Constraint,
    max_attempts: usize,
    rng: &mut R,
) -> Result<Gene> {
    if a.len() != b.len() {
        return Err(Error::InvalidGene(format!("parents differ in length: {} vs {}", a.len(), b.len())));
    }
    constrained(template, constraint, max_attempts, rng, |rng| {
        Gene(
            a.0.iter()
                .zip(&b.0)
                .map(|(&x, &y)| if rng.random_bool(0.5) { x } else { y })
                .collect(),
        )
    })
}

fn score<F>(genes: &[Gene], evaluator: &F, workers: usize) -> Result<Vec<f64>>
where
    F: Fn(&Gene) -> Result<f64> + Sync,
{
    let one = |g: &Gene| -> Result<f64> {
        let fail = |message: String| Error::Evaluator {
            gene: g.to_string(),
            message,
        };
        let f = evaluator(g).map_err(|e| fail(e.to_string()))?;
        if f.is_finite() {
            Ok(f)
        } else {
            Err(fail(format!("non-finite fitness {f}")))
        }
    };
    if workers <= 1 || genes.len() < 2 {
        return genes.iter().map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| genes.par_iter().map(one).collect())
}

/// Runs the search. Iteration 0 scores the random initial population; each
/// of the `iterations` further rounds scores one bred generation.
pub fn search<F>(
    template: &NetworkTemplate,
    constraint: &Constraint,
    evaluator: F,
    config: &SearchConfig,
) -> Result<SearchResult>
where
    F: Fn(&Gene) -> Result<f64> + Sync,
{
    config.validate()?;
    let mut rng: ChaCha8Rng = stream(config.seed, 0x5ea);
    let mut generation = random_population(template, constraint, config.population, config.max_attempts, &mut rng)?;
    let mut cache: HashMap<Gene, usize> = HashMap::new();
    let mut evaluated: Vec<Candidate> = Vec::new();
    let mut elite: Vec<Candidate> = Vec::new();
    let mut history = Vec::with_capacity(config.iterations + 1);
    for iter in 0..=config.iterations {
        let mut seen = HashSet::new();
        let fresh: Vec<Gene> = generation
            .iter()
            .filter(|g| !cache.contains_key(*g) && seen.insert(*g))
            .cloned()
            .collect();
        let costs = fresh
            .iter()
            .map(|g| {
                let c = constraint.cost(template, g)?;
                if c < constraint.budget() {
                    Ok(c)
                } else {
                    Err(Error::InvalidGene(format!("{g} violates the budget ({c} >= {})", constraint.budget())))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        let fitness = score(&fresh, &evaluator, config.workers)?;
        for ((gene, cost), fitness) in fresh.into_iter().zip(costs).zip(fitness) {
            cache.insert(gene.clone(), evaluated.len());
            evaluated.push(Candidate { gene, fitness, cost });
        }

        let mut pool = elite;
        let mut in_pool: HashSet<Gene> = pool.iter().map(|c| c.gene.clone()).collect();
        for g in &generation {
            if in_pool.insert(g.clone()) {
                pool.push(evaluated[cache[g]].clone());
            }
        }
        pool.sort_by(rank);
        pool.truncate(config.top_k);
        elite = pool;
        let best = &elite[0];
        history.push(HistoryRow {
            iter,
            best_acc: best.fitness,
            best_cost: best.cost,
            gene: best.gene.to_string(),
        });
        if iter == config.iterations {
            break;
        }

        let mut next: Vec<Gene> = Vec::with_capacity(config.mutations + config.crossovers);
        for slot in 0..config.mutations + config.crossovers {
            let mut child = None;
            for _ in 0..NOVELTY_ATTEMPTS {
                let g = if slot < config.mutations {
                    let parent = &elite[rng.random_range(0..elite.len())].gene;
                    mutate(template, parent, config.p_mut, constraint, config.max_attempts, &mut rng)?
                } else {
                    let a = &elite[rng.random_range(0..elite.len())].gene;
                    let b = &elite[rng.random_range(0..elite.len())].gene;
                    crossover(template, a, b, constraint, config.max_attempts, &mut rng)?
                };
                let novel = !cache.contains_key(&g) && !next.contains(&g);
                child = Some(g);
                if novel {
                    break;
                }
            }
            next.extend(child);
        }
        generation = next;
    }
    Ok(SearchResult {
        best: elite.swap_remove(0),
        history,
        evaluated,
    })
}

/// CSV `iter,best_acc,best_cost,gene`.
pub fn history_csv(history: &[HistoryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in history {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("writing history", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
