use std::sync::atomic::{AtomicUsize, Ordering};

use metaprune::cost::{flops, Constraint};
use metaprune::evosearch::{crossover, history_csv, mutate, random_population, search, SearchConfig};
use metaprune::netdef::{sample_gene, Gene};
use metaprune::{Error, NetworkTemplate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Chain of `n` 1x1 convs with widths up to `max` (grid size `max`, step 1
/// for max < 34).
fn chain(n: usize, max: usize) -> NetworkTemplate {
    let axes: Vec<String> = (0..n).map(|_| format!(r#"{{"kind": "layer", "max": {max}}}"#)).collect();
    let mut layers: Vec<String> = (0..n).map(|i| format!(r#"{{"kind": "conv", "out": {{"axis": {i}}}}}"#)).collect();
    layers.push(r#"{"kind": "linear", "out": {"fixed": 2}}"#.into());
    NetworkTemplate::from_json(&format!(
        r#"{{"name": "chain", "input": [2, 4, 4], "classes": 2, "axes": [{}], "layers": [{}]}}"#,
        axes.join(","),
        layers.join(",")
    ))
    .unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn loose() -> Constraint {
    Constraint::flops(1e18).unwrap()
}

#[test]
fn infeasible_budget_is_reported() {
    let t = chain(3, 8);
    let min = flops(&t, &t.min_gene()).unwrap() as f64;
    let c = Constraint::flops(min).unwrap();
    match random_population(&t, &c, 4, 100, &mut rng(0)) {
        Err(Error::Infeasible { min_cost, budget, .. }) => {
            assert_eq!(min_cost, min);
            assert_eq!(budget, min);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn generous_budget_matches_sampler() {
    let t = chain(3, 8);
    let a = random_population(&t, &loose(), 50, 1, &mut rng(1)).unwrap();
    let mut r = rng(1);
    let b: Vec<Gene> = (0..50).map(|_| sample_gene(&t, &mut r)).collect();
    assert_eq!(a, b);
}

#[test]
fn population_satisfies_constraint() {
    let t = chain(4, 8);
    let full = flops(&t, &t.full_gene()).unwrap() as f64;
    let c = Constraint::flops(0.3 * full).unwrap();
    for g in random_population(&t, &c, 200, 10_000, &mut rng(2)).unwrap() {
        assert!(c.satisfied_by(&t, &g).unwrap());
    }
}

#[test]
fn mutation_identity_cases() {
    let t = chain(3, 8);
    let g = Gene(vec![3, 5, 7]);
    let mut r = rng(3);
    assert_eq!(mutate(&t, &g, 0.0, &loose(), 10, &mut r).unwrap(), g);
    let single = chain(1, 1);
    let g1 = Gene(vec![1]);
    assert_eq!(mutate(&single, &g1, 1.0, &loose(), 10, &mut r).unwrap(), g1);
}

#[test]
fn mutation_rate_is_binomial() {
    let t = chain(10, 8);
    let g = Gene(vec![4; 10]);
    let mut r = rng(4);
    let n = 10_000;
    let changed: usize = (0..n)
        .map(|_| {
            let m = mutate(&t, &g, 0.1, &loose(), 10, &mut r).unwrap();
            m.0.iter().zip(&g.0).filter(|(a, b)| a != b).count()
        })
        .sum();
    let mean = changed as f64 / n as f64;
    let sigma = (10.0 * 0.1 * 0.9 / n as f64).sqrt();
    assert!((mean - 1.0).abs() < 5.0 * sigma, "mean {mean}");
}

#[test]
fn crossover_properties() {
    let t = chain(6, 8);
    let full = flops(&t, &t.full_gene()).unwrap() as f64;
    let c = Constraint::flops(0.5 * full).unwrap();
    let mut r = rng(5);
    let a = Gene(vec![2, 6, 3, 1, 5, 2]);
    assert_eq!(crossover(&t, &a, &a, &loose(), 10, &mut r).unwrap(), a);
    let pop = random_population(&t, &c, 40, 10_000, &mut r).unwrap();
    for w in pop.windows(2) {
        let child = crossover(&t, &w[0], &w[1], &c, 10_000, &mut r).unwrap();
        assert!(c.satisfied_by(&t, &child).unwrap());
    }
    let (x, y) = (Gene(vec![1, 2, 3, 4, 5, 6]), Gene(vec![8, 7, 6, 5, 4, 3]));
    for _ in 0..100 {
        let child = crossover(&t, &x, &y, &loose(), 10, &mut r).unwrap();
        for i in 0..6 {
            assert!(child.0[i] == x.0[i] || child.0[i] == y.0[i]);
        }
    }
}

fn target_fitness(target: &[usize], max: usize) -> impl Fn(&Gene) -> metaprune::Result<f64> + Sync + '_ {
    move |g: &Gene| {
        let d: usize = g.0.iter().zip(target).map(|(a, b)| a.abs_diff(*b)).sum();
        Ok(1.0 - d as f64 / (target.len() * max) as f64)
    }
}

fn all_genes(t: &NetworkTemplate) -> Vec<Gene> {
    let space = t.channel_space();
    let mut out = vec![Vec::new()];
    for r in &space {
        out = out
            .into_iter()
            .flat_map(|p: Vec<usize>| r.values().map(move |v| [p.clone(), vec![v]].concat()))
            .collect();
    }
    out.into_iter().map(Gene).collect()
}

#[test]
fn finds_brute_force_optimum_small_space() {
    // 3 axes with 4 choices each
    let t = chain(3, 4);
    let target = [3, 1, 4];
    let f = target_fitness(&target, 4);
    let best = all_genes(&t)
        .into_iter()
        .map(|g| f(&g).unwrap())
        .fold(f64::MIN, f64::max);
    let config = SearchConfig {
        population: 16,
        top_k: 4,
        mutations: 8,
        crossovers: 8,
        iterations: 8,
        seed: 7,
        ..SearchConfig::default()
    };
    let r = search(&t, &loose(), &f, &config).unwrap();
    assert_eq!(r.best.fitness, best);
    assert_eq!(r.best.gene, Gene(target.to_vec()));
}

#[test]
fn zero_iterations_returns_best_initial() {
    let t = chain(3, 8);
    let f = target_fitness(&[5, 5, 5], 8);
    let config = SearchConfig {
        population: 10,
        top_k: 3,
        iterations: 0,
        seed: 8,
        ..SearchConfig::default()
    };
    let r = search(&t, &loose(), &f, &config).unwrap();
    let init = random_population(&t, &loose(), 10, config.max_attempts, &mut metaprune::rng::stream(8, 0x5ea)).unwrap();
    let best = init.iter().map(|g| f(g).unwrap()).fold(f64::MIN, f64::max);
    assert_eq!(r.best.fitness, best);
    assert_eq!(r.history.len(), 1);
}

#[test]
fn constant_fitness_breaks_ties_by_cost_then_gene() {
    let t = chain(3, 8);
    let config = SearchConfig {
        population: 20,
        top_k: 5,
        mutations: 10,
        crossovers: 10,
        iterations: 3,
        seed: 9,
        ..SearchConfig::default()
    };
    let c = loose();
    let r = search(&t, &c, |_: &Gene| Ok(0.5), &config).unwrap();
    let min = r
        .evaluated
        .iter()
        .min_by(|a, b| a.cost.total_cmp(&b.cost).then_with(|| a.gene.cmp(&b.gene)))
        .unwrap();
    assert_eq!(r.best.gene, min.gene);
}

#[test]
fn search_invariants_and_determinism() {
    let t = chain(4, 8);
    let full = flops(&t, &t.full_gene()).unwrap() as f64;
    let c = Constraint::flops(0.4 * full).unwrap();
    let f = target_fitness(&[8, 8, 8, 8], 8);
    let config = SearchConfig {
        population: 24,
        top_k: 6,
        mutations: 12,
        crossovers: 12,
        iterations: 10,
        seed: 10,
        ..SearchConfig::default()
    };
    let a = search(&t, &c, &f, &config).unwrap();
    assert!(a.evaluated.iter().all(|x| c.satisfied_by(&t, &x.gene).unwrap() && x.cost < c.budget()));
    for w in a.history.windows(2) {
        assert!(w[1].best_acc >= w[0].best_acc);
    }
    let b = search(&t, &c, &f, &config).unwrap();
    assert_eq!(a.history, b.history);
    let par = search(&t, &c, &f, &SearchConfig { workers: 4, ..config.clone() }).unwrap();
    assert_eq!(a.history, par.history);
    assert_eq!(a.evaluated, par.evaluated);

    let csv = history_csv(&a.history).unwrap();
    assert!(csv.starts_with("iter,best_acc,best_cost,gene\n0,"));
    assert_eq!(csv.lines().count(), 12);
}

#[test]
fn each_gene_scored_once() {
    let t = chain(2, 4);
    let calls = AtomicUsize::new(0);
    let config = SearchConfig {
        population: 16,
        top_k: 4,
        mutations: 8,
        crossovers: 8,
        iterations: 10,
        seed: 11,
        ..SearchConfig::default()
    };
    let r = search(
        &t,
        &loose(),
        |g: &Gene| {
            calls.fetch_add(1, Ordering::Relaxed);
            Ok(g.0[0] as f64)
        },
        &config,
    )
    .unwrap();
    assert_eq!(calls.load(Ordering::Relaxed), r.evaluated.len());
    assert!(r.evaluated.len() <= 16);
}

#[test]
fn evaluator_failure_names_gene() {
    let t = chain(2, 4);
    let config = SearchConfig {
        population: 4,
        top_k: 2,
        seed: 12,
        ..SearchConfig::default()
    };
    let err = search(
        &t,
        &loose(),
        |_: &Gene| Err(Error::InvalidArgument("boom".into())),
        &config,
    )
    .unwrap_err();
    match err {
        Error::Evaluator { gene, message } => {
            assert!(gene.contains('/'));
            assert!(message.contains("boom"));
        }
        other => panic!("{other}"),
    }
}

#[test]
fn config_validation() {
    let bad = [
        SearchConfig { top_k: 200, ..SearchConfig::default() },
        SearchConfig { population: 0, ..SearchConfig::default() },
        SearchConfig { p_mut: 0.0, ..SearchConfig::default() },
        SearchConfig { mutations: 0, crossovers: 0, ..SearchConfig::default() },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    assert!(SearchConfig::default().validate().is_ok());
}
