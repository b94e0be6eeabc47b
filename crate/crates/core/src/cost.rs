//! FLOPs and latency cost models, and the budget predicate used by search.
//!
//! FLOPs are multiply-adds of convolution and linear layers. Batch norm,
//! activations, pooling and biases are free.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::netdef::{Gene, LayerKind, LayerSpec, NetworkTemplate, ResolvedLayer};

/// Multiply-adds of one layer at the given widths.
pub fn layer_flops(spec: &LayerSpec, c_in: usize, c_out: usize, out_hw: (usize, usize)) -> u64 {
    let spatial = (out_hw.0 * out_hw.1) as u64;
    let k = (spec.kernel[0] * spec.kernel[1]) as u64;
    match spec.kind {
        LayerKind::Conv => c_out as u64 * c_in as u64 * k * spatial,
        LayerKind::Depthwise => c_out as u64 * k * spatial,
        LayerKind::Linear => c_in as u64 * c_out as u64,
    }
}

fn total_flops(template: &NetworkTemplate, dims: &[ResolvedLayer]) -> u64 {
    template
        .layers
        .iter()
        .zip(dims)
        .map(|(l, d)| layer_flops(l, d.c_in, d.c_out, d.out_hw))
        .sum()
}

/// Multiply-add count of the pruned network encoded by `gene`.
pub fn flops(template: &NetworkTemplate, gene: &Gene) -> Result<u64> {
    Ok(total_flops(template, &template.resolve(gene)?))
}

/// Like [`flops`] but accepts any widths in `1..=C`, on the grid or not.
pub fn flops_of_widths(template: &NetworkTemplate, widths: &[usize]) -> Result<u64> {
    Ok(total_flops(template, &template.resolve_widths(widths)?))
}

/// Per-layer execution times keyed by `(layer id, c_in, c_out)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatencyTable {
    entries: BTreeMap<(usize, usize, usize), f64>,
}

pub const LATENCY_CSV_HEADER: [&str; 4] = ["layer_id", "c_in", "c_out", "us"];

impl LatencyTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: usize, c_in: usize, c_out: usize, us: f64) -> Result<()> {
        if !us.is_finite() || us < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "latency entry ({layer}, {c_in}, {c_out}) must be finite and >= 0, got {us}"
            )));
        }
        self.entries.insert((layer, c_in, c_out), us);
        Ok(())
    }

    pub fn get(&self, layer: usize, c_in: usize, c_out: usize) -> Result<f64> {
        self.entries
            .get(&(layer, c_in, c_out))
            .copied()
            .ok_or(Error::MissingLatency { layer, c_in, c_out })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize, usize), f64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    /// Multiplies every entry by `k`.
    pub fn scaled(&self, k: f64) -> Result<LatencyTable> {
        let mut out = LatencyTable::new();
        for ((l, i, o), v) in self.iter() {
            out.insert(l, i, o, v * k)?;
        }
        Ok(out)
    }

    /// Errors with the first grid point of `template` that has no entry.
    pub fn check_covers(&self, template: &NetworkTemplate) -> Result<()> {
        for l in 0..template.layers.len() {
            for (i, o) in template.layer_channel_pairs(l)? {
                self.get(l, i, o)?;
            }
        }
        Ok(())
    }

    /// Parses the `layer_id,c_in,c_out,us` CSV format. Any deviation from
    /// the exact header, a malformed field, a negative or non-finite time or
    /// a duplicated key is an error.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::None)
            .from_reader(text.as_bytes());
        let header = rdr.headers()?.clone();
        if header.iter().ne(LATENCY_CSV_HEADER) {
            return Err(Error::Format(format!(
                "latency table header must be `{}`, got `{}`",
                LATENCY_CSV_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut table = LatencyTable::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = row + 2;
            let int = |i: usize| -> Result<usize> {
                rec[i].parse().map_err(|_| {
                    Error::Format(format!("line {line}: `{}` is not a non-negative integer", &rec[i]))
                })
            };
            let (layer, c_in, c_out) = (int(0)?, int(1)?, int(2)?);
            let us: f64 = rec[3]
                .parse()
                .map_err(|_| Error::Format(format!("line {line}: `{}` is not a number", &rec[3])))?;
            if table.entries.contains_key(&(layer, c_in, c_out)) {
                return Err(Error::Format(format!(
                    "line {line}: duplicate entry ({layer}, {c_in}, {c_out})"
                )));
            }
            table
                .insert(layer, c_in, c_out, us)
                .map_err(|e| Error::Format(format!("line {line}: {e}")))?;
        }
        Ok(table)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(LATENCY_CSV_HEADER).expect("in-memory write");
        for ((l, i, o), us) in self.iter() {
            w.write_record(&[l.to_string(), i.to_string(), o.to_string(), format!("{us:?}")])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is UTF-8")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading latency table {}", path.display()), e))?;
        Self::from_csv(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())
            .map_err(|e| Error::io(format!("writing latency table {}", path.display()), e))
    }
}

/// Sum of the per-layer table entries for the pruned network.
pub fn latency(template: &NetworkTemplate, gene: &Gene, table: &LatencyTable) -> Result<f64> {
    let dims = template.resolve(gene)?;
    dims.iter()
        .enumerate()
        .map(|(l, d)| table.get(l, d.c_in, d.c_out))
        .sum()
}

/// Synthetic device model: `(a + b * flops) * (1 + noise * u)` per layer
/// configuration, `u` uniform in `[-1, 1)` drawn from `seed`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineLatency {
    pub a: f64,
    pub b: f64,
    pub noise: f64,
    pub seed: u64,
}

impl AffineLatency {
    pub fn new(a: f64, b: f64) -> Self {
        AffineLatency { a, b, noise: 0.0, seed: 0 }
    }

    pub fn with_noise(self, noise: f64, seed: u64) -> Self {
        AffineLatency { noise, seed, ..self }
    }
}

/// Builds a table covering exactly the template's channel grid.
pub fn synth_table(template: &NetworkTemplate, model: AffineLatency) -> Result<LatencyTable> {
    if !(0.0..1.0).contains(&model.noise) || model.a < 0.0 || model.b < 0.0 {
        return Err(Error::InvalidArgument(
            "latency model needs a >= 0, b >= 0 and 0 <= noise < 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let full = template.resolve_widths(&template.full_widths())?;
    let mut table = LatencyTable::new();
    for (l, spec) in template.layers.iter().enumerate() {
        for (c_in, c_out) in template.layer_channel_pairs(l)? {
            let f = layer_flops(spec, c_in, c_out, full[l].out_hw) as f64;
            let mut us = model.a + model.b * f;
            if model.noise > 0.0 {
                us *= 1.0 + model.noise * rng.random_range(-1.0..1.0);
            }
            table.insert(l, c_in, c_out, us)?;
        }
    }
    Ok(table)
}

/// A hard budget on the pruned network's cost.
#[derive(Clone, Debug)]
pub enum Constraint {
    /// Multiply-add budget.
    Flops { budget: f64 },
    /// Latency budget in microseconds.
    Latency { budget_us: f64, table: Arc<LatencyTable> },
}

impl Constraint {
    pub fn flops(budget: f64) -> Result<Self> {
        Self::check_budget(budget)?;
        Ok(Constraint::Flops { budget })
    }

    pub fn latency(budget_us: f64, table: LatencyTable) -> Result<Self> {
        Self::check_budget(budget_us)?;
        Ok(Constraint::Latency {
            budget_us,
            table: Arc::new(table),
        })
    }

    fn check_budget(b: f64) -> Result<()> {
        if b > 0.0 && !b.is_nan() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("budget must be positive, got {b}")))
        }
    }

    pub fn budget(&self) -> f64 {
        match self {
            Constraint::Flops { budget } => *budget,
            Constraint::Latency { budget_us, .. } => *budget_us,
        }
    }

    /// FLOPs or microseconds, whichever the constraint measures.
    pub fn cost(&self, template: &NetworkTemplate, gene: &Gene) -> Result<f64> {
        match self {
            Constraint::Flops { .. } => Ok(flops(template, gene)? as f64),
            Constraint::Latency { table, .. } => latency(template, gene, table),
        }
    }

    /// Strict `cost < budget`.
    pub fn satisfied_by(&self, template: &NetworkTemplate, gene: &Gene) -> Result<bool> {
        Ok(self.cost(template, gene)? < self.budget())
    }
}

pub fn satisfies(template: &NetworkTemplate, gene: &Gene, constraint: &Constraint) -> Result<bool> {
    constraint.satisfied_by(template, gene)
}


#[cfg(test)]
mod reference_counts {
    use super::*;
    use crate::netdef::builtin_template;

    #[test]
    fn mobilenet_reference_flops() {
        let v1 = builtin_template("mobilenet-v1-224").unwrap();
        for (ratio, published) in [(1.0, 569e6), (0.75, 325e6), (0.5, 149e6), (0.25, 41e6)] {
            let f = flops_of_widths(&v1, &v1.uniform_widths(ratio).0).unwrap() as f64;
            assert!((f / published - 1.0).abs() < 0.02, "{ratio}: {f}");
        }
        let v2 = builtin_template("mobilenet-v2-224").unwrap();
        let f = flops(&v2, &v2.full_gene()).unwrap() as f64;
        assert!((f / 300e6 - 1.0).abs() < 0.02, "{f}");
    }
}
