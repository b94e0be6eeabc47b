use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use metaprune::config::Config;
use metaprune::cost::{flops, flops_of_widths, latency, synth_table, AffineLatency, Constraint, LatencyTable};
use metaprune::data::{load_cifar_dir, split_holdout, synth_blobs, synth_blobs_draw, BlobSpec, Dataset};
use metaprune::eval::{train_from_scratch, Evaluator};
use metaprune::evosearch::{history_csv, search};
use metaprune::netdef::{builtin_template, parse_gene, Gene, BUILTIN_TEMPLATES};
use metaprune::pruningnet::{train_meta, Mode, PruningNet};
use metaprune::report::{layer_widths, layer_widths_csv, Results};
use metaprune::train::metrics_csv;
use metaprune::{Error, NetworkTemplate};

#[derive(Parser)]
#[command(name = "metaprune", version, about = "Meta-learned channel pruning")]
struct Cli {
    /// JSON file overriding configuration defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Predict,
    Direct,
}

#[derive(Subcommand)]
enum Command {
    /// Train a PruningNet with stochastic structure sampling.
    TrainMeta {
        /// Built-in template name or template JSON file.
        #[arg(long)]
        template: String,
        /// `synth` or a directory holding the CIFAR-10 binary files.
        #[arg(long, default_value = "synth")]
        data: String,
        /// Overrides the meta-training epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "predict")]
        mode: ModeArg,
        /// Checkpoint path; the template and metrics are written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evolutionary search for the most accurate gene under a budget.
    Search {
        #[arg(long)]
        ckpt: PathBuf,
        /// `flops:<N>` or `latency:<table.csv>:<microseconds>`.
        #[arg(long)]
        constraint: String,
        /// Defaults to the template saved with the checkpoint.
        #[arg(long)]
        template: Option<String>,
        #[arg(long, default_value = "synth")]
        data: String,
        #[arg(long)]
        pop: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Results JSON; the history CSV goes to `<out>.history.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one gene with a trained PruningNet.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// `full`, `uniform:<ratio>` or `c1/c2/...`.
        #[arg(long)]
        gene: String,
        #[arg(long)]
        template: Option<String>,
        #[arg(long, default_value = "synth")]
        data: String,
    },
    /// Print the multiply-add count of a gene.
    Flops {
        #[arg(long)]
        template: String,
        /// `full`, `uniform:<ratio>` or `c1/c2/...`.
        #[arg(long)]
        gene: String,
    },
    /// Write a synthetic latency table `(a + b * flops) * (1 + noise * u)`.
    LatencyGen {
        #[arg(long)]
        template: String,
        #[arg(long)]
        a: f64,
        #[arg(long)]
        b: f64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a structure from scratch and report test accuracy.
    TrainFinal {
        /// Defaults to the template named in `--results`.
        #[arg(long)]
        template: Option<String>,
        /// `full`, `uniform:<ratio>` or `c1/c2/...`; defaults to the gene in `--results`.
        #[arg(long)]
        gene: Option<String>,
        /// Search results JSON; its test accuracy is filled in.
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long, default_value = "synth")]
        data: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint of the trained network.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer width CSV of a searched gene.
    Visualize {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        template: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// An error with its exit code: 2 for bad input or configuration, 1 for
/// failures while running.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. }
            | Error::Json(_)
            | Error::Csv(_)
            | Error::Format(_)
            | Error::InvalidArgument(_)
            | Error::InvalidGene(_)
            | Error::InvalidTemplate(_)
            | Error::UnknownTemplate(_)
            | Error::MissingLatency { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            error: e.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let config = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("config {}", p.display())).map_err(usage)?,
        None => Config::default(),
    };
    match cli.command {
        Command::TrainMeta {
            template,
            data,
            epochs,
            seed,
            mode,
            out,
        } => train_meta_cmd(&config, &template, &data, epochs, seed, mode, &out),
        Command::Search {
            ckpt,
            constraint,
            template,
            data,
            pop,
            iters,
            seed,
            workers,
            out,
        } => {
            let mut config = config;
            if let Some(p) = pop {
                config.search.population = p;
                config.search.top_k = config.search.top_k.min(p);
            }
            if let Some(n) = iters {
                config.search.iterations = n;
            }
            config.search.seed = seed;
            config.search.workers = workers;
            search_cmd(&config, &ckpt, &constraint, template.as_deref(), &data, &out)
        }
        Command::Evaluate {
            ckpt,
            gene,
            template,
            data,
        } => {
            let (template, pnet) = load_pnet(&ckpt, template.as_deref())?;
            let (sub_train, subval, _) = load_split(&config, &data, &template)?;
            let widths = parse_widths(&template, &gene)?;
            let acc = Evaluator::new(&pnet, &sub_train, &subval, &config.eval).widths(&widths)?;
            println!("{acc}");
            Ok(())
        }
        Command::Flops { template, gene } => {
            let t = load_template(&template)?;
            let widths = parse_widths(&t, &gene)?;
            println!("{}", flops_of_widths(&t, &widths)?);
            Ok(())
        }
        Command::LatencyGen {
            template,
            a,
            b,
            noise,
            seed,
            out,
        } => {
            let t = load_template(&template)?;
            let table = synth_table(&t, AffineLatency::new(a, b).with_noise(noise, seed))?;
            table.save(&out)?;
            eprintln!("wrote {} entries to {}", table.len(), out.display());
            Ok(())
        }
        Command::TrainFinal {
            template,
            gene,
            results,
            data,
            epochs,
            seed,
            out,
        } => train_final_cmd(&config, template.as_deref(), gene.as_deref(), results.as_deref(), &data, epochs, seed, out.as_deref()),
        Command::Visualize { results, template, out } => {
            let r = Results::load(&results).map_err(|e| usage(e.into()))?;
            let t = load_template(template.as_deref().unwrap_or(&r.template))?;
            let csv = layer_widths_csv(&layer_widths(&t, &r.gene)?)?;
            write(&out, &csv)?;
            Ok(())
        }
    }
}

/// A built-in name, or a path to a template JSON file.
fn load_template(arg: &str) -> CliResult<NetworkTemplate> {
    if BUILTIN_TEMPLATES.contains(&arg) {
        return Ok(builtin_template(arg)?);
    }
    let path = Path::new(arg);
    let text = std::fs::read_to_string(path)
        .with_context(|| {
            format!(
                "template `{}` is neither a built-in ({}) nor a readable file",
                path.display(),
                BUILTIN_TEMPLATES.join(", ")
            )
        })
        .map_err(usage)?;
    NetworkTemplate::from_json(&text)
        .with_context(|| format!("template file {}", path.display()))
        .map_err(usage)
}

fn sidecar(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".template.json");
    PathBuf::from(s)
}

fn load_pnet(ckpt: &Path, template: Option<&str>) -> CliResult<(NetworkTemplate, PruningNet)> {
    let t = match template {
        Some(arg) => load_template(arg)?,
        None => load_template(&sidecar(ckpt).to_string_lossy())?,
    };
    let pnet = PruningNet::load(&t, ckpt)
        .with_context(|| format!("checkpoint {}", ckpt.display()))
        .map_err(usage)?;
    Ok((t, pnet))
}

/// Training and test sets.
fn load_data(config: &Config, arg: &str) -> CliResult<(Dataset, Dataset)> {
    if arg == "synth" {
        let spec = &config.data.synth;
        let train = synth_blobs(spec)?;
        let test = synth_blobs_draw(
            &BlobSpec {
                per_class: config.data.synth_test_per_class,
                ..spec.clone()
            },
            1,
        )?;
        return Ok((train, test));
    }
    load_cifar_dir(Path::new(arg), &config.data.normalization)
        .with_context(|| format!("loading CIFAR-10 from {arg}"))
        .map_err(usage)
}

/// Fits the template's input geometry and class count to the data.
fn fit_template(t: NetworkTemplate, data: &Dataset) -> CliResult<NetworkTemplate> {
    if t.input == data.shape() && t.classes == data.classes() {
        return Ok(t);
    }
    eprintln!(
        "adapting template `{}` to inputs {:?} and {} classes",
        t.name,
        data.shape(),
        data.classes()
    );
    Ok(t.adapted(data.shape(), data.classes())?)
}

/// `(sub_train, sub_val, test)`.
fn load_split(config: &Config, data: &str, template: &NetworkTemplate) -> CliResult<(Dataset, Dataset, Dataset)> {
    let (train, test) = load_data(config, data)?;
    if train.shape() != template.input || train.classes() != template.classes {
        return Err(usage(anyhow!(
            "data has shape {:?} with {} classes but the template expects {:?} with {}",
            train.shape(),
            train.classes(),
            template.input,
            template.classes
        )));
    }
    let (sub_train, subval) = split_holdout(&train, config.eval.holdout_per_class, config.eval.split_seed)?;
    Ok((sub_train, subval, test))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train_meta_cmd(
    config: &Config,
    template: &str,
    data: &str,
    epochs: Option<usize>,
    seed: u64,
    mode: ModeArg,
    out: &Path,
) -> CliResult<()> {
    let (train, _) = load_data(config, data)?;
    let t = fit_template(load_template(template)?, &train)?;
    let (sub_train, _, _) = load_split(config, data, &t)?;
    let mut schedule = config.meta_train();
    if let Some(e) = epochs {
        schedule.epochs = e;
    }
    let mode = match mode {
        ModeArg::Predict => Mode::Predict,
        ModeArg::Direct => Mode::Direct,
    };
    let mut pnet = PruningNet::new(&t, mode, seed)?;
    let log = train_meta(&mut pnet, &sub_train, &schedule, seed)?;
    pnet.save(out)?;
    write(&sidecar(out), &t.to_json())?;
    write(&with_suffix(out, ".metrics.csv"), &metrics_csv(&log)?)?;
    if let Some(last) = log.last() {
        eprintln!("epoch {}: mean loss {:.4}", last.epoch, last.mean_loss);
    }
    Ok(())
}

/// Accepts integers, decimals, `a^b` and `1e18`-style numbers.
fn parse_amount(s: &str) -> CliResult<f64> {
    let bad = || usage(anyhow!("`{s}` is not a number"));
    let v = match s.split_once('^') {
        Some((base, exp)) => {
            let base: f64 = base.parse().map_err(|_| bad())?;
            let exp: i32 = exp.parse().map_err(|_| bad())?;
            base.powi(exp)
        }
        None => s.parse().map_err(|_| bad())?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(bad())
    }
}

fn parse_constraint(arg: &str, template: &NetworkTemplate) -> CliResult<Constraint> {
    if let Some(n) = arg.strip_prefix("flops:") {
        return Ok(Constraint::flops(parse_amount(n)?)?);
    }
    if let Some(rest) = arg.strip_prefix("latency:") {
        let (file, us) = rest
            .rsplit_once(':')
            .ok_or_else(|| usage(anyhow!("expected latency:<file>:<microseconds>, got `{arg}`")))?;
        let table = LatencyTable::load(Path::new(file))
            .with_context(|| format!("latency table {file}"))
            .map_err(usage)?;
        table.check_covers(template)?;
        return Ok(Constraint::latency(parse_amount(us)?, table)?);
    }
    Err(usage(anyhow!(
        "constraint must be flops:<N> or latency:<file>:<microseconds>, got `{arg}`"
    )))
}

fn search_cmd(
    config: &Config,
    ckpt: &Path,
    constraint: &str,
    template: Option<&str>,
    data: &str,
    out: &Path,
) -> CliResult<()> {
    let (t, pnet) = load_pnet(ckpt, template)?;
    let constraint = parse_constraint(constraint, &t)?;
    let (sub_train, subval, _) = load_split(config, data, &t)?;
    let evaluator = Evaluator::new(&pnet, &sub_train, &subval, &config.eval);
    let result = search(&t, &constraint, |g: &Gene| evaluator.gene(g), &config.search)?;
    let best = result.best;
    if !constraint.satisfied_by(&t, &best.gene)? {
        return Err(anyhow!("best gene {} violates the budget", best.gene).into());
    }
    let table = match &constraint {
        Constraint::Latency { table, .. } => Some(latency(&t, &best.gene, table)?),
        Constraint::Flops { .. } => None,
    };
    let results = Results {
        template: t.name.clone(),
        gene: best.gene.clone(),
        flops: flops(&t, &best.gene)?,
        latency_us: table,
        constraint: Some(describe(&constraint)),
        subval_accuracy: Some(best.fitness),
        test_accuracy: None,
    };
    results.save(out)?;
    write(&with_suffix(out, ".history.csv"), &history_csv(&result.history)?)?;
    println!("{}", best.gene);
    eprintln!(
        "accuracy {:.4}, cost {} (budget {}), {} genes evaluated",
        best.fitness,
        best.cost,
        constraint.budget(),
        result.evaluated.len()
    );
    Ok(())
}

fn describe(c: &Constraint) -> String {
    match c {
        Constraint::Flops { budget } => format!("flops<{budget}"),
        Constraint::Latency { budget_us, .. } => format!("latency<{budget_us}us"),
    }
}

/// Widths for `full`, `uniform:<ratio>` or an explicit grid gene.
fn parse_widths(t: &NetworkTemplate, arg: &str) -> CliResult<Vec<usize>> {
    if let Some(r) = arg.strip_prefix("uniform:") {
        let r = parse_amount(r)?;
        if !(r > 0.0 && r <= 1.0) {
            return Err(usage(anyhow!("uniform ratio must lie in (0, 1], got {r}")));
        }
        return Ok(t.uniform_widths(r).0);
    }
    let g = parse_gene(t, arg)?;
    t.validate_gene(&g)?;
    Ok(g.0)
}

#[allow(clippy::too_many_arguments)]
fn train_final_cmd(
    config: &Config,
    template: Option<&str>,
    gene: Option<&str>,
    results: Option<&Path>,
    data: &str,
    epochs: Option<usize>,
    seed: u64,
    out: Option<&Path>,
) -> CliResult<()> {
    let (train, test) = load_data(config, data)?;
    let mut previous = match results {
        Some(p) => Some(Results::load(p).map_err(|e| usage(e.into()))?),
        None => None,
    };
    let template = match (template, &previous) {
        (Some(t), _) => t,
        (None, Some(r)) => r.template.as_str(),
        (None, None) => return Err(usage(anyhow!("--template is required without --results"))),
    };
    let t = fit_template(load_template(template)?, &train)?;
    let widths = match (gene, &previous) {
        (Some(g), _) => parse_widths(&t, g)?,
        (None, Some(r)) => {
            t.validate_gene(&r.gene)?;
            r.gene.0.clone()
        }
        (None, None) => return Err(usage(anyhow!("either --gene or --results is required"))),
    };
    let mut schedule = config.train.clone();
    if let Some(e) = epochs {
        schedule.epochs = e;
    }
    let done = train_from_scratch(&t, &widths, &train, &test, &schedule, seed)?;
    if let Some(p) = out {
        done.network.save(p)?;
        write(&with_suffix(p, ".metrics.csv"), &metrics_csv(&done.log)?)?;
    }
    if let (Some(r), Some(p)) = (previous.as_mut(), results) {
        r.test_accuracy = Some(done.test_accuracy);
        r.save(p)?;
    }
    println!("{}", done.test_accuracy);
    eprintln!(
        "widths {}, {} multiply-adds",
        Gene(widths.clone()),
        flops_of_widths(&t, &widths)?
    );
    Ok(())
}
