use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fedsup::checkpoint;
use fedsup::experiment::{self, ExperimentConfig};
use fedsup::{ArchSpace, Error, Preset, SubnetSpec};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "fedsup", version, about = "Federated supernet training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output` or runs/<hash>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for client-parallel work.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceArg {
    Default,
    Compact,
}

#[derive(Args)]
struct SpaceArgs {
    #[arg(long, value_enum, default_value_t = SpaceArg::Default)]
    space: SpaceArg,
    #[arg(long, default_value_t = 100)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
}

impl SpaceArgs {
    fn build(&self) -> ArchSpace {
        match self.space {
            SpaceArg::Default => {
                let mut s = ArchSpace::with_classes(self.classes);
                s.input_resolution = self.resolution;
                s
            }
            SpaceArg::Compact => ArchSpace::compact(self.classes, self.resolution),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Partition the configured dataset and write per-client statistics.
    Partition(RunArgs),
    /// Train, evaluate and write manifest, round log, checkpoint and reports.
    Train(RunArgs),
    /// Evaluate B, M and S of a checkpoint (initial and personalized).
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sample children of a checkpoint and write the FLOPS/accuracy table.
    Pareto {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of sampled children; defaults to eval.pareto_samples.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Print MAC and parameter counts of a child.
    Flops {
        /// biggest, medium, smallest (or B/M/S), or a path to a spec JSON file.
        #[arg(long, default_value = "biggest")]
        spec: String,
        #[command(flatten)]
        space: SpaceArgs,
    },
    /// Print the number of distinct children in the search space.
    Count {
        #[command(flatten)]
        space: SpaceArgs,
    },
}

fn grouped(n: impl ToString) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(args: &RunArgs, cfg: &ExperimentConfig) -> Result<PathBuf> {
    if let Some(o) = args.out.clone().or_else(|| cfg.output.clone()) {
        return Ok(o);
    }
    let hash = experiment::config_hash(cfg)?;
    Ok(Path::new("runs").join(&hash[..12]))
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build()?;
    pool.install(f)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn resolve_spec(arg: &str, space: &ArchSpace) -> Result<SubnetSpec> {
    if let Ok(p) = arg.parse::<Preset>() {
        return Ok(space.preset(p));
    }
    let text = fs::read_to_string(arg).with_context(|| format!("spec {arg:?} is neither a preset nor a readable file"))?;
    let spec: SubnetSpec = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{arg}: {e}")))?;
    space.validate_spec(&spec)?;
    Ok(spec)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Partition(args) => {
            let cfg = load_config(&args)?;
            let out = out_dir(&args, &cfg)?;
            let prepared = with_pool(args.threads, || Ok(experiment::prepare(&cfg)?))?;
            let summary = experiment::partition_summary(&prepared);
            let path = out.join("partition.json");
            write_json(&path, &summary)?;
            println!("{} clients, {} train / {} test examples -> {}", summary.len(), prepared.data.train.len(), prepared.data.test.len(), path.display());
        }
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            let out = out_dir(&args, &cfg)?;
            let run = experiment::run_experiment(&cfg, &out, args.threads)?;
            for (name, acc) in &run.eval.children {
                println!(
                    "{name}: initial {:.4} ± {:.4}, personalized {:.4} ± {:.4}",
                    acc.initial.acc, acc.initial.std, acc.personalized.acc, acc.personalized.std
                );
            }
            println!("checkpoint sha256 {}", run.manifest.checkpoint_sha256);
            println!("wrote {}", out.display());
        }
        Command::Eval { run, checkpoint: ck } => {
            let cfg = load_config(&run)?;
            let net = checkpoint::read(&ck)?;
            let eval = with_pool(run.threads, || {
                let prepared = experiment::prepare(&cfg)?;
                if prepared.space != net.space {
                    bail!("checkpoint was trained on a different search space");
                }
                Ok(experiment::final_eval(&cfg, &net, &prepared.data)?)
            })?;
            let text = serde_json::to_string_pretty(&eval)?;
            if let Some(out) = run.out.as_ref() {
                write_json(&out.join("eval.json"), &eval)?;
            }
            println!("{text}");
        }
        Command::Pareto { run, checkpoint: ck, samples } => {
            let cfg = load_config(&run)?;
            let k = samples.unwrap_or(cfg.eval.pareto_samples);
            if k == 0 {
                return Err(Error::Config("pareto needs --samples or eval.pareto_samples > 0".into()).into());
            }
            let net = checkpoint::read(&ck)?;
            let rows = with_pool(run.threads, || {
                let prepared = experiment::prepare(&cfg)?;
                if prepared.space != net.space {
                    bail!("checkpoint was trained on a different search space");
                }
                Ok(experiment::sweep(&cfg, &net, &prepared.data, k)?)
            })?;
            match run.out.as_ref() {
                Some(out) => {
                    fs::create_dir_all(out)?;
                    fedsup::eval::save_pareto_csv(&out.join("pareto.csv"), &rows)?;
                    println!("{} rows -> {}", rows.len(), out.join("pareto.csv").display());
                }
                None => fedsup::eval::write_pareto_csv(std::io::stdout().lock(), &rows)?,
            }
        }
        Command::Flops { spec, space } => {
            let space = space.build();
            space.validate()?;
            let s = resolve_spec(&spec, &space)?;
            println!("spec   {}", s);
            println!("flops  {} MACs", grouped(space.flops(&s)?));
            println!("params {}", grouped(space.param_count(&s)?));
        }
        Command::Count { space } => {
            let space = space.build();
            space.validate()?;
            println!("{}", grouped(space.count_subnets()));
        }
    }
    Ok(())
}

/// Malformed or inconsistent configuration counts as a usage error.
fn is_usage_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        matches!(
            e.downcast_ref::<Error>(),
            Some(Error::Config(_) | Error::Json(_) | Error::InvalidSpec(_))
        )
    })
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
