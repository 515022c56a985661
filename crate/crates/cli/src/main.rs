use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hptp_core::compiler::{build_tree_plan, compile, verify_tree_plan};
use hptp_core::harness::{self, Experiment, ExperimentConfig, RunOutput, THREADS_ENV};
use hptp_core::io::{read_json, write_json, MapFile, OperatorFile};
use hptp_core::noise::{invert_channel, NoiseKind, NoiseSpec};
use hptp_core::sampler::OutcomeTable;

/// Compile HPTP maps into one CPTP map plus post-processing weights, and run
/// the mitigation experiments.
#[derive(Parser)]
#[command(name = "hptpc", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a map file into a CPTP map with weights.
    Compile {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also synthesize and embed the binary-tree plan.
        #[arg(long)]
        tree: bool,
    },
    /// Write the HPTP inverse of a noise channel.
    Invert {
        #[arg(long)]
        kind: NoiseKind,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate Tr[N(ρ) O] by shot sampling of compiled maps.
    Simulate {
        /// Compiled maps, applied in the order given.
        #[arg(long, required = true, num_args = 1..)]
        compiled: Vec<PathBuf>,
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        shots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Qubit mitigation variance grid.
    Fig2(RunArgs),
    /// Photon-loss dimension sweep.
    Fig3(RunArgs),
    /// Property suites; exits nonzero on failure.
    Verify {
        #[command(flatten)]
        run: RunArgs,
        /// Flip one Kraus sign before compiling.
        #[arg(long)]
        poison: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON file mirroring the experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: results/<experiment>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, conflicts_with = "quick")]
    full: bool,
    #[arg(long)]
    quick: bool,
    /// Pair state k with observable k instead of crossing them.
    #[arg(long)]
    paired: bool,
}

impl RunArgs {
    fn config(&self, experiment: Experiment) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let cfg: ExperimentConfig = read_json(path).with_context(|| format!("reading {}", path.display()))?;
                if cfg.experiment != experiment {
                    bail!("config is for {}, not {}", cfg.experiment.name(), experiment.name());
                }
                cfg
            }
            None => ExperimentConfig::for_experiment(experiment),
        };
        if self.quick {
            cfg = cfg.quick();
        }
        if self.full {
            cfg = cfg.full();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.paired {
            cfg.paired = true;
        }
        if let Some(out) = &self.out {
            cfg.output = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run_experiment(cfg: ExperimentConfig, threads: Option<usize>) -> Result<ExitCode> {
    let dir = cfg
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("results").join(cfg.experiment.name()));
    let (output, manifest) = harness::run_to_dir(&cfg, &dir, threads)?;
    match &output {
        RunOutput::Table(t) => {
            println!(
                "{:<18} {:>5} {:>3} {:>8} {:>12} {:>12} {:>8} {:>12} {:>12} {:>4} {:>4} {:>9}",
                "kind",
                "delta",
                "d",
                "gamma",
                "var1_emp",
                "var1_pred",
                "in_band",
                "var1_haar",
                "haar_mc",
                "r",
                "r_c",
                "baseline"
            );
            for r in &t.rows {
                println!(
                    "{:<18} {:>5.2} {:>3} {:>8.4} {:>12.6} {:>12.6} {:>8} {:>12.6} {:>12} {:>4} {:>4} {:>9}",
                    r.kind,
                    r.delta,
                    r.dim,
                    r.gamma,
                    r.var_single_empirical,
                    r.var_single_predicted,
                    r.in_band,
                    r.var_single_haar,
                    r.var_single_haar_mc
                        .map(|v| format!("{v:.6}"))
                        .unwrap_or_else(|| "-".into()),
                    r.source_rank,
                    r.compiled_rank,
                    format!("{}+{}", r.baseline_rank_pos, r.baseline_rank_neg)
                );
            }
        }
        RunOutput::Verify(report) => {
            for c in &report.checks {
                println!(
                    "[{}] {:<55} measured {:.3e} (tol {:.1e}) {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.measured,
                    c.tolerance,
                    c.detail
                );
            }
        }
    }
    println!(
        "{} rows written to {} ({} workers, {:.1} s)",
        cfg.experiment.name(),
        dir.display(),
        manifest.workers,
        manifest.elapsed_seconds
    );
    if cfg.experiment == Experiment::Verify && !output.passed() {
        eprintln!("verification failed");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Compile { input, out, tree } => {
            let file: MapFile = read_json(&input).with_context(|| format!("reading {}", input.display()))?;
            let map = file.to_signed_kraus().context("invalid map")?;
            let c = compile(&map)?;
            let plan = if tree {
                let plan = build_tree_plan(&c)?;
                let report = verify_tree_plan(&plan, &c);
                if !report.passed() {
                    bail!("tree plan failed verification: {report:?}");
                }
                Some(plan)
            } else {
                None
            };
            write_json(&out, &MapFile::from_compiled(&c, plan.as_ref()))?;
            println!(
                "gamma {:.6}, source rank {}, compiled rank {}{}",
                c.gamma(),
                c.source_rank(),
                c.branch_count(),
                plan.map(|p| format!(", tree depth {}", p.depth)).unwrap_or_default()
            );
        }
        Command::Invert { kind, dim, delta, out } => {
            let spec = NoiseSpec::for_dim(kind, dim, delta)?;
            let inv = invert_channel(&spec)?;
            write_json(&out, &MapFile::from_kraus(&inv))?;
            println!("{kind} d={dim} delta={delta}: inverse rank {}", inv.rank());
        }
        Command::Simulate {
            compiled,
            state,
            obs,
            shots,
            seed,
            out,
        } => {
            let maps = compiled
                .iter()
                .map(|p| {
                    read_json::<MapFile>(p)
                        .map_err(anyhow::Error::from)
                        .and_then(|f| Ok(f.to_compiled()?))
                        .with_context(|| format!("loading compiled map {}", p.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            let rho = read_json::<OperatorFile>(&state)?.to_state().context("invalid state")?;
            let o = read_json::<OperatorFile>(&obs)?
                .to_observable()
                .context("invalid observable")?;
            let table = OutcomeTable::new(&maps, &rho, &o)?;
            let result = harness::with_threads(cli.threads, || table.estimate(shots, seed))?;
            let value = json!({
                "mean": result.mean,
                "empirical_variance_of_mean": result.empirical_variance_of_mean,
                "predicted_variance_of_mean": table.exact_variance() / shots as f64,
                "exact_mean": table.exact_mean(),
                "shots": result.shots,
                "seed": result.seed,
            });
            match out {
                Some(path) => write_json(&path, &value)?,
                None => println!("{}", serde_json::to_string_pretty(&value)?),
            }
        }
        Command::Fig2(args) => return run_experiment(args.config(Experiment::Fig2)?, cli.threads),
        Command::Fig3(args) => return run_experiment(args.config(Experiment::Fig3)?, cli.threads),
        Command::Verify { run, poison } => {
            let mut cfg = run.config(Experiment::Verify)?;
            cfg.poison |= poison;
            return run_experiment(cfg, cli.threads);
        }
    }
    Ok(ExitCode::SUCCESS)
}
