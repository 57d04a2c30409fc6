use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sqlevo_core::analyzer::{analyze, DEFAULT_TOKEN_BUDGET};
use sqlevo_core::orchestrator::{
    evaluate_package, leaderboard, Orchestrator, RunConfig, RunState, SimulationConfig, SyntheticAgent,
    SyntheticEvolution,
};
use sqlevo_core::scheduler::load_question_pool;
use sqlevo_core::toy::{toy_evolution_fixture, toy_generation_fixture, write_toy_dataset};

/// Evolve Text-to-SQL agent packages under an ELO tournament.
///
/// Chat backends read their bearer token from SQLEVO_API_KEY.
#[derive(Parser)]
#[command(name = "sqlevo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a run and execute all its iterations.
    Run(RunArgs),
    /// Continue a halted run, optionally raising its iteration count.
    Resume {
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long)]
        iterations: Option<u32>,
    },
    /// Score one agent package on the questions of some databases.
    Evaluate {
        /// Agent package directory.
        #[arg(long)]
        agent: PathBuf,
        #[arg(long)]
        data_root: PathBuf,
        /// Database id; repeat for several. All databases when omitted.
        #[arg(long = "db")]
        databases: Vec<String>,
        #[arg(long, default_value = "oracle")]
        gen_backend: String,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        /// Write the full evaluation as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print the size-adaptive analysis of one database.
    Analyze {
        database: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOKEN_BUDGET)]
        budget: usize,
    },
    /// Print the leaderboard of a run.
    Leaderboard {
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Run the rating loop with synthetic agents.
    Simulate(SimulateArgs),
    /// Write the bundled toy dataset and scripted backend fixtures.
    ToyData {
        dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML file with RunConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<PathBuf>,
    /// oracle, oracle:<noise>, scripted:<file> or chat:<model>@<base_url>
    #[arg(long)]
    gen_backend: Option<String>,
    /// none, scripted:<file> or chat:<model>@<base_url>
    #[arg(long)]
    evo_backend: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    deep_focus_k: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Agent as id=p for a uniform accuracy, or id=db1:p1,db2:p2,...
    #[arg(long = "agent", required = true)]
    agents: Vec<String>,
    #[arg(long, default_value_t = 200)]
    iterations: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of synthetic databases, named db1..dbN.
    #[arg(long, default_value_t = 6)]
    databases: usize,
    /// Disable synthetic evolution; evolve iterations then run as none.
    #[arg(long)]
    no_evolution: bool,
    #[arg(long, default_value_t = 0.02)]
    delta: f64,
    #[arg(long, default_value_t = 0.95)]
    cap: f64,
    /// Print the full result, trajectories included.
    #[arg(long)]
    full: bool,
}

impl RunArgs {
    fn into_config(self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_toml_file(path)?,
            None => {
                let data_root = self.data_root.clone().context("--data-root or --config is required")?;
                RunConfig::new(data_root, PathBuf::new(), self.iterations.unwrap_or(1))
            }
        };
        if let Some(v) = self.iterations {
            config.iterations = v;
        }
        if let Some(v) = self.seed {
            config.run_seed = v;
        }
        if let Some(v) = self.data_root {
            config.data_root = v;
        }
        if let Some(v) = self.output_dir {
            config.output_dir = v;
        }
        if let Some(v) = self.strategy {
            config.strategy = Some(v);
        }
        if let Some(v) = self.gen_backend {
            config.gen_backend = v;
        }
        if let Some(v) = self.evo_backend {
            config.evo_backend = v;
        }
        if let Some(v) = self.workers {
            config.workers = v;
        }
        if let Some(v) = self.deep_focus_k {
            config.deep_focus_k = v;
        }
        if config.output_dir.as_os_str().is_empty() {
            bail!("--output-dir is required");
        }
        Ok(config)
    }
}

fn parse_agent(spec: &str) -> Result<SyntheticAgent> {
    let (id, rest) = spec.split_once('=').with_context(|| format!("agent '{spec}' is not id=..."))?;
    if !rest.contains(':') {
        let p: f64 = rest.parse().with_context(|| format!("bad probability in '{spec}'"))?;
        return Ok(SyntheticAgent::uniform(id, p));
    }
    let mut pairs = Vec::new();
    for part in rest.split(',') {
        let (db, p) = part.split_once(':').with_context(|| format!("bad entry '{part}'"))?;
        let p: f64 = p.parse().with_context(|| format!("bad probability in '{part}'"))?;
        pairs.push((db, p));
    }
    Ok(SyntheticAgent::per_database(id, &pairs))
}

fn print_summary(state: &RunState, out: &Path) -> Result<()> {
    for it in &state.iterations {
        let accs: Vec<String> = it.accuracies.iter().map(|(id, a)| format!("{id} {a}")).collect();
        println!("iteration {} [{}]: {}", it.iteration, it.mode.as_str(), accs.join("; "));
    }
    println!("\n{}", leaderboard(state)?);
    println!("artifacts in {}", out.display());
    Ok(())
}

fn simulate_cmd(args: SimulateArgs) -> Result<()> {
    let population = args.agents.iter().map(|s| parse_agent(s)).collect::<Result<Vec<_>>>()?;
    let mut config = SimulationConfig::new(args.iterations, args.seed, args.databases);
    config.evolution = if args.no_evolution {
        SyntheticEvolution::Off
    } else {
        SyntheticEvolution::MaxParentPlusDelta {
            delta: args.delta,
            cap: args.cap,
        }
    };
    let result = sqlevo_core::orchestrator::simulate(&config, &population)?;
    if args.full {
        println!("{}", serde_json::to_string_pretty(&result)?);
    } else {
        for id in result.rating_order() {
            println!("{id:<24} {:>9.2}", result.final_ratings[&id]);
        }
        println!("kendall tau: {:.3}", result.kendall_tau);
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let config = args.into_config()?;
            let out = config.output_dir.clone();
            let mut orchestrator = Orchestrator::start(config)?;
            orchestrator.run()?;
            print_summary(orchestrator.state(), &out)?;
        }
        Command::Resume { output_dir, iterations } => {
            let mut orchestrator = Orchestrator::open(&output_dir, iterations)?;
            orchestrator.run()?;
            print_summary(orchestrator.state(), &output_dir)?;
        }
        Command::Evaluate {
            agent,
            data_root,
            databases,
            gen_backend,
            workers,
            json,
        } => {
            let eval = evaluate_package(&agent, &data_root, &databases, &gen_backend, workers)?;
            println!("{}: {}", eval.agent_id, eval.accuracy);
            for o in eval.outcomes.iter().filter(|o| !o.matched) {
                println!("  {} {}", o.key, o.failure_kind.as_str());
            }
            if let Some(path) = json {
                std::fs::write(&path, serde_json::to_string_pretty(&eval)? + "\n")
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Analyze { database, budget } => {
            let analysis = analyze(&database, budget)?;
            print!("{}", analysis.text);
        }
        Command::Leaderboard { output_dir } => {
            print!("{}", leaderboard(&RunState::load(&output_dir)?)?);
        }
        Command::Simulate(args) => simulate_cmd(args)?,
        Command::ToyData { dir } => {
            write_toy_dataset(&dir)?;
            let pool = load_question_pool(&dir)?;
            let gen = dir.join("generation_fixture.json");
            std::fs::write(&gen, serde_json::to_string_pretty(&toy_generation_fixture(&pool))? + "\n")?;
            let evo = dir.join("evolution_fixture.json");
            std::fs::write(&evo, serde_json::to_string_pretty(&toy_evolution_fixture())? + "\n")?;
            println!(
                "wrote {} questions over {} databases to {}",
                pool.question_count(),
                pool.databases.len(),
                dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("SQLEVO_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
