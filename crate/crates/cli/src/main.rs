mod plot;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use curriculum_core::bandit::UpdateRule;
use curriculum_core::env::EnvFamily;
use curriculum_core::orchestrator::{checkpoint, evaluate_target, run_experiment, ExperimentConfig};
use curriculum_core::regret::{scaling_study, LipschitzBandit};
use curriculum_core::teacher::TaskSpec;
use curriculum_core::Error;

#[derive(Parser)]
#[command(name = "curriculum", version, about = "Teacher-student curriculum runs and regret benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full teacher-student experiment from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides run.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides run.output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides run.rounds.
        #[arg(long)]
        rounds: Option<usize>,
        /// Overrides run.workers.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Evaluate a saved policy greedily on one task.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Population to evaluate on; defaults to the run's target.
        #[arg(long)]
        population: Option<usize>,
        #[arg(long)]
        family: Option<EnvFamily>,
        #[arg(long, default_value_t = 32)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Mesh-Exp3 regret scaling on a synthetic Lipschitz bandit.
    RegretBench {
        #[arg(long, default_value_t = 4)]
        arms: usize,
        #[arg(long, default_value_t = 1.0)]
        lipschitz: f64,
        #[arg(long, value_delimiter = ',', default_values_t = [2500u64, 10000, 40000])]
        horizons: Vec<u64>,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, value_enum, default_value_t = RuleArg::PaperLiteral)]
        rule: RuleArg,
        #[arg(long, default_value_t = 42)]
        base_seed: u64,
        /// Directory for regret.csv and regret_summary.json.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Render task-distribution and coverage plots from a run directory.
    Plot {
        #[arg(long)]
        run: PathBuf,
        /// Write the plotted series as CSV instead of PNG.
        #[arg(long)]
        csv_only: bool,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum RuleArg {
    PaperLiteral,
    ImportanceWeighted,
}

impl From<RuleArg> for UpdateRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::PaperLiteral => UpdateRule::PaperLiteral,
            RuleArg::ImportanceWeighted => UpdateRule::ImportanceWeighted,
        }
    }
}

/// Failure classes: usage problems exit with 2, runtime failures with 1.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Checkpoint(_) | Error::Contract(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn error_line(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": kind, "message": message }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            error_line("usage", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            error_line("usage", &m);
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            error_line("runtime", &m);
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Train {
            config,
            seed,
            out,
            rounds,
            workers,
        } => train(&config, seed, out, rounds, workers),
        Command::Eval {
            checkpoint,
            population,
            family,
            episodes,
            seed,
        } => eval(&checkpoint, population, family, episodes, seed),
        Command::RegretBench {
            arms,
            lipschitz,
            horizons,
            seeds,
            rule,
            base_seed,
            out,
        } => regret_bench(arms, lipschitz, &horizons, seeds, rule.into(), base_seed, &out),
        Command::Plot { run, csv_only } => plot::render(&run, csv_only),
    }
}

fn train(
    path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    rounds: Option<usize>,
    workers: Option<usize>,
) -> Result<(), Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("malformed config: {e}")))?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    if let Some(o) = out {
        cfg.run.output_dir = Some(o);
    }
    if let Some(r) = rounds {
        cfg.run.rounds = r;
    }
    if let Some(w) = workers {
        cfg.run.workers = w;
    }
    cfg.validate()?;
    let stdout = std::io::stdout();
    let (_, summary) = run_experiment(cfg, |r| {
        let mut lock = stdout.lock();
        let _ = writeln!(
            lock,
            "round {} task {} coverage {:.3} return {:.3}",
            r.round, r.task_id, r.target_coverage, r.target_return
        );
    })?;
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

fn eval(
    dir: &Path,
    population: Option<usize>,
    family: Option<EnvFamily>,
    episodes: usize,
    seed: u64,
) -> Result<(), Failure> {
    let restored = checkpoint::load(dir)?;
    let cfg = &restored.manifest.config;
    let mut task: TaskSpec = cfg.target_task();
    if let Some(n) = population {
        task.population = n;
    }
    if let Some(f) = family {
        task.env_family = f;
    }
    let mut env_cfg = cfg.env.clone();
    if !env_cfg.populations.contains(&task.population) {
        env_cfg.populations.push(task.population);
    }
    let r = evaluate_target(&restored.policy, &env_cfg, &task, episodes, cfg.trainer.gamma, seed)?;
    println!(
        "{}",
        json!({
            "env_family": task.env_family.to_string(),
            "population": task.population,
            "episodes": episodes,
            "mean_return": r.mean_return,
            "mean_coverage": r.mean_coverage,
        })
    );
    Ok(())
}

fn regret_bench(
    arms: usize,
    lipschitz: f64,
    horizons: &[u64],
    seeds: u64,
    rule: UpdateRule,
    base_seed: u64,
    out: &Path,
) -> Result<(), Failure> {
    let instance = LipschitzBandit::evenly_spaced(arms, lipschitz)?;
    let study = scaling_study(&instance, horizons, seeds, rule, base_seed)?;
    fs::create_dir_all(out)?;
    let mut csv = String::from("horizon,seed,R_S,DE,R,epsilon\n");
    for r in &study.runs {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.horizon, r.seed, r.summary.r_s, r.summary.de, r.summary.r, r.epsilon
        ));
    }
    fs::write(out.join("regret.csv"), csv)?;
    let rows: Vec<_> = study
        .rows
        .iter()
        .map(|r| json!({"horizon": r.horizon, "epsilon": r.epsilon, "mean_regret": r.mean_regret, "sd_regret": r.sd_regret}))
        .collect();
    let summary = json!({
        "arms": arms,
        "lipschitz": lipschitz,
        "seeds": seeds,
        "rule": rule,
        "slope": study.slope,
        "ratios": study.ratios(),
        "rows": rows,
    });
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(out.join("regret_summary.json"), &text)?;
    println!("{text}");
    Ok(())
}
