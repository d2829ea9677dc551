use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crl_core::env::EnvKind;
use crl_core::harness::{
    cmd_ablate_m, cmd_dump_concepts, cmd_eval, cmd_gradcheck, cmd_resume, cmd_solve, cmd_train, checkpoint,
    with_split, AgentKind, RunConfig, SUMMARY_FILE,
};
use crl_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "crl",
    version,
    about = "Concept-based language-conditioned RL on grid-world text games",
    after_help = RunConfig::help_text()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources, applied in order: defaults, `--config`, `CRL_*`
/// variables, `--set` pairs, then the dedicated flags.
#[derive(Args, Clone, Debug, Default)]
struct ConfigArgs {
    /// key=value config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Disable both MI terms (alpha1 = alpha2 = 0).
    #[arg(long)]
    no_mi: bool,
    #[arg(long, value_name = "F")]
    alpha1: Option<f64>,
    #[arg(long, value_name = "F")]
    alpha2: Option<f64>,
    /// Number of concepts per entity.
    #[arg(long, value_name = "M")]
    concepts: Option<usize>,
    #[arg(long, value_parser = ["rtfm", "messenger"])]
    env: Option<String>,
    /// rtfm variant: base, dyna, groups or dyna_groups.
    #[arg(long)]
    variant: Option<String>,
    /// messenger stage: S1, S2 or S3.
    #[arg(long)]
    stage: Option<String>,
    /// messenger role split.
    #[arg(long, value_parser = ["train", "test"])]
    split: Option<String>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Environment step budget.
    #[arg(long, value_name = "N")]
    steps: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let mut c = base;
        if let Some(p) = &self.config {
            c.apply_text(&std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?)?;
        }
        c.apply_env(std::env::vars())?;
        let mut pairs = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut flag = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        flag("env.name", self.env.clone());
        flag("env.variant", self.variant.clone());
        flag("env.stage", self.stage.clone());
        flag("env.split", self.split.clone());
        flag("train.seed", self.seed.map(|s| s.to_string()));
        flag("train.total_steps", self.steps.map(|s| s.to_string()));
        flag("encoder.m", self.concepts.map(|m| m.to_string()));
        flag("mi.alpha1", self.alpha1.map(|a| a.to_string()));
        flag("mi.alpha2", self.alpha2.map(|a| a.to_string()));
        flag("run.out", self.out.as_ref().map(|p| p.display().to_string()));
        if self.no_mi {
            if self.alpha1.is_some() || self.alpha2.is_some() {
                return Err(Error::Usage("--no-mi conflicts with --alpha1/--alpha2".into()));
            }
            flag("mi.alpha1", Some("0".into()));
            flag("mi.alpha2", Some("0".into()));
        }
        c.apply_pairs(&pairs)?;
        if self.split.is_some() && c.env == EnvKind::Rtfm {
            with_split(&c, Some(crl_core::env::Split::Train))?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent; writes config, metrics, checkpoints and a summary.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Initialise encoder and policy from a checkpoint (transfer).
        #[arg(long, value_name = "CHECKPOINT")]
        init: Option<PathBuf>,
        /// Continue a saved run exactly; other config flags are ignored
        /// except --steps.
        #[arg(long, value_name = "CHECKPOINT", conflicts_with = "init")]
        resume: Option<PathBuf>,
    },
    /// Win rate with a 95% interval over fixed evaluation seeds.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Trained model; its config is the base for the flags.
        #[arg(long, value_name = "CHECKPOINT")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "greedy", value_parser = ["greedy", "sample", "oracle", "random"])]
        agent: String,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
    },
    /// Export evaluation-mode concept vectors as CSV.
    DumpConcepts {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Output file (default: OUT/concepts.csv).
        #[arg(long, value_name = "PATH")]
        file: Option<PathBuf>,
    },
    /// Train once per concept count and tabulate final win rates.
    AblateM {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long = "m", value_delimiter = ',', default_values_t = [1, 2, 3])]
        m_list: Vec<usize>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Append a deliberately wrong derivative, which must fail.
        #[arg(long)]
        negative_control: bool,
    },
    /// Run the search oracle on one seeded episode.
    Solve {
        #[command(flatten)]
        config: ConfigArgs,
        /// Episode seed (distinct from the training seed).
        #[arg(long, value_name = "N", default_value_t = 0)]
        episode: u64,
    },
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<checkpoint::Checkpoint> {
    checkpoint::load(path)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, init, resume } => {
            if let Some(path) = resume {
                let ck = load_checkpoint(&path)?;
                let until = config.steps.unwrap_or(ck.config.train.total_steps);
                let trainer = cmd_resume(&path, until)?;
                let out = ck.config.out.join(format!("step_{}.ckpt", trainer.state.steps));
                checkpoint::save(&out, &ck.config, &trainer)?;
                println!("resumed to step {}; saved {}", trainer.state.steps, out.display());
            } else {
                let c = config.resolve(RunConfig::default())?;
                let summary = cmd_train(&c, init.as_deref())?;
                print_json(&summary)?;
                eprintln!("wrote {}", c.out.join(SUMMARY_FILE).display());
            }
        }
        Command::Eval {
            config,
            checkpoint,
            agent,
            episodes,
        } => {
            let ck = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let base = ck.as_ref().map(|c| c.config.clone()).unwrap_or_default();
            let c = config.resolve(base)?;
            let model = ck.as_ref().map(|c| c.model()).transpose()?;
            let agent: AgentKind = agent.parse()?;
            let outcome = cmd_eval(
                model.as_ref(),
                &c.env_config(),
                agent,
                episodes,
                c.eval_seed_offset,
                c.train.seed,
            )?;
            println!("{outcome}");
        }
        Command::DumpConcepts {
            config,
            checkpoint,
            count,
            file,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let c = config.resolve(ck.config.clone())?;
            let file = file.unwrap_or_else(|| c.out.join("concepts.csv"));
            let rows = cmd_dump_concepts(&ck.model()?, &c.env_config(), count, c.eval_seed_offset, &file)?;
            println!("wrote {rows} rows to {}", file.display());
        }
        Command::AblateM { config, m_list } => {
            let c = config.resolve(RunConfig::default())?;
            for row in cmd_ablate_m(&c, &m_list)? {
                print_json(&row)?;
            }
        }
        Command::Gradcheck { seed, negative_control } => {
            let reports = cmd_gradcheck(seed, negative_control);
            for r in &reports {
                println!("{r}");
            }
            let failed = reports.iter().filter(|r| !r.passed).count();
            println!("{} checks, {failed} failed", reports.len());
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Solve { config, episode } => {
            let c = config.resolve(RunConfig::default())?;
            let s = cmd_solve(&c.env_config(), episode)?;
            print!("{}", s.replay);
            match &s.plan {
                Some(plan) => {
                    let words: Vec<String> = plan.iter().map(|a| format!("{a:?}")).collect();
                    println!("plan ({} steps): {}", plan.len(), words.join(" "));
                    println!("replayed reward: {}", s.reward);
                }
                None => println!("no plan found"),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
