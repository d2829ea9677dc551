use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{self, Checkpoint};
use super::config::RunConfig;
use super::gradcheck;
use super::metrics::{read_metrics, wilson_interval, MetricsWriter};
use crate::agent::{eval_seeds, evaluate, evaluate_with, oracle_agent, random_agent, ActMode, EvalReport, Model, Trainer};
use crate::diffcore::gradcheck::CheckReport;
use crate::diffcore::Rng;
use crate::encoder::EpisodeInput;
use crate::env::{EnvConfig, EnvKind, Split};
use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.txt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Normal quantile for 95% intervals.
const Z95: f64 = 1.959_963_984_540_054;

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// The config with the Messenger split replaced; rejects a split for the
/// i.i.d. rtfm env.
pub fn with_split(config: &RunConfig, split: Option<Split>) -> Result<EnvConfig> {
    match (config.env, split) {
        (EnvKind::Rtfm, Some(_)) => Err(Error::Usage(
            "--split is only defined for messenger; rtfm episodes are i.i.d.".into(),
        )),
        (_, None) => Ok(config.env_config()),
        (EnvKind::Messenger, Some(s)) => {
            let mut m = config.messenger.clone();
            m.split = s;
            Ok(EnvConfig::Messenger(m))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub updates: u64,
    pub final_win_rate: f64,
    /// Messenger only: win rate on the held-out role assignments.
    pub test_win_rate: Option<f64>,
    pub eval_episodes: usize,
}

/// Greedy win rate of the trainer's model on the config's eval seeds.
pub fn evaluate_trainer(config: &RunConfig, trainer: &Trainer, env: &EnvConfig, episodes: usize) -> Result<EvalReport> {
    evaluate(
        &trainer.model,
        env,
        &eval_seeds(config.eval_seed_offset, episodes),
        ActMode::Greedy,
        &mut Rng::new(0),
    )
}

/// Trains until `until` environment steps, logging every update and
/// checkpointing on cadence.
pub fn run_training(config: &RunConfig, trainer: &mut Trainer, metrics: &mut MetricsWriter, until: u64) -> Result<()> {
    let eval_env = config.env_config();
    while trainer.state.steps < until {
        let before = trainer.state.steps;
        let mut record = trainer.train_step()?;
        let after = trainer.state.steps;
        let crossed = |every: u64| every > 0 && before / every != after / every;
        if crossed(config.train.eval_every) {
            record.win_rate = Some(evaluate_trainer(config, trainer, &eval_env, config.train.eval_episodes)?.win_rate);
        }
        metrics.write(&record)?;
        if crossed(config.checkpoint_every) {
            checkpoint::save(&config.out.join(format!("step_{after}.ckpt")), config, trainer)?;
        }
    }
    Ok(())
}

fn new_trainer(config: &RunConfig) -> Result<Trainer> {
    Trainer::new(
        config.env_config(),
        config.encoder.clone(),
        config.train.clone(),
        config.mi.clone(),
    )
}

/// Full training run into `config.out`, optionally initialised from a
/// checkpoint trained on another variant.
pub fn cmd_train(config: &RunConfig, init: Option<&Path>) -> Result<TrainSummary> {
    config.validate()?;
    let mut trainer = new_trainer(config)?;
    if let Some(path) = init {
        checkpoint::load(path)?.transfer_into(&mut trainer)?;
    }
    create_dir(&config.out)?;
    write_file(&config.out.join(CONFIG_FILE), config.to_text())?;
    let metrics_path = config.out.join(METRICS_FILE);
    if metrics_path.exists() {
        fs::remove_file(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    }
    let mut metrics = MetricsWriter::append(&metrics_path)?;
    run_training(config, &mut trainer, &mut metrics, config.train.total_steps)?;
    checkpoint::save(&config.out.join(FINAL_CHECKPOINT), config, &trainer)?;

    let report = evaluate_trainer(config, &trainer, &config.env_config(), config.train.eval_episodes)?;
    let test_win_rate = match config.env {
        EnvKind::Messenger => Some(
            evaluate_trainer(
                config,
                &trainer,
                &with_split(config, Some(Split::Test))?,
                config.train.eval_episodes,
            )?
            .win_rate,
        ),
        EnvKind::Rtfm => None,
    };
    let summary = TrainSummary {
        steps: trainer.state.steps,
        updates: trainer.state.updates,
        final_win_rate: report.win_rate,
        test_win_rate,
        eval_episodes: report.episodes,
    };
    write_file(&config.out.join(SUMMARY_FILE), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

/// Continues a saved run until `until` steps, appending to its metrics.
pub fn cmd_resume(path: &Path, until: u64) -> Result<Trainer> {
    let ck = checkpoint::load(path)?;
    let mut trainer = ck.restore()?;
    create_dir(&ck.config.out)?;
    let mut metrics = MetricsWriter::append(&ck.config.out.join(METRICS_FILE))?;
    run_training(&ck.config, &mut trainer, &mut metrics, until)?;
    Ok(trainer)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentKind {
    /// Learned policy, argmax actions.
    Greedy,
    /// Learned policy, sampled actions.
    Sample,
    /// Search oracle.
    Oracle,
    /// Uniformly random actions.
    Random,
}

impl std::str::FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(AgentKind::Greedy),
            "sample" => Ok(AgentKind::Sample),
            "oracle" => Ok(AgentKind::Oracle),
            "random" => Ok(AgentKind::Random),
            _ => Err(Error::Usage(format!("unknown agent {s:?} (expected greedy|sample|oracle|random)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub env: String,
    pub split: Option<String>,
    pub agent: AgentKind,
    pub episodes: usize,
    pub wins: usize,
    pub win_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_return: f64,
}

impl std::fmt::Display for EvalOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "env={} split={} agent={:?} episodes={} wins={} win_rate={:.4} ci95=[{:.4}, {:.4}] mean_return={:.4}",
            self.env,
            self.split.as_deref().unwrap_or("-"),
            self.agent,
            self.episodes,
            self.wins,
            self.win_rate,
            self.ci_low,
            self.ci_high,
            self.mean_return
        )
    }
}

/// Win rate with a 95% Wilson interval over a fixed seed list.
pub fn cmd_eval(
    model: Option<&Model>,
    env: &EnvConfig,
    agent: AgentKind,
    episodes: usize,
    seed_offset: u64,
    seed: u64,
) -> Result<EvalOutcome> {
    let seeds = eval_seeds(seed_offset, episodes);
    let mut rng = Rng::new(seed);
    let need_model = || model.ok_or_else(|| Error::Usage(format!("agent {agent:?} needs a checkpoint")));
    let report = match agent {
        AgentKind::Greedy => evaluate(need_model()?, env, &seeds, ActMode::Greedy, &mut rng)?,
        AgentKind::Sample => evaluate(need_model()?, env, &seeds, ActMode::Sample, &mut rng)?,
        AgentKind::Oracle => evaluate_with(env, &seeds, oracle_agent())?,
        AgentKind::Random => evaluate_with(env, &seeds, random_agent(rng))?,
    };
    let (ci_low, ci_high) = wilson_interval(report.wins, report.episodes, Z95);
    Ok(EvalOutcome {
        env: env.kind().to_string(),
        split: match env {
            EnvConfig::Messenger(m) => Some(m.split.to_string()),
            EnvConfig::Rtfm(_) => None,
        },
        agent,
        episodes: report.episodes,
        wins: report.wins,
        win_rate: report.win_rate,
        ci_low,
        ci_high,
        mean_return: report.mean_return,
    })
}

impl Checkpoint {
    /// The saved encoder and policy, without optimizer or run state.
    pub fn model(&self) -> Result<Model> {
        let c = &self.config;
        let mut m = Model::new(&c.env_config(), c.encoder.clone(), &mut Rng::new(0))?;
        checkpoint::load_params(&mut m.store, &self.model)?;
        Ok(m)
    }
}

/// One CSV row per entity of `count` evaluation episodes: seed, slot,
/// name words, ground-truth label and the evaluation-mode concept vector.
pub fn cmd_dump_concepts(model: &Model, env: &EnvConfig, count: usize, seed_offset: u64, out: &Path) -> Result<usize> {
    if count == 0 {
        return Err(Error::Usage("dump-concepts needs at least one episode".into()));
    }
    let vocab = env.vocab();
    let width = model.concept_width();
    let mut csv = String::from("seed,entity,words,label");
    for j in 0..width {
        let _ = write!(csv, ",c{j}");
    }
    csv.push('\n');
    let mut rows = 0;
    for chunk in eval_seeds(seed_offset, count).chunks(64) {
        let envs = chunk.iter().map(|&s| env.make(s)).collect::<Result<Vec<_>>>()?;
        let inputs: Vec<EpisodeInput> = envs
            .iter()
            .map(|e| EpisodeInput::from_observation(&e.observe(), e.manual()))
            .collect();
        let concepts = model.concepts(&inputs, None)?;
        for ((e, input), c) in envs.iter().zip(&inputs).zip(&concepts) {
            let labels = e.ground_truth_labels();
            for (slot, words) in input.entities.iter().enumerate() {
                let name = vocab.decode(words);
                let _ = write!(csv, "{},{},{},{}", e.seed(), slot, name, labels[slot]);
                for v in c.row(slot) {
                    let _ = write!(csv, ",{v}");
                }
                csv.push('\n');
                rows += 1;
            }
        }
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(out, csv)?;
    Ok(rows)
}

/// A parsed concept dump.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptRow {
    pub seed: u64,
    pub entity: usize,
    pub words: String,
    pub label: String,
    pub concept: Vec<f64>,
}

pub fn read_concepts(path: &Path) -> Result<Vec<ConceptRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |n: usize| Error::Invalid(format!("{}: malformed row {}", path.display(), n + 1));
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(n, line)| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() < 5 {
                return Err(bad(n));
            }
            Ok(ConceptRow {
                seed: cols[0].parse().map_err(|_| bad(n))?,
                entity: cols[1].parse().map_err(|_| bad(n))?,
                words: cols[2].to_string(),
                label: cols[3].to_string(),
                concept: cols[4..]
                    .iter()
                    .map(|v| v.parse().map_err(|_| bad(n)))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub m: usize,
    pub final_win_rate: f64,
    pub test_win_rate: Option<f64>,
    pub steps: u64,
}

/// One training run per concept count, same seed, in `out/m{m}`; writes
/// `ablate_m.csv` (final rates) and `ablate_m_metrics.csv` (joined curves).
pub fn cmd_ablate_m(config: &RunConfig, m_list: &[usize]) -> Result<Vec<AblationRow>> {
    if m_list.is_empty() {
        return Err(Error::Usage("ablate-m needs at least one value of m".into()));
    }
    let mut rows = Vec::with_capacity(m_list.len());
    let mut joined = String::from("m,step,update,win_rate,loss_rl,loss_club,loss_vib,mi_estimate,entropy\n");
    for &m in m_list {
        let mut c = config.clone();
        c.encoder.m = m;
        c.out = config.out.join(format!("m{m}"));
        let s = cmd_train(&c, None)?;
        for r in read_metrics(&c.out.join(METRICS_FILE))? {
            let _ = writeln!(
                joined,
                "{m},{},{},{},{},{},{},{},{}",
                r.step,
                r.update,
                r.win_rate.map(|w| w.to_string()).unwrap_or_default(),
                r.loss_rl,
                r.loss_club,
                r.loss_vib,
                r.mi_estimate,
                r.entropy
            );
        }
        rows.push(AblationRow {
            m,
            final_win_rate: s.final_win_rate,
            test_win_rate: s.test_win_rate,
            steps: s.steps,
        });
    }
    let mut table = String::from("m,final_win_rate,test_win_rate,steps\n");
    for r in &rows {
        let _ = writeln!(
            table,
            "{},{},{},{}",
            r.m,
            r.final_win_rate,
            r.test_win_rate.map(|w| w.to_string()).unwrap_or_default(),
            r.steps
        );
    }
    create_dir(&config.out)?;
    write_file(&config.out.join("ablate_m.csv"), table)?;
    write_file(&config.out.join("ablate_m_metrics.csv"), joined)?;
    Ok(rows)
}

/// The full finite-difference suite; with `negative_control` the
/// deliberately broken check is appended.
pub fn cmd_gradcheck(seed: u64, negative_control: bool) -> Vec<CheckReport> {
    let mut checks = gradcheck::registry();
    if negative_control {
        checks.push(gradcheck::negative_control());
    }
    gradcheck::run_checks(&checks, seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub replay: String,
    pub plan: Option<Vec<crate::env::Action>>,
    pub reward: f64,
}

/// Runs the search oracle on one seeded episode and replays its plan.
pub fn cmd_solve(env: &EnvConfig, seed: u64) -> Result<Solution> {
    let mut e = env.make(seed)?;
    let replay = e.replay_text();
    let plan = e.oracle_solve();
    let mut reward = 0.0;
    if let Some(p) = &plan {
        for &a in p {
            reward += e.step(a)?.reward;
        }
    }
    Ok(Solution { replay, plan, reward })
}
