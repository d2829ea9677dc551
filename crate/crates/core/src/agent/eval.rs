use serde::{Deserialize, Serialize};

use super::policy::{select_action, ActMode};
use super::Model;
use crate::diffcore::{Rng, Tensor};
use crate::encoder::EpisodeInput;
use crate::env::{Action, Env, EnvConfig, WorldObservation};
use crate::error::{Error, Result};

/// Evaluation episodes draw seeds from here up, far from the random
/// 64-bit seeds used in training.
const EVAL_SEED_BASE: u64 = 1 << 40;
/// Episodes run in lockstep per forward pass.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub wins: usize,
    pub win_rate: f64,
    pub mean_return: f64,
}

impl EvalReport {
    fn from_outcomes(outcomes: &[(bool, f64)]) -> Self {
        let wins = outcomes.iter().filter(|o| o.0).count();
        let n = outcomes.len();
        EvalReport {
            episodes: n,
            wins,
            win_rate: wins as f64 / n as f64,
            mean_return: outcomes.iter().map(|o| o.1).sum::<f64>() / n as f64,
        }
    }
}

/// The fixed evaluation seed list `offset .. offset + n` above the
/// training range.
pub fn eval_seeds(offset: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| EVAL_SEED_BASE + offset + i).collect()
}

fn require_episodes(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        Err(Error::Invalid("evaluation needs at least one episode".into()))
    } else {
        Ok(())
    }
}

/// Runs the learned agent on one episode per seed. Concepts are the
/// deterministic means; `mode` picks argmax or sampled actions (`rng` is
/// only drawn from when sampling).
pub fn evaluate(model: &Model, env: &EnvConfig, seeds: &[u64], mode: ActMode, rng: &mut Rng) -> Result<EvalReport> {
    require_episodes(seeds)?;
    let mut outcomes = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(EVAL_CHUNK) {
        let mut envs: Vec<Env> = chunk.iter().map(|&s| env.make(s)).collect::<Result<_>>()?;
        let inputs: Vec<EpisodeInput> = envs
            .iter()
            .map(|e| EpisodeInput::from_observation(&e.observe(), e.manual()))
            .collect();
        let concepts = model.concepts(&inputs, None)?;
        let mut result = vec![(false, 0.0); envs.len()];
        loop {
            let active: Vec<usize> = (0..envs.len()).filter(|&i| !envs[i].is_over()).collect();
            if active.is_empty() {
                break;
            }
            let obs: Vec<WorldObservation> = active.iter().map(|&i| envs[i].observe()).collect();
            let batch: Vec<(&Tensor, &WorldObservation)> =
                active.iter().zip(&obs).map(|(&i, o)| (&concepts[i], o)).collect();
            let out = model.evaluate_batch(&batch)?;
            for (row, &i) in active.iter().enumerate() {
                let (a, _) = select_action(out.logits.row(row), mode, rng)?;
                let res = envs[i].step(a)?;
                result[i].1 += res.reward;
                result[i].0 |= res.is_win();
            }
        }
        outcomes.extend(result);
    }
    Ok(EvalReport::from_outcomes(&outcomes))
}

/// Runs an arbitrary agent, called once per step with the live env.
pub fn evaluate_with<F>(env: &EnvConfig, seeds: &[u64], mut agent: F) -> Result<EvalReport>
where
    F: FnMut(&Env, usize) -> Result<Action>,
{
    require_episodes(seeds)?;
    let mut outcomes = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut e = env.make(seed)?;
        let (mut win, mut ret) = (false, 0.0);
        let mut t = 0;
        while !e.is_over() {
            let res = e.step(agent(&e, t)?)?;
            ret += res.reward;
            win |= res.is_win();
            t += 1;
        }
        outcomes.push((win, ret));
    }
    Ok(EvalReport::from_outcomes(&outcomes))
}

/// Replays the search oracle's plan, re-planning at the start of each
/// episode.
pub fn oracle_agent() -> impl FnMut(&Env, usize) -> Result<Action> {
    let mut plan: Vec<Action> = Vec::new();
    move |env: &Env, t: usize| {
        if t == 0 {
            plan = env.oracle_solve().unwrap_or_default();
        }
        Ok(plan.get(t).copied().unwrap_or(Action::Stay))
    }
}

/// Uniformly random actions.
pub fn random_agent(mut rng: Rng) -> impl FnMut(&Env, usize) -> Result<Action> {
    move |_: &Env, _| Ok(Action::ALL[rng.below(Action::ALL.len())])
}
