use serde::{Deserialize, Serialize};

use super::policy::{select_action, ActMode, PolicyOutput};
use super::returns::{compute_returns, StepRecord};
use super::{max_slots, stack_rows, Model};
use crate::diffcore::{ops::categorical_entropy, Adam, Binder, Graph, Rng, Tensor};
use crate::encoder::{ConceptSet, EncoderConfig, EpisodeInput, ObservationRef};
use crate::env::{Action, Env, EnvConfig, WorldObservation};
use crate::error::{Error, Result};
use crate::mi::{self, ClubPredictor, MiConfig};

const INIT_STREAM: u64 = 1;
const PREDICTOR_STREAM: u64 = 2;
const EPISODE_STREAM: u64 = 3;
const ACTION_STREAM: u64 = 4;
const NOISE_STREAM: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub n_steps: usize,
    pub num_envs: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub lr: f64,
    pub grad_clip: f64,
    /// Environment steps, summed over parallel envs.
    pub total_steps: u64,
    /// Environment steps between evaluations; 0 disables.
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            n_steps: 16,
            num_envs: 16,
            entropy_coef: 0.01,
            value_coef: 0.5,
            lr: 7e-4,
            grad_clip: 5.0,
            total_steps: 500_000,
            eval_every: 25_000,
            eval_episodes: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("train.gamma must lie in [0, 1], got {}", self.gamma)));
        }
        for (name, v) in [
            ("train.entropy_coef", self.entropy_coef),
            ("train.value_coef", self.value_coef),
            ("train.grad_clip", self.grad_clip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.n_steps == 0 || self.num_envs == 0 {
            return Err(Error::Config("train.n_steps and train.num_envs must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_update(&self) -> u64 {
        (self.n_steps * self.num_envs) as u64
    }
}

/// Mutable run state besides parameters and optimizers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub envs: Vec<Env>,
    /// Reparameterisation noise of each env's current episode,
    /// `[max_entities, m·d_c]`.
    pub noise: Vec<Tensor>,
    pub episode_rng: Rng,
    pub action_rng: Rng,
    pub noise_rng: Rng,
    pub steps: u64,
    pub updates: u64,
    pub episodes: u64,
    pub wins: u64,
}

/// One episode that appears in a rollout, with the noise it was acted
/// under.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub input: EpisodeInput,
    pub noise: Tensor,
}

/// A synchronous n-step batch. Per-env vectors are indexed `[env][t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub segments: Vec<Segment>,
    pub observations: Vec<Vec<WorldObservation>>,
    pub segment_of: Vec<Vec<usize>>,
    pub actions: Vec<Vec<Action>>,
    pub log_probs: Vec<Vec<f64>>,
    pub steps: Vec<Vec<StepRecord>>,
    pub bootstrap: Vec<f64>,
    pub finished: u64,
    pub wins: u64,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.actions.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Env-major returns and advantages.
    pub fn returns(&self, gamma: f64) -> (Vec<f64>, Vec<f64>) {
        let mut g = Vec::with_capacity(self.len());
        let mut a = Vec::with_capacity(self.len());
        for (steps, &boot) in self.steps.iter().zip(&self.bootstrap) {
            let (r, adv) = compute_returns(steps, boot, gamma);
            g.extend(r);
            a.extend(adv);
        }
        (g, a)
    }
}

/// Scalars logged for one update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub step: u64,
    pub update: u64,
    pub loss_total: f64,
    pub loss_rl: f64,
    pub loss_pg: f64,
    pub loss_value: f64,
    pub entropy: f64,
    pub loss_club: f64,
    pub loss_vib: f64,
    /// CLUB estimate per entity slot, averaged over slots.
    pub mi_estimate: f64,
    pub predictor_ll: f64,
    pub grad_norm: f64,
    pub episodes: u64,
    pub train_win_rate: Option<f64>,
    pub win_rate: Option<f64>,
}

/// Synchronous advantage actor-critic over concept observations, with the
/// CLUB and VIB terms added to the loss.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub env_config: EnvConfig,
    pub config: TrainConfig,
    pub mi: MiConfig,
    pub model: Model,
    pub opt: Adam,
    pub predictor: ClubPredictor,
    pub state: TrainerState,
}

impl Trainer {
    pub fn new(env_config: EnvConfig, encoder: EncoderConfig, config: TrainConfig, mi: MiConfig) -> Result<Self> {
        config.validate()?;
        mi.validate()?;
        let root = Rng::new(config.seed);
        let model = Model::new(&env_config, encoder, &mut root.split(INIT_STREAM))?;
        let opt = Adam::new(&model.store, config.lr);
        let predictor = ClubPredictor::new(
            model.encoder.config.d_e,
            model.concept_width(),
            mi.predictor_hidden,
            mi.predictor_lr,
            &mut root.split(PREDICTOR_STREAM),
        )?;
        let mut state = TrainerState {
            envs: Vec::with_capacity(config.num_envs),
            noise: Vec::with_capacity(config.num_envs),
            episode_rng: root.split(EPISODE_STREAM),
            action_rng: root.split(ACTION_STREAM),
            noise_rng: root.split(NOISE_STREAM),
            steps: 0,
            updates: 0,
            episodes: 0,
            wins: 0,
        };
        let noise_rows = env_config.max_entities();
        for _ in 0..config.num_envs {
            state.envs.push(env_config.make(state.episode_rng.next_u64())?);
            state.noise.push(model.encoder.sample_noise(1, noise_rows, &mut state.noise_rng).reshaped(&[
                noise_rows,
                model.concept_width(),
            ])?);
        }
        Ok(Trainer {
            env_config,
            config,
            mi,
            model,
            opt,
            predictor,
            state,
        })
    }

    fn fresh_episode(&mut self, i: usize) -> Result<()> {
        let rows = self.env_config.max_entities();
        self.state.envs[i] = self.env_config.make(self.state.episode_rng.next_u64())?;
        self.state.noise[i] = self
            .model
            .encoder
            .sample_noise(1, rows, &mut self.state.noise_rng)
            .reshaped(&[rows, self.model.concept_width()])?;
        Ok(())
    }

    fn segment(&self, i: usize) -> Segment {
        let env = &self.state.envs[i];
        Segment {
            input: EpisodeInput::from_observation(&env.observe(), env.manual()),
            noise: self.state.noise[i].clone(),
        }
    }

    fn segment_concepts(&self, segments: &[&Segment]) -> Result<Vec<Tensor>> {
        let inputs: Vec<EpisodeInput> = segments.iter().map(|s| s.input.clone()).collect();
        let noise: Vec<&Tensor> = segments.iter().map(|s| &s.noise).collect();
        self.model.concepts(&inputs, Some(&noise))
    }

    /// Runs every env for `n_steps` with the current parameters.
    pub fn collect(&mut self) -> Result<Rollout> {
        let e = self.config.num_envs;
        let n = self.config.n_steps;
        let mut segments: Vec<Segment> = (0..e).map(|i| self.segment(i)).collect();
        let mut concepts = self.segment_concepts(&segments.iter().collect::<Vec<_>>())?;
        let mut current: Vec<usize> = (0..e).collect();
        let mut r = Rollout {
            segments: Vec::new(),
            observations: vec![Vec::with_capacity(n); e],
            segment_of: vec![Vec::with_capacity(n); e],
            actions: vec![Vec::with_capacity(n); e],
            log_probs: vec![Vec::with_capacity(n); e],
            steps: vec![Vec::with_capacity(n); e],
            bootstrap: vec![0.0; e],
            finished: 0,
            wins: 0,
        };
        for _ in 0..n {
            let obs: Vec<WorldObservation> = self.state.envs.iter().map(Env::observe).collect();
            let batch: Vec<(&Tensor, &WorldObservation)> =
                (0..e).map(|i| (&concepts[current[i]], &obs[i])).collect();
            let out = self.model.evaluate_batch(&batch)?;
            let mut truncated = Vec::new();
            for (i, o) in obs.into_iter().enumerate() {
                let (action, lp) = select_action(out.logits.row(i), ActMode::Sample, &mut self.state.action_rng)?;
                let res = self.state.envs[i].step(action)?;
                r.observations[i].push(o);
                r.segment_of[i].push(current[i]);
                r.actions[i].push(action);
                r.log_probs[i].push(lp);
                r.steps[i].push(StepRecord {
                    reward: res.reward,
                    done: res.done,
                    truncated: res.truncated && !res.done,
                    value: out.values.data()[i],
                    truncation_value: 0.0,
                });
                if res.truncated && !res.done {
                    truncated.push((i, res.observation.clone()));
                }
                if res.finished() {
                    r.finished += 1;
                    r.wins += u64::from(res.is_win());
                }
            }
            if !truncated.is_empty() {
                let batch: Vec<(&Tensor, &WorldObservation)> =
                    truncated.iter().map(|(i, o)| (&concepts[current[*i]], o)).collect();
                let vals = self.model.evaluate_batch(&batch)?.values;
                for ((i, _), v) in truncated.iter().zip(vals.data()) {
                    r.steps[*i].last_mut().expect("step recorded").truncation_value = *v;
                }
            }
            for i in 0..e {
                if self.state.envs[i].is_over() {
                    self.fresh_episode(i)?;
                    let seg = self.segment(i);
                    concepts.push(self.segment_concepts(&[&seg])?.remove(0));
                    segments.push(seg);
                    current[i] = segments.len() - 1;
                }
            }
        }
        let obs: Vec<WorldObservation> = self.state.envs.iter().map(Env::observe).collect();
        let batch: Vec<(&Tensor, &WorldObservation)> = (0..e).map(|i| (&concepts[current[i]], &obs[i])).collect();
        r.bootstrap = self.model.evaluate_batch(&batch)?.values.into_data();
        r.segments = segments;
        self.state.steps += (n * e) as u64;
        self.state.episodes += r.finished;
        self.state.wins += r.wins;
        Ok(r)
    }

    /// Learner forward pass over a rollout: the encoder runs once per
    /// segment with the noise the segment was acted under.
    pub fn learner_pass(&self, rollout: &Rollout) -> Result<LearnerPass> {
        let inputs: Vec<EpisodeInput> = rollout.segments.iter().map(|s| s.input.clone()).collect();
        let slots = max_slots(&inputs)?;
        let noise: Vec<&Tensor> = rollout.segments.iter().map(|s| &s.noise).collect();
        let noise = stack_rows(&noise, slots, self.model.concept_width())?;
        let mut g = Graph::new();
        let p = Binder::trainable(&self.model.store);
        let set = self.model.encoder.encode(&mut g, p, &inputs, Some(&noise))?;
        let refs: Vec<ObservationRef<'_>> = rollout
            .observations
            .iter()
            .zip(&rollout.segment_of)
            .flat_map(|(os, ss)| {
                os.iter().zip(ss).map(|(o, &s)| ObservationRef {
                    episode: s,
                    observation: o,
                })
            })
            .collect();
        let co = self.model.encoder.concept_observation(&mut g, p, &set, &refs)?;
        let out = self.model.policy.forward(&mut g, p, co)?;
        Ok(LearnerPass { graph: g, set, out })
    }

    /// One joint optimizer step on encoder and policy. The predictor is
    /// first refit on this batch's detached pairs.
    pub fn update(&mut self, rollout: &Rollout) -> Result<UpdateRecord> {
        let (returns, advantages) = rollout.returns(self.config.gamma);
        let LearnerPass { graph: mut g, set, out } = self.learner_pass(rollout)?;
        let actions: Vec<usize> = rollout.actions.iter().flatten().map(|a| a.index()).collect();
        let rl = a2c_loss(&mut g, out.logits, out.values, &actions, &returns, &advantages, &self.config)?;

        let (e, c) = mi::detached_pairs(&g, &set)?;
        let curve = self.predictor.train(&e, &c, self.mi.predictor_steps)?;
        let club = mi::club_loss(&mut g, &set, &self.predictor, self.mi.club_through_embedding)?;
        let vib = mi::vib_loss(&mut g, &set)?;
        let total = if self.mi.enabled() {
            mi::combined_loss(&mut g, rl.total, club, vib, self.mi.alpha1, self.mi.alpha2)?
        } else {
            rl.total
        };

        let scalar = |v| g.value(v).item();
        let club_slots = (0..set.slots)
            .filter(|&s| set.slot_mask.iter().filter(|m| m[s]).count() >= 2)
            .count()
            .max(1);
        let mut record = UpdateRecord {
            step: self.state.steps,
            update: self.state.updates + 1,
            loss_total: scalar(total),
            loss_rl: scalar(rl.total),
            loss_pg: scalar(rl.pg),
            loss_value: scalar(rl.value),
            entropy: scalar(rl.entropy),
            loss_club: scalar(club),
            loss_vib: scalar(vib),
            mi_estimate: scalar(club) / club_slots as f64,
            predictor_ll: curve.last().copied().unwrap_or(f64::NAN),
            grad_norm: 0.0,
            episodes: rollout.finished,
            train_win_rate: (rollout.finished > 0).then(|| rollout.wins as f64 / rollout.finished as f64),
            win_rate: None,
        };
        if !record.loss_total.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss at update {}: total={} rl={} pg={} value={} entropy={} club={} vib={}",
                record.update,
                record.loss_total,
                record.loss_rl,
                record.loss_pg,
                record.loss_value,
                record.entropy,
                record.loss_club,
                record.loss_vib
            )));
        }
        g.backward_into(total, &mut self.model.store)?;
        record.grad_norm = self.model.store.clip_grad_norm(self.config.grad_clip);
        self.opt.step(&mut self.model.store)?;
        self.state.updates += 1;
        Ok(record)
    }

    /// `collect` followed by `update`.
    pub fn train_step(&mut self) -> Result<UpdateRecord> {
        let rollout = self.collect()?;
        self.update(&rollout)
    }
}

/// The differentiable graph of one learner pass.
pub struct LearnerPass {
    pub graph: Graph,
    pub set: ConceptSet,
    pub out: PolicyOutput,
}

/// Policy-gradient, value and entropy terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct A2cLoss {
    pub pg: crate::diffcore::Var,
    pub value: crate::diffcore::Var,
    pub entropy: crate::diffcore::Var,
    pub total: crate::diffcore::Var,
}

/// `−mean(A·log π(a)) + c_v·mean((G − V)²) − c_e·mean(H)` with `A` and
/// `G` as constants.
pub fn a2c_loss(
    g: &mut Graph,
    logits: crate::diffcore::Var,
    values: crate::diffcore::Var,
    actions: &[usize],
    returns: &[f64],
    advantages: &[f64],
    config: &TrainConfig,
) -> Result<A2cLoss> {
    let n = actions.len();
    if returns.len() != n || advantages.len() != n {
        return Err(Error::Invalid("actions, returns and advantages must align".into()));
    }
    let lp_all = g.log_softmax(logits)?;
    let lp = g.select_last(lp_all, actions.to_vec())?;
    let adv = g.constant(Tensor::vector(advantages.to_vec()));
    let weighted = g.mul(adv, lp)?;
    let pg = g.mean(weighted)?;
    let pg = g.neg(pg)?;
    let ret = g.constant(Tensor::vector(returns.to_vec()));
    let diff = g.sub(ret, values)?;
    let sq = g.square(diff)?;
    let value = g.mean(sq)?;
    let entropy = categorical_entropy(g, lp_all)?;
    let v = g.scale(value, config.value_coef)?;
    let h = g.scale(entropy, config.entropy_coef)?;
    let total = g.add(pg, v)?;
    let total = g.sub(total, h)?;
    Ok(A2cLoss {
        pg,
        value,
        entropy,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::RtfmConfig;

    fn small(alpha: f64) -> Trainer {
        let config = TrainConfig {
            n_steps: 4,
            num_envs: 3,
            seed: 11,
            ..Default::default()
        };
        let mi = MiConfig {
            alpha1: alpha,
            alpha2: alpha / 10.0,
            ..Default::default()
        };
        let enc = EncoderConfig {
            d_t: 8,
            d_e: 8,
            d_c: 4,
            d_k: 8,
            gru_hidden: 8,
            ..Default::default()
        };
        Trainer::new(EnvConfig::Rtfm(RtfmConfig::default()), enc, config, mi).unwrap()
    }

    #[test]
    fn rollout_shapes_and_counters() {
        let mut t = small(0.1);
        let r = t.collect().unwrap();
        assert_eq!(r.len(), 12);
        assert!(r.actions.iter().all(|a| a.len() == 4));
        assert!(r.segments.len() >= 3);
        assert_eq!(t.state.steps, 12);
        for (steps, segs) in r.steps.iter().zip(&r.segment_of) {
            for (w, s) in steps.windows(2).zip(segs.windows(2)) {
                if w[0].done || w[0].truncated {
                    assert_ne!(s[0], s[1]);
                } else {
                    assert_eq!(s[0], s[1]);
                }
            }
        }
    }

    #[test]
    fn learner_reproduces_rollout_log_probs_and_values() {
        let mut t = small(0.1);
        t.train_step().unwrap();
        let r = t.collect().unwrap();
        let pass = t.learner_pass(&r).unwrap();
        let logits = pass.graph.value(pass.out.logits);
        let values = pass.graph.value(pass.out.values);
        let recorded: Vec<f64> = r.log_probs.iter().flatten().copied().collect();
        let rec_values: Vec<f64> = r.steps.iter().flatten().map(|s| s.value).collect();
        for (i, a) in r.actions.iter().flatten().enumerate() {
            let lp = crate::agent::log_softmax(logits.row(i))[a.index()];
            assert!((lp - recorded[i]).abs() < 1e-9, "row {i}: {lp} vs {}", recorded[i]);
            assert!((values.data()[i] - rec_values[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_seeds_give_identical_updates() {
        let mut a = small(0.1);
        let mut b = small(0.1);
        for _ in 0..2 {
            assert_eq!(a.train_step().unwrap(), b.train_step().unwrap());
        }
    }

    #[test]
    fn logged_components_sum_to_total() {
        let mut t = small(0.1);
        let r = t.train_step().unwrap();
        let rl = r.loss_pg + 0.5 * r.loss_value - 0.01 * r.entropy;
        assert!((rl - r.loss_rl).abs() < 1e-10);
        let total = r.loss_rl + 0.1 * r.loss_club + 0.01 * r.loss_vib;
        assert!((total - r.loss_total).abs() < 1e-10);
    }

    #[test]
    fn zero_advantage_gives_zero_policy_term() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(2, 5, (0..10).map(|i| i as f64 * 0.1).collect()).unwrap());
        let values = g.constant(Tensor::vector(vec![0.5, 0.5]));
        let l = a2c_loss(&mut g, logits, values, &[1, 3], &[0.5, 0.5], &[0.0, 0.0], &TrainConfig::default()).unwrap();
        assert_eq!(g.value(l.pg).item(), 0.0);
        assert_eq!(g.value(l.value).item(), 0.0);
    }

    /// With both coefficients zero the update must equal one built from
    /// the actor-critic loss alone.
    #[test]
    fn zero_coefficients_match_plain_actor_critic() {
        let mut t = small(0.0);
        let reference = t.clone();
        let rollout = t.collect().unwrap();
        let mut plain = reference.clone();
        plain.state = t.state.clone();
        t.update(&rollout).unwrap();

        let (returns, advantages) = rollout.returns(plain.config.gamma);
        let inputs: Vec<EpisodeInput> = rollout.segments.iter().map(|s| s.input.clone()).collect();
        let slots = max_slots(&inputs).unwrap();
        let noise: Vec<&Tensor> = rollout.segments.iter().map(|s| &s.noise).collect();
        let noise = stack_rows(&noise, slots, plain.model.concept_width()).unwrap();
        let mut g = Graph::new();
        let p = Binder::trainable(&plain.model.store);
        let set = plain.model.encoder.encode(&mut g, p, &inputs, Some(&noise)).unwrap();
        let refs: Vec<ObservationRef<'_>> = rollout
            .observations
            .iter()
            .zip(&rollout.segment_of)
            .flat_map(|(os, ss)| os.iter().zip(ss).map(|(o, &s)| ObservationRef { episode: s, observation: o }))
            .collect();
        let co = plain.model.encoder.concept_observation(&mut g, p, &set, &refs).unwrap();
        let out = plain.model.policy.forward(&mut g, p, co).unwrap();
        let actions: Vec<usize> = rollout.actions.iter().flatten().map(|a| a.index()).collect();
        let loss = a2c_loss(&mut g, out.logits, out.values, &actions, &returns, &advantages, &plain.config).unwrap();
        g.backward_into(loss.total, &mut plain.model.store).unwrap();
        plain.model.store.clip_grad_norm(plain.config.grad_clip);
        plain.opt.step(&mut plain.model.store).unwrap();

        for (a, b) in t.model.store.iter().zip(plain.model.store.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    #[test]
    fn total_gradient_is_sum_of_component_gradients() {
        let mut t = small(0.3);
        let rollout = t.collect().unwrap();
        let (returns, advantages) = rollout.returns(t.config.gamma);
        let inputs: Vec<EpisodeInput> = rollout.segments.iter().map(|s| s.input.clone()).collect();
        let slots = max_slots(&inputs).unwrap();
        let noise: Vec<&Tensor> = rollout.segments.iter().map(|s| &s.noise).collect();
        let noise = stack_rows(&noise, slots, t.model.concept_width()).unwrap();
        let mut g = Graph::new();
        let p = Binder::trainable(&t.model.store);
        let set = t.model.encoder.encode(&mut g, p, &inputs, Some(&noise)).unwrap();
        let refs: Vec<ObservationRef<'_>> = rollout
            .observations
            .iter()
            .zip(&rollout.segment_of)
            .flat_map(|(os, ss)| os.iter().zip(ss).map(|(o, &s)| ObservationRef { episode: s, observation: o }))
            .collect();
        let co = t.model.encoder.concept_observation(&mut g, p, &set, &refs).unwrap();
        let out = t.model.policy.forward(&mut g, p, co).unwrap();
        let actions: Vec<usize> = rollout.actions.iter().flatten().map(|a| a.index()).collect();
        let rl = a2c_loss(&mut g, out.logits, out.values, &actions, &returns, &advantages, &t.config).unwrap();
        let (e, c) = mi::detached_pairs(&g, &set).unwrap();
        t.predictor.train(&e, &c, 2).unwrap();
        let club = mi::club_loss(&mut g, &set, &t.predictor, false).unwrap();
        let vib = mi::vib_loss(&mut g, &set).unwrap();
        let total = mi::combined_loss(&mut g, rl.total, club, vib, 0.3, 0.03).unwrap();
        let club_s = g.scale(club, 0.3).unwrap();
        let vib_s = g.scale(vib, 0.03).unwrap();

        let mut grads = |loss| {
            let s = &mut t.model.store;
            s.zero_grad();
            g.backward_into(loss, s).unwrap();
            s.iter().map(|p| p.grad.clone()).collect::<Vec<_>>()
        };
        let whole = grads(total);
        let parts = [grads(rl.total), grads(club_s), grads(vib_s)];
        for (i, w) in whole.iter().enumerate() {
            for (k, &x) in w.data().iter().enumerate() {
                let sum: f64 = parts.iter().map(|p| p[i].data()[k]).sum();
                assert!((x - sum).abs() <= 1e-10 * (1.0 + x.abs()), "param {i} entry {k}: {x} vs {sum}");
            }
        }
    }
}
