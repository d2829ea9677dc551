//! Concept-conditioned actor-critic: the policy network, n-step returns,
//! the synchronous rollout/update loop and seeded evaluation.

mod eval;
mod policy;
mod returns;
mod trainer;

pub use eval::{eval_seeds, evaluate, evaluate_with, oracle_agent, random_agent, EvalReport};
pub use policy::{entropy, log_softmax, select_action, ActMode, Policy, PolicyOutput, CONV_CHANNELS, TRUNK_WIDTH};
pub use returns::{compute_returns, StepRecord};
pub use trainer::{a2c_loss, A2cLoss, LearnerPass, Rollout, Segment, TrainConfig, Trainer, TrainerState, UpdateRecord};

use crate::diffcore::{Binder, Graph, ParameterStore, Rng, Tensor};
use crate::encoder::{Encoder, EncoderConfig, EpisodeInput, ObservationRef};
use crate::env::{EnvConfig, WorldObservation};
use crate::error::{Error, Result};

/// Encoder and policy sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParameterStore,
    pub encoder: Encoder,
    pub policy: Policy,
}

/// Per-observation logits and values from a frozen forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub logits: Tensor,
    pub values: Tensor,
}

impl Model {
    pub fn new(env: &EnvConfig, config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let mut store = ParameterStore::new();
        let vocab = env.vocab();
        let encoder = Encoder::new(&mut store, config, vocab.len(), rng)?;
        let width = encoder.config.concept_width();
        let policy = Policy::new(&mut store, env.height(), env.width(), width, rng)?;
        Ok(Model { store, encoder, policy })
    }

    pub fn concept_width(&self) -> usize {
        self.encoder.config.concept_width()
    }

    /// Concepts `[n_e, m·d_c]` for each episode, with per-episode noise
    /// rows (`None` = evaluation mode).
    pub fn concepts(&self, inputs: &[EpisodeInput], noise: Option<&[&Tensor]>) -> Result<Vec<Tensor>> {
        let slots = max_slots(inputs)?;
        let stacked = noise.map(|n| stack_rows(n, slots, self.concept_width())).transpose()?;
        let mut g = Graph::new();
        let set = self
            .encoder
            .encode(&mut g, Binder::frozen(&self.store), inputs, stacked.as_ref())?;
        let all = g.value(set.concepts);
        let width = self.concept_width();
        inputs
            .iter()
            .enumerate()
            .map(|(b, ep)| {
                let start = b * slots * width;
                let data = all.data()[start..start + ep.entities.len() * width].to_vec();
                Tensor::new(&[ep.entities.len(), width], data)
            })
            .collect()
    }

    /// Logits and values for observations paired with their episode's
    /// concepts.
    pub fn evaluate_batch(&self, batch: &[(&Tensor, &WorldObservation)]) -> Result<Evaluation> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty observation batch".into()));
        }
        let width = self.concept_width();
        let slots = batch.iter().map(|(c, _)| c.rows()).max().unwrap_or(0).max(1);
        let concepts: Vec<&Tensor> = batch.iter().map(|(c, _)| *c).collect();
        let stacked = stack_rows(&concepts, slots, width)?;
        let mut g = Graph::new();
        let p = Binder::frozen(&self.store);
        let cv = g.constant(stacked);
        let refs: Vec<ObservationRef<'_>> = batch
            .iter()
            .enumerate()
            .map(|(i, (_, o))| ObservationRef {
                episode: i,
                observation: o,
            })
            .collect();
        let co = self.encoder.assemble_observation(&mut g, p, cv, batch.len(), slots, &refs)?;
        let out = self.policy.forward(&mut g, p, co)?;
        Ok(Evaluation {
            logits: g.value(out.logits).clone(),
            values: g.value(out.values).clone(),
        })
    }
}

pub(crate) fn max_slots(inputs: &[EpisodeInput]) -> Result<usize> {
    inputs
        .iter()
        .map(|e| e.entities.len())
        .max()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Invalid("no episodes with entities".into()))
}

/// Stacks `[r_i, w]` tensors into `[B, slots, w]`, keeping the first
/// `slots` rows of each and zero-padding short ones.
pub(crate) fn stack_rows(items: &[&Tensor], slots: usize, width: usize) -> Result<Tensor> {
    let mut data = vec![0.0; items.len() * slots * width];
    for (b, t) in items.iter().enumerate() {
        if t.last_dim() != width {
            return Err(Error::Dimension {
                op: "stack_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![slots, width],
            });
        }
        let n = t.rows().min(slots) * width;
        data[b * slots * width..b * slots * width + n].copy_from_slice(&t.data()[..n]);
    }
    Tensor::new(&[items.len(), slots, width], data)
}
