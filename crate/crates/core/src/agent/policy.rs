use crate::diffcore::{Binder, Graph, Linear, ParamId, ParameterStore, Rng, Var};
use crate::encoder::ConceptObservation;
use crate::env::Action;
use crate::error::{Error, Result};

pub const CONV_CHANNELS: usize = 16;
pub const TRUNK_WIDTH: usize = 128;

/// Actor-critic network over concept observations: two same-padded 3×3
/// convolutions, the flattened map joined with the carried-item feature,
/// a ReLU trunk, then logits and a scalar value.
#[derive(Clone, Debug)]
pub struct Policy {
    pub height: usize,
    pub width: usize,
    pub input_width: usize,
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    trunk: Linear,
    actor: Linear,
    critic: Linear,
}

/// Batched network outputs: `logits[B, 5]`, `values[B]`.
#[derive(Clone, Copy, Debug)]
pub struct PolicyOutput {
    pub logits: Var,
    pub values: Var,
}

impl Policy {
    pub fn new(store: &mut ParameterStore, height: usize, width: usize, input_width: usize, rng: &mut Rng) -> Result<Self> {
        if height == 0 || width == 0 || input_width == 0 {
            return Err(Error::Config("policy dimensions must be positive".into()));
        }
        let c = CONV_CHANNELS;
        let conv1 = (
            store.weight("policy.conv1.w", 9 * input_width, c, rng)?,
            store.bias("policy.conv1.b", c)?,
        );
        let conv2 = (store.weight("policy.conv2.w", 9 * c, c, rng)?, store.bias("policy.conv2.b", c)?);
        let flat = height * width * c + input_width;
        Ok(Policy {
            height,
            width,
            input_width,
            conv1,
            conv2,
            trunk: Linear::new(store, "policy.trunk", flat, TRUNK_WIDTH, rng)?,
            actor: Linear::new(store, "policy.actor", TRUNK_WIDTH, Action::ALL.len(), rng)?,
            critic: Linear::new(store, "policy.critic", TRUNK_WIDTH, 1, rng)?,
        })
    }

    fn conv(g: &mut Graph, p: Binder<'_>, x: Var, layer: (ParamId, ParamId)) -> Result<Var> {
        let w = p.bind(g, layer.0);
        let b = p.bind(g, layer.1);
        let y = g.conv3x3(x, w)?;
        let y = g.add_row(y, b)?;
        g.relu(y)
    }

    pub fn forward(&self, g: &mut Graph, p: Binder<'_>, obs: ConceptObservation) -> Result<PolicyOutput> {
        let shape = g.shape(obs.grid).to_vec();
        if shape.len() != 4 || shape[1..] != [self.height, self.width, self.input_width] {
            return Err(Error::Dimension {
                op: "policy",
                lhs: shape,
                rhs: vec![self.height, self.width, self.input_width],
            });
        }
        let b = shape[0];
        let h = Self::conv(g, p, obs.grid, self.conv1)?;
        let h = Self::conv(g, p, h, self.conv2)?;
        let h = g.reshape(h, &[b, self.height * self.width * CONV_CHANNELS])?;
        let h = g.concat(&[h, obs.global])?;
        let h = self.trunk.forward(g, p, h)?;
        let h = g.relu(h)?;
        let logits = self.actor.forward(g, p, h)?;
        let values = self.critic.forward(g, p, h)?;
        let values = g.reshape(values, &[b])?;
        Ok(PolicyOutput { logits, values })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    /// Sample from the softmax.
    Sample,
    /// Argmax, lowest index on ties.
    Greedy,
}

/// Log-probabilities of one row of logits.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn entropy(logits: &[f64]) -> f64 {
    -log_softmax(logits).iter().map(|lp| lp.exp() * lp).sum::<f64>()
}

/// Picks an action from one row of logits; returns it with its
/// log-probability.
pub fn select_action(logits: &[f64], mode: ActMode, rng: &mut Rng) -> Result<(Action, f64)> {
    if logits.len() != Action::ALL.len() || logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite { op: "act" });
    }
    let lp = log_softmax(logits);
    let i = match mode {
        ActMode::Greedy => {
            let mut best = 0;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            best
        }
        ActMode::Sample => {
            let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
            rng.categorical(&probs)
        }
    };
    Ok((Action::from_index(i)?, lp[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let l = [0.3; 5];
        for lp in log_softmax(&l) {
            assert!((lp.exp() - 0.2).abs() < 1e-15);
        }
        assert!((entropy(&l) - 5f64.ln()).abs() < 1e-12);
        let (a, _) = select_action(&l, ActMode::Greedy, &mut Rng::new(0)).unwrap();
        assert_eq!(a, Action::ALL[0]);
    }

    #[test]
    fn peaked_logits_sample_first_action() {
        let l = [10.0, 0.0, 0.0, 0.0, 0.0];
        let expected = 10f64.exp() / (10f64.exp() + 4.0);
        assert!((log_softmax(&l)[0].exp() - expected).abs() < 1e-14);
        assert!(expected > 0.9998);
        let mut rng = Rng::new(4);
        let hits = (0..2000)
            .filter(|_| select_action(&l, ActMode::Sample, &mut rng).unwrap().0 == Action::ALL[0])
            .count();
        assert!(hits >= 1990);
    }

    #[test]
    fn greedy_is_repeatable() {
        let l = [0.1, 2.0, 2.0, -1.0, 0.5];
        let mut rng = Rng::new(0);
        let a = select_action(&l, ActMode::Greedy, &mut rng).unwrap();
        let b = select_action(&l, ActMode::Greedy, &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0, Action::ALL[1]);
    }

    #[test]
    fn non_finite_logits_rejected() {
        assert!(select_action(&[f64::NAN, 0.0, 0.0, 0.0, 0.0], ActMode::Greedy, &mut Rng::new(0)).is_err());
    }
}
