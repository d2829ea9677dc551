use crate::agent::{Model, TrainConfig};
use crate::diffcore::gradcheck::{check_inputs, check_store, primitive_checks, CheckReport, GradCheck, INSTANCES};
use crate::diffcore::{Binder, Graph, Rng, Tensor, Var};
use crate::encoder::{EncoderConfig, EpisodeInput, ObservationRef};
use crate::env::{EnvConfig, MessengerConfig, RtfmConfig};
use crate::error::Result;
use crate::mi::{self, ClubPredictor};

/// Parameter coordinates perturbed per instance of a composed check.
const SAMPLED_COORDS: usize = 24;

fn tiny_encoder(m: usize) -> EncoderConfig {
    EncoderConfig {
        m,
        d_t: 5,
        d_e: 6,
        d_c: 3,
        d_k: 4,
        gru_hidden: 5,
        ..Default::default()
    }
}

struct Fixture {
    model: Model,
    inputs: Vec<EpisodeInput>,
    noise: Tensor,
    observations: Vec<(usize, crate::env::WorldObservation)>,
    weights: Tensor,
}

fn fixture(rng: &mut Rng, messenger: bool) -> Result<Fixture> {
    let env = if messenger {
        EnvConfig::Messenger(MessengerConfig {
            height: 5,
            width: 5,
            stage: crate::env::Stage::S2,
            ..Default::default()
        })
    } else {
        EnvConfig::Rtfm(RtfmConfig {
            height: 4,
            width: 4,
            ..Default::default()
        })
    };
    let model = Model::new(&env, tiny_encoder(2), &mut Rng::new(rng.next_u64()))?;
    let envs = (0..3)
        .map(|_| env.make(rng.next_u64()))
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<EpisodeInput> = envs
        .iter()
        .map(|e| EpisodeInput::from_observation(&e.observe(), e.manual()))
        .collect();
    let slots = inputs.iter().map(|i| i.entities.len()).max().unwrap_or(1);
    let noise = model.encoder.sample_noise(envs.len(), slots, rng);
    let observations = envs.iter().enumerate().map(|(i, e)| (i, e.observe())).collect();
    let weights = Tensor::new(&[envs.len(), slots, model.concept_width()], rng.normals(noise.len()))?;
    Ok(Fixture {
        model,
        inputs,
        noise,
        observations,
        weights,
    })
}

fn weighted(g: &mut Graph, x: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(x, w)?;
    g.sum(p)
}

fn encoder_check(messenger: bool) -> impl Fn(&mut Rng) -> Result<f64> {
    move |rng| {
        let f = fixture(rng, messenger)?;
        check_store(
            &f.model.store,
            |g, store| {
                let set = f.model.encoder.encode(g, Binder::trainable(store), &f.inputs, Some(&f.noise))?;
                weighted(g, set.concepts, &f.weights)
            },
            SAMPLED_COORDS,
            rng,
        )
    }
}

fn policy_check(rng: &mut Rng) -> Result<f64> {
    let f = fixture(rng, false)?;
    let head = Tensor::new(&[f.observations.len(), 5], rng.normals(f.observations.len() * 5))?;
    check_store(
        &f.model.store,
        |g, store| {
            let p = Binder::trainable(store);
            let set = f.model.encoder.encode(g, p, &f.inputs, Some(&f.noise))?;
            let refs: Vec<ObservationRef<'_>> = f
                .observations
                .iter()
                .map(|(i, o)| ObservationRef {
                    episode: *i,
                    observation: o,
                })
                .collect();
            let co = f.model.encoder.concept_observation(g, p, &set, &refs)?;
            let out = f.model.policy.forward(g, p, co)?;
            let a = weighted(g, out.logits, &head)?;
            let v = g.sum(out.values)?;
            g.add(a, v)
        },
        SAMPLED_COORDS,
        rng,
    )
}

fn predictor_for(f: &Fixture, rng: &mut Rng) -> Result<ClubPredictor> {
    let mut g = Graph::new();
    let set = f
        .model
        .encoder
        .encode(&mut g, Binder::frozen(&f.model.store), &f.inputs, Some(&f.noise))?;
    let (e, c) = mi::detached_pairs(&g, &set)?;
    let mut q = ClubPredictor::new(f.model.encoder.config.d_e, f.model.concept_width(), 6, 1e-2, rng)?;
    q.train(&e, &c, 3)?;
    Ok(q)
}

fn club_check(through_embedding: bool) -> impl Fn(&mut Rng) -> Result<f64> {
    move |rng| {
        let f = fixture(rng, false)?;
        let q = predictor_for(&f, rng)?;
        check_store(
            &f.model.store,
            |g, store| {
                let set = f.model.encoder.encode(g, Binder::trainable(store), &f.inputs, Some(&f.noise))?;
                mi::club_loss(g, &set, &q, through_embedding)
            },
            SAMPLED_COORDS,
            rng,
        )
    }
}

fn vib_check(messenger: bool) -> impl Fn(&mut Rng) -> Result<f64> {
    move |rng| {
        let f = fixture(rng, messenger)?;
        check_store(
            &f.model.store,
            |g, store| {
                let set = f.model.encoder.encode(g, Binder::trainable(store), &f.inputs, Some(&f.noise))?;
                mi::vib_loss(g, &set)
            },
            SAMPLED_COORDS,
            rng,
        )
    }
}

fn a2c_check(rng: &mut Rng) -> Result<f64> {
    let n = 2 + rng.below(6);
    let logits = Tensor::new(&[n, 5], rng.normals(n * 5))?;
    let values = Tensor::vector(rng.normals(n));
    let actions: Vec<usize> = (0..n).map(|_| rng.below(5)).collect();
    let returns = rng.normals(n);
    let adv = rng.normals(n);
    let config = TrainConfig::default();
    check_inputs(
        &[logits, values],
        |g, v| Ok(crate::agent::a2c_loss(g, v[0], v[1], &actions, &returns, &adv, &config)?.total),
        None,
    )
}

fn combined_check(rng: &mut Rng) -> Result<f64> {
    let f = fixture(rng, false)?;
    let q = predictor_for(&f, rng)?;
    check_store(
        &f.model.store,
        |g, store| {
            let set = f.model.encoder.encode(g, Binder::trainable(store), &f.inputs, Some(&f.noise))?;
            let rl = weighted(g, set.concepts, &f.weights)?;
            let club = mi::club_loss(g, &set, &q, false)?;
            let vib = mi::vib_loss(g, &set)?;
            mi::combined_loss(g, rl, club, vib, 0.1, 0.01)
        },
        SAMPLED_COORDS,
        rng,
    )
}

/// Composed checks over the encoder, policy and losses.
pub fn model_checks() -> Vec<GradCheck> {
    vec![
        GradCheck::new("encoder_rtfm", encoder_check(false)),
        GradCheck::new("encoder_messenger", encoder_check(true)),
        GradCheck::new("encoder_policy", policy_check),
        GradCheck::new("club_loss", club_check(false)),
        GradCheck::new("club_loss_through_embedding", club_check(true)),
        GradCheck::new("vib_loss", vib_check(false)),
        GradCheck::new("vib_loss_masked_slots", vib_check(true)),
        GradCheck::new("a2c_loss", a2c_check),
        GradCheck::new("combined_loss", combined_check),
    ]
}

/// Every registered check: primitives first, then composed ones.
pub fn registry() -> Vec<GradCheck> {
    let mut all = primitive_checks();
    all.extend(model_checks());
    all
}

/// A check whose analytic derivative is deliberately wrong.
pub fn negative_control() -> GradCheck {
    GradCheck::new("corrupted_square", |rng| {
        let x = Tensor::vector(rng.normals(4));
        check_inputs(
            &[x],
            |g, v| {
                let y = g.custom_unary(v[0], |x| x * x, |x| 2.02 * x)?;
                g.sum(y)
            },
            None,
        )
    })
}

/// Runs `checks` with `INSTANCES` random instances each.
pub fn run_checks(checks: &[GradCheck], seed: u64) -> Vec<CheckReport> {
    let mut rng = Rng::new(seed);
    checks.iter().map(|c| c.execute(&mut rng, INSTANCES)).collect()
}
