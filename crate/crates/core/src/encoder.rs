//! Multi-level attention concept encoder.
//!
//! Each entity embedding queries the manual once per level. Level 1 uses
//! an MLP query; level j > 1 builds its query by self-attention over the
//! entity embeddings concatenated with the concepts of earlier levels.
//! Every level ends in a Gaussian bottleneck head whose sample (or mean,
//! at evaluation time) is that level's concept.
//!
//! All operations are batched over episodes: `B` episodes, each with up
//! to `n` entity slots and the manual's `S` sentences. Entity slots and
//! sentences that do not exist in an episode are masked out.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::ops::{attention, positive_scale};
use crate::diffcore::{Activation, Binder, Gru, Graph, Linear, Mlp2, ParamId, ParameterStore, Rng, SelfAttention, Tensor, Var};
use crate::env::{TextManual, WorldObservation, PAD};
use crate::error::{Error, Result};

const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    /// One key/value per sentence (final GRU state).
    Sentence,
    /// One key/value per token (every GRU state).
    Token,
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentence" => Ok(Granularity::Sentence),
            "token" => Ok(Granularity::Token),
            _ => Err(Error::Config(format!("unknown granularity {s:?} (expected sentence|token)"))),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Sentence => "sentence",
            Granularity::Token => "token",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Number of concepts (and attention levels) per entity.
    pub m: usize,
    pub d_t: usize,
    pub d_e: usize,
    pub d_c: usize,
    pub d_k: usize,
    pub gru_hidden: usize,
    pub granularity: Granularity,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            m: 2,
            d_t: 32,
            d_e: 32,
            d_c: 16,
            d_k: 32,
            gru_hidden: 64,
            granularity: Granularity::Sentence,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("m", self.m),
            ("d_t", self.d_t),
            ("d_e", self.d_e),
            ("d_c", self.d_c),
            ("d_k", self.d_k),
            ("gru_hidden", self.gru_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Width of an entity's concatenated concepts.
    pub fn concept_width(&self) -> usize {
        self.m * self.d_c
    }
}

#[derive(Clone, Debug)]
enum Query {
    Mlp(Mlp2),
    SelfAttention(SelfAttention),
}

#[derive(Clone, Debug)]
struct Level {
    key_gru: Gru,
    val_gru: Gru,
    key_proj: Linear,
    val_proj: Linear,
    query: Query,
    mu: Mlp2,
    sigma: Mlp2,
}

/// Parameter handles of the encoder; values live in a [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub vocab_size: usize,
    pub embed: ParamId,
    entity_proj: Linear,
    levels: Vec<Level>,
    /// Learned vector written into the agent's cell of the concept grid.
    pub agent_marker: ParamId,
}

/// One episode's encoder input: entity name words per slot and the manual.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeInput {
    pub entities: Vec<Vec<u32>>,
    pub manual: TextManual,
}

impl EpisodeInput {
    pub fn from_observation(obs: &WorldObservation, manual: &TextManual) -> Self {
        EpisodeInput {
            entities: obs.entities.iter().map(|e| e.words.clone()).collect(),
            manual: manual.clone(),
        }
    }
}

/// Outputs of one level for a batch: every tensor is `[B, n, ·]`.
#[derive(Clone, Copy, Debug)]
pub struct LevelOutput {
    pub context: Var,
    pub mu: Var,
    pub sigma: Var,
    pub concept: Var,
}

/// Concepts for a batch of episodes.
#[derive(Clone, Debug)]
pub struct ConceptSet {
    pub batch: usize,
    pub slots: usize,
    /// `[B, n, d_e]`.
    pub entities: Var,
    /// `[B, n, m·d_c]`, levels in order.
    pub concepts: Var,
    pub levels: Vec<LevelOutput>,
    /// `slot_mask[b][i]`: slot `i` holds a real entity in episode `b`.
    pub slot_mask: Vec<Vec<bool>>,
}

/// Policy input: `grid[B, h, w, m·d_c]` and `global[B, m·d_c]`.
#[derive(Clone, Copy, Debug)]
pub struct ConceptObservation {
    pub grid: Var,
    pub global: Var,
}

struct SetShape {
    concepts: Var,
    batch: usize,
    slots: usize,
}

/// A world observation paired with the index of its episode in a
/// [`ConceptSet`].
#[derive(Clone, Copy, Debug)]
pub struct ObservationRef<'a> {
    pub episode: usize,
    pub observation: &'a WorldObservation,
}

/// Columns of level `j` from `[B, n, m·d_c]` noise: `[B, n, d_c]`.
fn level_noise(eps: &Tensor, j: usize, d_c: usize) -> Result<Tensor> {
    let s = eps.shape();
    let data = eps
        .data()
        .chunks(eps.last_dim())
        .flat_map(|row| row[j * d_c..(j + 1) * d_c].iter().copied())
        .collect();
    Tensor::new(&[s[0], s[1], d_c], data)
}

fn uniform_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_range(-scale, scale)).collect())
}

impl Encoder {
    pub fn new(store: &mut ParameterStore, config: EncoderConfig, vocab_size: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if vocab_size < 2 {
            return Err(Error::Config("vocabulary must contain at least one word".into()));
        }
        let c = &config;
        let embed = store.insert("encoder.embed", Tensor::new(&[vocab_size, c.d_t], rng.normals(vocab_size * c.d_t))?)?;
        let entity_proj = Linear::new(store, "encoder.entity_proj", c.d_t, c.d_e, rng)?;
        let mut levels = Vec::with_capacity(c.m);
        for j in 0..c.m {
            let name = format!("encoder.level{}", j + 1);
            let query = if j == 0 {
                Query::Mlp(Mlp2::new(store, &format!("{name}.query"), c.d_e, c.d_k, c.d_k, Activation::Tanh, rng)?)
            } else {
                Query::SelfAttention(SelfAttention::new(
                    store,
                    &format!("{name}.query"),
                    c.d_e + j * c.d_c,
                    c.d_k,
                    c.d_k,
                    rng,
                )?)
            };
            levels.push(Level {
                key_gru: Gru::new(store, &format!("{name}.key_gru"), c.d_t, c.gru_hidden, rng)?,
                val_gru: Gru::new(store, &format!("{name}.val_gru"), c.d_t, c.gru_hidden, rng)?,
                key_proj: Linear::new(store, &format!("{name}.key_proj"), c.gru_hidden, c.d_k, rng)?,
                val_proj: Linear::new(store, &format!("{name}.val_proj"), c.gru_hidden, c.d_k, rng)?,
                query,
                mu: Mlp2::new(store, &format!("{name}.mu"), c.d_k, c.d_k, c.d_c, Activation::Tanh, rng)?,
                sigma: Mlp2::new(store, &format!("{name}.sigma"), c.d_k, c.d_k, c.d_c, Activation::Tanh, rng)?,
            });
        }
        let agent_marker = store.insert("encoder.agent_marker", uniform_tensor(rng, &[c.m * c.d_c], 0.5)?)?;
        Ok(Encoder {
            config,
            vocab_size,
            embed,
            entity_proj,
            levels,
            agent_marker,
        })
    }

    /// Standard-normal noise for a train-mode pass over `batch` episodes
    /// with `slots` entity slots: `[B, n, m·d_c]`.
    pub fn sample_noise(&self, batch: usize, slots: usize, rng: &mut Rng) -> Tensor {
        let shape = [batch, slots, self.config.concept_width()];
        Tensor::new(&shape, rng.normals(shape.iter().product())).expect("positive extents")
    }

    fn check_token(&self, t: u32) -> Result<usize> {
        if (t as usize) < self.vocab_size {
            Ok(t as usize)
        } else {
            Err(Error::Invalid(format!("token id {t} outside vocabulary of {}", self.vocab_size)))
        }
    }

    /// Entity embeddings `[B·n, d_e]`: mean word embedding (padding
    /// excluded) projected to `d_e`. Empty slots embed the padding row and
    /// must be masked by the caller.
    fn embed_entities_batched(&self, g: &mut Graph, p: Binder<'_>, episodes: &[EpisodeInput], slots: usize) -> Result<Var> {
        let table = p.bind(g, self.embed);
        let mut bags = Vec::with_capacity(episodes.len() * slots);
        for ep in episodes {
            for i in 0..slots {
                match ep.entities.get(i) {
                    Some(words) => {
                        let bag = words
                            .iter()
                            .filter(|&&w| w != PAD)
                            .map(|&w| self.check_token(w))
                            .collect::<Result<Vec<_>>>()?;
                        if bag.is_empty() {
                            return Err(Error::Invalid(format!("entity slot {i} has no name words")));
                        }
                        bags.push(bag);
                    }
                    None => bags.push(vec![PAD as usize]),
                }
            }
        }
        let mean = g.embed_mean(table, bags)?;
        self.entity_proj.forward(g, p, mean)
    }

    /// `e_i` for every entity of one observation: `[n, d_e]`.
    pub fn embed_entities(&self, g: &mut Graph, p: Binder<'_>, obs: &WorldObservation) -> Result<Var> {
        if obs.entities.is_empty() {
            return Err(Error::Invalid("observation has no entities".into()));
        }
        let ep = EpisodeInput {
            entities: obs.entities.iter().map(|e| e.words.clone()).collect(),
            manual: TextManual {
                tokens: vec![],
                lengths: vec![],
            },
        };
        self.embed_entities_batched(g, p, std::slice::from_ref(&ep), ep.entities.len())
    }

    /// Keys and values of every level: `[B, S', d_k]` each, with `S'` the
    /// sentence count (or sentence × token count) and an additive
    /// `[B, S']` key mask as plain data.
    fn encode_text_batched(
        &self,
        g: &mut Graph,
        p: Binder<'_>,
        manuals: &[&TextManual],
    ) -> Result<(Vec<(Var, Var)>, Vec<f64>, usize)> {
        let b = manuals.len();
        let s = manuals[0].tokens.len();
        if s == 0 || manuals.iter().any(|m| m.tokens.len() != s) {
            return Err(Error::Invalid("manuals in a batch must share a positive sentence count".into()));
        }
        if manuals.iter().any(|m| m.num_sentences() == 0) {
            return Err(Error::Invalid("empty manual".into()));
        }
        let t_max = manuals.iter().flat_map(|m| m.lengths.iter()).copied().max().unwrap_or(0);
        let rows = b * s;
        let hd = self.config.gru_hidden;
        let table = p.bind(g, self.embed);
        let mut xs = Vec::with_capacity(t_max);
        let mut masks = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let mut bags = Vec::with_capacity(rows);
            let mut mask = Vec::with_capacity(rows * hd);
            for m in manuals {
                for (toks, &len) in m.tokens.iter().zip(&m.lengths) {
                    let tok = if t < len { toks[t] } else { PAD };
                    bags.push(vec![self.check_token(tok)?]);
                    mask.extend(std::iter::repeat_n(if t < len { 1.0 } else { 0.0 }, hd));
                }
            }
            xs.push(g.embed_mean(table, bags)?);
            masks.push(Some(g.constant(Tensor::new(&[rows, hd], mask)?)));
        }
        let (keys, key_mask): (usize, Vec<f64>) = match self.config.granularity {
            Granularity::Sentence => (
                s,
                manuals
                    .iter()
                    .flat_map(|m| m.lengths.iter().map(|&l| if l > 0 { 0.0 } else { MASKED }))
                    .collect(),
            ),
            Granularity::Token => (
                s * t_max,
                manuals
                    .iter()
                    .flat_map(|m| {
                        m.lengths
                            .iter()
                            .flat_map(move |&l| (0..t_max).map(move |t| if t < l { 0.0 } else { MASKED }))
                    })
                    .collect(),
            ),
        };
        let mut out = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            let mut kv = Vec::with_capacity(2);
            for (gru, proj) in [(&level.key_gru, &level.key_proj), (&level.val_gru, &level.val_proj)] {
                let run = gru.run(g, p, &xs, &masks, None)?;
                let states = match self.config.granularity {
                    Granularity::Sentence => run.last,
                    Granularity::Token => {
                        let all = g.concat(&run.hiddens)?;
                        g.reshape(all, &[rows * t_max, hd])?
                    }
                };
                let projected = proj.forward(g, p, states)?;
                kv.push(g.reshape(projected, &[b, keys, self.config.d_k])?);
            }
            out.push((kv[0], kv[1]));
        }
        Ok((out, key_mask, keys))
    }

    /// `(K_j, V_j)` of one manual at level `j` (1-based): `[S, d_k]` each.
    pub fn encode_text_level(&self, g: &mut Graph, p: Binder<'_>, manual: &TextManual, level: usize) -> Result<(Var, Var)> {
        self.check_level(level)?;
        let (kvs, _, keys) = self.encode_text_batched(g, p, &[manual])?;
        let (k, v) = kvs[level - 1];
        let d = self.config.d_k;
        Ok((g.reshape(k, &[keys, d])?, g.reshape(v, &[keys, d])?))
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level == 0 || level > self.config.m {
            return Err(Error::Usage(format!("level {level} outside 1..={}", self.config.m)));
        }
        Ok(())
    }

    /// Encodes every level for a batch of episodes. `noise` (`[B, n, m·d_c]`)
    /// selects train mode (`c = μ + σ ⊙ ε`); `None` selects evaluation
    /// mode (`c = μ`).
    pub fn encode(&self, g: &mut Graph, p: Binder<'_>, episodes: &[EpisodeInput], noise: Option<&Tensor>) -> Result<ConceptSet> {
        self.encode_levels(g, p, episodes, noise, self.config.m)
    }

    /// Like [`Encoder::encode`] but stops after `upto` levels.
    pub fn encode_levels(
        &self,
        g: &mut Graph,
        p: Binder<'_>,
        episodes: &[EpisodeInput],
        noise: Option<&Tensor>,
        upto: usize,
    ) -> Result<ConceptSet> {
        self.check_level(upto)?;
        if episodes.is_empty() {
            return Err(Error::Invalid("encoder called on an empty batch".into()));
        }
        let c = &self.config;
        let b = episodes.len();
        let n = episodes.iter().map(|e| e.entities.len()).max().unwrap_or(0);
        if n == 0 {
            return Err(Error::Invalid("episode has no entities".into()));
        }
        if let Some(eps) = noise {
            if eps.shape() != [b, n, c.concept_width()] {
                return Err(Error::Dimension {
                    op: "encode",
                    lhs: eps.shape().to_vec(),
                    rhs: vec![b, n, c.concept_width()],
                });
            }
        }
        let slot_mask: Vec<Vec<bool>> = episodes
            .iter()
            .map(|e| (0..n).map(|i| i < e.entities.len()).collect())
            .collect();

        let e_flat = self.embed_entities_batched(g, p, episodes, n)?;
        let e3 = g.reshape(e_flat, &[b, n, c.d_e])?;
        let manuals: Vec<&TextManual> = episodes.iter().map(|e| &e.manual).collect();
        let (kvs, key_mask, keys) = self.encode_text_batched(g, p, &manuals)?;
        let text_mask = {
            let mut data = Vec::with_capacity(b * n * keys);
            for bi in 0..b {
                for _ in 0..n {
                    data.extend_from_slice(&key_mask[bi * keys..(bi + 1) * keys]);
                }
            }
            g.constant(Tensor::new(&[b, n, keys], data)?)
        };
        let slot_attn_mask = if slot_mask.iter().all(|r| r.iter().all(|&x| x)) {
            None
        } else {
            let mut data = Vec::with_capacity(b * n * n);
            for row in &slot_mask {
                for _ in 0..n {
                    data.extend(row.iter().map(|&ok| if ok { 0.0 } else { MASKED }));
                }
            }
            Some(g.constant(Tensor::new(&[b, n, n], data)?))
        };

        let mut levels = Vec::with_capacity(upto);
        let mut concepts: Vec<Var> = Vec::with_capacity(upto);
        for (j, level) in self.levels.iter().take(upto).enumerate() {
            let q = match &level.query {
                Query::Mlp(mlp) => {
                    let q = mlp.forward(g, p, e_flat)?;
                    g.reshape(q, &[b, n, c.d_k])?
                }
                Query::SelfAttention(sa) => {
                    let mut parts = vec![e3];
                    parts.extend_from_slice(&concepts);
                    let items = g.concat(&parts)?;
                    sa.forward_batched(g, p, items, slot_attn_mask)?
                }
            };
            let (k, v) = kvs[j];
            let (context, _) = attention(g, q, k, v, Some(text_mask))?;
            let eps_j = noise.map(|eps| level_noise(eps, j, c.d_c)).transpose()?;
            let (concept, mu, sigma) = self.ib_head(g, p, context, j + 1, eps_j.as_ref())?;
            concepts.push(concept);
            levels.push(LevelOutput {
                context,
                mu,
                sigma,
                concept,
            });
        }
        let all = if concepts.len() == 1 {
            concepts[0]
        } else {
            g.concat(&concepts)?
        };
        Ok(ConceptSet {
            batch: b,
            slots: n,
            entities: e3,
            concepts: all,
            levels,
            slot_mask,
        })
    }

    /// Bottleneck head of level `j` (1-based) on contexts `[.., d_k]`:
    /// returns `(c, μ, σ)`. `eps` of the same shape as μ selects train
    /// mode.
    pub fn ib_head(&self, g: &mut Graph, p: Binder<'_>, context: Var, level: usize, eps: Option<&Tensor>) -> Result<(Var, Var, Var)> {
        self.check_level(level)?;
        let lv = &self.levels[level - 1];
        let mu = lv.mu.forward(g, p, context)?;
        let raw = lv.sigma.forward(g, p, context)?;
        let sigma = positive_scale(g, raw)?;
        let c = match eps {
            None => mu,
            Some(t) => crate::diffcore::reparameterize(g, mu, sigma, crate::diffcore::Noise::Fixed(t))?,
        };
        Ok((c, mu, sigma))
    }

    /// Concept grid and carried-item feature for each referenced
    /// observation. Entity cells hold the entity's concatenated concepts,
    /// the agent's cell holds the learned marker, all other cells are zero.
    pub fn concept_observation(
        &self,
        g: &mut Graph,
        p: Binder<'_>,
        set: &ConceptSet,
        observations: &[ObservationRef<'_>],
    ) -> Result<ConceptObservation> {
        self.assemble_observation(g, p, set.concepts, set.batch, set.slots, observations)
    }

    /// [`Encoder::concept_observation`] over a raw `[batch, slots, m·d_c]`
    /// concept tensor.
    pub fn assemble_observation(
        &self,
        g: &mut Graph,
        p: Binder<'_>,
        concepts: Var,
        batch: usize,
        slots: usize,
        observations: &[ObservationRef<'_>],
    ) -> Result<ConceptObservation> {
        let set = SetShape { concepts, batch, slots };
        let first = observations
            .first()
            .ok_or_else(|| Error::Invalid("no observations to encode".into()))?
            .observation;
        let (h, w) = (first.height, first.width);
        let width = self.config.concept_width();
        let flat = g.reshape(set.concepts, &[set.batch * set.slots, width])?;
        let mut cell_idx = Vec::with_capacity(observations.len() * h * w);
        let mut agent_idx = Vec::with_capacity(observations.len() * h * w);
        let mut carried = Vec::with_capacity(observations.len());
        for r in observations {
            let o = r.observation;
            if o.height != h || o.width != w || r.episode >= set.batch {
                return Err(Error::Invalid("observation batch is inconsistent".into()));
            }
            let base = r.episode * set.slots;
            let mut cells = vec![None; h * w];
            for (slot, e) in o.entities.iter().enumerate() {
                if let Some(pos) = e.pos {
                    cells[pos.row * w + pos.col] = Some(base + slot);
                }
            }
            let agent_cell = o.agent.row * w + o.agent.col;
            cells[agent_cell] = None;
            cell_idx.extend(cells);
            agent_idx.extend((0..h * w).map(|i| (i == agent_cell).then_some(0)));
            carried.push(o.inventory.map(|slot| base + slot));
        }
        let entity_grid = g.gather_rows(flat, cell_idx)?;
        let marker = p.bind(g, self.agent_marker);
        let marker = g.reshape(marker, &[1, width])?;
        let agent_grid = g.gather_rows(marker, agent_idx)?;
        let grid = g.add(entity_grid, agent_grid)?;
        let grid = g.reshape(grid, &[observations.len(), h, w, width])?;
        let global = g.gather_rows(flat, carried)?;
        Ok(ConceptObservation { grid, global })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvConfig, RtfmConfig, Vocab};

    fn setup(config: EncoderConfig) -> (ParameterStore, Encoder, crate::env::Env, Vocab) {
        let env_cfg = EnvConfig::Rtfm(RtfmConfig::default());
        let vocab = env_cfg.vocab();
        let mut store = ParameterStore::new();
        let enc = Encoder::new(&mut store, config, vocab.len(), &mut Rng::new(1)).unwrap();
        (store, enc, env_cfg.make(3).unwrap(), vocab)
    }

    fn input(env: &crate::env::Env) -> EpisodeInput {
        EpisodeInput::from_observation(&env.observe(), env.manual())
    }

    #[test]
    fn concept_shapes() {
        let (store, enc, env, _) = setup(EncoderConfig::default());
        let mut g = Graph::new();
        let set = enc.encode(&mut g, Binder::trainable(&store), &[input(&env)], None).unwrap();
        assert_eq!(g.shape(set.concepts), &[1, 4, 32]);
        for l in &set.levels {
            assert!(g.value(l.sigma).data().iter().all(|&s| s > 0.0));
        }
    }

    #[test]
    fn eval_mode_is_deterministic_and_train_mode_zero_noise_is_mean() {
        let (store, enc, env, _) = setup(EncoderConfig::default());
        let run = |noise: Option<&Tensor>| {
            let mut g = Graph::new();
            let set = enc.encode(&mut g, Binder::trainable(&store), &[input(&env)], noise).unwrap();
            g.value(set.concepts).clone()
        };
        assert_eq!(run(None), run(None));
        let zeros = Tensor::zeros(&[1, 4, 32]);
        assert_eq!(run(Some(&zeros)), run(None));
        let noisy = enc.sample_noise(1, 4, &mut Rng::new(0));
        assert_ne!(run(Some(&noisy)), run(None));
    }

    #[test]
    fn batching_matches_single_episodes() {
        let (store, enc, _, _) = setup(EncoderConfig::default());
        let cfg = EnvConfig::Rtfm(RtfmConfig::default());
        let eps: Vec<EpisodeInput> = (0..3).map(|s| input(&cfg.make(s).unwrap())).collect();
        let mut g = Graph::new();
        let batched = enc.encode(&mut g, Binder::trainable(&store), &eps, None).unwrap();
        let all = g.value(batched.concepts).clone();
        for (i, ep) in eps.iter().enumerate() {
            let mut g1 = Graph::new();
            let one = enc.encode(&mut g1, Binder::trainable(&store), std::slice::from_ref(ep), None).unwrap();
            let v = g1.value(one.concepts).data();
            let chunk = &all.data()[i * v.len()..(i + 1) * v.len()];
            for (a, b) in v.iter().zip(chunk) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn entity_permutation_permutes_concepts() {
        let (store, enc, env, _) = setup(EncoderConfig::default());
        let ep = input(&env);
        let mut perm = ep.clone();
        perm.entities.reverse();
        let mut g = Graph::new();
        let a = enc.encode(&mut g, Binder::trainable(&store), &[ep, perm], None).unwrap();
        let v = g.value(a.concepts);
        let w = 32;
        for i in 0..4 {
            let x = &v.data()[i * w..(i + 1) * w];
            let y = &v.data()[(4 + 3 - i) * w..(4 + 4 - i) * w];
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn level_one_is_unaffected_by_later_levels() {
        let (store, enc, env, _) = setup(EncoderConfig {
            m: 3,
            ..EncoderConfig::default()
        });
        let mut g = Graph::new();
        let full = enc.encode(&mut g, Binder::trainable(&store), &[input(&env)], None).unwrap();
        let mut g1 = Graph::new();
        let first = enc.encode_levels(&mut g1, Binder::trainable(&store), &[input(&env)], None, 1).unwrap();
        assert_eq!(g.value(full.levels[0].concept), g1.value(first.levels[0].concept));
        assert!(enc.encode_levels(&mut g1, Binder::trainable(&store), &[input(&env)], None, 4).is_err());
    }

    #[test]
    fn single_sentence_gives_value_row() {
        let (store, enc, env, vocab) = setup(EncoderConfig::default());
        let manual = TextManual::from_sentences(&vocab, &["defeat the star alliance".to_string()]).unwrap();
        let ep = EpisodeInput {
            entities: input(&env).entities,
            manual: manual.clone(),
        };
        let mut g = Graph::new();
        let p = Binder::trainable(&store);
        let set = enc.encode(&mut g, p, &[ep], None).unwrap();
        let (_, v) = enc.encode_text_level(&mut g, p, &manual, 1).unwrap();
        let v0 = g.value(v).row(0).to_vec();
        let ctx = g.value(set.levels[0].context);
        for i in 0..4 {
            for (a, b) in ctx.row(i).iter().zip(&v0) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sentence_permutation_permutes_keys() {
        let (store, enc, env, vocab) = setup(EncoderConfig::default());
        let sentences = env.manual().sentences(&vocab);
        let mut rev = sentences.clone();
        rev.reverse();
        let m1 = TextManual::from_sentences(&vocab, &sentences).unwrap();
        let m2 = TextManual::from_sentences(&vocab, &rev).unwrap();
        let mut g = Graph::new();
        let p = Binder::trainable(&store);
        let (k1, _) = enc.encode_text_level(&mut g, p, &m1, 2).unwrap();
        let (k2, _) = enc.encode_text_level(&mut g, p, &m2, 2).unwrap();
        let n = sentences.len();
        for i in 0..n {
            assert_eq!(g.value(k1).row(i), g.value(k2).row(n - 1 - i));
        }
    }

    #[test]
    fn token_granularity_runs() {
        let (store, enc, env, _) = setup(EncoderConfig {
            granularity: Granularity::Token,
            ..EncoderConfig::default()
        });
        let mut g = Graph::new();
        let set = enc.encode(&mut g, Binder::trainable(&store), &[input(&env)], None).unwrap();
        assert_eq!(g.shape(set.concepts), &[1, 4, 32]);
    }

    #[test]
    fn sigma_floor_holds() {
        let (store, enc, _, _) = setup(EncoderConfig::default());
        let mut g = Graph::new();
        let p = Binder::trainable(&store);
        // A huge negative context drives the raw sigma far below zero for
        // some units; every scale stays above the floor regardless.
        let ctx = g.constant(Tensor::full(&[1, 32], -1e6));
        let (_, _, sigma) = enc.ib_head(&mut g, p, ctx, 1, None).unwrap();
        assert!(g.value(sigma).data().iter().all(|&s| s >= 1e-4));
    }

    #[test]
    fn concept_grid_layout() {
        let (store, enc, env, _) = setup(EncoderConfig::default());
        let obs = env.observe();
        let mut g = Graph::new();
        let p = Binder::trainable(&store);
        let set = enc.encode(&mut g, p, &[input(&env)], None).unwrap();
        let co = enc
            .concept_observation(&mut g, p, &set, &[ObservationRef { episode: 0, observation: &obs }])
            .unwrap();
        let grid = g.value(co.grid);
        let w = obs.width;
        let concepts = g.value(set.concepts).clone();
        for r in 0..obs.height {
            for col in 0..w {
                let cell = &grid.data()[(r * w + col) * 32..(r * w + col + 1) * 32];
                let pos = crate::env::Pos::new(r, col);
                if pos == obs.agent {
                    assert_eq!(cell, store.value(enc.agent_marker).data());
                } else if let Some(e) = obs.entities.iter().find(|e| e.pos == Some(pos)) {
                    assert_eq!(cell, concepts.row(e.id));
                } else {
                    assert!(cell.iter().all(|&v| v == 0.0));
                }
            }
        }
        assert!(g.value(co.global).data().iter().all(|&v| v == 0.0));
    }
}
