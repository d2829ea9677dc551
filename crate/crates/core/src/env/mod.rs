//! Language-conditioned grid worlds.
//!
//! Both simulators share the observation, manual and step-result types
//! defined here. Entities are named by a short list of word ids; the agent
//! must read a per-episode manual to learn which entity plays which role.

pub mod messenger;
pub mod replay;
pub mod rtfm;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::diffcore::Rng;
use crate::error::{Error, Result};

pub use messenger::{MessengerConfig, MessengerEnv, Split, Stage};
pub use rtfm::{RtfmConfig, RtfmEnv};

pub const PAD: u32 = 0;
/// Words per entity name.
pub const WORDS_PER_CELL: usize = 2;
pub const NUM_SENT: usize = 8;
pub const SENT_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Stay];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Action> {
        Action::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Usage(format!("action index {i} out of range")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub row: usize,
    pub col: usize,
}

impl Pos {
    pub fn new(row: usize, col: usize) -> Self {
        Pos { row, col }
    }

    pub fn manhattan(self, other: Pos) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }

    /// Neighbour in direction `a`, or `None` when it would leave an
    /// `h × w` grid. `Stay` returns `self`.
    pub fn step(self, a: Action, h: usize, w: usize) -> Option<Pos> {
        match a {
            Action::Up if self.row > 0 => Some(Pos::new(self.row - 1, self.col)),
            Action::Down if self.row + 1 < h => Some(Pos::new(self.row + 1, self.col)),
            Action::Left if self.col > 0 => Some(Pos::new(self.row, self.col - 1)),
            Action::Right if self.col + 1 < w => Some(Pos::new(self.row, self.col + 1)),
            Action::Stay => Some(self),
            _ => None,
        }
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.row, self.col)
    }
}

/// `k` distinct cells of an `h × w` grid.
pub(crate) fn distinct_cells(rng: &mut Rng, h: usize, w: usize, k: usize) -> Vec<Pos> {
    rng.sample_indices(h * w, k)
        .into_iter()
        .map(|i| Pos::new(i / w, i % w))
        .collect()
}

/// Word list with id 0 reserved for padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab {
            words: vec!["<pad>".to_string()],
            index: HashMap::from([("<pad>".to_string(), PAD)]),
        };
        for w in words {
            for tok in w.as_ref().split_whitespace() {
                if !v.index.contains_key(tok) {
                    v.index.insert(tok.to_string(), v.words.len() as u32);
                    v.words.push(tok.to_string());
                }
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 1
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Invalid(format!("word {w:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD)
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Name words padded to [`WORDS_PER_CELL`].
    pub fn name(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = self.encode(text)?;
        if ids.is_empty() || ids.len() > WORDS_PER_CELL {
            return Err(Error::Config(format!(
                "entity name {text:?} must have 1..={WORDS_PER_CELL} words"
            )));
        }
        ids.resize(WORDS_PER_CELL, PAD);
        Ok(ids)
    }
}

/// Per-episode text: `NUM_SENT` sentences of `SENT_LEN` token ids, padded
/// with [`PAD`]. Unused sentence slots have length 0.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextManual {
    pub tokens: Vec<Vec<u32>>,
    pub lengths: Vec<usize>,
}

impl TextManual {
    pub fn from_sentences(vocab: &Vocab, sentences: &[String]) -> Result<Self> {
        if sentences.len() > NUM_SENT {
            return Err(Error::Invalid(format!(
                "{} sentences exceed the manual size {NUM_SENT}",
                sentences.len()
            )));
        }
        let mut tokens = Vec::with_capacity(NUM_SENT);
        let mut lengths = Vec::with_capacity(NUM_SENT);
        for s in sentences {
            let mut ids = vocab.encode(s)?;
            if ids.len() > SENT_LEN {
                return Err(Error::Invalid(format!("sentence too long: {s:?}")));
            }
            lengths.push(ids.len());
            ids.resize(SENT_LEN, PAD);
            tokens.push(ids);
        }
        while tokens.len() < NUM_SENT {
            tokens.push(vec![PAD; SENT_LEN]);
            lengths.push(0);
        }
        Ok(TextManual { tokens, lengths })
    }

    pub fn num_sentences(&self) -> usize {
        self.lengths.iter().filter(|&&l| l > 0).count()
    }

    pub fn sentences(&self, vocab: &Vocab) -> Vec<String> {
        self.tokens
            .iter()
            .zip(&self.lengths)
            .filter(|(_, &l)| l > 0)
            .map(|(t, &l)| vocab.decode(&t[..l]))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityView {
    pub id: usize,
    pub words: Vec<u32>,
    /// `None` when carried or removed from the board.
    pub pos: Option<Pos>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldObservation {
    pub height: usize,
    pub width: usize,
    /// Row-major `h·w` cells, each [`WORDS_PER_CELL`] word ids.
    pub grid: Vec<Vec<u32>>,
    pub agent: Pos,
    /// Roster id of the carried item (the message source in Messenger).
    pub inventory: Option<usize>,
    /// Every entity of the episode, on the board or not.
    pub entities: Vec<EntityView>,
}

impl WorldObservation {
    pub(crate) fn build(
        height: usize,
        width: usize,
        agent: Pos,
        agent_words: &[u32],
        inventory: Option<usize>,
        entities: Vec<EntityView>,
    ) -> Self {
        let mut grid = vec![vec![PAD; WORDS_PER_CELL]; height * width];
        for e in &entities {
            if let Some(p) = e.pos {
                grid[p.row * width + p.col] = e.words.clone();
            }
        }
        grid[agent.row * width + agent.col] = agent_words.to_vec();
        WorldObservation {
            height,
            width,
            grid,
            agent,
            inventory,
            entities,
        }
    }

    pub fn cell(&self, p: Pos) -> &[u32] {
        &self.grid[p.row * self.width + p.col]
    }

    pub fn on_board(&self) -> impl Iterator<Item = &EntityView> {
        self.entities.iter().filter(|e| e.pos.is_some())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub observation: WorldObservation,
    pub reward: f64,
    pub done: bool,
    pub truncated: bool,
}

impl StepResult {
    pub fn finished(&self) -> bool {
        self.done || self.truncated
    }

    /// Success terminal: the +1 reward that ends an episode.
    pub fn is_win(&self) -> bool {
        self.done && self.reward >= 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvKind {
    Rtfm,
    Messenger,
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rtfm" => Ok(EnvKind::Rtfm),
            "messenger" => Ok(EnvKind::Messenger),
            _ => Err(Error::Config(format!("unknown env {s:?} (expected rtfm|messenger)"))),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::Rtfm => "rtfm",
            EnvKind::Messenger => "messenger",
        })
    }
}

/// Configuration of either simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EnvConfig {
    Rtfm(RtfmConfig),
    Messenger(MessengerConfig),
}

impl EnvConfig {
    pub fn kind(&self) -> EnvKind {
        match self {
            EnvConfig::Rtfm(_) => EnvKind::Rtfm,
            EnvConfig::Messenger(_) => EnvKind::Messenger,
        }
    }

    pub fn vocab(&self) -> Vocab {
        match self {
            EnvConfig::Rtfm(c) => c.vocab(),
            EnvConfig::Messenger(c) => c.vocab(),
        }
    }

    pub fn height(&self) -> usize {
        match self {
            EnvConfig::Rtfm(c) => c.height,
            EnvConfig::Messenger(c) => c.height,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            EnvConfig::Rtfm(c) => c.width,
            EnvConfig::Messenger(c) => c.width,
        }
    }

    /// Upper bound on the roster size.
    pub fn max_entities(&self) -> usize {
        match self {
            EnvConfig::Rtfm(_) => rtfm::NUM_ENTITIES,
            EnvConfig::Messenger(_) => messenger::MAX_ENTITIES,
        }
    }

    pub fn make(&self, seed: u64) -> Result<Env> {
        Ok(match self {
            EnvConfig::Rtfm(c) => Env::Rtfm(RtfmEnv::reset(c.clone(), seed)?),
            EnvConfig::Messenger(c) => Env::Messenger(MessengerEnv::reset(c.clone(), seed)?),
        })
    }
}

/// A running episode of either simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Env {
    Rtfm(RtfmEnv),
    Messenger(MessengerEnv),
}

impl Env {
    pub fn observe(&self) -> WorldObservation {
        match self {
            Env::Rtfm(e) => e.observe(),
            Env::Messenger(e) => e.observe(),
        }
    }

    pub fn manual(&self) -> &TextManual {
        match self {
            Env::Rtfm(e) => e.manual(),
            Env::Messenger(e) => e.manual(),
        }
    }

    pub fn step(&mut self, a: Action) -> Result<StepResult> {
        match self {
            Env::Rtfm(e) => e.step(a),
            Env::Messenger(e) => e.step(a),
        }
    }

    pub fn is_over(&self) -> bool {
        match self {
            Env::Rtfm(e) => e.is_over(),
            Env::Messenger(e) => e.is_over(),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Env::Rtfm(e) => e.seed(),
            Env::Messenger(e) => e.seed(),
        }
    }

    /// Evaluation-only labels per roster entity.
    pub fn ground_truth_labels(&self) -> Vec<String> {
        match self {
            Env::Rtfm(e) => e
                .ground_truth_concepts()
                .iter()
                .map(|l| l.to_string())
                .collect(),
            Env::Messenger(e) => e
                .ground_truth_roles()
                .iter()
                .map(|r| r.to_string())
                .collect(),
        }
    }

    pub fn oracle_solve(&self) -> Option<Vec<Action>> {
        match self {
            Env::Rtfm(e) => e.oracle_solve(),
            Env::Messenger(e) => e.oracle_solve(),
        }
    }

    pub fn replay_text(&self) -> String {
        match self {
            Env::Rtfm(e) => e.to_replay(),
            Env::Messenger(e) => e.to_replay(),
        }
    }
}
