//! Messenger-mini: fetch a message from the sender and bring it to the
//! receiver, avoiding decoys, on a 10×10 board with moving entities.
//!
//! Each entity name may play only some roles in training episodes and a
//! disjoint set of roles in test episodes, so a policy that memorises
//! name→role pairs fails on the test split.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::replay::{parse_pos, Record};
use super::{distinct_cells, Action, EntityView, Pos, StepResult, TextManual, Vocab, WorldObservation};
use crate::diffcore::Rng;
use crate::error::{Error, Result};

pub const MAX_ENTITIES: usize = 4;
pub const MIN_NAMES: usize = 6;
pub const ACQUIRE_REWARD: f64 = 0.5;
/// Mobile entities move on every `ENTITY_PERIOD`-th step, which keeps a
/// fleeing sender catchable.
pub const ENTITY_PERIOD: usize = 2;

const SPLIT_STREAM: u64 = 1;
const LAYOUT_STREAM: u64 = 2;
const MANUAL_STREAM: u64 = 3;
const MAX_LAYOUT_ATTEMPTS: usize = 1000;
pub const ORACLE_NODE_LIMIT: usize = 200_000;

const SENDER_TEMPLATES: [&str; 3] = [
    "the {ref} has the message",
    "get the message from the {ref}",
    "the {ref} holds a secret document",
];
const RECEIVER_TEMPLATES: [&str; 3] = [
    "the {ref} is the goal",
    "deliver the message to the {ref}",
    "the {ref} awaits the message",
];
const DECOY_TEMPLATES: [&str; 3] = ["the {ref} is deadly", "the {ref} is an enemy", "avoid the dangerous {ref}"];
const DESCRIPTOR_TEMPLATE: &str = "the thing that is {desc} is the {name} who {clause}";
const FACTS: [&str; 4] = [
    "the sky is grey today",
    "messages are written on old paper",
    "the board has four walls",
    "nobody remembers who built this place",
];
const GLUE_WORDS: &str = "agent immobile approaching fleeing not able to move chasing you running away \
                          who has is the goal deadly";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Sender,
    Receiver,
    Decoy,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Sender, Role::Receiver, Role::Decoy];
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Sender => "sender",
            Role::Receiver => "receiver",
            Role::Decoy => "decoy",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sender" => Ok(Role::Sender),
            "receiver" => Ok(Role::Receiver),
            "decoy" => Ok(Role::Decoy),
            _ => Err(Error::Invalid(format!("unknown role {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Movement {
    Stationary,
    Chaser,
    Fleeing,
}

impl Movement {
    pub const ALL: [Movement; 3] = [Movement::Stationary, Movement::Chaser, Movement::Fleeing];

    fn adjective(self) -> &'static str {
        match self {
            Movement::Stationary => "immobile",
            Movement::Chaser => "approaching",
            Movement::Fleeing => "fleeing",
        }
    }

    fn descriptor(self) -> &'static str {
        match self {
            Movement::Stationary => "not able to move",
            Movement::Chaser => "chasing you",
            Movement::Fleeing => "running away",
        }
    }
}

impl fmt::Display for Movement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Movement::Stationary => "stationary",
            Movement::Chaser => "chaser",
            Movement::Fleeing => "fleeing",
        })
    }
}

impl FromStr for Movement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stationary" => Ok(Movement::Stationary),
            "chaser" => Ok(Movement::Chaser),
            "fleeing" => Ok(Movement::Fleeing),
            _ => Err(Error::Invalid(format!("unknown movement {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    S1,
    S2,
    S3,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" | "1" => Ok(Stage::S1),
            "s2" | "2" => Ok(Stage::S2),
            "s3" | "3" => Ok(Stage::S3),
            _ => Err(Error::Config(format!("unknown stage {s:?} (expected s1|s2|s3)"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::S1 => "s1",
            Stage::S2 => "s2",
            Stage::S3 => "s3",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (expected train|test)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessengerConfig {
    pub height: usize,
    pub width: usize,
    pub stage: Stage,
    pub max_steps: usize,
    pub names: Vec<String>,
    pub split: Split,
    /// Seed of the name→role split, shared by train and test configs.
    pub split_seed: u64,
}

impl Default for MessengerConfig {
    fn default() -> Self {
        MessengerConfig {
            height: 10,
            width: 10,
            stage: Stage::S1,
            max_steps: 64,
            names: [
                "mage", "dog", "bird", "thief", "queen", "plane", "robot", "knight", "whale", "ferry", "orb", "ship",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            split: Split::Train,
            split_seed: 0,
        }
    }
}

impl MessengerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config(format!(
                "messenger grid must be at least 4x4, got {}x{}",
                self.height, self.width
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("messenger max_steps must be positive".into()));
        }
        let mut seen = HashSet::new();
        for n in &self.names {
            if n.split_whitespace().count() != 1 {
                return Err(Error::Config(format!("messenger name {n:?} must be a single word")));
            }
            if !seen.insert(n) {
                return Err(Error::Config(format!("duplicate messenger name {n:?}")));
            }
        }
        make_ood_split(&self.names, &mut Rng::new(self.split_seed).split(SPLIT_STREAM)).map(|_| ())
    }

    pub fn vocab(&self) -> Vocab {
        let templates = SENDER_TEMPLATES
            .iter()
            .chain(&RECEIVER_TEMPLATES)
            .chain(&DECOY_TEMPLATES)
            .chain(std::iter::once(&DESCRIPTOR_TEMPLATE))
            .map(|t| t.replace(['{', '}'], " "));
        Vocab::new(
            std::iter::once(GLUE_WORDS.to_string())
                .chain(templates)
                .chain(FACTS.iter().map(|s| s.to_string()))
                .chain(self.names.iter().cloned()),
        )
    }

    pub fn ood_split(&self) -> Result<OodSplit> {
        make_ood_split(&self.names, &mut Rng::new(self.split_seed).split(SPLIT_STREAM))
    }
}

/// Allowed (name, role) pairs for each split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OodSplit {
    pub train: HashSet<(String, Role)>,
    pub test: HashSet<(String, Role)>,
}

impl OodSplit {
    pub fn pairs(&self, split: Split) -> &HashSet<(String, Role)> {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Names allowed to play `role` in `split`, in a fixed order.
    pub fn names_for(&self, split: Split, role: Role) -> Vec<String> {
        let mut v: Vec<String> = self
            .pairs(split)
            .iter()
            .filter(|(_, r)| *r == role)
            .map(|(n, _)| n.clone())
            .collect();
        v.sort();
        v
    }
}

/// After shuffling, name k plays role k mod 3 in test and the other two
/// roles in train.
pub fn make_ood_split(names: &[String], rng: &mut Rng) -> Result<OodSplit> {
    if names.len() < MIN_NAMES {
        return Err(Error::Config(format!(
            "messenger needs at least {MIN_NAMES} entity names, got {}",
            names.len()
        )));
    }
    let mut order = names.to_vec();
    rng.shuffle(&mut order);
    let mut split = OodSplit {
        train: HashSet::new(),
        test: HashSet::new(),
    };
    for (k, name) in order.into_iter().enumerate() {
        for (r, role) in Role::ALL.into_iter().enumerate() {
            if r == k % 3 {
                split.test.insert((name.clone(), role));
            } else {
                split.train.insert((name.clone(), role));
            }
        }
    }
    Ok(split)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessengerEntity {
    pub name: String,
    pub role: Role,
    pub movement: Movement,
}

/// Sampled episode. Roster order is shuffled so that slot index carries
/// no role information.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleAssignment {
    pub entities: Vec<MessengerEntity>,
    pub positions: Vec<Pos>,
    pub agent: Pos,
    /// Message held at the start (the S1 delivering sub-task).
    pub holding: bool,
    /// Extra sentences that do not describe an on-board entity.
    pub irrelevant: Vec<String>,
}

impl RoleAssignment {
    pub fn index_of(&self, role: Role) -> Option<usize> {
        self.entities.iter().position(|e| e.role == role)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MessengerState {
    pub agent: Pos,
    /// `None` once removed from the board.
    pub positions: Vec<Option<Pos>>,
    pub holding: bool,
    pub steps: usize,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessengerEnv {
    config: MessengerConfig,
    seed: u64,
    assignment: RoleAssignment,
    manual: TextManual,
    names: Vec<Vec<u32>>,
    agent_words: Vec<u32>,
    state: MessengerState,
}

fn role_sentence(e: &MessengerEntity, rng: &mut Rng) -> String {
    let family = rng.below(4);
    if family == 3 {
        let clause = match e.role {
            Role::Sender => "has the message",
            Role::Receiver => "is the goal",
            Role::Decoy => "is deadly",
        };
        return DESCRIPTOR_TEMPLATE
            .replace("{desc}", e.movement.descriptor())
            .replace("{name}", &e.name)
            .replace("{clause}", clause);
    }
    let templates = match e.role {
        Role::Sender => &SENDER_TEMPLATES,
        Role::Receiver => &RECEIVER_TEMPLATES,
        Role::Decoy => &DECOY_TEMPLATES,
    };
    let reference = if rng.coin() {
        format!("{} {}", e.movement.adjective(), e.name)
    } else {
        e.name.clone()
    };
    templates[family].replace("{ref}", &reference)
}

/// One role sentence per on-board entity plus any irrelevant sentences,
/// shuffled.
pub fn manual_sentences(assignment: &RoleAssignment, rng: &mut Rng) -> Vec<String> {
    let mut out: Vec<String> = assignment.entities.iter().map(|e| role_sentence(e, rng)).collect();
    out.extend(assignment.irrelevant.iter().cloned());
    rng.shuffle(&mut out);
    out
}

pub fn generate_manual(config: &MessengerConfig, assignment: &RoleAssignment, rng: &mut Rng) -> Result<TextManual> {
    TextManual::from_sentences(&config.vocab(), &manual_sentences(assignment, rng))
}

/// Keyword parser that recovers each named entity's role from manual
/// sentences. Sentences naming none of `names` are ignored.
pub fn parse_roles(sentences: &[String], names: &[String]) -> HashMap<String, Role> {
    let mut out = HashMap::new();
    for s in sentences {
        let words: Vec<&str> = s.split_whitespace().collect();
        let Some(name) = names.iter().find(|n| words.contains(&n.as_str())) else {
            continue;
        };
        let has = |ks: &[&str]| ks.iter().any(|k| words.contains(k));
        let role = if has(&["deadly", "enemy", "dangerous"]) {
            Role::Decoy
        } else if has(&["goal", "deliver", "awaits"]) {
            Role::Receiver
        } else {
            Role::Sender
        };
        out.insert(name.clone(), role);
    }
    out
}

fn sample_assignment(config: &MessengerConfig, split: &OodSplit, rng: &mut Rng) -> RoleAssignment {
    let mut used: Vec<String> = Vec::new();
    let pick = |role: Role, rng: &mut Rng, used: &mut Vec<String>| {
        let pool: Vec<String> = split
            .names_for(config.split, role)
            .into_iter()
            .filter(|n| !used.contains(n))
            .collect();
        let name = rng.choose(&pool).clone();
        used.push(name.clone());
        MessengerEntity {
            name,
            role,
            movement: *rng.choose(&Movement::ALL),
        }
    };
    let mut entities = vec![
        pick(Role::Sender, rng, &mut used),
        pick(Role::Receiver, rng, &mut used),
    ];
    let mut holding = false;
    let mut irrelevant = Vec::new();
    match config.stage {
        Stage::S1 => holding = rng.coin(),
        Stage::S2 => {}
        Stage::S3 => {
            for _ in 0..1 + rng.below(2) {
                entities.push(pick(Role::Decoy, rng, &mut used));
            }
            for _ in 0..1 + rng.below(3) {
                let spare: Vec<&String> = config.names.iter().filter(|n| !used.contains(n)).collect();
                if rng.coin() && !spare.is_empty() {
                    let e = MessengerEntity {
                        name: rng.choose(&spare).to_string(),
                        role: *rng.choose(&Role::ALL),
                        movement: *rng.choose(&Movement::ALL),
                    };
                    irrelevant.push(role_sentence(&e, rng));
                } else {
                    irrelevant.push(rng.choose(&FACTS).to_string());
                }
            }
        }
    }
    rng.shuffle(&mut entities);
    let cells = distinct_cells(rng, config.height, config.width, entities.len() + 1);
    RoleAssignment {
        positions: cells[..entities.len()].to_vec(),
        agent: cells[entities.len()],
        entities,
        holding,
        irrelevant,
    }
}

struct Outcome {
    reward: f64,
    done: bool,
    truncated: bool,
}

impl MessengerEnv {
    /// Starts the episode determined by `(config, seed)`; layouts are
    /// resampled until the oracle finds a winning plan.
    pub fn reset(config: MessengerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let split = config.ood_split()?;
        let root = Rng::new(seed);
        let mut layout = root.split(LAYOUT_STREAM);
        let mut manual_rng = root.split(MANUAL_STREAM);
        for _ in 0..MAX_LAYOUT_ATTEMPTS {
            let assignment = sample_assignment(&config, &split, &mut layout);
            let env = Self::from_assignment(config.clone(), seed, assignment, None)?;
            if env.oracle_solve().is_some() {
                let manual = generate_manual(&config, &env.assignment, &mut manual_rng)?;
                return Ok(MessengerEnv { manual, ..env });
            }
        }
        Err(Error::Config(format!(
            "no solvable messenger layout found for seed {seed} (grid too small or max_steps too low)"
        )))
    }

    /// Builds the initial state of `assignment`. A missing manual is left
    /// empty.
    pub fn from_assignment(
        config: MessengerConfig,
        seed: u64,
        assignment: RoleAssignment,
        manual: Option<TextManual>,
    ) -> Result<Self> {
        if assignment.entities.len() > MAX_ENTITIES || assignment.entities.len() != assignment.positions.len() {
            return Err(Error::Invalid("malformed messenger assignment".into()));
        }
        let vocab = config.vocab();
        let names = assignment
            .entities
            .iter()
            .map(|e| vocab.name(&e.name))
            .collect::<Result<Vec<_>>>()?;
        let agent_words = vocab.name("agent")?;
        let state = MessengerState {
            agent: assignment.agent,
            positions: assignment.positions.iter().map(|&p| Some(p)).collect(),
            holding: assignment.holding,
            steps: 0,
            done: false,
        };
        let manual = manual.unwrap_or(TextManual {
            tokens: vec![],
            lengths: vec![],
        });
        Ok(MessengerEnv {
            config,
            seed,
            assignment,
            manual,
            names,
            agent_words,
            state,
        })
    }

    pub fn config(&self) -> &MessengerConfig {
        &self.config
    }

    pub fn assignment(&self) -> &RoleAssignment {
        &self.assignment
    }

    pub fn state(&self) -> &MessengerState {
        &self.state
    }

    pub fn manual(&self) -> &TextManual {
        &self.manual
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_over(&self) -> bool {
        self.state.done
    }

    pub fn ground_truth_roles(&self) -> Vec<Role> {
        self.assignment.entities.iter().map(|e| e.role).collect()
    }

    pub fn observe(&self) -> WorldObservation {
        let entities = (0..self.assignment.entities.len())
            .map(|i| EntityView {
                id: i,
                words: self.names[i].clone(),
                pos: self.state.positions[i],
            })
            .collect();
        let inventory = if self.state.holding {
            self.assignment.index_of(Role::Sender)
        } else {
            None
        };
        WorldObservation::build(
            self.config.height,
            self.config.width,
            self.state.agent,
            &self.agent_words,
            inventory,
            entities,
        )
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        if self.state.done {
            return Err(Error::Usage("step called on a finished messenger episode".into()));
        }
        let (next, out) = self.transition(&self.state, action);
        self.state = next;
        Ok(StepResult {
            observation: self.observe(),
            reward: out.reward,
            done: out.done,
            truncated: out.truncated,
        })
    }

    /// Resolves contact with entity `i`; returns true when the episode ends.
    fn collide(&self, n: &mut MessengerState, i: usize, out: &mut Outcome) -> bool {
        let role = self.assignment.entities[i].role;
        let (reward, done) = match (role, n.holding) {
            (Role::Sender, false) if self.config.stage == Stage::S1 => (1.0, true),
            (Role::Sender, false) => {
                n.holding = true;
                n.positions[i] = None;
                (ACQUIRE_REWARD, false)
            }
            (Role::Sender, true) => (-1.0, true),
            (Role::Receiver, true) => (1.0, true),
            (Role::Receiver, false) | (Role::Decoy, _) => (-1.0, true),
        };
        out.reward += reward;
        if done {
            out.done = true;
            n.done = true;
        }
        done
    }

    fn contact(&self, n: &MessengerState) -> Option<usize> {
        n.positions.iter().position(|p| *p == Some(n.agent))
    }

    fn transition(&self, s: &MessengerState, action: Action) -> (MessengerState, Outcome) {
        let (h, w) = (self.config.height, self.config.width);
        let mut n = s.clone();
        n.steps += 1;
        let mut out = Outcome {
            reward: 0.0,
            done: false,
            truncated: false,
        };
        if let Some(p) = s.agent.step(action, h, w) {
            n.agent = p;
        }
        if let Some(i) = self.contact(&n) {
            if self.collide(&mut n, i, &mut out) {
                return (n, out);
            }
        }
        let entities_move = n.steps % ENTITY_PERIOD == 0;
        for i in 0..n.positions.len() {
            let Some(cur) = n.positions[i] else { continue };
            if !entities_move {
                break;
            }
            let movement = self.assignment.entities[i].movement;
            if movement == Movement::Stationary {
                continue;
            }
            let mut best: Option<(usize, Pos)> = None;
            for a in Action::ALL {
                let Some(p) = cur.step(a, h, w) else { continue };
                if p != cur && n.positions.iter().any(|q| *q == Some(p)) {
                    continue;
                }
                let d = p.manhattan(n.agent);
                let better = match (best, movement) {
                    (None, _) => true,
                    (Some((bd, _)), Movement::Chaser) => d < bd,
                    (Some((bd, _)), _) => d > bd,
                };
                if better {
                    best = Some((d, p));
                }
            }
            if let Some((_, p)) = best {
                n.positions[i] = Some(p);
            }
        }
        if let Some(i) = self.contact(&n) {
            if self.collide(&mut n, i, &mut out) {
                return (n, out);
            }
        }
        if n.steps >= self.config.max_steps {
            out.truncated = true;
            n.done = true;
        }
        (n, out)
    }

    /// A plan from the current state that ends with the +1 terminal, found
    /// by best-first search over (agent, entity positions, message flag).
    /// Entity motion is deterministic, so every plan replays exactly. The
    /// search gives up (returns `None`) after [`ORACLE_NODE_LIMIT`] states.
    pub fn oracle_solve(&self) -> Option<Vec<Action>> {
        if self.state.done {
            return None;
        }
        let key = |s: &MessengerState| (s.agent, s.positions.clone(), s.holding);
        let mut nodes: Vec<(MessengerState, usize, Action)> = vec![(self.state.clone(), usize::MAX, Action::Stay)];
        let mut seen = HashSet::new();
        seen.insert(key(&self.state));
        let mut frontier = BinaryHeap::new();
        frontier.push(Reverse((self.heuristic(&self.state), 0usize)));
        while let Some(Reverse((_, idx))) = frontier.pop() {
            let s = nodes[idx].0.clone();
            for a in Action::ALL {
                let (n, out) = self.transition(&s, a);
                if out.done && out.reward >= 1.0 {
                    let mut plan = vec![a];
                    let mut cur = idx;
                    while nodes[cur].1 != usize::MAX {
                        plan.push(nodes[cur].2);
                        cur = nodes[cur].1;
                    }
                    plan.reverse();
                    return Some(plan);
                }
                if n.done || !seen.insert(key(&n)) {
                    continue;
                }
                if nodes.len() >= ORACLE_NODE_LIMIT {
                    return None;
                }
                let f = 8 * self.heuristic(&n) + n.steps;
                nodes.push((n, idx, a));
                frontier.push(Reverse((f, nodes.len() - 1)));
            }
        }
        None
    }

    /// Distance still to cover: to the sender (unless the message is held
    /// or S1 only asks for acquisition), then on to the receiver.
    fn heuristic(&self, s: &MessengerState) -> usize {
        let at = |role: Role| self.assignment.index_of(role).and_then(|i| s.positions[i]);
        match (s.holding, at(Role::Sender), at(Role::Receiver)) {
            (false, Some(snd), _) if self.config.stage == Stage::S1 => s.agent.manhattan(snd),
            (false, Some(snd), Some(rcv)) => s.agent.manhattan(snd) + snd.manhattan(rcv),
            (_, _, Some(rcv)) => s.agent.manhattan(rcv),
            _ => 0,
        }
    }

    pub fn to_replay(&self) -> String {
        let a = &self.assignment;
        let mut r = Record::new();
        r.set("env", "messenger");
        r.set("seed", self.seed);
        r.set("stage", self.config.stage);
        r.set("split", self.config.split);
        r.set("split_seed", self.config.split_seed);
        r.set("height", self.config.height);
        r.set("width", self.config.width);
        r.set("max_steps", self.config.max_steps);
        r.set("holding", a.holding);
        r.set("agent", a.agent);
        for (i, e) in a.entities.iter().enumerate() {
            r.set(
                format!("entity.{i}"),
                format!("{};{};{};{}", e.name, e.role, e.movement, a.positions[i]),
            );
        }
        for (i, s) in a.irrelevant.iter().enumerate() {
            r.set(format!("irrelevant.{i}"), s);
        }
        let vocab = self.config.vocab();
        for (i, s) in self.manual.sentences(&vocab).iter().enumerate() {
            r.set(format!("manual.{i}"), s);
        }
        r.to_text()
    }

    /// Rebuilds the initial state of a recorded episode; `base` supplies
    /// the name list.
    pub fn from_replay(base: &MessengerConfig, text: &str) -> Result<Self> {
        let r = Record::from_text(text)?;
        if r.get("env")? != "messenger" {
            return Err(Error::Invalid("not a messenger replay".into()));
        }
        let config = MessengerConfig {
            height: r.parse("height")?,
            width: r.parse("width")?,
            stage: r.get("stage")?.parse()?,
            split: r.get("split")?.parse()?,
            split_seed: r.parse("split_seed")?,
            max_steps: r.parse("max_steps")?,
            ..base.clone()
        };
        let mut entities = Vec::new();
        let mut positions = Vec::new();
        for (k, v) in r.keys_with_prefix("entity.") {
            let f: Vec<&str> = v.split(';').collect();
            if f.len() != 4 {
                return Err(Error::Invalid(format!("{k} needs 4 fields")));
            }
            entities.push(MessengerEntity {
                name: f[0].into(),
                role: f[1].parse()?,
                movement: f[2].parse()?,
            });
            positions.push(parse_pos(f[3])?);
        }
        let assignment = RoleAssignment {
            entities,
            positions,
            agent: parse_pos(r.get("agent")?)?,
            holding: r.parse("holding")?,
            irrelevant: r.keys_with_prefix("irrelevant.").map(|(_, v)| v.to_string()).collect(),
        };
        let sentences: Vec<String> = r.keys_with_prefix("manual.").map(|(_, v)| v.to_string()).collect();
        let manual = TextManual::from_sentences(&config.vocab(), &sentences)?;
        Self::from_assignment(config, r.parse("seed")?, assignment, Some(manual))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(stage: Stage) -> MessengerConfig {
        MessengerConfig {
            stage,
            ..MessengerConfig::default()
        }
    }

    fn entity(name: &str, role: Role, movement: Movement) -> MessengerEntity {
        MessengerEntity {
            name: name.into(),
            role,
            movement,
        }
    }

    fn hand_built(stage: Stage, entities: Vec<MessengerEntity>, positions: Vec<Pos>, holding: bool) -> MessengerEnv {
        let assignment = RoleAssignment {
            entities,
            positions,
            agent: Pos::new(0, 0),
            holding,
            irrelevant: vec![],
        };
        MessengerEnv::from_assignment(cfg(stage), 0, assignment, None).unwrap()
    }

    #[test]
    fn latin_square_split_is_disjoint() {
        let names: Vec<String> = (0..6).map(|k| format!("n{k}")).collect();
        let mut train = HashSet::new();
        let mut test = HashSet::new();
        for (k, n) in names.iter().enumerate() {
            train.insert((n.clone(), Role::ALL[k % 3]));
            test.insert((n.clone(), Role::ALL[(k + 1) % 3]));
        }
        assert!(train.is_disjoint(&test));
        for role in Role::ALL {
            assert!(train.iter().filter(|(_, r)| *r == role).count() >= 2);
            assert!(test.iter().filter(|(_, r)| *r == role).count() >= 2);
        }
    }

    #[test]
    fn generated_split_properties() {
        let names = MessengerConfig::default().names;
        let a = make_ood_split(&names, &mut Rng::new(4)).unwrap();
        let b = make_ood_split(&names, &mut Rng::new(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.train.is_disjoint(&a.test));
        for role in Role::ALL {
            assert!(a.names_for(Split::Train, role).len() >= 2);
            assert!(a.names_for(Split::Test, role).len() >= 2);
        }
        assert!(matches!(
            make_ood_split(&names[..5], &mut Rng::new(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn reset_respects_split() {
        for split in [Split::Train, Split::Test] {
            let config = MessengerConfig {
                split,
                ..cfg(Stage::S3)
            };
            let ood = config.ood_split().unwrap();
            for seed in 0..100 {
                let e = MessengerEnv::reset(config.clone(), seed).unwrap();
                for ent in &e.assignment.entities {
                    assert!(ood.pairs(split).contains(&(ent.name.clone(), ent.role)));
                }
            }
        }
    }

    #[test]
    fn s1_delivering_win() {
        let mut e = hand_built(
            Stage::S1,
            vec![
                entity("mage", Role::Receiver, Movement::Stationary),
                entity("dog", Role::Sender, Movement::Stationary),
            ],
            vec![Pos::new(0, 1), Pos::new(5, 5)],
            true,
        );
        let r = e.step(Action::Right).unwrap();
        assert_eq!((r.reward, r.done), (1.0, true));
    }

    #[test]
    fn decoy_contact_loses() {
        let mut e = hand_built(
            Stage::S3,
            vec![
                entity("mage", Role::Receiver, Movement::Stationary),
                entity("dog", Role::Sender, Movement::Stationary),
                entity("bird", Role::Decoy, Movement::Stationary),
            ],
            vec![Pos::new(5, 5), Pos::new(6, 6), Pos::new(1, 0)],
            false,
        );
        let r = e.step(Action::Down).unwrap();
        assert_eq!((r.reward, r.done), (-1.0, true));
    }

    #[test]
    fn acquire_then_deliver_returns_one_and_a_half() {
        let mut e = hand_built(
            Stage::S2,
            vec![
                entity("dog", Role::Sender, Movement::Stationary),
                entity("mage", Role::Receiver, Movement::Stationary),
            ],
            vec![Pos::new(0, 1), Pos::new(0, 2)],
            false,
        );
        assert_eq!(e.oracle_solve().unwrap(), vec![Action::Right, Action::Right]);
        let r1 = e.step(Action::Right).unwrap();
        assert_eq!((r1.reward, r1.done), (0.5, false));
        assert_eq!(r1.observation.inventory, Some(0));
        assert_eq!(r1.observation.entities[0].pos, None);
        let r2 = e.step(Action::Right).unwrap();
        assert_eq!(r1.reward + r2.reward, 1.5);
        assert!(r2.done);
    }

    #[test]
    fn chaser_and_fleer_move_greedily() {
        let mut e = hand_built(
            Stage::S2,
            vec![
                entity("dog", Role::Sender, Movement::Chaser),
                entity("mage", Role::Receiver, Movement::Fleeing),
            ],
            vec![Pos::new(4, 4), Pos::new(2, 2)],
            false,
        );
        e.step(Action::Stay).unwrap();
        assert_eq!(e.state.positions[0], Some(Pos::new(4, 4)));
        e.step(Action::Stay).unwrap();
        assert_eq!(e.state.positions[0], Some(Pos::new(3, 4)));
        assert_eq!(e.state.positions[1], Some(Pos::new(3, 2)));
    }

    #[test]
    fn stage_boards() {
        for seed in 0..200 {
            let e = MessengerEnv::reset(cfg(Stage::S2), seed).unwrap();
            let mut roles = e.ground_truth_roles();
            roles.sort();
            assert_eq!(roles, vec![Role::Sender, Role::Receiver]);
            assert!(!e.assignment.holding);
            let e = MessengerEnv::reset(cfg(Stage::S3), seed).unwrap();
            let decoys = e.ground_truth_roles().iter().filter(|r| **r == Role::Decoy).count();
            assert!((1..=2).contains(&decoys));
            assert!((1..=3).contains(&e.assignment.irrelevant.len()));
        }
    }

    #[test]
    fn parser_recovers_roles() {
        for stage in [Stage::S1, Stage::S2, Stage::S3] {
            let config = cfg(stage);
            let vocab = config.vocab();
            for seed in 0..300 {
                let e = MessengerEnv::reset(config.clone(), seed).unwrap();
                let names: Vec<String> = e.assignment.entities.iter().map(|x| x.name.clone()).collect();
                let sentences: Vec<String> = e
                    .manual
                    .sentences(&vocab)
                    .into_iter()
                    .filter(|s| !e.assignment.irrelevant.contains(s))
                    .collect();
                let parsed = parse_roles(&sentences, &names);
                for ent in &e.assignment.entities {
                    assert_eq!(parsed.get(&ent.name), Some(&ent.role), "{sentences:?}");
                }
            }
        }
    }

    #[test]
    fn stationary_sender_descriptor_sentence() {
        let e = entity("mage", Role::Sender, Movement::Stationary);
        let mut rng = Rng::new(0);
        let found = (0..200)
            .map(|_| role_sentence(&e, &mut rng))
            .any(|s| s == "the thing that is not able to move is the mage who has the message");
        assert!(found);
    }

    #[test]
    fn replay_round_trip() {
        for stage in [Stage::S1, Stage::S3] {
            let e = MessengerEnv::reset(cfg(stage), 11).unwrap();
            let back = MessengerEnv::from_replay(&MessengerConfig::default(), &e.to_replay()).unwrap();
            assert_eq!(back, e);
        }
    }

    #[test]
    fn step_after_done_is_usage_error() {
        let mut e = hand_built(
            Stage::S1,
            vec![
                entity("mage", Role::Receiver, Movement::Stationary),
                entity("dog", Role::Sender, Movement::Stationary),
            ],
            vec![Pos::new(0, 1), Pos::new(5, 5)],
            true,
        );
        e.step(Action::Right).unwrap();
        assert!(matches!(e.step(Action::Stay), Err(Error::Usage(_))));
    }
}
