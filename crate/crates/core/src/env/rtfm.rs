//! RTFM-mini: read the manual, pick up the weapon that beats the target
//! team's monster, then fight it.
//!
//! Every episode has two monsters (one on the target team, one decoy) and
//! two weapons, exactly one of which carries a modifier that defeats the
//! target monster's element. Walking onto a weapon picks it up (the old
//! one is dropped on the cell the agent left); walking onto a monster ends
//! the episode with +1 or -1.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::replay::{parse_pos, Record};
use super::{distinct_cells, Action, EntityView, Pos, StepResult, TextManual, Vocab, WorldObservation};
use crate::diffcore::Rng;
use crate::error::{Error, Result};

pub const NUM_ENTITIES: usize = 4;

const LAYOUT_STREAM: u64 = 1;
const MANUAL_STREAM: u64 = 2;
const DYNAMICS_STREAM: u64 = 1 << 20;
const MAX_LAYOUT_ATTEMPTS: usize = 1000;
pub const ORACLE_NODE_LIMIT: usize = 200_000;

const GOAL_TEMPLATES: [&str; 3] = [
    "defeat the {team}",
    "the {team} must be destroyed",
    "your mission is to beat the {team}",
];
const TEAM_TEMPLATES: [&str; 3] = [
    "the {team} team is made up of {names}",
    "{names} are on the {team} team",
    "{names} belong to the {team}",
];
const BEATS_TEMPLATES: [&str; 3] = [
    "{element} monsters are defeated by {mods} weapons",
    "{mods} weapons beat {element} monsters",
    "use {mods} items against {element} monsters",
];
const GLUE_WORDS: &str = "agent and or";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtfmConfig {
    pub height: usize,
    pub width: usize,
    pub max_steps: usize,
    /// Monsters move: the decoy chases the agent, the target wanders.
    pub dyna: bool,
    /// Team sentences may list several monster names.
    pub groups: bool,
    pub teams: Vec<String>,
    pub monsters: Vec<String>,
    pub elements: Vec<String>,
    pub modifiers: Vec<String>,
    pub nouns: Vec<String>,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Default for RtfmConfig {
    fn default() -> Self {
        RtfmConfig {
            height: 6,
            width: 6,
            max_steps: 32,
            dyna: false,
            groups: false,
            teams: strings(&["star alliance", "rebel enclave", "imperial order", "forest clan"]),
            monsters: strings(&["jackal", "beetle", "shaman", "wolf", "goblin", "bat", "zombie", "ghost"]),
            elements: strings(&["fire", "cold", "poison", "lightning"]),
            modifiers: strings(&[
                "fanatical",
                "shimmering",
                "grandmasters",
                "blessed",
                "gleaming",
                "mysterious",
                "soldiers",
                "arcane",
            ]),
            nouns: strings(&["sword", "axe", "hammer", "staff"]),
        }
    }
}

impl RtfmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config(format!(
                "rtfm grid must be at least 4x4, got {}x{}",
                self.height, self.width
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("rtfm max_steps must be positive".into()));
        }
        for (what, list) in [
            ("teams", &self.teams),
            ("monster names", &self.monsters),
            ("elements", &self.elements),
            ("modifiers", &self.modifiers),
            ("weapon nouns", &self.nouns),
        ] {
            if list.len() < 2 {
                return Err(Error::Config(format!("rtfm needs at least 2 {what}, got {}", list.len())));
            }
            let mut seen = std::collections::HashSet::new();
            if !list.iter().all(|x| seen.insert(x)) {
                return Err(Error::Config(format!("rtfm {what} contain duplicates")));
            }
        }
        for name in self.monsters.iter().chain(&self.elements).chain(&self.modifiers).chain(&self.nouns) {
            if name.split_whitespace().count() != 1 {
                return Err(Error::Config(format!("rtfm name {name:?} must be a single word")));
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        let templates = GOAL_TEMPLATES
            .iter()
            .chain(&TEAM_TEMPLATES)
            .chain(&BEATS_TEMPLATES)
            .map(|t| t.replace(['{', '}'], " "));
        Vocab::new(
            std::iter::once(GLUE_WORDS.to_string())
                .chain(templates)
                .chain(self.teams.iter().cloned())
                .chain(self.monsters.iter().cloned())
                .chain(self.elements.iter().cloned())
                .chain(self.modifiers.iter().cloned())
                .chain(self.nouns.iter().cloned()),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Monster {
    pub name: String,
    pub element: String,
    pub team: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Weapon {
    pub modifier: String,
    pub noun: String,
}

/// Sampled episode: roster ids 0 and 1 are monsters, 2 and 3 weapons.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RtfmEpisodeSpec {
    pub target_team: String,
    pub distractor_team: String,
    /// Element → modifiers that defeat it.
    pub beats: BTreeMap<String, Vec<String>>,
    pub monsters: Vec<Monster>,
    pub weapons: Vec<Weapon>,
    pub monster_pos: Vec<Pos>,
    pub weapon_pos: Vec<Pos>,
    pub agent: Pos,
    /// Names listed in each team's membership sentence.
    pub team_lists: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConceptLabel {
    TargetMonster,
    DecoyMonster,
    UsefulWeapon,
    UselessWeapon,
}

impl fmt::Display for ConceptLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConceptLabel::TargetMonster => "target_monster",
            ConceptLabel::DecoyMonster => "decoy_monster",
            ConceptLabel::UsefulWeapon => "useful_weapon",
            ConceptLabel::UselessWeapon => "useless_weapon",
        })
    }
}

impl RtfmEpisodeSpec {
    pub fn is_target(&self, monster: usize) -> bool {
        self.monsters[monster].team == self.target_team
    }

    pub fn weapon_beats(&self, weapon: usize, monster: usize) -> bool {
        self.beats
            .get(&self.monsters[monster].element)
            .is_some_and(|m| m.contains(&self.weapons[weapon].modifier))
    }

    pub fn target_monster(&self) -> usize {
        (0..2).find(|&m| self.is_target(m)).expect("one target monster")
    }

    pub fn ground_truth_concepts(&self) -> Vec<ConceptLabel> {
        let t = self.target_monster();
        let mut labels: Vec<ConceptLabel> = (0..2)
            .map(|m| {
                if self.is_target(m) {
                    ConceptLabel::TargetMonster
                } else {
                    ConceptLabel::DecoyMonster
                }
            })
            .collect();
        labels.extend((0..2).map(|w| {
            if self.weapon_beats(w, t) {
                ConceptLabel::UsefulWeapon
            } else {
                ConceptLabel::UselessWeapon
            }
        }));
        labels
    }

    fn entity_text(&self, id: usize) -> String {
        if id < 2 {
            format!("{} {}", self.monsters[id].element, self.monsters[id].name)
        } else {
            format!("{} {}", self.weapons[id - 2].modifier, self.weapons[id - 2].noun)
        }
    }
}

/// Dynamic part of an episode.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RtfmState {
    pub agent: Pos,
    pub monsters: [Pos; 2],
    /// `None` while carried.
    pub weapons: [Option<Pos>; 2],
    pub inventory: Option<usize>,
    pub steps: usize,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtfmEnv {
    config: RtfmConfig,
    seed: u64,
    spec: RtfmEpisodeSpec,
    manual: TextManual,
    names: Vec<Vec<u32>>,
    agent_words: Vec<u32>,
    state: RtfmState,
}

fn join_names(names: &[String], conj: &str) -> String {
    match names.len() {
        0 => String::new(),
        1 => names[0].clone(),
        n => format!("{} {conj} {}", names[..n - 1].join(" "), names[n - 1]),
    }
}

/// Samples an episode spec (without checking solvability).
fn sample_spec(config: &RtfmConfig, rng: &mut Rng) -> RtfmEpisodeSpec {
    let teams = rng.sample_indices(config.teams.len(), 2);
    let (target_team, distractor_team) = (config.teams[teams[0]].clone(), config.teams[teams[1]].clone());
    let names = rng.sample_indices(config.monsters.len(), 2);
    let elems = rng.sample_indices(config.elements.len(), 2);
    let (target_el, decoy_el) = (config.elements[elems[0]].clone(), config.elements[elems[1]].clone());

    // Disjoint modifier sets per element; the first of each is on the board.
    let n_mods = config.modifiers.len();
    let mods = rng.sample_indices(n_mods, n_mods);
    let k_target = if n_mods >= 4 { 1 + rng.below(2) } else { 1 };
    let k_decoy = if n_mods >= 4 { 1 + rng.below(2) } else { 1 };
    let target_mods: Vec<String> = mods[..k_target].iter().map(|&i| config.modifiers[i].clone()).collect();
    let decoy_mods: Vec<String> = mods[k_target..k_target + k_decoy]
        .iter()
        .map(|&i| config.modifiers[i].clone())
        .collect();
    let mut beats = BTreeMap::new();
    beats.insert(target_el.clone(), target_mods.clone());
    beats.insert(decoy_el.clone(), decoy_mods.clone());

    let target = Monster {
        name: config.monsters[names[0]].clone(),
        element: target_el,
        team: target_team.clone(),
    };
    let decoy = Monster {
        name: config.monsters[names[1]].clone(),
        element: decoy_el,
        team: distractor_team.clone(),
    };
    let useful = Weapon {
        modifier: target_mods[rng.below(target_mods.len())].clone(),
        noun: rng.choose(&config.nouns).clone(),
    };
    let useless = Weapon {
        modifier: decoy_mods[rng.below(decoy_mods.len())].clone(),
        noun: rng.choose(&config.nouns).clone(),
    };
    let mut monsters = vec![target, decoy];
    rng.shuffle(&mut monsters);
    let mut weapons = vec![useful, useless];
    rng.shuffle(&mut weapons);

    let mut team_lists = BTreeMap::new();
    for m in &monsters {
        let mut listed = vec![m.name.clone()];
        if config.groups {
            let extra = rng.below(3);
            let spare: Vec<&String> = config
                .monsters
                .iter()
                .filter(|n| !monsters.iter().any(|m| &m.name == *n))
                .collect();
            for i in rng.sample_indices(spare.len(), extra.min(spare.len())) {
                listed.push(spare[i].clone());
            }
            rng.shuffle(&mut listed);
        }
        team_lists.insert(m.team.clone(), listed);
    }

    let cells = distinct_cells(rng, config.height, config.width, 5);
    RtfmEpisodeSpec {
        target_team,
        distractor_team,
        beats,
        monsters,
        weapons,
        monster_pos: cells[0..2].to_vec(),
        weapon_pos: cells[2..4].to_vec(),
        agent: cells[4],
        team_lists,
    }
}

/// Renders the manual sentences for `spec` in shuffled order.
pub fn manual_sentences(spec: &RtfmEpisodeSpec, rng: &mut Rng) -> Vec<String> {
    let mut out = Vec::new();
    out.push(rng.choose(&GOAL_TEMPLATES).replace("{team}", &spec.target_team));
    for (team, names) in &spec.team_lists {
        let t = rng.choose(&TEAM_TEMPLATES);
        out.push(t.replace("{team}", team).replace("{names}", &join_names(names, "and")));
    }
    for (element, mods) in &spec.beats {
        let t = rng.choose(&BEATS_TEMPLATES);
        let conj = if t.starts_with("use") { "or" } else { "and" };
        out.push(t.replace("{element}", element).replace("{mods}", &join_names(mods, conj)));
    }
    rng.shuffle(&mut out);
    out
}

pub fn generate_manual(config: &RtfmConfig, spec: &RtfmEpisodeSpec, rng: &mut Rng) -> Result<TextManual> {
    TextManual::from_sentences(&config.vocab(), &manual_sentences(spec, rng))
}

struct Outcome {
    reward: f64,
    done: bool,
    truncated: bool,
}

impl RtfmEnv {
    /// Starts the episode determined by `(config, seed)`. Layouts are
    /// resampled until the oracle finds a winning plan.
    pub fn reset(config: RtfmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(seed);
        let mut layout = root.split(LAYOUT_STREAM);
        let mut manual_rng = root.split(MANUAL_STREAM);
        for _ in 0..MAX_LAYOUT_ATTEMPTS {
            let spec = sample_spec(&config, &mut layout);
            let env = Self::from_spec(config.clone(), seed, spec, None)?;
            if env.oracle_solve().is_some() {
                let manual = generate_manual(&config, &env.spec, &mut manual_rng)?;
                return Ok(RtfmEnv { manual, ..env });
            }
        }
        Err(Error::Config(format!(
            "no solvable rtfm layout found for seed {seed} (grid too small or max_steps too low)"
        )))
    }

    /// Builds the initial state of `spec`. A missing manual is left empty.
    pub fn from_spec(config: RtfmConfig, seed: u64, spec: RtfmEpisodeSpec, manual: Option<TextManual>) -> Result<Self> {
        let vocab = config.vocab();
        let names = (0..NUM_ENTITIES)
            .map(|i| vocab.name(&spec.entity_text(i)))
            .collect::<Result<Vec<_>>>()?;
        let agent_words = vocab.name("agent")?;
        let state = RtfmState {
            agent: spec.agent,
            monsters: [spec.monster_pos[0], spec.monster_pos[1]],
            weapons: [Some(spec.weapon_pos[0]), Some(spec.weapon_pos[1])],
            inventory: None,
            steps: 0,
            done: false,
        };
        let manual = manual.unwrap_or(TextManual {
            tokens: vec![],
            lengths: vec![],
        });
        Ok(RtfmEnv {
            config,
            seed,
            spec,
            manual,
            names,
            agent_words,
            state,
        })
    }

    pub fn config(&self) -> &RtfmConfig {
        &self.config
    }

    pub fn spec(&self) -> &RtfmEpisodeSpec {
        &self.spec
    }

    pub fn state(&self) -> &RtfmState {
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

    pub fn ground_truth_concepts(&self) -> Vec<ConceptLabel> {
        self.spec.ground_truth_concepts()
    }

    pub fn observe(&self) -> WorldObservation {
        let s = &self.state;
        let mut entities = Vec::with_capacity(NUM_ENTITIES);
        for m in 0..2 {
            entities.push(EntityView {
                id: m,
                words: self.names[m].clone(),
                pos: Some(s.monsters[m]),
            });
        }
        for w in 0..2 {
            entities.push(EntityView {
                id: 2 + w,
                words: self.names[2 + w].clone(),
                pos: s.weapons[w],
            });
        }
        WorldObservation::build(
            self.config.height,
            self.config.width,
            s.agent,
            &self.agent_words,
            s.inventory.map(|w| 2 + w),
            entities,
        )
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        if self.state.done {
            return Err(Error::Usage("step called on a finished rtfm episode".into()));
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

    fn occupied_by_item_or_monster(&self, s: &RtfmState, p: Pos, skip_monster: usize) -> bool {
        s.weapons.iter().any(|w| *w == Some(p)) || (0..2).any(|m| m != skip_monster && s.monsters[m] == p)
    }

    fn combat(&self, s: &RtfmState, monster: usize) -> f64 {
        let wins = s
            .inventory
            .is_some_and(|w| self.spec.weapon_beats(w, monster) && self.spec.is_target(monster));
        if wins {
            1.0
        } else {
            -1.0
        }
    }

    fn transition(&self, s: &RtfmState, action: Action) -> (RtfmState, Outcome) {
        let (h, w) = (self.config.height, self.config.width);
        let mut n = s.clone();
        n.steps += 1;
        let mut out = Outcome {
            reward: 0.0,
            done: false,
            truncated: false,
        };
        let prev = s.agent;
        if let Some(p) = prev.step(action, h, w) {
            n.agent = p;
        }
        if n.agent != prev {
            if let Some(m) = (0..2).find(|&m| n.monsters[m] == n.agent) {
                out.reward = self.combat(&n, m);
                out.done = true;
                n.done = true;
                return (n, out);
            }
            if let Some(wi) = (0..2).find(|&wi| n.weapons[wi] == Some(n.agent)) {
                if let Some(old) = n.inventory {
                    n.weapons[old] = Some(prev);
                }
                n.weapons[wi] = None;
                n.inventory = Some(wi);
            }
        }
        if self.config.dyna {
            let target = self.spec.target_monster();
            let decoy = 1 - target;
            // Decoy: greedy chase, ties broken Up < Down < Left < Right < Stay.
            let mut best = (usize::MAX, n.monsters[decoy]);
            for a in Action::ALL {
                if let Some(p) = n.monsters[decoy].step(a, h, w) {
                    if p != n.monsters[decoy] && self.occupied_by_item_or_monster(&n, p, decoy) {
                        continue;
                    }
                    let d = p.manhattan(n.agent);
                    if d < best.0 {
                        best = (d, p);
                    }
                }
            }
            n.monsters[decoy] = best.1;
            if n.monsters[decoy] == n.agent {
                out.reward = self.combat(&n, decoy);
                out.done = true;
                n.done = true;
                return (n, out);
            }
            // Target: one uniform step from a counter-based stream.
            let mut draw = Rng::new(self.seed).split(DYNAMICS_STREAM + s.steps as u64);
            let a = Action::ALL[draw.below(4)];
            if let Some(p) = n.monsters[target].step(a, h, w) {
                if !self.occupied_by_item_or_monster(&n, p, target) {
                    n.monsters[target] = p;
                }
            }
            if n.monsters[target] == n.agent {
                out.reward = self.combat(&n, target);
                out.done = true;
                n.done = true;
                return (n, out);
            }
        }
        if n.steps >= self.config.max_steps {
            out.truncated = true;
            n.done = true;
        }
        (n, out)
    }

    /// Shortest action sequence from the current state that ends with +1,
    /// found by breadth-first search over (agent, inventory, item and
    /// monster positions); the step counter is part of the state only
    /// when monsters move. Gives up after [`ORACLE_NODE_LIMIT`] states.
    pub fn oracle_solve(&self) -> Option<Vec<Action>> {
        if self.state.done {
            return None;
        }
        let key = |s: &RtfmState| {
            let mut k = s.clone();
            if !self.config.dyna {
                k.steps = 0;
            }
            k
        };
        let mut parent: HashMap<RtfmState, (RtfmState, Action)> = HashMap::new();
        let mut seen = std::collections::HashSet::new();
        seen.insert(key(&self.state));
        let mut queue = VecDeque::from([self.state.clone()]);
        while let Some(s) = queue.pop_front() {
            for a in Action::ALL {
                let (n, out) = self.transition(&s, a);
                if out.done && out.reward > 0.0 {
                    let mut plan = vec![a];
                    let mut cur = s.clone();
                    while let Some((p, pa)) = parent.get(&cur) {
                        plan.push(*pa);
                        cur = p.clone();
                    }
                    plan.reverse();
                    return Some(plan);
                }
                if n.done || !seen.insert(key(&n)) {
                    continue;
                }
                if parent.len() >= ORACLE_NODE_LIMIT {
                    return None;
                }
                parent.insert(n.clone(), (s.clone(), a));
                queue.push_back(n);
            }
        }
        None
    }

    pub fn to_replay(&self) -> String {
        let sp = &self.spec;
        let mut r = Record::new();
        r.set("env", "rtfm");
        r.set("seed", self.seed);
        r.set("height", self.config.height);
        r.set("width", self.config.width);
        r.set("max_steps", self.config.max_steps);
        r.set("dyna", self.config.dyna);
        r.set("groups", self.config.groups);
        r.set("target_team", &sp.target_team);
        r.set("distractor_team", &sp.distractor_team);
        for (el, mods) in &sp.beats {
            r.set(format!("beats.{el}"), mods.join(","));
        }
        for (team, names) in &sp.team_lists {
            r.set(format!("team.{team}"), names.join(","));
        }
        for (i, m) in sp.monsters.iter().enumerate() {
            r.set(
                format!("monster.{i}"),
                format!("{};{};{};{}", m.name, m.element, m.team, sp.monster_pos[i]),
            );
        }
        for (i, w) in sp.weapons.iter().enumerate() {
            r.set(format!("weapon.{i}"), format!("{};{};{}", w.modifier, w.noun, sp.weapon_pos[i]));
        }
        r.set("agent", sp.agent);
        for (i, (toks, &len)) in self.manual.tokens.iter().zip(&self.manual.lengths).enumerate() {
            if len > 0 {
                r.set(
                    format!("manual.{i}"),
                    toks[..len].iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "),
                );
            }
        }
        r.to_text()
    }

    /// Rebuilds the initial state of a recorded episode. `base` supplies
    /// the vocabulary tables; grid and variant fields come from the file.
    pub fn from_replay(base: &RtfmConfig, text: &str) -> Result<Self> {
        let r = Record::from_text(text)?;
        if r.get("env")? != "rtfm" {
            return Err(Error::Invalid("not an rtfm replay".into()));
        }
        let config = RtfmConfig {
            height: r.parse("height")?,
            width: r.parse("width")?,
            max_steps: r.parse("max_steps")?,
            dyna: r.parse("dyna")?,
            groups: r.parse("groups")?,
            ..base.clone()
        };
        let mut beats = BTreeMap::new();
        for (k, v) in r.keys_with_prefix("beats.") {
            beats.insert(k["beats.".len()..].to_string(), v.split(',').map(str::to_string).collect());
        }
        let mut team_lists = BTreeMap::new();
        for (k, v) in r.keys_with_prefix("team.") {
            team_lists.insert(k["team.".len()..].to_string(), v.split(',').map(str::to_string).collect());
        }
        let mut monsters = Vec::new();
        let mut monster_pos = Vec::new();
        let mut weapons = Vec::new();
        let mut weapon_pos = Vec::new();
        for i in 0..2 {
            let f: Vec<&str> = r.get(&format!("monster.{i}"))?.split(';').collect();
            if f.len() != 4 {
                return Err(Error::Invalid(format!("monster.{i} needs 4 fields")));
            }
            monsters.push(Monster {
                name: f[0].into(),
                element: f[1].into(),
                team: f[2].into(),
            });
            monster_pos.push(parse_pos(f[3])?);
            let f: Vec<&str> = r.get(&format!("weapon.{i}"))?.split(';').collect();
            if f.len() != 3 {
                return Err(Error::Invalid(format!("weapon.{i} needs 3 fields")));
            }
            weapons.push(Weapon {
                modifier: f[0].into(),
                noun: f[1].into(),
            });
            weapon_pos.push(parse_pos(f[2])?);
        }
        let spec = RtfmEpisodeSpec {
            target_team: r.get("target_team")?.into(),
            distractor_team: r.get("distractor_team")?.into(),
            beats,
            monsters,
            weapons,
            monster_pos,
            weapon_pos,
            agent: parse_pos(r.get("agent")?)?,
            team_lists,
        };
        let mut sentences = Vec::new();
        for (_, v) in r.keys_with_prefix("manual.") {
            let ids = v
                .split_whitespace()
                .map(|t| t.parse::<u32>().map_err(|_| Error::Invalid(format!("bad token {t:?}"))))
                .collect::<Result<Vec<_>>>()?;
            sentences.push(ids);
        }
        let vocab = config.vocab();
        let text: Vec<String> = sentences.iter().map(|s| vocab.decode(s)).collect();
        let manual = TextManual::from_sentences(&vocab, &text)?;
        Self::from_spec(config, r.parse("seed")?, spec, Some(manual))
    }
}
