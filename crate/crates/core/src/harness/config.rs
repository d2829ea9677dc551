use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::agent::TrainConfig;
use crate::encoder::{EncoderConfig, Granularity};
use crate::env::{EnvConfig, EnvKind, MessengerConfig, RtfmConfig, Split, Stage};
use crate::error::{Error, Result};
use crate::mi::MiConfig;

/// Prefix of environment variables that override configuration keys.
/// `CRL_TRAIN__LR=1e-3` sets `train.lr`.
pub const ENV_PREFIX: &str = "CRL_";

/// Rtfm variant flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Base,
    Dyna,
    Groups,
    DynaGroups,
}

impl Variant {
    pub fn flags(self) -> (bool, bool) {
        match self {
            Variant::Base => (false, false),
            Variant::Dyna => (true, false),
            Variant::Groups => (false, true),
            Variant::DynaGroups => (true, true),
        }
    }

    fn from_flags(dyna: bool, groups: bool) -> Self {
        match (dyna, groups) {
            (false, false) => Variant::Base,
            (true, false) => Variant::Dyna,
            (false, true) => Variant::Groups,
            (true, true) => Variant::DynaGroups,
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "dyna" => Ok(Variant::Dyna),
            "groups" => Ok(Variant::Groups),
            "dyna_groups" | "dyna+groups" => Ok(Variant::DynaGroups),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?} (expected base|dyna|groups|dyna_groups)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Base => "base",
            Variant::Dyna => "dyna",
            Variant::Groups => "groups",
            Variant::DynaGroups => "dyna_groups",
        })
    }
}

/// Everything a run needs. Only the selected env's section is used.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: EnvKind,
    pub rtfm: RtfmConfig,
    pub messenger: MessengerConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub mi: MiConfig,
    pub out: PathBuf,
    /// Environment steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Start of the evaluation seed list.
    pub eval_seed_offset: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvKind::Rtfm,
            rtfm: RtfmConfig::default(),
            messenger: MessengerConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            mi: MiConfig::default(),
            out: PathBuf::from("runs/default"),
            checkpoint_every: 100_000,
            eval_seed_offset: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true|false, got {value:?}"))),
    }
}

const KEYS: &[(&str, &str)] = &[
    ("env.name", "environment: rtfm | messenger"),
    ("env.variant", "rtfm variant: base | dyna | groups | dyna_groups"),
    ("env.height", "grid rows of the selected env (rtfm 6, messenger 10)"),
    ("env.width", "grid columns of the selected env (rtfm 6, messenger 10)"),
    ("env.max_steps", "episode step limit of the selected env"),
    ("env.stage", "messenger stage: s1 | s2 | s3"),
    ("env.split", "messenger role split used for training: train | test"),
    ("env.split_seed", "seed of the messenger (name, role) split"),
    ("encoder.m", "number of concepts per entity"),
    ("encoder.d_t", "token embedding width"),
    ("encoder.d_e", "entity embedding width"),
    ("encoder.d_c", "width of each concept"),
    ("encoder.d_k", "attention key width"),
    ("encoder.gru_hidden", "GRU hidden width"),
    ("encoder.granularity", "attention over: sentence | token"),
    ("train.gamma", "discount"),
    ("train.n_steps", "rollout horizon per update"),
    ("train.num_envs", "parallel environments"),
    ("train.entropy_coef", "entropy bonus weight"),
    ("train.value_coef", "critic loss weight"),
    ("train.lr", "Adam learning rate"),
    ("train.grad_clip", "global gradient-norm clip"),
    ("train.total_steps", "environment step budget"),
    ("train.eval_every", "environment steps between evaluations (0 = only at the end)"),
    ("train.eval_episodes", "episodes per evaluation"),
    ("train.seed", "run seed"),
    ("mi.alpha1", "CLUB weight"),
    ("mi.alpha2", "VIB weight"),
    ("mi.predictor_steps", "predictor updates per learner update"),
    ("mi.predictor_lr", "predictor learning rate"),
    ("mi.predictor_hidden", "predictor hidden width"),
    ("mi.club_through_embedding", "let the CLUB gradient reach entity embeddings"),
    ("run.out", "output directory"),
    ("run.checkpoint_every", "environment steps between checkpoints (0 = final only)"),
    ("eval.seed_offset", "start of the evaluation seed list"),
];

impl RunConfig {
    /// Sets one dotted key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "env.name" => self.env = v.parse()?,
            "env.variant" => {
                let (dyna, groups) = v.parse::<Variant>()?.flags();
                self.rtfm.dyna = dyna;
                self.rtfm.groups = groups;
            }
            "env.height" | "env.width" | "env.max_steps" => {
                let n = parse(key, v)?;
                let (h, w, m) = match self.env {
                    EnvKind::Rtfm => (&mut self.rtfm.height, &mut self.rtfm.width, &mut self.rtfm.max_steps),
                    EnvKind::Messenger => (
                        &mut self.messenger.height,
                        &mut self.messenger.width,
                        &mut self.messenger.max_steps,
                    ),
                };
                *match key {
                    "env.height" => h,
                    "env.width" => w,
                    _ => m,
                } = n;
            }
            "env.stage" => self.messenger.stage = v.parse::<Stage>()?,
            "env.split" => self.messenger.split = v.parse::<Split>()?,
            "env.split_seed" => self.messenger.split_seed = parse(key, v)?,
            "encoder.m" => self.encoder.m = parse(key, v)?,
            "encoder.d_t" => self.encoder.d_t = parse(key, v)?,
            "encoder.d_e" => self.encoder.d_e = parse(key, v)?,
            "encoder.d_c" => self.encoder.d_c = parse(key, v)?,
            "encoder.d_k" => self.encoder.d_k = parse(key, v)?,
            "encoder.gru_hidden" => self.encoder.gru_hidden = parse(key, v)?,
            "encoder.granularity" => {
                self.encoder.granularity = match v {
                    "sentence" => Granularity::Sentence,
                    "token" => Granularity::Token,
                    _ => return Err(Error::Config(format!("{key}: expected sentence|token, got {v:?}"))),
                }
            }
            "train.gamma" => self.train.gamma = parse(key, v)?,
            "train.n_steps" => self.train.n_steps = parse(key, v)?,
            "train.num_envs" => self.train.num_envs = parse(key, v)?,
            "train.entropy_coef" => self.train.entropy_coef = parse(key, v)?,
            "train.value_coef" => self.train.value_coef = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.grad_clip" => self.train.grad_clip = parse(key, v)?,
            "train.total_steps" => self.train.total_steps = parse(key, v)?,
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "train.eval_episodes" => self.train.eval_episodes = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "mi.alpha1" => self.mi.alpha1 = parse(key, v)?,
            "mi.alpha2" => self.mi.alpha2 = parse(key, v)?,
            "mi.predictor_steps" => self.mi.predictor_steps = parse(key, v)?,
            "mi.predictor_lr" => self.mi.predictor_lr = parse(key, v)?,
            "mi.predictor_hidden" => self.mi.predictor_hidden = parse(key, v)?,
            "mi.club_through_embedding" => self.mi.club_through_embedding = parse_bool(key, v)?,
            "run.out" => self.out = PathBuf::from(v),
            "run.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "eval.seed_offset" => self.eval_seed_offset = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in documentation order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (env_h, env_w, env_max) = match self.env {
            EnvKind::Rtfm => (self.rtfm.height, self.rtfm.width, self.rtfm.max_steps),
            EnvKind::Messenger => (self.messenger.height, self.messenger.width, self.messenger.max_steps),
        };
        let granularity = match self.encoder.granularity {
            Granularity::Sentence => "sentence",
            Granularity::Token => "token",
        };
        let values = [
            self.env.to_string(),
            Variant::from_flags(self.rtfm.dyna, self.rtfm.groups).to_string(),
            env_h.to_string(),
            env_w.to_string(),
            env_max.to_string(),
            self.messenger.stage.to_string(),
            self.messenger.split.to_string(),
            self.messenger.split_seed.to_string(),
            self.encoder.m.to_string(),
            self.encoder.d_t.to_string(),
            self.encoder.d_e.to_string(),
            self.encoder.d_c.to_string(),
            self.encoder.d_k.to_string(),
            self.encoder.gru_hidden.to_string(),
            granularity.to_string(),
            self.train.gamma.to_string(),
            self.train.n_steps.to_string(),
            self.train.num_envs.to_string(),
            self.train.entropy_coef.to_string(),
            self.train.value_coef.to_string(),
            self.train.lr.to_string(),
            self.train.grad_clip.to_string(),
            self.train.total_steps.to_string(),
            self.train.eval_every.to_string(),
            self.train.eval_episodes.to_string(),
            self.train.seed.to_string(),
            self.mi.alpha1.to_string(),
            self.mi.alpha2.to_string(),
            self.mi.predictor_steps.to_string(),
            self.mi.predictor_lr.to_string(),
            self.mi.predictor_hidden.to_string(),
            self.mi.club_through_embedding.to_string(),
            self.out.display().to_string(),
            self.checkpoint_every.to_string(),
            self.eval_seed_offset.to_string(),
        ];
        KEYS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    /// Applies `key=value` lines. Blank lines and `#` comments are skipped.
    /// `env.name` is applied first so env-dependent keys land in the right
    /// section regardless of order.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        self.apply_pairs(&pairs)
    }

    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs.iter().filter(|(k, _)| k == "env.name") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "env.name") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = RunConfig::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    /// Applies `CRL_*` variables: the prefix is dropped, `__` becomes `.`
    /// and the rest is lower-cased.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let pairs: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                k.as_ref()
                    .strip_prefix(ENV_PREFIX)
                    .map(|rest| (rest.replace("__", ".").to_ascii_lowercase(), v.as_ref().to_string()))
            })
            .collect();
        self.apply_pairs(&pairs)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Documentation table of keys and defaults.
    pub fn help_text() -> String {
        let defaults = RunConfig::default().entries();
        let mut s = String::from("Configuration keys (key=value, default shown):\n");
        for ((k, doc), (_, v)) in KEYS.iter().zip(defaults) {
            let _ = writeln!(s, "  {k:<28} {v:<14} {doc}");
        }
        let _ = writeln!(s, "Environment overrides: CRL_TRAIN__LR=1e-3 sets train.lr.");
        s
    }

    pub fn env_config(&self) -> EnvConfig {
        match self.env {
            EnvKind::Rtfm => EnvConfig::Rtfm(self.rtfm.clone()),
            EnvKind::Messenger => EnvConfig::Messenger(self.messenger.clone()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.env {
            EnvKind::Rtfm => self.rtfm.validate()?,
            EnvKind::Messenger => self.messenger.validate()?,
        }
        self.encoder.validate()?;
        self.train.validate()?;
        self.mi.validate()?;
        if self.train.eval_episodes == 0 {
            return Err(Error::Config("train.eval_episodes must be positive".into()));
        }
        if self.out.as_os_str().is_empty() {
            return Err(Error::Config("run.out must not be empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("env.name=messenger\nenv.stage=s3\ntrain.lr=0.0003 # comment\n\nmi.alpha1=0\n").unwrap();
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
        assert_eq!(d.messenger.stage, Stage::S3);
        assert_eq!(d.train.lr, 3e-4);
    }

    #[test]
    fn env_keys_follow_env_name_regardless_of_order() {
        let mut c = RunConfig::default();
        c.apply_text("env.max_steps=50\nenv.name=messenger").unwrap();
        assert_eq!(c.messenger.max_steps, 50);
        assert_eq!(c.rtfm.max_steps, RtfmConfig::default().max_steps);
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_text("train.lrr=1"), Err(Error::Config(_))));
        assert!(c.apply_text("train.lr").is_err());
        assert!(c.apply_text("train.n_steps=-3").is_err());
        assert!(c.apply_text("env.variant=huge").is_err());
    }

    #[test]
    fn out_of_range_fails_validation() {
        let mut c = RunConfig::default();
        c.train.gamma = 1.5;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.mi.alpha2 = -0.1;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.encoder.m = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn env_overrides() {
        let mut c = RunConfig::default();
        c.apply_env([("CRL_TRAIN__LR", "0.002"), ("HOME", "/x"), ("CRL_ENCODER__D_C", "8")]).unwrap();
        assert_eq!(c.train.lr, 0.002);
        assert_eq!(c.encoder.d_c, 8);
        assert!(c.apply_env([("CRL_TRAIN__NOPE", "1")]).is_err());
    }

    #[test]
    fn help_lists_every_key() {
        let help = RunConfig::help_text();
        for (k, _) in KEYS {
            assert!(help.contains(k));
        }
    }
}
