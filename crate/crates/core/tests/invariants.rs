use proptest::prelude::*;

use crl_core::agent::{log_softmax, select_action, ActMode};
use crl_core::diffcore::Rng;
use crl_core::env::{Action, EnvConfig, MessengerConfig, RtfmConfig, Split, Stage};
use crl_core::harness::{silhouette, wilson_interval};

fn env_config(pick: u8) -> EnvConfig {
    match pick % 7 {
        0 => EnvConfig::Rtfm(RtfmConfig::default()),
        1 => EnvConfig::Rtfm(RtfmConfig { dyna: true, ..Default::default() }),
        2 => EnvConfig::Rtfm(RtfmConfig { groups: true, ..Default::default() }),
        3 => EnvConfig::Rtfm(RtfmConfig { dyna: true, groups: true, ..Default::default() }),
        4 => EnvConfig::Messenger(MessengerConfig { stage: Stage::S1, ..Default::default() }),
        5 => EnvConfig::Messenger(MessengerConfig { stage: Stage::S2, split: Split::Test, ..Default::default() }),
        _ => EnvConfig::Messenger(MessengerConfig { stage: Stage::S3, ..Default::default() }),
    }
}

fn actions(indices: &[usize]) -> Vec<Action> {
    indices.iter().map(|&i| Action::from_index(i % 5).unwrap()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn replaying_a_seed_reproduces_the_episode(pick in 0u8..7, seed in 0u64..1_000_000, acts in prop::collection::vec(0usize..5, 1..60)) {
        let cfg = env_config(pick);
        let mut a = cfg.make(seed).unwrap();
        let mut b = cfg.make(seed).unwrap();
        prop_assert_eq!(a.observe(), b.observe());
        for act in actions(&acts) {
            if a.is_over() {
                break;
            }
            prop_assert_eq!(a.step(act).unwrap(), b.step(act).unwrap());
        }
    }

    #[test]
    fn rewards_are_terminal_or_pickup(pick in 0u8..7, seed in 0u64..1_000_000, acts in prop::collection::vec(0usize..5, 200)) {
        let cfg = env_config(pick);
        let mut env = cfg.make(seed).unwrap();
        let mut steps = 0;
        for act in actions(&acts) {
            if env.is_over() {
                break;
            }
            let r = env.step(act).unwrap();
            steps += 1;
            if r.done {
                prop_assert!(r.reward == 1.0 || r.reward == -1.0);
            } else {
                // Picking up the message is the only non-terminal reward.
                prop_assert!(r.reward == 0.0 || (r.reward == 0.5 && pick >= 4));
            }
            if r.truncated {
                prop_assert!(!r.done);
            }
        }
        prop_assert!(steps <= 200);
    }

    #[test]
    fn oracle_plans_win(pick in 0u8..7, seed in 0u64..1_000_000) {
        let cfg = env_config(pick);
        let mut env = cfg.make(seed).unwrap();
        let plan = env.oracle_solve().expect("reset only yields solvable layouts");
        let mut last = None;
        for a in plan {
            last = Some(env.step(a).unwrap());
        }
        prop_assert!(last.is_some_and(|r| r.is_win()));
    }

    #[test]
    fn exactly_one_target_label(pick in 0u8..4, seed in 0u64..1_000_000) {
        let env = env_config(pick).make(seed).unwrap();
        let labels = env.ground_truth_labels();
        prop_assert_eq!(labels.iter().filter(|l| *l == "target_monster").count(), 1);
        prop_assert_eq!(labels.iter().filter(|l| *l == "useful_weapon").count(), 1);
    }

    #[test]
    fn wilson_brackets_the_point_estimate(n in 1usize..5000, frac in 0.0f64..=1.0) {
        let wins = ((n as f64) * frac).round() as usize;
        let (lo, hi) = wilson_interval(wins, n, 1.96);
        let p = wins as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= p + 1e-12);
        prop_assert!(p - 1e-12 <= hi && hi <= 1.0);
    }

    #[test]
    fn silhouette_is_bounded(points in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 4..40), split in 1usize..3) {
        let labels: Vec<usize> = (0..points.len()).map(|i| i % (split + 1)).collect();
        let s = silhouette(&points, &labels).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn log_softmax_normalises(logits in prop::collection::vec(-50.0f64..50.0, 5)) {
        let total: f64 = log_softmax(&logits).iter().map(|l| l.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_picks_a_maximal_logit(logits in prop::collection::vec(-50.0f64..50.0, 5), seed in any::<u64>()) {
        let (a, lp) = select_action(&logits, ActMode::Greedy, &mut Rng::new(seed)).unwrap();
        let best = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(logits[a.index()], best);
        prop_assert!(lp <= 0.0);
        let (_, lp) = select_action(&logits, ActMode::Sample, &mut Rng::new(seed)).unwrap();
        prop_assert!(lp <= 0.0 && lp.is_finite());
    }
}
