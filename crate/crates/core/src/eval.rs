//! Controllers and the multi-episode evaluation harness.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{forward_many, select_action, ActionMode, Aggregation};
use crate::baselines::{lawnmower_policy, random_policy, LawnmowerState};
use crate::error::{Error, Result};
use crate::nn::ParameterStore;
use crate::observation::{RelationSet, TeamObserver};
use crate::parallel::{derive_seed, map_indexed, Exec};
use crate::sim::{Action, EnvConfig, EnvState};

/// Anything that can steer every sensor of an episode.
#[derive(Debug, Clone)]
pub enum Controller {
    /// Always `NoOp`.
    Idle,
    Random {
        include_noop: bool,
    },
    Lawnmower,
    /// Shared learned policy; each sensor acts on its own relation set.
    Learned {
        params: Arc<ParameterStore>,
        aggregation: Aggregation,
        mode: ActionMode,
    },
}

impl Controller {
    /// Looks up a baseline by its command-line name.
    pub fn baseline(name: &str) -> Result<Controller> {
        match name {
            "idle" => Ok(Controller::Idle),
            "random" => Ok(Controller::Random {
                include_noop: false,
            }),
            "random-noop" => Ok(Controller::Random { include_noop: true }),
            "lawnmower" => Ok(Controller::Lawnmower),
            other => Err(Error::Usage(format!(
                "unknown baseline {other:?} (expected idle, random, random-noop or lawnmower)"
            ))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Controller::Idle => "idle".into(),
            Controller::Random {
                include_noop: false,
            } => "random".into(),
            Controller::Random { include_noop: true } => "random-noop".into(),
            Controller::Lawnmower => "lawnmower".into(),
            Controller::Learned { mode, .. } => match mode {
                ActionMode::Stochastic => "learned-stochastic".into(),
                ActionMode::Deterministic => "learned-deterministic".into(),
            },
        }
    }

    /// Per-episode mutable state, seeded by `seed`.
    pub fn start(&self, seed: u64) -> ControllerState<'_> {
        ControllerState {
            controller: self,
            rng: ChaCha8Rng::seed_from_u64(seed),
            lawnmower: None,
            observer: TeamObserver::new(),
        }
    }
}

pub struct ControllerState<'c> {
    controller: &'c Controller,
    rng: ChaCha8Rng,
    lawnmower: Option<Vec<LawnmowerState>>,
    observer: TeamObserver,
}

impl ControllerState<'_> {
    /// Chooses one action per sensor of `state`.
    pub fn act(&mut self, state: &EnvState) -> Result<Vec<Action>> {
        let n = state.sensors.len();
        match self.controller {
            Controller::Idle => Ok(vec![Action::NoOp; n]),
            Controller::Random { include_noop } => Ok((0..n)
                .map(|_| random_policy(*include_noop, &mut self.rng))
                .collect()),
            Controller::Lawnmower => {
                let scene = *state.scene();
                let team = self
                    .lawnmower
                    .get_or_insert_with(|| LawnmowerState::team(n, &scene));
                Ok(team
                    .iter_mut()
                    .zip(&state.sensors)
                    .map(|(ls, s)| {
                        let (a, next) = lawnmower_policy(ls, s, &scene, state.params.time_scale);
                        *ls = next;
                        a
                    })
                    .collect())
            }
            Controller::Learned {
                params,
                aggregation,
                mode,
            } => {
                let rels = self.observer.observe(state)?;
                let refs: Vec<&RelationSet> = rels.iter().collect();
                let outs = forward_many(params, &refs, *aggregation)?;
                Ok(outs
                    .iter()
                    .map(|o| select_action(&o.probs, *mode, &mut self.rng))
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeStat {
    pub objects_total: u64,
    pub objects_captured: u64,
}

impl EpisodeStat {
    pub fn pct(&self) -> f64 {
        if self.objects_total == 0 {
            0.0
        } else {
            100.0 * self.objects_captured as f64 / self.objects_total as f64
        }
    }
}

/// Aggregate capture statistics over evaluation episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub controller: String,
    pub episodes: usize,
    /// `100 * sum(captured) / sum(total)` over all episodes.
    pub capture_pct: f64,
    /// Mean of per-episode percentages.
    pub mean_episode_pct: f64,
    /// Standard error of the per-episode percentages.
    pub stderr: f64,
    pub per_episode: Vec<EpisodeStat>,
}

impl EvalReport {
    pub fn from_episodes(controller: String, per_episode: Vec<EpisodeStat>) -> Self {
        let n = per_episode.len();
        let total: u64 = per_episode.iter().map(|e| e.objects_total).sum();
        let captured: u64 = per_episode.iter().map(|e| e.objects_captured).sum();
        let capture_pct = if total == 0 {
            0.0
        } else {
            100.0 * captured as f64 / total as f64
        };
        let pcts: Vec<f64> = per_episode.iter().map(EpisodeStat::pct).collect();
        let mean = if n == 0 {
            0.0
        } else {
            pcts.iter().sum::<f64>() / n as f64
        };
        let stderr = if n < 2 {
            0.0
        } else {
            let var = pcts.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        EvalReport {
            controller,
            episodes: n,
            capture_pct,
            mean_episode_pct: mean,
            stderr,
            per_episode,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Seed of evaluation episode `index`. Shared by every controller, so reports
/// with the same `seed` are paired episode by episode.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

/// Runs one full episode under `controller`.
pub fn run_episode(controller: &Controller, env: &EnvConfig, env_seed: u64) -> Result<EpisodeStat> {
    let mut state = EnvState::init_episode(env, env_seed)?;
    let mut ctl = controller.start(derive_seed(env_seed, 0xC0DE));
    while !state.is_done() {
        let actions = ctl.act(&state)?;
        state.step(&actions)?;
    }
    Ok(EpisodeStat {
        objects_total: state.objects_total(),
        objects_captured: state.captured_total(),
    })
}

/// Evaluates `controller` over `episodes` seeded episodes.
pub fn evaluate(
    controller: &Controller,
    env: &EnvConfig,
    episodes: usize,
    seed: u64,
    exec: Exec,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Usage("episodes must be at least 1".into()));
    }
    env.validate()?;
    let stats = map_indexed(episodes, exec, |i| {
        run_episode(controller, env, episode_seed(seed, i))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_episodes(controller.name(), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{IntSpan, Span};

    fn small_env() -> EnvConfig {
        EnvConfig {
            horizon: IntSpan(100, 200),
            n_objects: IntSpan(5, 15),
            n_sensors: IntSpan(1, 2),
            ..EnvConfig::default()
        }
    }

    #[test]
    fn idle_on_static_scene_captures_only_initial_overlaps() {
        let env = EnvConfig {
            object_speed: Span::fixed(0.0),
            spawn_rate: 0.0,
            ..small_env()
        };
        let r = evaluate(&Controller::Idle, &env, 10, 1, Exec::Sequential).unwrap();
        // nothing moves, so every capture happens on the first step
        for (i, e) in r.per_episode.iter().enumerate() {
            let mut s = EnvState::init_episode(&env, episode_seed(1, i)).unwrap();
            let first = s.step(&vec![Action::NoOp; s.sensors.len()]).unwrap();
            assert_eq!(first.total_reward() as u64, e.objects_captured);
        }
    }

    #[test]
    fn reports_are_deterministic_and_consistent() {
        let env = small_env();
        let ctl = Controller::Random { include_noop: true };
        let a = evaluate(&ctl, &env, 12, 5, Exec::Parallel).unwrap();
        let b = evaluate(&ctl, &env, 12, 5, Exec::Sequential).unwrap();
        assert_eq!(a, b);
        let total: u64 = a.per_episode.iter().map(|e| e.objects_total).sum();
        let cap: u64 = a.per_episode.iter().map(|e| e.objects_captured).sum();
        assert!((a.capture_pct - 100.0 * cap as f64 / total as f64).abs() < 1e-12);
        assert!((0.0..=100.0).contains(&a.capture_pct));
        assert!(a
            .per_episode
            .iter()
            .all(|e| e.objects_captured <= e.objects_total));
    }

    #[test]
    fn baseline_names_round_trip() {
        for name in ["idle", "random", "random-noop", "lawnmower"] {
            assert_eq!(Controller::baseline(name).unwrap().name(), name);
        }
        assert!(Controller::baseline("spiral").is_err());
    }

    #[test]
    fn learned_controller_runs() {
        let ctl = Controller::Learned {
            params: Arc::new(crate::agent::init_params(0)),
            aggregation: Aggregation::Sum,
            mode: ActionMode::Deterministic,
        };
        let env = EnvConfig {
            horizon: IntSpan(20, 20),
            ..small_env()
        };
        let a = evaluate(&ctl, &env, 2, 3, Exec::Sequential).unwrap();
        assert_eq!(a, evaluate(&ctl, &env, 2, 3, Exec::Parallel).unwrap());
    }
}
