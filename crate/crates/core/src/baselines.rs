//! Hand-written controllers: uniform random movement and the column-sweeping
//! "lawn mower".

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::SceneBounds;
use crate::sim::{Action, Sensor};

const TOUCH_TOL: f64 = 1e-12;

/// Uniform over all five actions, or over the four moves when `include_noop`
/// is false.
pub fn random_policy<R: Rng + ?Sized>(include_noop: bool, rng: &mut R) -> Action {
    if include_noop {
        Action::ALL[rng.random_range(0..5)]
    } else {
        Action::ALL[rng.random_range(1..5)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepPhase {
    MovingUp,
    MovingDown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SideDirection {
    Right,
    Left,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawnmowerState {
    pub phase: SweepPhase,
    pub side_step_pending: bool,
    pub side: SideDirection,
    /// Column the sensor walks to before it starts sweeping.
    pub target_x: Option<f64>,
}

impl Default for LawnmowerState {
    fn default() -> Self {
        LawnmowerState {
            phase: SweepPhase::MovingUp,
            side_step_pending: false,
            side: SideDirection::Right,
            target_x: None,
        }
    }
}

impl LawnmowerState {
    /// Initial states for a team: a single sensor sweeps from where it is,
    /// several sensors first spread to evenly spaced columns.
    pub fn team(n_sensors: usize, scene: &SceneBounds) -> Vec<LawnmowerState> {
        (0..n_sensors)
            .map(|k| LawnmowerState {
                target_x: (n_sensors > 1)
                    .then(|| scene.width * (k as f64 + 0.5) / n_sensors as f64),
                ..LawnmowerState::default()
            })
            .collect()
    }
}

/// One lawn-mower decision. `time_scale` converts the sensor speed into the
/// distance covered by one action.
pub fn lawnmower_policy(
    state: &LawnmowerState,
    sensor: &Sensor,
    scene: &SceneBounds,
    time_scale: f64,
) -> (Action, LawnmowerState) {
    let mut next = state.clone();
    let v = sensor.view;
    let step = sensor.speed * time_scale;
    let at_right = v.right() >= scene.width - TOUCH_TOL;
    let at_left = v.left() <= TOUCH_TOL;

    if let Some(x) = state.target_x {
        let dx = x - v.cx;
        if dx > 0.5 * step && !at_right {
            return (Action::Right, next);
        }
        if dx < -0.5 * step && !at_left {
            return (Action::Left, next);
        }
        next.target_x = None;
    }

    if state.side_step_pending {
        let action = match (state.side, at_right, at_left) {
            (SideDirection::Right, true, _) => {
                next.side = SideDirection::Left;
                Action::Left
            }
            (SideDirection::Left, _, true) => {
                next.side = SideDirection::Right;
                Action::Right
            }
            (SideDirection::Right, false, _) => Action::Right,
            (SideDirection::Left, _, false) => Action::Left,
        };
        next.side_step_pending = false;
        next.phase = match state.phase {
            SweepPhase::MovingUp => SweepPhase::MovingDown,
            SweepPhase::MovingDown => SweepPhase::MovingUp,
        };
        return (action, next);
    }

    match state.phase {
        SweepPhase::MovingUp => {
            if v.top() + step >= scene.height - TOUCH_TOL {
                next.side_step_pending = true;
            }
            (Action::Up, next)
        }
        SweepPhase::MovingDown => {
            if v.bottom() - step <= TOUCH_TOL {
                next.side_step_pending = true;
            }
            (Action::Down, next)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sensor(cx: f64, cy: f64) -> Sensor {
        Sensor {
            id: 0,
            view: Box2::new(cx, cy, 0.2, 0.2).unwrap(),
            speed: 0.02,
        }
    }

    #[test]
    fn random_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[random_policy(true, &mut rng).index()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.2).abs() < 0.01);
        }
        let noop = (0..n)
            .filter(|_| random_policy(false, &mut rng) == Action::NoOp)
            .count();
        assert_eq!(noop, 0);

        let seq = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| random_policy(true, &mut r))
                .collect::<Vec<_>>()
        };
        assert_eq!(seq(4), seq(4));
    }

    #[test]
    fn interior_motion_follows_phase() {
        let scene = SceneBounds::default();
        let (a, s) = lawnmower_policy(&LawnmowerState::default(), &sensor(0.5, 0.5), &scene, 1.0);
        assert_eq!(a, Action::Up);
        assert!(!s.side_step_pending);
    }

    #[test]
    fn top_contact_triggers_side_step() {
        let scene = SceneBounds::default();
        let top = sensor(0.5, 0.9);
        let (a, s) = lawnmower_policy(&LawnmowerState::default(), &top, &scene, 1.0);
        assert_eq!(a, Action::Up);
        assert!(s.side_step_pending);
        let (a, s) = lawnmower_policy(&s, &top, &scene, 1.0);
        assert_eq!(a, Action::Right);
        assert_eq!(s.phase, SweepPhase::MovingDown);
        assert!(!s.side_step_pending);
    }

    #[test]
    fn side_steps_reverse_at_the_right_edge() {
        let scene = SceneBounds::default();
        let corner = sensor(0.9, 0.9);
        let st = LawnmowerState {
            side_step_pending: true,
            ..LawnmowerState::default()
        };
        let (a, s) = lawnmower_policy(&st, &corner, &scene, 1.0);
        assert_eq!(a, Action::Left);
        assert_eq!(s.side, SideDirection::Left);
    }

    #[test]
    fn team_spreads_over_columns() {
        let scene = SceneBounds::default();
        let team = LawnmowerState::team(4, &scene);
        let xs: Vec<f64> = team.iter().map(|s| s.target_x.unwrap()).collect();
        assert_eq!(xs, vec![0.125, 0.375, 0.625, 0.875]);
        assert!(LawnmowerState::team(1, &scene)[0].target_x.is_none());
        let (a, _) = lawnmower_policy(&team[3], &sensor(0.5, 0.5), &scene, 1.0);
        assert_eq!(a, Action::Right);
    }
}
