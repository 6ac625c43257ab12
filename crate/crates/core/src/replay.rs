//! Drives simulated sensors over objects taken verbatim from a detection
//! trace.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{Controller, EpisodeStat, EvalReport};
use crate::parallel::derive_seed;
use crate::sim::{
    capture_pass, move_sensors, place_sensors, Dynamics, EnvConfig, EnvState, EpisodeParams,
    SimObject,
};
use crate::trace::{Detection, TraceEpisode};

fn objects_at(dets: Option<&Vec<Detection>>, captured: &BTreeSet<u64>) -> Vec<SimObject> {
    dets.map(|ds| {
        ds.iter()
            .map(|d| SimObject {
                id: d.track_id,
                bbox: d.bbox,
                heading: 0.0,
                speed: 0.0,
                moving: false,
                captured: captured.contains(&d.track_id),
            })
            .collect()
    })
    .unwrap_or_default()
}

/// Replays `trace` with `n_sensors` sensors steered by `controller`, one step
/// per trace time unit from the first to the last frame. Sensor sizes and
/// speeds come from `env`, rescaled by the ratio of the trace's scene width
/// to `env.scene.width`. `on_frame` sees the state at every time step.
pub fn replay<F>(
    trace: &TraceEpisode,
    controller: &Controller,
    n_sensors: u32,
    env: &EnvConfig,
    seed: u64,
    mut on_frame: F,
) -> Result<EvalReport>
where
    F: FnMut(&EnvState) -> Result<()>,
{
    trace.validate()?;
    env.validate()?;
    if !(1..=5).contains(&n_sensors) {
        return Err(Error::Usage(format!(
            "n_sensors must be in 1..=5, got {n_sensors}"
        )));
    }
    let universe = trace.track_ids();
    let (Some(first), Some(last)) = (trace.frames.first(), trace.frames.last()) else {
        return Ok(EvalReport::from_episodes(
            controller.name(),
            vec![EpisodeStat {
                objects_total: 0,
                objects_captured: 0,
            }],
        ));
    };
    let by_t: BTreeMap<u64, &Vec<Detection>> =
        trace.frames.iter().map(|f| (f.t, &f.detections)).collect();
    let scene = trace.scene;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = scene.width / env.scene.width;
    let sensors = place_sensors(env, &scene, n_sensors, unit, &mut rng)?;
    let horizon = u32::try_from(last.t - first.t)
        .map_err(|_| Error::Format("trace spans more than 2^32 steps".into()))?;
    let params = EpisodeParams {
        scene,
        n_sensors,
        n_objects: universe.len() as u32,
        time_scale: 1.0,
        horizon,
        spawn_rate: 0.0,
    };
    let still = Dynamics {
        p_toggle: 0.0,
        sigma_turn: 0.0,
        p_reverse: 0.0,
    };
    let mut captured = BTreeSet::new();
    let objects = objects_at(by_t.get(&first.t).copied(), &captured);
    let mut state = EnvState::from_parts(params, still, sensors, objects, seed)?;
    let mut ctl = controller.start(derive_seed(seed, 0xC0DE));
    for t in first.t..=last.t {
        on_frame(&state)?;
        if t == last.t {
            break;
        }
        let actions = ctl.act(&state)?;
        move_sensors(&mut state.sensors, &actions, 1.0, &scene)?;
        state.objects = objects_at(by_t.get(&(t + 1)).copied(), &captured);
        let (_, newly) = capture_pass(&mut state.objects, &state.sensors);
        captured.extend(newly);
        state.t += 1;
    }
    Ok(EvalReport::from_episodes(
        controller.name(),
        vec![EpisodeStat {
            objects_total: universe.len() as u64,
            objects_captured: captured.len() as u64,
        }],
    ))
}
