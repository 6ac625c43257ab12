//! Finite-difference verification of every layer and of the complete
//! actor-critic loss on simulated relation sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{init_params, Aggregation};
use crate::error::Result;
use crate::nn::gradcheck::{check_function, layer_suite, GradCheckReport};
use crate::observation::TeamObserver;
use crate::sim::{Action, EnvConfig, EnvState, IntSpan};
use crate::trainer::{build_loss, compute_targets, RolloutBuffer, Transition};

/// Coordinates sampled per parameter tensor in the full-model check.
pub const COORDS_PER_TENSOR: usize = 4;

/// A short buffer of simulated relation sets with random actions, rewards
/// and value estimates.
pub fn random_buffer<R: Rng + ?Sized>(seed: u64, rng: &mut R) -> Result<RolloutBuffer> {
    let cfg = EnvConfig {
        n_sensors: IntSpan(1, 3),
        n_objects: IntSpan(1, 6),
        ..EnvConfig::default()
    };
    let mut env = EnvState::init_episode(&cfg, seed)?;
    let mut obs = TeamObserver::new();
    let mut buf = RolloutBuffer::default();
    for _ in 0..rng.random_range(1..=4) {
        let sets = obs.observe(&env)?;
        let actions: Vec<Action> = (0..env.sensors.len())
            .map(|_| Action::from_index(rng.random_range(0..5)).expect("valid index"))
            .collect();
        let result = env.step(&actions)?;
        buf.transitions.push(Transition {
            relations: sets.into_iter().next().expect("at least one sensor"),
            action: actions[0],
            reward: result.total_reward() as f64,
            value: rng.random_range(-1.0..1.0),
        });
    }
    buf.bootstrap = rng.random_range(-1.0..1.0);
    compute_targets(&mut buf, rng.random_range(0.5..1.0));
    Ok(buf)
}

/// Checks the full forward pass and loss (dropout off) for one seed.
pub fn full_model_check(seed: u64, aggregation: Aggregation) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(seed);
    // Sharper policies exercise the softmax away from uniform.
    params.get_mut("policy.weight")?.scale_in_place(10.0);
    let buf = random_buffer(seed, &mut rng)?;
    let beta = rng.random_range(0.0..0.1);
    check_function(
        &format!("rn-a3c loss ({aggregation:?}, seed {seed})"),
        &params,
        &[],
        |tape, _| {
            build_loss::<ChaCha8Rng>(tape, &buf, beta, 0.5, aggregation, None).map(|v| v.loss)
        },
        Some(COORDS_PER_TENSOR),
        &mut rng,
    )
}

/// Every layer check for each seed followed by the full-model check.
pub fn run_suite(seeds: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        out.extend(layer_suite(&mut rng)?);
        let agg = if seed % 4 == 3 {
            Aggregation::Mean
        } else {
            Aggregation::Sum
        };
        out.push(full_model_check(seed, agg)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_model_few_seeds() {
        for seed in 0..3 {
            let r = full_model_check(seed, Aggregation::Sum).unwrap();
            assert!(r.checked >= 20, "{r:?}");
            assert!(r.passes(1e-4), "{r:?}");
        }
    }
}
