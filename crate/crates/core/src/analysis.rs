//! Per-relation attribution: how much each relation row pushes the action
//! distribution away from uniform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{forward_batch, init_params, select_action, ActionMode, Aggregation, N_ACTIONS};
use crate::error::{Error, Result};
use crate::nn::{ParameterStore, Tape, Tensor, Var};
use crate::observation::{EntityId, RelationSet, TeamObserver};
use crate::parallel::derive_seed;
use crate::sim::{Action, EnvConfig, EnvState, IntSpan};

/// Which KL divergence to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// KL(uniform || pi).
    #[default]
    UniformPolicy,
    /// KL(pi || uniform).
    PolicyUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionReport {
    pub pairs: Vec<(EntityId, EntityId)>,
    pub contributions: Vec<f64>,
    pub action: Action,
    pub probs: [f64; N_ACTIONS],
    pub divergence: f64,
}

impl ContributionReport {
    /// Largest absolute contribution, 0 when all vanish.
    pub fn max_abs(&self) -> f64 {
        self.contributions.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn sidecar(&self, t: u32) -> ContributionRecord {
        ContributionRecord {
            t,
            pairs: self.pairs.clone(),
            values: self.contributions.clone(),
            action: self.action,
            probs: self.probs,
        }
    }
}

/// One line of the per-frame contribution sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionRecord {
    pub t: u32,
    pub pairs: Vec<(EntityId, EntityId)>,
    pub values: Vec<f64>,
    pub action: Action,
    pub probs: [f64; N_ACTIONS],
}

fn divergence(tape: &mut Tape<'_>, logits: Var, direction: KlDirection) -> Result<Var> {
    let log_probs = tape.log_softmax(logits)?;
    let k = N_ACTIONS as f64;
    match direction {
        KlDirection::UniformPolicy => {
            // sum_k (1/K) (ln(1/K) - ln pi_k)
            let s = tape.sum(log_probs)?;
            let scaled = tape.scale(s, -1.0 / k)?;
            let offset = tape.input(Tensor::scalar(-k.ln()), false)?;
            tape.add(scaled, offset)
        }
        KlDirection::PolicyUniform => {
            // sum_k pi_k (ln pi_k - ln(1/K))
            let probs = tape.exp(log_probs)?;
            let plogp = tape.mul(probs, log_probs)?;
            let s = tape.sum(plogp)?;
            let offset = tape.input(Tensor::scalar(k.ln()), false)?;
            tape.add(s, offset)
        }
    }
}

fn gated_divergence(
    params: &ParameterStore,
    rel: &RelationSet,
    aggregation: Aggregation,
    direction: KlDirection,
    gates: &[f64],
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>, [f64; N_ACTIONS])> {
    if rel.n_rows() == 0 {
        return Err(Error::Usage(
            "relation contributions need a non-empty relation set".into(),
        ));
    }
    if gates.len() != rel.n_rows() {
        return Err(Error::Shape(format!(
            "{} gates for {} relation rows",
            gates.len(),
            rel.n_rows()
        )));
    }
    let mut tape = Tape::new(params);
    let g = tape.input(Tensor::new(vec![gates.len()], gates.to_vec())?, want_grad)?;
    let fv = forward_batch::<ChaCha8Rng>(&mut tape, &[rel], aggregation, Some(g), None)?;
    let d = divergence(&mut tape, fv.logits, direction)?;
    let mut probs = [0.0; N_ACTIONS];
    probs.copy_from_slice(tape.value(fv.logits).data());
    crate::nn::softmax_in_place(&mut probs);
    let value = tape.value(d).data()[0];
    if !want_grad {
        return Ok((value, None, probs));
    }
    let back = tape.backward(d)?;
    let grad = back
        .grad(g)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; gates.len()]);
    Ok((value, Some(grad), probs))
}

/// Divergence of the policy from uniform when the g outputs of each row are
/// scaled by `gates` before aggregation.
pub fn divergence_with_gates(
    params: &ParameterStore,
    rel: &RelationSet,
    aggregation: Aggregation,
    direction: KlDirection,
    gates: &[f64],
) -> Result<f64> {
    gated_divergence(params, rel, aggregation, direction, gates, false).map(|r| r.0)
}

/// Derivative of the divergence with respect to per-row gates at all-ones.
pub fn relation_contributions(
    params: &ParameterStore,
    rel: &RelationSet,
    aggregation: Aggregation,
    direction: KlDirection,
) -> Result<ContributionReport> {
    let ones = vec![1.0; rel.n_rows()];
    let (divergence, grad, probs) =
        gated_divergence(params, rel, aggregation, direction, &ones, true)?;
    let contributions = grad.expect("gradient requested");
    if contributions.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("non-finite relation contribution".into()));
    }
    // Deterministic selection draws nothing from the generator.
    let action = select_action(
        &probs,
        ActionMode::Deterministic,
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    Ok(ContributionReport {
        pairs: rel.pair_index.clone(),
        contributions,
        action,
        probs,
        divergence,
    })
}

/// Relation set of a random sensor in a short random-action episode.
pub fn sample_relation_set(seed: u64) -> Result<RelationSet> {
    let cfg = EnvConfig {
        n_sensors: IntSpan(1, 3),
        n_objects: IntSpan(1, 8),
        ..EnvConfig::default()
    };
    let mut env = EnvState::init_episode(&cfg, seed)?;
    let mut obs = TeamObserver::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sets = obs.observe(&env)?;
    for _ in 0..rng.random_range(0..6) {
        let actions: Vec<Action> = (0..env.sensors.len())
            .map(|_| Action::from_index(rng.random_range(0..5)).expect("valid index"))
            .collect();
        env.step(&actions)?;
        sets = obs.observe(&env)?;
    }
    let k = rng.random_range(0..sets.len());
    Ok(sets.swap_remove(k))
}

/// Ranks from 0 with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Outcome of ablating the highest- and lowest-|contribution| relation in
/// random (parameters, relation set) draws.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskingStudy {
    pub draws: usize,
    /// `|contribution|` of each ablated relation, two per draw.
    pub contributions: Vec<f64>,
    /// `|change in divergence|` caused by each ablation.
    pub deltas: Vec<f64>,
    pub top_mean: f64,
    pub bottom_mean: f64,
    pub spearman: f64,
}

/// Draws sets with at least two relations and sharpened random policies,
/// then ablates (gate 0) the top and bottom relation of each.
pub fn masking_study(draws: usize, seed: u64) -> Result<MaskingStudy> {
    let dir = KlDirection::UniformPolicy;
    let (mut contributions, mut deltas) = (Vec::new(), Vec::new());
    let (mut top, mut bottom) = (0.0, 0.0);
    let mut k = 0;
    let mut done = 0;
    while done < draws {
        k += 1;
        let s = derive_seed(seed, k);
        let rel = sample_relation_set(s)?;
        if rel.n_rows() < 2 {
            continue;
        }
        done += 1;
        let mut params = init_params(s);
        params.get_mut("policy.weight")?.scale_in_place(20.0);
        let r = relation_contributions(&params, &rel, Aggregation::Sum, dir)?;
        let ablate = |i: usize| -> Result<f64> {
            let mut g = vec![1.0; rel.n_rows()];
            g[i] = 0.0;
            Ok(
                (divergence_with_gates(&params, &rel, Aggregation::Sum, dir, &g)? - r.divergence)
                    .abs(),
            )
        };
        let mut order: Vec<usize> = (0..rel.n_rows()).collect();
        order.sort_by(|&a, &b| {
            r.contributions[a]
                .abs()
                .total_cmp(&r.contributions[b].abs())
        });
        let (lo, hi) = (order[0], order[order.len() - 1]);
        let (d_lo, d_hi) = (ablate(lo)?, ablate(hi)?);
        top += d_hi;
        bottom += d_lo;
        contributions.extend([r.contributions[lo].abs(), r.contributions[hi].abs()]);
        deltas.extend([d_lo, d_hi]);
    }
    let rho = spearman(&contributions, &deltas);
    Ok(MaskingStudy {
        draws,
        contributions,
        deltas,
        top_mean: top / draws.max(1) as f64,
        bottom_mean: bottom / draws.max(1) as f64,
        spearman: rho,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{relative_error, FD_STEP};

    fn sharpen(params: &mut ParameterStore, factor: f64) {
        params
            .get_mut("policy.weight")
            .unwrap()
            .scale_in_place(factor);
    }

    fn sample_set(seed: u64) -> RelationSet {
        sample_relation_set(seed).unwrap()
    }

    #[test]
    fn empty_set_is_usage_error() {
        let rel = RelationSet {
            condition: vec![0.0; 20],
            ..RelationSet::default()
        };
        let err = relation_contributions(
            &init_params(0),
            &rel,
            Aggregation::Sum,
            KlDirection::default(),
        );
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn zero_at_uniform() {
        let mut params = init_params(1);
        for v in params.get_mut("policy.weight").unwrap().data_mut() {
            *v = 0.0;
        }
        for v in params.get_mut("policy.bias").unwrap().data_mut() {
            *v = 0.3;
        }
        for dir in [KlDirection::UniformPolicy, KlDirection::PolicyUniform] {
            let r = relation_contributions(&params, &sample_set(3), Aggregation::Sum, dir).unwrap();
            assert!(r.probs.iter().all(|p| (p - 0.2).abs() < 1e-12));
            assert!(r.contributions.iter().all(|c| c.abs() < 1e-9));
        }
    }

    #[test]
    fn matches_finite_differences() {
        for seed in 0..8 {
            let mut params = init_params(seed);
            sharpen(&mut params, 20.0);
            let rel = sample_set(seed);
            for dir in [KlDirection::UniformPolicy, KlDirection::PolicyUniform] {
                let r = relation_contributions(&params, &rel, Aggregation::Sum, dir).unwrap();
                for i in 0..rel.n_rows().min(6) {
                    let mut g = vec![1.0; rel.n_rows()];
                    g[i] += FD_STEP;
                    let plus =
                        divergence_with_gates(&params, &rel, Aggregation::Sum, dir, &g).unwrap();
                    g[i] -= 2.0 * FD_STEP;
                    let minus =
                        divergence_with_gates(&params, &rel, Aggregation::Sum, dir, &g).unwrap();
                    let numeric = (plus - minus) / (2.0 * FD_STEP);
                    let err = relative_error(r.contributions[i], numeric);
                    assert!(
                        err < 1e-4,
                        "seed {seed} row {i}: {} vs {numeric}",
                        r.contributions[i]
                    );
                }
            }
        }
    }

    #[test]
    fn single_row_is_directional_derivative() {
        let mut params = init_params(4);
        sharpen(&mut params, 20.0);
        let mut rel = sample_set(4);
        rel.rows.truncate(crate::observation::RELATION_WIDTH);
        rel.pair_index.truncate(1);
        let r = relation_contributions(&params, &rel, Aggregation::Sum, KlDirection::default())
            .unwrap();
        let d = |s: f64| {
            divergence_with_gates(
                &params,
                &rel,
                Aggregation::Sum,
                KlDirection::default(),
                &[s],
            )
            .unwrap()
        };
        let numeric = (d(1.0 + FD_STEP) - d(1.0 - FD_STEP)) / (2.0 * FD_STEP);
        assert_eq!(r.contributions.len(), 1);
        assert!(relative_error(r.contributions[0], numeric) < 1e-4);
    }

    #[test]
    fn ablating_top_relation_moves_divergence_most() {
        let study = masking_study(120, 0).unwrap();
        assert_eq!(study.draws, 120);
        assert!(study.top_mean >= study.bottom_mean, "{study:?}");
        let n = (2 * study.draws) as f64;
        let t = study.spearman * ((n - 2.0) / (1.0 - study.spearman.powi(2))).sqrt();
        // One-sided 1% critical value of Student's t with >200 degrees of freedom.
        assert!(t > 2.345, "{study:?}");
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0]), vec![1.5, 0.0, 1.5]);
    }

    #[test]
    fn sidecar_round_trips() {
        let r = relation_contributions(
            &init_params(2),
            &sample_set(2),
            Aggregation::Sum,
            KlDirection::default(),
        )
        .unwrap();
        let rec = r.sidecar(7);
        let json = serde_json::to_string(&rec).unwrap();
        let back: ContributionRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.t, 7);
        assert_eq!(back.pairs, r.pairs);
        assert_eq!(back.values.len(), r.contributions.len());
    }
}
