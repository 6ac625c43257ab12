//! Relational-network actor-critic.
//!
//! Each relation row goes through the shared MLP `g` (60 -> 128 -> 256 -> 256,
//! ReLU), the rows of one relation set are summed into a single 256-vector,
//! and the sum passes through `f` (256, ReLU, 2% dropout) before two separate
//! heads produce five action logits and a scalar value.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_affine, ParameterStore, Tape, Tensor, Var};
use crate::observation::{RelationSet, RELATION_WIDTH};
use crate::sim::Action;

pub const G_WIDTHS: [usize; 3] = [128, 256, 256];
pub const F_WIDTH: usize = 256;
pub const DROPOUT_RATE: f64 = 0.02;
pub const N_ACTIONS: usize = 5;

const G_LAYERS: [&str; 3] = ["g1", "g2", "g3"];
const F_LAYER: &str = "f1";
const POLICY_HEAD: &str = "policy";
const VALUE_HEAD: &str = "value";

/// How relation vectors are pooled before `f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    #[default]
    Stochastic,
    Deterministic,
}

/// Expected `(name, shape)` of every parameter, in lexicographic order.
pub fn architecture() -> Vec<(String, Vec<usize>)> {
    let mut layers = Vec::new();
    let mut fan_in = RELATION_WIDTH;
    for (name, width) in G_LAYERS.iter().zip(G_WIDTHS) {
        layers.push((*name, fan_in, width));
        fan_in = width;
    }
    layers.push((F_LAYER, fan_in, F_WIDTH));
    layers.push((POLICY_HEAD, F_WIDTH, N_ACTIONS));
    layers.push((VALUE_HEAD, F_WIDTH, 1));
    let mut out: Vec<(String, Vec<usize>)> = layers
        .into_iter()
        .flat_map(|(n, i, o)| {
            [
                (format!("{n}.bias"), vec![o]),
                (format!("{n}.weight"), vec![o, i]),
            ]
        })
        .collect();
    out.sort();
    out
}

/// Freshly initialized parameters; deterministic in `seed`.
pub fn init_params(seed: u64) -> ParameterStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let mut fan_in = RELATION_WIDTH;
    for (name, width) in G_LAYERS.iter().zip(G_WIDTHS) {
        init_affine(&mut store, name, fan_in, width, &mut rng);
        fan_in = width;
    }
    init_affine(&mut store, F_LAYER, fan_in, F_WIDTH, &mut rng);
    init_affine(&mut store, POLICY_HEAD, F_WIDTH, N_ACTIONS, &mut rng);
    init_affine(&mut store, VALUE_HEAD, F_WIDTH, 1, &mut rng);
    store
}

/// Rejects stores whose names or shapes differ from the architecture.
pub fn check_architecture(params: &ParameterStore) -> Result<()> {
    let want = architecture();
    let got: Vec<(String, Vec<usize>)> = params
        .iter()
        .map(|(k, t)| (k.clone(), t.shape().to_vec()))
        .collect();
    if got != want {
        return Err(Error::Version(
            "checkpoint does not match the relational actor-critic architecture".into(),
        ));
    }
    Ok(())
}

/// Tape handles produced by one batched forward pass.
pub struct ForwardVars {
    /// `[B, 5]`
    pub logits: Var,
    /// `[B]`
    pub value: Var,
    /// `[N, 256]` post-`g` relation vectors (before gating).
    pub relations: Var,
    /// Row offsets of each relation set inside `relations`.
    pub offsets: Vec<usize>,
}

/// Records a batched forward pass of several relation sets on `tape`.
///
/// `gates`, when given, is a `[N]` var multiplying each relation vector
/// before pooling. Dropout is active only when `dropout_rng` is provided.
pub fn forward_batch<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    sets: &[&RelationSet],
    aggregation: Aggregation,
    gates: Option<Var>,
    dropout_rng: Option<&mut R>,
) -> Result<ForwardVars> {
    let mut offsets = Vec::with_capacity(sets.len() + 1);
    offsets.push(0);
    let total: usize = sets.iter().map(|s| s.n_rows()).sum();
    let mut rows = Vec::with_capacity(total * RELATION_WIDTH);
    for s in sets {
        if s.rows.len() != s.n_rows() * RELATION_WIDTH {
            return Err(Error::Shape(format!(
                "relation rows must be {RELATION_WIDTH} wide, got {} values for {} rows",
                s.rows.len(),
                s.n_rows()
            )));
        }
        rows.extend_from_slice(&s.rows);
        offsets.push(offsets.last().unwrap() + s.n_rows());
    }
    let mut h = tape.input(Tensor::matrix(total, RELATION_WIDTH, rows)?, false)?;
    for name in G_LAYERS {
        let w = tape.param(&format!("{name}.weight"))?;
        let b = tape.param(&format!("{name}.bias"))?;
        h = tape.affine(h, w, b)?;
        h = tape.relu(h)?;
    }
    let relations = h;
    let gated = match gates {
        Some(g) => tape.scale_rows(relations, g)?,
        None => relations,
    };
    let pooled = tape.segment_reduce(gated, offsets.clone(), aggregation == Aggregation::Mean)?;
    let w = tape.param(&format!("{F_LAYER}.weight"))?;
    let b = tape.param(&format!("{F_LAYER}.bias"))?;
    let mut z = tape.affine(pooled, w, b)?;
    z = tape.relu(z)?;
    z = tape.dropout(z, DROPOUT_RATE, dropout_rng)?;
    let w = tape.param(&format!("{POLICY_HEAD}.weight"))?;
    let b = tape.param(&format!("{POLICY_HEAD}.bias"))?;
    let logits = tape.affine(z, w, b)?;
    let w = tape.param(&format!("{VALUE_HEAD}.weight"))?;
    let b = tape.param(&format!("{VALUE_HEAD}.bias"))?;
    let value = tape.affine(z, w, b)?;
    let value = tape.reshape(value, vec![sets.len()])?;
    Ok(ForwardVars {
        logits,
        value,
        relations,
        offsets,
    })
}

/// Policy and value for one relation set.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub probs: [f64; N_ACTIONS],
    pub logits: [f64; N_ACTIONS],
    pub value: f64,
    /// `[n, 256]` post-`g` relation vectors.
    pub relation_activations: Tensor,
}

fn outputs(tape: &Tape<'_>, fv: &ForwardVars) -> Result<Vec<PolicyOutput>> {
    let logits = tape.value(fv.logits);
    let values = tape.value(fv.value);
    let rel = tape.value(fv.relations);
    let width = rel.cols();
    (0..fv.offsets.len() - 1)
        .map(|b| {
            let mut l = [0.0; N_ACTIONS];
            l.copy_from_slice(logits.row(b));
            let mut p = l;
            crate::nn::softmax_in_place(&mut p);
            let (lo, hi) = (fv.offsets[b], fv.offsets[b + 1]);
            Ok(PolicyOutput {
                probs: p,
                logits: l,
                value: values.data()[b],
                relation_activations: Tensor::matrix(
                    hi - lo,
                    width,
                    rel.data()[lo * width..hi * width].to_vec(),
                )?,
            })
        })
        .collect()
}

/// Forward pass of one relation set. Dropout is applied only when `train_rng`
/// is given.
pub fn forward<R: Rng + ?Sized>(
    params: &ParameterStore,
    rel: &RelationSet,
    aggregation: Aggregation,
    train_rng: Option<&mut R>,
) -> Result<PolicyOutput> {
    let mut tape = Tape::new(params);
    let fv = forward_batch(&mut tape, &[rel], aggregation, None, train_rng)?;
    Ok(outputs(&tape, &fv)?.pop().expect("one output"))
}

/// Evaluation-mode forward pass of several relation sets in one batch.
pub fn forward_many(
    params: &ParameterStore,
    sets: &[&RelationSet],
    aggregation: Aggregation,
) -> Result<Vec<PolicyOutput>> {
    let mut tape = Tape::new(params);
    let fv = forward_batch::<ChaCha8Rng>(&mut tape, sets, aggregation, None, None)?;
    outputs(&tape, &fv)
}

/// Samples from `probs` or takes its argmax (lowest index wins ties).
pub fn select_action<R: Rng + ?Sized>(
    probs: &[f64; N_ACTIONS],
    mode: ActionMode,
    rng: &mut R,
) -> Action {
    let idx = match mode {
        ActionMode::Deterministic => {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            best
        }
        ActionMode::Stochastic => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave u >= acc; fall back to the last supported action
            pick.unwrap_or_else(|| probs.iter().rposition(|&p| p > 0.0).unwrap_or(0))
        }
    };
    Action::from_index(idx).expect("index below N_ACTIONS")
}
