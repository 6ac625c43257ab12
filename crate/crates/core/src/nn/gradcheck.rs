//! Central finite-difference checks of reverse-mode gradients.
//!
//! Only forward evaluations are used on the numeric side. A coordinate whose
//! perturbation flips any ReLU activation is skipped, since the loss is not
//! differentiable across that kink and the difference quotient is meaningless
//! there.

use rand::seq::index::sample;
use rand::Rng;

use super::{init_affine, ParameterStore, Tape, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative errors, so that gradients that are zero up
/// to rounding are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

fn coordinates<R: Rng + ?Sized>(len: usize, limit: Option<usize>, rng: &mut R) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let mut idx = sample(rng, len, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Checks `build` (which maps input vars to a scalar loss) against central
/// differences in every parameter and every input. `limit` caps the number
/// of sampled coordinates per tensor.
pub fn check_function<F, R>(
    name: &str,
    params: &ParameterStore,
    inputs: &[Tensor],
    build: F,
    limit: Option<usize>,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |p: &ParameterStore, xs: &[Tensor]| -> Result<(f64, Vec<Vec<bool>>)> {
        let mut tape = Tape::new(p);
        let vars = xs
            .iter()
            .map(|x| tape.input(x.clone(), false))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut tape, &vars)?;
        Ok((tape.value(loss).data()[0], tape.relu_patterns()))
    };

    let mut tape = Tape::new(params);
    let vars = inputs
        .iter()
        .map(|x| tape.input(x.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut tape, &vars)?;
    let base_pattern = tape.relu_patterns();
    let back = tape.backward(loss)?;

    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut record = |analytic: f64, plus: (f64, Vec<Vec<bool>>), minus: (f64, Vec<Vec<bool>>)| {
        if plus.1 != base_pattern || minus.1 != base_pattern {
            report.skipped_kinks += 1;
            return;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * FD_STEP);
        report.max_rel_error = report.max_rel_error.max(relative_error(analytic, numeric));
        report.checked += 1;
    };

    for (pname, t) in params.iter() {
        let analytic = back.params().get(pname)?.clone();
        for i in coordinates(t.len(), limit, rng) {
            let mut p = params.clone();
            p.get_mut(pname)?.data_mut()[i] += FD_STEP;
            let plus = eval(&p, inputs)?;
            p.get_mut(pname)?.data_mut()[i] -= 2.0 * FD_STEP;
            let minus = eval(&p, inputs)?;
            record(analytic.data()[i], plus, minus);
        }
    }
    for (k, (x, v)) in inputs.iter().zip(&vars).enumerate() {
        let Some(analytic) = back.grad(*v).cloned() else {
            continue;
        };
        for i in coordinates(x.len(), limit, rng) {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += FD_STEP;
            let plus = eval(params, &xs)?;
            xs[k].data_mut()[i] -= 2.0 * FD_STEP;
            let minus = eval(params, &xs)?;
            record(analytic.data()[i], plus, minus);
        }
    }
    Ok(report)
}

fn random_tensor<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("shape")
}

/// Projects an arbitrary tensor onto a scalar with fixed random weights.
fn project(tape: &mut Tape<'_>, y: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.input(weights.clone(), false)?;
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

/// One finite-difference check per differentiable op type.
pub fn layer_suite<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<GradCheckReport>> {
    let (n, din, dout) = (6, 5, 4);
    let mut params = ParameterStore::new();
    init_affine(&mut params, "l", din, dout, rng);
    let empty = ParameterStore::new();
    let x = random_tensor(&[n, din], -1.0, 1.0, rng);
    let proj_out = random_tensor(&[n, dout], -1.0, 1.0, rng);
    let proj_in = random_tensor(&[n, din], -1.0, 1.0, rng);
    let proj_seg = random_tensor(&[3, din], -1.0, 1.0, rng);
    let proj_vec = random_tensor(&[n], -1.0, 1.0, rng);
    let gates = random_tensor(&[n], 0.2, 1.5, rng);
    let other = random_tensor(&[n, din], -1.0, 1.0, rng);
    let mask: Vec<f64> = (0..n * din)
        .map(|_| if rng.random_bool(0.3) { 0.0 } else { 1.0 / 0.7 })
        .collect();
    let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..din)).collect();

    let mut out = Vec::new();
    out.push(check_function(
        "affine",
        &params,
        std::slice::from_ref(&x),
        |t, v| {
            let (w, b) = (t.param("l.weight")?, t.param("l.bias")?);
            let y = t.affine(v[0], w, b)?;
            project(t, y, &proj_out)
        },
        None,
        rng,
    )?);
    out.push(check_function(
        "relu",
        &empty,
        std::slice::from_ref(&x),
        |t, v| {
            let y = t.relu(v[0])?;
            project(t, y, &proj_in)
        },
        None,
        rng,
    )?);
    out.push(check_function(
        "dropout",
        &empty,
        std::slice::from_ref(&x),
        |t, v| {
            let y = t.dropout_with_mask(v[0], mask.clone())?;
            project(t, y, &proj_in)
        },
        None,
        rng,
    )?);
    out.push(check_function(
        "scale_rows",
        &empty,
        &[x.clone(), gates.clone()],
        |t, v| {
            let y = t.scale_rows(v[0], v[1])?;
            project(t, y, &proj_in)
        },
        None,
        rng,
    )?);
    for mean in [false, true] {
        out.push(check_function(
            if mean { "segment_mean" } else { "segment_sum" },
            &empty,
            std::slice::from_ref(&x),
            |t, v| {
                let y = t.segment_reduce(v[0], vec![0, 2, 2, n], mean)?;
                project(t, y, &proj_seg)
            },
            None,
            rng,
        )?);
    }
    out.push(check_function(
        "log_softmax",
        &empty,
        std::slice::from_ref(&x),
        |t, v| {
            let y = t.log_softmax(v[0])?;
            project(t, y, &proj_in)
        },
        None,
        rng,
    )?);
    out.push(check_function(
        "softmax",
        &empty,
        std::slice::from_ref(&x),
        |t, v| {
            let y = t.softmax(v[0])?;
            project(t, y, &proj_in)
        },
        None,
        rng,
    )?);
    out.push(check_function(
        "elementwise",
        &empty,
        &[x.clone(), other.clone()],
        |t, v| {
            let e = t.exp(v[0])?;
            let m = t.mul(e, v[1])?;
            let s = t.square(v[1])?;
            let a = t.add(m, s)?;
            let d = t.sub(a, v[0])?;
            let k = t.scale(d, -0.7)?;
            project(t, k, &proj_in)
        },
        None,
        rng,
    )?);
    out.push(check_function(
        "reductions",
        &empty,
        std::slice::from_ref(&x),
        |t, v| {
            let g = t.gather(v[0], picks.clone())?;
            let s = t.sum_last(v[0])?;
            let sq = t.square(s)?;
            let a = t.add(g, sq)?;
            let r = t.reshape(a, vec![n, 1])?;
            let r = t.reshape(r, vec![n])?;
            project(t, r, &proj_vec)
        },
        None,
        rng,
    )?);
    Ok(out)
}
