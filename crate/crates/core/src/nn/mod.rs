//! Minimal reverse-mode differentiation and dense-layer toolkit.

pub mod checkpoint;
pub mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use optim::{clip_global_norm, global_norm, RmsProp};
pub use tape::{softmax_in_place, Backward, Tape, Var};
pub use tensor::{Gradients, ParameterStore, Tensor};

use rand::Rng;

/// Dense layer initialized uniformly in `+-sqrt(1 / fan_in)`.
pub fn init_affine<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    let bound = (1.0 / fan_in as f64).sqrt();
    let mut draw =
        |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..=bound)).collect() };
    let w = draw(fan_in * fan_out);
    let b = draw(fan_out);
    store.insert(
        format!("{name}.weight"),
        Tensor::matrix(fan_out, fan_in, w).expect("shape"),
    );
    store.insert(
        format!("{name}.bias"),
        Tensor::new(vec![fan_out], b).expect("shape"),
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_wb(w: Tensor, b: Tensor) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("l.weight", w);
        s.insert("l.bias", b);
        s
    }

    fn affine_once(w: Tensor, b: Tensor, x: Tensor) -> Vec<f64> {
        let s = store_wb(w, b);
        let mut tape = Tape::new(&s);
        let x = tape.input(x, false).unwrap();
        let w = tape.param("l.weight").unwrap();
        let b = tape.param("l.bias").unwrap();
        let y = tape.affine(x, w, b).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn affine_examples() {
        let id = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(
            affine_once(id, Tensor::zeros(&[2]), x.clone()),
            vec![3.0, 4.0]
        );
        let w = Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap();
        assert_eq!(
            affine_once(w, Tensor::new(vec![1], vec![1.0]).unwrap(), x.clone()),
            vec![7.0]
        );
        let w = Tensor::zeros(&[1, 2]);
        assert_eq!(
            affine_once(w, Tensor::new(vec![1], vec![5.0]).unwrap(), x),
            vec![5.0]
        );
    }

    #[test]
    fn affine_shape_mismatch() {
        let s = store_wb(Tensor::zeros(&[2, 3]), Tensor::zeros(&[2]));
        let mut tape = Tape::new(&s);
        let x = tape.input(Tensor::zeros(&[1, 2]), false).unwrap();
        let w = tape.param("l.weight").unwrap();
        let b = tape.param("l.bias").unwrap();
        assert!(matches!(tape.affine(x, w, b), Err(Error::Shape(_))));
    }

    #[test]
    fn activation_examples() {
        let s = ParameterStore::new();
        let mut tape = Tape::new(&s);
        let z = tape.input(Tensor::zeros(&[1, 5]), false).unwrap();
        let p = tape.softmax(z).unwrap();
        assert!(tape
            .value(p)
            .data()
            .iter()
            .all(|&v| (v - 0.2).abs() < 1e-15));

        let x = tape
            .input(Tensor::matrix(1, 2, vec![-1.0, 2.0]).unwrap(), false)
            .unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);

        let d = tape.dropout::<ChaCha8Rng>(x, 0.02, None).unwrap();
        assert_eq!(d, x);
        assert!(tape.dropout::<ChaCha8Rng>(x, 1.0, None).is_err());
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = ParameterStore::new();
        let mut tape = Tape::new(&s);
        let data: Vec<f64> = (0..50).map(|_| rng.random_range(-30.0..30.0)).collect();
        let x = tape
            .input(Tensor::matrix(10, 5, data).unwrap(), false)
            .unwrap();
        let p = tape.softmax(x).unwrap();
        for r in 0..10 {
            let row = tape.value(p).row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn dropout_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = ParameterStore::new();
        let trials = 100_000;
        let dims = 4;
        let mut acc = vec![0.0; dims];
        for _ in 0..trials {
            let mut tape = Tape::new(&s);
            let x = tape.input(Tensor::filled(&[1, dims], 1.0), false).unwrap();
            let y = tape.dropout(x, 0.02, Some(&mut rng)).unwrap();
            for (a, v) in acc.iter_mut().zip(tape.value(y).data()) {
                *a += v;
            }
        }
        for a in acc {
            assert!((a / trials as f64 - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn linear_derivative() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::new(vec![1], vec![0.7]).unwrap());
        let mut tape = Tape::new(&s);
        let w = tape.param("w").unwrap();
        let x = tape
            .input(Tensor::new(vec![1], vec![3.0]).unwrap(), false)
            .unwrap();
        let y = tape.mul(w, x).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap().into_params();
        assert_eq!(g.get("w").unwrap().data(), &[3.0]);
    }

    #[test]
    fn neg_log_prob_gradient_closed_form() {
        let s = ParameterStore::new();
        let logits = vec![0.3, -1.2, 2.0, 0.0, 0.5];
        let mut tape = Tape::new(&s);
        let z = tape
            .input(Tensor::matrix(1, 5, logits.clone()).unwrap(), true)
            .unwrap();
        let lp = tape.log_softmax(z).unwrap();
        let pick = tape.gather(lp, vec![2]).unwrap();
        let nll = tape.scale(pick, -1.0).unwrap();
        let loss = tape.sum(nll).unwrap();
        let back = tape.backward(loss).unwrap();
        let mut p = logits.clone();
        softmax_in_place(&mut p);
        for (k, g) in back.grad(z).unwrap().data().iter().enumerate() {
            let want = p[k] - if k == 2 { 1.0 } else { 0.0 };
            assert!((g - want).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let s = ParameterStore::new();
        let mut tape = Tape::new(&s);
        let x = tape.input(Tensor::zeros(&[2]), true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_values_trip() {
        let s = ParameterStore::new();
        let mut tape = Tape::new(&s);
        let x = tape.input(Tensor::scalar(800.0), false).unwrap();
        assert!(matches!(tape.exp(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn empty_segments_sum_to_zero() {
        let s = ParameterStore::new();
        let mut tape = Tape::new(&s);
        let x = tape.input(Tensor::filled(&[3, 2], 1.0), false).unwrap();
        let y = tape.segment_reduce(x, vec![0, 0, 3], false).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 3.0, 3.0]);
        let m = tape.segment_reduce(x, vec![0, 0, 3], true).unwrap();
        assert_eq!(tape.value(m).data(), &[0.0, 0.0, 1.0, 1.0]);
        assert!(tape.segment_reduce(x, vec![0, 2], false).is_err());
    }
}
