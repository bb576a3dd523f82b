//! Small reverse-mode differentiation engine: tensors, a recording tape with
//! the neural-network primitives used by the routing surrogate, Adam, and a
//! finite-difference gradient checker.

mod adam;
mod check;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use check::{finite_difference_check, max_relative_error, FdReport, FD_RELATIVE_FLOOR};
pub use tape::{sigmoid, Gradients, Tape, Term, Var, BCE_CLAMP, LAYER_NORM_EPS};
pub use tensor::Tensor;

pub(crate) use tape::soft_maximum_with_weights;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty vector")]
    EmptyVector,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalarOutput(Vec<usize>),
    #[error("variable is not recorded on this tape or does not require gradients")]
    InputNotOnTape,
}

/// Plain-value temperature softmax maximum.
pub fn soft_maximum(x: &[f64], tau: f64) -> Result<f64, DiffError> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(DiffError::NonPositiveTemperature(tau));
    }
    if x.is_empty() {
        return Err(DiffError::EmptyVector);
    }
    Ok(soft_maximum_with_weights(x, tau).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
            let b = random_tensor(&mut rng, &[3], -1.0, 1.0);
            let gain = random_tensor(&mut rng, &[4], 0.5, 1.5);
            let bias = random_tensor(&mut rng, &[4], -0.5, 0.5);
            let x = random_tensor(&mut rng, &[5, 4], -2.0, 2.0);
            let labels = Arc::new(Tensor::new(
                vec![5, 3],
                (0..15).map(|_| f64::from(rng.gen_bool(0.3) as u8)).collect(),
            )
            .unwrap());
            let checks: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Result<Var, DiffError>>)> = vec![
                ("affine+sigmoid+bce", Box::new({
                    let (w, b, labels) = (w.clone(), b.clone(), labels.clone());
                    move |t: &mut Tape, x| {
                        let w = t.constant(w.clone());
                        let b = t.constant(b.clone());
                        let y = t.affine(x, w, Some(b))?;
                        let p = t.sigmoid(y)?;
                        t.binary_cross_entropy(p, labels.clone())
                    }
                })),
                ("layer_norm", Box::new({
                    let (gain, bias) = (gain.clone(), bias.clone());
                    move |t: &mut Tape, x| {
                        let g = t.constant(gain.clone());
                        let b = t.constant(bias.clone());
                        let y = t.layer_norm(x, g, b)?;
                        let sq = t.mul(y, y)?;
                        let y3 = t.mul(sq, y)?;
                        t.sum(y3)
                    }
                })),
                ("soft_maximum", Box::new(|t: &mut Tape, x| t.soft_maximum(x, 0.7))),
                ("matmul+concat+gather", Box::new({
                    let w = w.clone();
                    move |t: &mut Tape, x| {
                        let wt = t.constant(w.clone().reshaped(vec![4, 3]).unwrap());
                        let y = t.matmul(x, wt)?;
                        let c = t.concat(&[y, x])?;
                        let g = t.gather_rows(c, Arc::new(vec![4, 0, 0, 2]))?;
                        let s = t.scatter_add_rows(g, Arc::new(vec![1, 1, 0, 1]), 2)?;
                        let sq = t.mul(s, s)?;
                        t.sum(sq)
                    }
                })),
            ];
            for (name, f) in &checks {
                let report = finite_difference_check(f, &x, 1e-5).unwrap();
                assert!(report.max_rel_error < 1e-4, "{name} seed {seed}: {report:?}");
            }
            // Parameter-side gradients of affine and layer_norm.
            let report = finite_difference_check(
                |t, wv| {
                    let xv = t.constant(x.clone());
                    let bv = t.constant(b.clone());
                    let y = t.affine(xv, wv, Some(bv))?;
                    let r = t.relu(y)?;
                    let sq = t.mul(r, r)?;
                    t.sum(sq)
                },
                &w,
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "affine weight seed {seed}: {report:?}");
            let report = finite_difference_check(
                |t, gv| {
                    let xv = t.constant(x.clone());
                    let bv = t.constant(bias.clone());
                    let y = t.layer_norm(xv, gv, bv)?;
                    let s = t.sigmoid(y)?;
                    t.sum(s)
                },
                &gain,
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "layer_norm gain seed {seed}: {report:?}");
        }
    }

    #[test]
    fn soft_maximum_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.gen_range(1..12);
            let x = random_tensor(&mut rng, &[n], 0.0, 2.0);
            let report = finite_difference_check(|t, x| t.soft_maximum(x, 0.1), &x, 1e-5).unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
            // Uniform shift raises the value one-for-one.
            let total: f64 = report.analytic.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn soft_maximum_bounds(x in proptest::collection::vec(-5.0f64..5.0, 1..30)) {
            let max = x.iter().copied().fold(f64::MIN, f64::max);
            let mut prev_gap = f64::INFINITY;
            for tau in [1.0, 0.1, 0.01] {
                let s = soft_maximum(&x, tau).unwrap();
                prop_assert!(s <= max + tau * (x.len() as f64).ln() + 1e-12);
                let gap = max - s;
                prop_assert!(gap <= prev_gap + 1e-12);
                prev_gap = gap;
            }
        }

        #[test]
        fn soft_maximum_permutation_invariant(
            x in proptest::collection::vec(-5.0f64..5.0, 1..30),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let mut y = x.clone();
            y.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = soft_maximum(&x, 0.1).unwrap();
            let b = soft_maximum(&y, 0.1).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
