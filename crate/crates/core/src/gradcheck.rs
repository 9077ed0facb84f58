//! Finite-difference gradient checking for graphs built on a [`Tape`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the plain difference norm when both are tiny.
pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let norm = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let scale = norm(a.data()).max(norm(b.data()));
    Ok(if scale < 1e-12 { norm(&diff) } else { norm(&diff) / scale })
}

/// Reduce a tensor to a scalar through fixed random weights, so every output
/// element contributes a distinct amount to the loss.
pub fn random_projection(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let r = Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let rv = tape.constant(r);
    let prod = tape.mul(out, rv)?;
    Ok(tape.sum(prod))
}

/// Relative error between tape gradients and central differences for every
/// input of `build`, which must return a single-element loss.
pub fn check<F>(build: F, inputs: &[Tensor<f64>], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = match grads.get(*v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(inputs[i].shape().to_vec()),
        };
        let mut numeric = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.data_mut()[j] = (up - down) / (2.0 * step);
        }
        if !numeric.is_finite() {
            return Err(Error::Numerical(format!("non-finite difference quotient for input {i}")));
        }
        errors.push(relative_error(&analytic, &numeric)?);
    }
    Ok(errors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_gradient_passes_and_wrong_one_fails() {
        let x = Tensor::from_f64(vec![3], &[0.5, -1.0, 2.0]).unwrap();
        let ok = check(
            |t, v| {
                let sq = t.square(v[0]);
                let cube = t.mul(sq, v[0])?;
                Ok(t.sum(cube))
            },
            std::slice::from_ref(&x),
            STEP,
        )
        .unwrap();
        assert!(ok[0] < 1e-8);
        let a = Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap();
        let b = Tensor::from_f64(vec![2], &[1.0, 2.2]).unwrap();
        assert!(relative_error(&a, &b).unwrap() > 0.05);
    }
}
