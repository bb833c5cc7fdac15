//! Finite-difference gradient checking.

use ndarray::IxDyn;

use super::tape::{Tape, Tensor, Var};
use crate::Result;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Compare reverse-mode gradients of a scalar function against central
/// finite differences, element by element over every input.
///
/// Returns the worst relative error `|ad - fd| / max(|fd|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_against(&f, &f, inputs, h)
}

/// Like [`grad_check`] but with separate functions for the reverse-mode and
/// finite-difference sides, so a deliberately wrong gradient can be fed to
/// the detector (fault-injection self tests).
pub fn grad_check_against<A, F>(f_ad: &A, f_fd: &F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    A: Fn(&mut Tape, &[Var]) -> Result<Var>,
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(f_ad, inputs)?;
    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f_fd(&mut tape, &vars)?;
        tape.scalar_value(out)
    };
    let mut worst = 0.0_f64;
    for (which, input) in inputs.iter().enumerate() {
        for flat in 0..input.len() {
            let idx = flat_index(input, flat);
            let mut plus = inputs.to_vec();
            plus[which][idx.clone()] += h;
            let mut minus = inputs.to_vec();
            minus[which][idx.clone()] -= h;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let ad = analytic[which][idx];
            let rel = (ad - fd).abs() / fd.abs().max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Reverse-mode gradients of `f` with respect to every input.
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect())
}

fn flat_index(t: &Tensor, mut flat: usize) -> IxDyn {
    let shape = t.shape();
    let mut idx = vec![0usize; shape.len()];
    for d in (0..shape.len()).rev() {
        idx[d] = flat % shape[d];
        flat /= shape[d];
    }
    IxDyn(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::Rng;
    use ndarray::IxDyn;

    fn random(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_shape_fn(IxDyn(shape), |_| rng.uniform(lo, hi))
    }

    #[test]
    fn sum_of_squares_is_exact() {
        // Central differences are exact on quadratics. Inputs bounded away
        // from zero so the relative comparison is not noise-dominated.
        let mut rng = Rng::seed_from(3);
        let x = random(&mut rng, &[1, 1, 4, 4], 0.5, 1.5);
        let err = grad_check(
            |tape, vars| {
                let sq = tape.mul(vars[0], vars[0])?;
                Ok(tape.sum_all(sq))
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "error {err}");
    }

    #[test]
    fn conv_layer_checks_out() {
        let mut rng = Rng::seed_from(4);
        let x = random(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
        let w = random(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
        let b = random(&mut rng, &[3], -0.1, 0.1);
        let err = grad_check(
            |tape, vars| {
                let y = tape.conv2d(vars[0], vars[1], vars[2], 1, 1)?;
                let s = tape.sigmoid(y);
                Ok(tape.mean_all(s))
            },
            &[x, w, b],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "error {err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut rng = Rng::seed_from(5);
        let x = random(&mut rng, &[1, 1, 3, 3], 0.2, 1.0);
        // Doubling the loss in the AD pass only: the analytic gradient is
        // off by exactly 2x, so the detector reports error ~ 1.
        let analytic = analytic_grads(
            &|tape: &mut Tape, vars: &[Var]| {
                let s = tape.sum_all(vars[0]);
                Ok(tape.scale(s, 2.0))
            },
            &[x.clone()],
        )
        .unwrap();
        let fd = 1.0; // true gradient of sum(x) per element
        let rel = (analytic[0][IxDyn(&[0, 0, 0, 0])] - fd).abs() / fd;
        assert!((rel - 1.0).abs() < 1e-12);
    }
}
