//! Central finite-difference gradient checking.
//!
//! The checker re-evaluates the forward pass only, so it is independent of
//! the backward implementation it verifies. Checks run in f64.

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_H: f64 = 1e-5;

/// Builds a scalar loss from leaf variables; called once per perturbation.
pub type BuildFn<'a> = &'a dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Central finite differences of `build` w.r.t. every coordinate of every
/// input, step `h`.
pub fn numerical_grads(build: BuildFn, inputs: &[Tensor<f64>], h: f64) -> Result<Vec<Tensor<f64>>> {
    let eval = |points: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = points.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        tape.value(loss).item()
    };
    let mut grads = Vec::with_capacity(inputs.len());
    let mut points: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let orig = points[i].as_slice()[j];
            points[i].as_mut_slice()[j] = orig + h;
            let fp = eval(&points)?;
            points[i].as_mut_slice()[j] = orig - h;
            let fm = eval(&points)?;
            points[i].as_mut_slice()[j] = orig;
            g.as_mut_slice()[j] = (fp - fm) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Per-coordinate error |a - n| / max(|a|, |n|, 1), maximized over all
/// coordinates of all inputs. The unit floor keeps near-zero gradients from
/// inflating the ratio.
pub fn max_rel_err(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&av, &nv) in a.as_slice().iter().zip(n.as_slice()) {
            let denom = av.abs().max(nv.abs()).max(1.0);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

/// Runs backward once for the analytic gradients, compares against central
/// finite differences, and returns the worst per-coordinate relative error.
pub fn check_gradients(build: BuildFn, inputs: &[Tensor<f64>], h: f64) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape())))
        .collect();
    let numeric = numerical_grads(build, inputs, h)?;
    Ok(max_rel_err(&analytic, &numeric))
}

/// Uniform values in [-1, 1], deterministic in `seed`; coordinates closer
/// than `margin` to zero are pushed outward (used to stay off ReLU-style
/// kinks where the finite difference itself is invalid).
pub fn seeded_uniform(shape: &[usize], seed: u64, margin: f64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = crate::rng::substream(seed, "fd-check");
    let data: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            if v.abs() < margin {
                if v >= 0.0 {
                    v + margin
                } else {
                    v - margin
                }
            } else {
                v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data agree")
}

/// Random loss coefficients so that `sum(c * out)` exercises every output
/// coordinate with a distinct weight.
pub fn random_loss_of(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let c = seeded_uniform(tape.value(out).shape(), seed ^ 0x5eed, 0.05);
    let cv = tape.constant(c);
    let prod = tape.mul(out, cv)?;
    Ok(tape.sum(prod))
}
