//! Central finite-difference probes used by the verification suites.
//!
//! The difference helpers stay independent of the tape: they only
//! re-evaluate a caller-supplied scalar function, so they can serve as an
//! oracle for the reverse-mode gradients. `check_tape_grads` wires the two
//! together for any graph builder.

use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Central difference gradient of `f` at `x` with step `h`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Single-coordinate central difference, for spot probes on large inputs.
pub fn central_diff_at(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut probe = x.to_vec();
    probe[i] = x[i] + h;
    let fp = f(&probe);
    probe[i] = x[i] - h;
    let fm = f(&probe);
    (fp - fm) / (2.0 * h)
}

/// Relative error with a magnitude floor so near-zero gradients compare by
/// absolute error instead of blowing up the ratio.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst-case `rel_err` across two gradient vectors.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n, floor))
        .fold(0.0, f64::max)
}

/// Deterministic projection weights so a scalar check exercises every output
/// coordinate with a distinct sensitivity.
pub fn projection(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|i| (0.7 * i as f64 + 0.3).sin()).collect())
        .expect("generated data matches shape")
}

/// Compare reverse-mode gradients of `sum(projection * build(inputs))`
/// against central finite differences over every coordinate of every input.
/// Returns the worst relative error (with `floor` guarding near-zero
/// gradients). The builder runs on a fresh tape per probe, so any state it
/// creates internally (batch-norm stats, dropout masks) must be
/// reconstructed deterministically inside it.
pub fn check_tape_grads(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[ValueId]) -> ValueId,
    h: f64,
    floor: f64,
) -> f64 {
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let mut eval = |coords: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let mut ids = Vec::new();
        let mut off = 0;
        for shape in &shapes {
            let n: usize = shape.iter().product();
            let t = Tensor::from_vec(shape, coords[off..off + n].to_vec())
                .expect("probe preserves shapes");
            off += n;
            ids.push(tape.variable(t));
        }
        let out = build(&mut tape, &ids);
        let w = tape.constant(projection(tape.value(out).shape()));
        let p = tape.mul(out, w).expect("projection shape matches output");
        let loss = tape.sum(p);
        tape.value(loss).item()
    };
    let numeric = central_diff(&mut eval, &flat, h);

    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(&mut tape, &ids);
    let w = tape.constant(projection(tape.value(out).shape()));
    let p = tape.mul(out, w).expect("projection shape matches output");
    let loss = tape.sum(p);
    tape.backward(loss).expect("loss is scalar");
    let analytic: Vec<f64> =
        ids.iter().flat_map(|&id| tape.grad(id).data().iter().copied()).collect();

    max_rel_err(&analytic, &numeric, floor)
}
