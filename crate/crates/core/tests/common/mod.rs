#![allow(dead_code)]

pub mod gradients;

use lemma::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const FLOOR: f64 = 1e-8;
pub const TOLERANCE: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), scale: f64) -> Tensor<f64> {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// `|a - n| / max(|a|, |n|, FLOOR)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FdStats {
    pub worst: f64,
    pub compared: usize,
    /// Stencils whose two sides straddle a leaky ReLU kink, where the
    /// function is not differentiable along the probe and the central
    /// difference means nothing.
    pub skipped: usize,
}

/// Signs of every leaky ReLU output on the tape.
pub fn activation_pattern(tape: &Tape<f64>) -> Vec<bool> {
    tape.ops()
        .filter(|(_, name)| *name == "leaky_relu")
        .flat_map(|(v, _)| tape.value(v).data().iter().map(|&x| x >= 0.0).collect::<Vec<_>>())
        .collect()
}

pub type Eval<'a> = dyn Fn(&[Tensor<f64>]) -> (f64, Vec<bool>) + 'a;

/// Compare `analytic[k]` against central differences of `eval` over at most
/// `per_tensor` randomly chosen coordinates of each tensor in `values`.
pub fn finite_difference(
    values: &mut [Tensor<f64>],
    analytic: &[Vec<f64>],
    eval: &Eval,
    per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> FdStats {
    let base = eval(values).1;
    let mut stats = FdStats::default();
    for k in 0..values.len() {
        let n = values[k].len();
        let coords: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in coords {
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + STEP;
            let (plus, p_plus) = eval(values);
            values[k].data_mut()[i] = orig - STEP;
            let (minus, p_minus) = eval(values);
            values[k].data_mut()[i] = orig;
            if p_plus != base || p_minus != base {
                stats.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            stats.worst = stats.worst.max(rel_err(analytic[k][i], numeric));
            stats.compared += 1;
        }
    }
    stats
}

/// Gradient check for a scalar function recorded on a tape from leaf inputs.
pub fn check_tape(
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> FdStats {
    let run = |vals: &[Tensor<f64>], grads: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone().with_requires_grad(grads))).collect();
        let out = f(&mut tape, &vars).unwrap();
        let value = tape.value(out).data()[0];
        let pattern = activation_pattern(&tape);
        let g = if grads {
            tape.backward(out).unwrap();
            vars.iter().map(|v| tape.grad(*v).unwrap().to_vec()).collect()
        } else {
            Vec::new()
        };
        (value, pattern, g)
    };
    let mut values = inputs;
    let (_, _, analytic) = run(&values, true);
    finite_difference(&mut values, &analytic, &|v| {
        let (value, pattern, _) = run(v, false);
        (value, pattern)
    }, per_tensor, rng)
}

/// Reduce a tensor to a scalar with fixed random weights so no gradient
/// component is trivially uniform.
pub fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let s = tape.shape(x);
    let mut r = rng(seed ^ 0xABCD);
    let w = uniform(&mut r, (s.n(), s.c(), s.h(), s.w()), 1.0);
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}
