//! Central finite-difference checks for the tape ops.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// A named generator of random inputs and the op applied to them.
pub struct OpCase {
    pub name: &'static str,
    pub seed: u64,
    pub make: fn(&mut Rng) -> (Vec<Tensor>, OpFn),
}

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-6;
pub const TRIALS: usize = 100;

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).expect("op case is well formed")
}

/// Values bounded away from zero so kinks stay outside the stencil.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.normal();
            if v.abs() < 1e-2 {
                v.signum() * 0.5 + v
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("op case is well formed")
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Scalar loss `sum(f(x) * w)` for fixed random weights `w`.
fn scalarize(tape: &mut Tape, out: Var, weights: &mut Option<Tensor>, rng: &mut Rng) -> Var {
    let shape = tape.shape(out).to_vec();
    if shape.iter().product::<usize>() == 1 && shape.len() <= 1 {
        return out;
    }
    let w = weights.get_or_insert_with(|| random(rng, &shape)).clone();
    let w = tape.constant(w).expect("op case is well formed");
    let prod = tape.mul(out, w).expect("op case is well formed");
    tape.sum(prod, None).expect("op case is well formed")
}

fn evaluate(
    inputs: &[Tensor],
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    weights: &mut Option<Tensor>,
    rng: &mut Rng,
) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.variable(t.clone()).expect("op case is well formed"))
        .collect();
    let out = f(&mut tape, &vars).expect("op case is well formed");
    let loss = scalarize(&mut tape, out, weights, rng);
    let value = tape.value(loss).item();
    let grads = tape.backward(loss).expect("op case is well formed");
    (value, vars.iter().map(|&v| grads.get(v)).collect())
}

fn value_at(
    inputs: &[Tensor],
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    weights: &mut Option<Tensor>,
    rng: &mut Rng,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.constant(t.clone()).expect("op case is well formed"))
        .collect();
    let out = f(&mut tape, &vars).expect("op case is well formed");
    let loss = scalarize(&mut tape, out, weights, rng);
    tape.value(loss).item()
}

/// Worst relative error `|a - n| / max(|a|, |n|)` over the gradient vector
/// of every input, measured in the 2-norm.
pub fn check_once(
    inputs: Vec<Tensor>,
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    rng: &mut Rng,
) -> f64 {
    let mut weights = None;
    let (_, analytic) = evaluate(&inputs, f, &mut weights, rng);
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for i in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let fp = value_at(&plus, f, &mut weights, rng);
            let fm = value_at(&minus, f, &mut weights, rng);
            numeric[i] = (fp - fm) / (2.0 * H);
        }
        let a = analytic[k].data();
        let diff = libm::sqrt(
            a.iter()
                .zip(&numeric)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>(),
        );
        let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
        let nn = libm::sqrt(numeric.iter().map(|x| x * x).sum::<f64>());
        let scale = na.max(nn);
        let err = if scale < 1e-12 { diff } else { diff / scale };
        worst = worst.max(err);
    }
    worst
}

/// Worst relative error of `case` over `trials` random instances.
pub fn worst_error(case: &OpCase, trials: usize) -> f64 {
    let mut rng = Rng::new(case.seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (inputs, f) = (case.make)(&mut rng);
        worst = worst.max(check_once(inputs, f.as_ref(), &mut rng));
    }
    worst
}

/// One case per op (several for ops with distinct modes).
pub fn cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            seed: 1,
            make: |rng| {
                let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
                (
                    vec![random(rng, &[m, k]), random(rng, &[k, n])],
                    Box::new(|t, v| t.matmul(v[0], v[1])),
                )
            },
        },
        OpCase {
            name: "transpose",
            seed: 2,
            make: |rng| {
                let (m, n) = (dim(rng, 1, 5), dim(rng, 1, 5));
                (
                    vec![random(rng, &[m, n])],
                    Box::new(|t, v| t.transpose(v[0])),
                )
            },
        },
        OpCase {
            name: "add",
            seed: 3,
            make: |rng| {
                let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
                (
                    vec![random(rng, &s), random(rng, &s)],
                    Box::new(|t, v| t.add(v[0], v[1])),
                )
            },
        },
        OpCase {
            name: "sub",
            seed: 4,
            make: |rng| {
                let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
                (
                    vec![random(rng, &s), random(rng, &s)],
                    Box::new(|t, v| t.sub(v[0], v[1])),
                )
            },
        },
        OpCase {
            name: "mul",
            seed: 5,
            make: |rng| {
                let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
                (
                    vec![random(rng, &s), random(rng, &s)],
                    Box::new(|t, v| t.mul(v[0], v[1])),
                )
            },
        },
        OpCase {
            name: "mul(x, x)",
            seed: 6,
            make: |rng| {
                let s = [dim(rng, 1, 6)];
                (vec![random(rng, &s)], Box::new(|t, v| t.mul(v[0], v[0])))
            },
        },
        OpCase {
            name: "scale",
            seed: 7,
            make: |rng| {
                let s = [dim(rng, 1, 6)];
                let c = rng.normal() * 3.0;
                (
                    vec![random(rng, &s)],
                    Box::new(move |t, v| t.scale(v[0], c)),
                )
            },
        },
        OpCase {
            name: "leaky_relu",
            seed: 8,
            make: |rng| {
                let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
                let alpha = rng.uniform(0.0, 0.3);
                (
                    vec![away_from_zero(rng, &s)],
                    Box::new(move |t, v| t.leaky_relu(v[0], alpha)),
                )
            },
        },
        OpCase {
            name: "sigmoid",
            seed: 9,
            make: |rng| {
                let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
                (vec![random(rng, &s)], Box::new(|t, v| t.sigmoid(v[0])))
            },
        },
        OpCase {
            name: "sum",
            seed: 10,
            make: |rng| {
                let s = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
                let axis = match rng.below(4) {
                    3 => None,
                    a => Some(a),
                };
                (
                    vec![random(rng, &s)],
                    Box::new(move |t, v| t.sum(v[0], axis)),
                )
            },
        },
        OpCase {
            name: "mean",
            seed: 11,
            make: |rng| {
                let s = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
                let axis = match rng.below(4) {
                    3 => None,
                    a => Some(a),
                };
                (
                    vec![random(rng, &s)],
                    Box::new(move |t, v| t.mean(v[0], axis)),
                )
            },
        },
        OpCase {
            name: "l2_normalize",
            seed: 12,
            make: |rng| {
                let s = [dim(rng, 1, 4), dim(rng, 2, 5)];
                (
                    vec![away_from_zero(rng, &s)],
                    Box::new(|t, v| t.l2_normalize(v[0])),
                )
            },
        },
        OpCase {
            name: "conv2d",
            seed: 13,
            make: |rng| {
                let (c, o) = (dim(rng, 1, 2), dim(rng, 1, 2));
                let k = dim(rng, 1, 3);
                let h = dim(rng, k, 5);
                let stride = dim(rng, 1, 2);
                let x = if rng.bernoulli(0.5) {
                    random(rng, &[c, h, h])
                } else {
                    random(rng, &[2, c, h, h])
                };
                (
                    vec![x, random(rng, &[o, c, k, k])],
                    Box::new(move |t, v| t.conv2d(v[0], v[1], stride)),
                )
            },
        },
        OpCase {
            name: "upsample_nearest",
            seed: 14,
            make: |rng| {
                let (c, h) = (dim(rng, 1, 2), dim(rng, 1, 3));
                let f = dim(rng, 1, 3);
                (
                    vec![random(rng, &[1, c, h, h])],
                    Box::new(move |t, v| t.upsample_nearest(v[0], f)),
                )
            },
        },
        OpCase {
            name: "add_bias",
            seed: 15,
            make: |rng| {
                let s = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
                let axis = rng.below(3);
                (
                    vec![random(rng, &s), random(rng, &[s[axis]])],
                    Box::new(move |t, v| t.add_bias(v[0], v[1], axis)),
                )
            },
        },
        OpCase {
            name: "reshape",
            seed: 16,
            make: |rng| {
                let (a, b) = (dim(rng, 1, 4), dim(rng, 1, 4));
                (
                    vec![random(rng, &[a, b])],
                    Box::new(move |t, v| t.reshape(v[0], &[b, a])),
                )
            },
        },
        OpCase {
            name: "concat",
            seed: 17,
            make: |rng| {
                let axis = rng.below(2);
                let mut s1 = [dim(rng, 1, 3), dim(rng, 1, 3)];
                let mut s2 = s1;
                s2[axis] = dim(rng, 1, 3);
                s1[1 - axis] = s2[1 - axis];
                (
                    vec![random(rng, &s1), random(rng, &s2)],
                    Box::new(move |t, v| t.concat(&[v[0], v[1]], axis)),
                )
            },
        },
        OpCase {
            name: "narrow",
            seed: 18,
            make: |rng| {
                let s = [dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4)];
                let axis = rng.below(3);
                let start = rng.below(s[axis]);
                let len = 1 + rng.below(s[axis] - start);
                (
                    vec![random(rng, &s)],
                    Box::new(move |t, v| t.narrow(v[0], axis, start, len)),
                )
            },
        },
        OpCase {
            name: "cross_entropy",
            seed: 19,
            make: |rng| {
                let (n, c) = (dim(rng, 1, 4), dim(rng, 2, 5));
                let targets: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
                (
                    vec![random(rng, &[n, c])],
                    Box::new(move |t, v| t.cross_entropy(v[0], &targets)),
                )
            },
        },
        OpCase {
            name: "bce_with_logits",
            seed: 20,
            make: |rng| {
                let n = dim(rng, 1, 6);
                let targets: Vec<f64> = (0..n).map(|_| rng.unit()).collect();
                (
                    vec![random(rng, &[n])],
                    Box::new(move |t, v| t.bce_with_logits(v[0], &targets)),
                )
            },
        },
    ]
}
