//! Parameters and the two layer types every network here is built from.
//!
//! Networks keep their weights in a [`ParamSet`]. Before a forward pass the
//! set is bound onto a tape ([`ParamSet::bind`]), which yields one [`Var`] per
//! parameter; after `backward` the gradients are folded back with
//! [`ParamSet::accumulate`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Slope used by every LeakyReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.01;

/// A named weight tensor. `grad` is present iff the parameter is trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl Param {
    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }
}

/// How a parameter set enters a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    /// Trainable parameters become differentiable leaves.
    Train,
    /// Every parameter is a constant; no gradient reaches the set.
    Frozen,
}

/// Vars of a bound [`ParamSet`], in parameter order.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, index: usize) -> Var {
        self.0[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let grad = Some(Tensor::zeros(value.shape()));
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        self.params.len() - 1
    }

    /// A parameter that never trains: it is bound as a constant.
    pub fn push_frozen(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            grad: None,
        });
        self.params.len() - 1
    }

    pub fn set_value(&mut self, index: usize, value: Tensor) -> Result<()> {
        let p = &mut self.params[index];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> core::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> core::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Drop gradient buffers: the set becomes frozen.
    pub fn freeze(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    pub fn unfreeze(&mut self) {
        for p in &mut self.params {
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| p.grad.is_none())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn bind(&self, tape: &mut Tape, binding: Binding) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| match binding {
                Binding::Train if p.requires_grad() => tape.variable(p.value.clone()),
                _ => tape.constant(p.value.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound(vars))
    }

    /// Add the gradients of `bound` into the trainable parameters.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(bound.vars()) {
            if let Some(g) = &mut p.grad {
                if grads.reached(v) {
                    let dg = grads.get(v);
                    g.data_mut()
                        .iter_mut()
                        .zip(dg.data())
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
    }

    /// Replace all values from another set with identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamSet) -> Result<()> {
        self.check_compatible(other)?;
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// Load values by name, e.g. from a checkpoint.
    pub fn load_values<'a>(
        &mut self,
        entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<()> {
        let mut seen = 0;
        for (name, value) in entries {
            let p = self
                .params
                .iter_mut()
                .find(|p| p.name == name)
                .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
            if p.value.shape() != value.shape() {
                return Err(Error::shape("load_values", p.value.shape(), value.shape()));
            }
            p.value = value.clone();
            seen += 1;
        }
        if seen != self.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {seen}",
                self.params.len()
            )));
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::invalid(format!(
                "parameter count {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.value.shape() != b.value.shape() {
                return Err(Error::shape(
                    "parameter sets",
                    a.value.shape(),
                    b.value.shape(),
                ));
            }
        }
        Ok(())
    }

    /// Bitwise fingerprint of names, shapes and values (FNV-1a, 64 bit).
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for &d in p.value.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Set every value to zero (used for the zero-residual special encoder).
    pub fn zero_values(&mut self) {
        for p in &mut self.params {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// He-style uniform bound; `rectified` adds the sqrt(2) gain.
fn init_bound(fan_in: usize, rectified: bool) -> f64 {
    let gain = if rectified { 2.0 } else { 1.0 };
    libm::sqrt(3.0 * gain / fan_in as f64)
}

/// Dense layer `y = x W + b` on `[N, in]` inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    weight: usize,
    bias: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        inputs: usize,
        outputs: usize,
        rectified: bool,
        rng: &mut Rng,
    ) -> Self {
        let w = uniform_tensor(&[inputs, outputs], init_bound(inputs, rectified), rng);
        let weight = params.push(format!("{name}.weight"), w);
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Linear {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(self.weight))?;
        tape.add_bias(y, bound.var(self.bias), 1)
    }
}

/// Valid 2-D convolution with per-channel bias on `[N, C, H, W]` inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv {
    kernel: usize,
    bias: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub size: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        size: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_channels * size * size;
        let k = uniform_tensor(
            &[out_channels, in_channels, size, size],
            init_bound(fan_in, true),
            rng,
        );
        let kernel = params.push(format!("{name}.kernel"), k);
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Conv {
            kernel,
            bias,
            in_channels,
            out_channels,
            size,
            stride,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, bound.var(self.kernel), self.stride)?;
        tape.add_bias(y, bound.var(self.bias), 1)
    }

    /// Output side length for a square input.
    pub fn output_size(&self, input: usize) -> Option<usize> {
        (input >= self.size).then(|| (input - self.size) / self.stride + 1)
    }
}

/// Standardize every column of `[N, d]` over the batch: zero mean and unit
/// variance, with no learned affine part.
pub fn standardize_columns(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.shape(x)[0];
    if tape.shape(x).len() != 2 || n < 2 {
        return Err(Error::invalid(format!(
            "standardize_columns needs [N, d] with N >= 2, got {:?}",
            tape.shape(x)
        )));
    }
    let mean = tape.mean(x, Some(0))?;
    let neg = tape.scale(mean, -1.0)?;
    let centered = tape.add_bias(x, neg, 1)?;
    let cols = tape.transpose(centered)?;
    let cols = tape.l2_normalize(cols)?;
    let rows = tape.transpose(cols)?;
    tape.scale(rows, libm::sqrt(n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_frozen_gives_no_gradient() {
        let mut rng = Rng::new(0);
        let mut ps = ParamSet::new();
        let lin = Linear::new(&mut ps, "fc", 3, 2, false, &mut rng);
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape, Binding::Frozen).unwrap();
        let x = tape.variable(Tensor::full(&[1, 3], 1.0)).unwrap();
        let y = lin.forward(&mut tape, &b, x).unwrap();
        let s = tape.sum(y, None).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(b.vars().iter().all(|&v| !g.reached(v)));
        assert!(g.reached(x));
    }

    #[test]
    fn accumulate_adds_into_grad() {
        let mut rng = Rng::new(0);
        let mut ps = ParamSet::new();
        let lin = Linear::new(&mut ps, "fc", 2, 1, false, &mut rng);
        for _ in 0..2 {
            let mut tape = Tape::new();
            let b = ps.bind(&mut tape, Binding::Train).unwrap();
            let x = tape.constant(Tensor::full(&[1, 2], 1.0)).unwrap();
            let y = lin.forward(&mut tape, &b, x).unwrap();
            let s = tape.sum(y, None).unwrap();
            let g = tape.backward(s).unwrap();
            ps.accumulate(&g, &b);
        }
        assert_eq!(ps.get(0).grad.as_ref().unwrap().data(), &[2.0, 2.0]);
        assert_eq!(ps.get(1).grad.as_ref().unwrap().data(), &[2.0]);
    }

    #[test]
    fn digest_tracks_values() {
        let mut rng = Rng::new(3);
        let mut ps = ParamSet::new();
        Linear::new(&mut ps, "fc", 2, 2, true, &mut rng);
        let before = ps.digest();
        assert_eq!(before, ps.clone().digest());
        ps.iter_mut().next().unwrap().value.data_mut()[0] += 1e-12;
        assert_ne!(before, ps.digest());
    }

    #[test]
    fn load_values_checks_names_and_shapes() {
        let mut rng = Rng::new(3);
        let mut ps = ParamSet::new();
        Linear::new(&mut ps, "fc", 2, 2, true, &mut rng);
        let w = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2]);
        ps.load_values([("fc.weight", &w), ("fc.bias", &b)])
            .unwrap();
        assert!(ps.load_values([("fc.weight", &b)]).is_err());
        assert!(ps.load_values([("nope", &w)]).is_err());
    }
}
