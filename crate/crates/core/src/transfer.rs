//! Frozen-generic / trainable-special dual encoder and the task heads.
//!
//! Block by block the special branch adds the generic branch's output to its
//! own (`f_s^l = E_s^l(f_s^{l-1}) + f_g^l`); the final features are fused as
//! `f_e = f_g * f_s + sigmoid(f_s)`, elementwise. The generic encoder is bound
//! as constants, so no gradient ever reaches it.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{logistic, softmax_row, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Binding, Bound, Conv, Linear, ParamSet, LEAKY_SLOPE};
use crate::optim::SgdState;
use crate::rng::Rng;
use crate::ssl::Encoder;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub generic: Encoder,
    pub special: Encoder,
}

/// Fused features plus per-block taps of both branches.
#[derive(Debug, Clone)]
pub struct Fused {
    pub features: Var,
    /// Fusion of the last spatial taps, input to the segmentation decoder.
    pub spatial: Var,
    pub generic_taps: Vec<Var>,
    pub special_taps: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct DualBound {
    pub generic: Bound,
    pub special: Bound,
}

fn fuse(tape: &mut Tape, g: Var, s: Var) -> Result<Var> {
    let gs = tape.mul(g, s)?;
    let gate = tape.sigmoid(s)?;
    tape.add(gs, gate)
}

impl DualEncoder {
    /// Special branch starts as a copy of the generic weights.
    pub fn from_pretrained(generic: &Encoder) -> Self {
        let mut g = generic.clone();
        g.params.freeze();
        let mut special = generic.clone();
        special.params.unfreeze();
        DualEncoder {
            generic: g,
            special,
        }
    }

    /// Special branch with all parameters zero: its blocks contribute nothing.
    pub fn with_zero_special(generic: &Encoder) -> Self {
        let mut de = Self::from_pretrained(generic);
        de.special.params.zero_values();
        de
    }

    pub fn new(generic: Encoder, special: Encoder) -> Result<Self> {
        generic.params.check_compatible(&special.params)?;
        if generic.config() != special.config() {
            return Err(Error::invalid(
                "generic and special encoders differ in architecture",
            ));
        }
        let mut generic = generic;
        generic.params.freeze();
        Ok(DualEncoder { generic, special })
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<DualBound> {
        Ok(DualBound {
            generic: self.generic.params.bind(tape, Binding::Frozen)?,
            special: self.special.params.bind(tape, Binding::Train)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &DualBound, x: Var) -> Result<Fused> {
        if self.generic.config() != self.special.config() {
            return Err(Error::invalid(
                "generic and special encoders differ in architecture",
            ));
        }
        let s = self.generic.input_shape(tape.shape(x))?;
        let x = if tape.shape(x).len() == 3 {
            tape.reshape(x, &s)?
        } else {
            x
        };
        let blocks = self.generic.num_blocks();
        let mut g = x;
        let mut sp = x;
        let mut generic_taps = Vec::with_capacity(blocks);
        let mut special_taps = Vec::with_capacity(blocks);
        for l in 0..blocks {
            g = self.generic.block(l, tape, &bound.generic, g)?;
            let own = self.special.block(l, tape, &bound.special, sp)?;
            sp = tape.add(own, g)?;
            generic_taps.push(g);
            special_taps.push(sp);
        }
        let features = fuse(tape, g, sp)?;
        let spatial = fuse(tape, generic_taps[blocks - 2], special_taps[blocks - 2])?;
        Ok(Fused {
            features,
            spatial,
            generic_taps,
            special_taps,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification { classes: usize },
    Regression,
    Segmentation,
}

/// Segmentation decoder: 1x1 reduce, nearest upsample, 3x3 conv, kxk conv to
/// one logit channel. Sizes are chosen so the output matches the patch size.
#[derive(Debug, Clone, PartialEq)]
pub struct SegDecoder {
    reduce: Conv,
    factor: usize,
    refine: Conv,
    out: Conv,
    pub output_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadKind {
    Classifier(Linear),
    Regressor(Linear),
    Decoder(SegDecoder),
}

/// Fixed affine map `(x + shift) @ transform` in front of a linear head.
/// Starts as the identity; [`TaskHead::calibrate`] sets it from data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputNorm {
    shift: usize,
    transform: usize,
}

impl InputNorm {
    fn new(params: &mut ParamSet, dim: usize) -> Self {
        let mut eye = Tensor::zeros(&[dim, dim]);
        (0..dim).for_each(|i| eye.data_mut()[i * dim + i] = 1.0);
        InputNorm {
            shift: params.push_frozen("input.shift", Tensor::zeros(&[dim])),
            transform: params.push_frozen("input.transform", eye),
        }
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.add_bias(x, bound.var(self.shift), 1)?;
        tape.matmul(y, bound.var(self.transform))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub params: ParamSet,
    pub kind: HeadKind,
    pub norm: Option<InputNorm>,
}

const NORM_EPS: f64 = 1e-2;

const DECODER_WIDTH: usize = 8;

impl TaskHead {
    pub fn classifier(dim: usize, classes: usize, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        let l = Linear::new(&mut params, "classifier", dim, classes, false, rng);
        let norm = Some(InputNorm::new(&mut params, dim));
        TaskHead {
            params,
            kind: HeadKind::Classifier(l),
            norm,
        }
    }

    pub fn regressor(dim: usize, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        let l = Linear::new(&mut params, "regressor", dim, 1, false, rng);
        let norm = Some(InputNorm::new(&mut params, dim));
        TaskHead {
            params,
            kind: HeadKind::Regressor(l),
            norm,
        }
    }

    /// Decoder from a `channels x tap x tap` map to `size x size` logits.
    pub fn decoder(channels: usize, tap: usize, size: usize, rng: &mut Rng) -> Result<Self> {
        if tap == 0 || size == 0 {
            return Err(Error::invalid("decoder sizes must be positive"));
        }
        let factor = (size + 2).div_ceil(tap);
        let k = factor * tap - 1 - size;
        let mut params = ParamSet::new();
        let reduce = Conv::new(
            &mut params,
            "dec.reduce",
            channels,
            DECODER_WIDTH,
            1,
            1,
            rng,
        );
        let refine = Conv::new(
            &mut params,
            "dec.refine",
            DECODER_WIDTH,
            DECODER_WIDTH,
            3,
            1,
            rng,
        );
        let out = Conv::new(&mut params, "dec.out", DECODER_WIDTH, 1, k, 1, rng);
        Ok(TaskHead {
            params,
            kind: HeadKind::Decoder(SegDecoder {
                reduce,
                factor,
                refine,
                out,
                output_size: size,
            }),
            norm: None,
        })
    }

    /// Head matching `task` for an encoder and patch size.
    pub fn for_task(task: Task, encoder: &Encoder, patch: usize, rng: &mut Rng) -> Result<Self> {
        let d = encoder.feature_dim();
        match task {
            Task::Classification { classes } if classes >= 2 => {
                Ok(Self::classifier(d, classes, rng))
            }
            Task::Classification { classes } => Err(Error::invalid(format!(
                "classification needs at least 2 classes, got {classes}"
            ))),
            Task::Regression => Ok(Self::regressor(d, rng)),
            Task::Segmentation => {
                let taps = encoder
                    .config()
                    .tap_sizes(patch)
                    .ok_or_else(|| Error::invalid(format!("patch size {patch} too small")))?;
                let channels = *encoder.config().widths.last().unwrap_or(&1);
                Self::decoder(channels, *taps.last().unwrap_or(&1), patch, rng)
            }
        }
    }

    /// Standardize each fused feature column over `images`. The map is frozen
    /// afterwards; decoders have none and are left alone.
    pub fn calibrate(&mut self, model: &DualEncoder, images: &Tensor) -> Result<()> {
        let Some(norm) = self.norm else {
            return Ok(());
        };
        let n = images.shape().first().copied().unwrap_or(0);
        if n < 2 {
            return Err(Error::degenerate("calibration needs at least two images"));
        }
        let mut tape = Tape::new();
        let db = DualBound {
            generic: model.generic.params.bind(&mut tape, Binding::Frozen)?,
            special: model.special.params.bind(&mut tape, Binding::Frozen)?,
        };
        let x = tape.constant(images.clone())?;
        let f = model.forward(&mut tape, &db, x)?;
        let feats = tape.value(f.features);
        let d = feats.shape()[1];
        let mut mean = alloc::vec![0.0; d];
        let mut var = alloc::vec![0.0; d];
        for row in feats.data().chunks(d) {
            mean.iter_mut()
                .zip(row)
                .for_each(|(m, v)| *m += v / n as f64);
        }
        for row in feats.data().chunks(d) {
            for ((s, m), v) in var.iter_mut().zip(&mean).zip(row) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        let mut transform = Tensor::zeros(&[d, d]);
        for (i, s) in var.iter().enumerate() {
            transform.data_mut()[i * d + i] = 1.0 / libm::sqrt(*s + NORM_EPS);
        }
        let shift = Tensor::new(&[d], mean.iter().map(|m| -m).collect())?;
        self.params.set_value(norm.shift, shift)?;
        self.params.set_value(norm.transform, transform)
    }

    pub fn task(&self) -> Task {
        match &self.kind {
            HeadKind::Classifier(l) => Task::Classification { classes: l.outputs },
            HeadKind::Regressor(_) => Task::Regression,
            HeadKind::Decoder(_) => Task::Segmentation,
        }
    }

    /// Raw head output: class logits `[N,C]`, regression pre-activations
    /// `[N,1]`, or mask logits `[N,1,H,W]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, fused: &Fused) -> Result<Var> {
        match &self.kind {
            HeadKind::Classifier(l) | HeadKind::Regressor(l) => {
                let x = match &self.norm {
                    Some(n) => n.forward(tape, bound, fused.features)?,
                    None => fused.features,
                };
                l.forward(tape, bound, x)
            }
            HeadKind::Decoder(d) => {
                let h = d.reduce.forward(tape, bound, fused.spatial)?;
                let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
                let h = tape.upsample_nearest(h, d.factor)?;
                let h = d.refine.forward(tape, bound, h)?;
                let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
                d.out.forward(tape, bound, h)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Fractions(Vec<f64>),
    /// Flattened binary masks, one per image.
    Masks(Vec<Vec<u8>>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Fractions(v) => v.len(),
            Targets::Masks(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn task_loss(tape: &mut Tape, head: &TaskHead, out: Var, targets: &Targets) -> Result<Var> {
    match (&head.kind, targets) {
        (HeadKind::Classifier(_), Targets::Classes(y)) => tape.cross_entropy(out, y),
        (HeadKind::Regressor(_), Targets::Fractions(y)) => {
            if y.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid("regression targets must lie in [0,1]"));
            }
            let pred = tape.sigmoid(out)?;
            let t = tape.constant(Tensor::new(&[y.len(), 1], y.clone())?)?;
            let diff = tape.sub(pred, t)?;
            let sq = tape.mul(diff, diff)?;
            tape.mean(sq, None)
        }
        (HeadKind::Decoder(_), Targets::Masks(masks)) => {
            let flat: Vec<f64> = masks.iter().flatten().map(|&m| f64::from(m)).collect();
            if masks.iter().flatten().any(|&m| m > 1) {
                return Err(Error::invalid("segmentation masks must be binary"));
            }
            tape.bce_with_logits(out, &flat)
        }
        _ => Err(Error::invalid(format!(
            "targets do not match a {:?} head",
            head.task()
        ))),
    }
}

/// Dual encoder, task head and their optimizer.
#[derive(Debug, Clone)]
pub struct FineTuner {
    pub model: DualEncoder,
    pub head: TaskHead,
    opt: SgdState,
}

impl FineTuner {
    pub fn new(model: DualEncoder, head: TaskHead, opt: SgdState) -> Self {
        FineTuner { model, head, opt }
    }

    /// One optimizer step on the special encoder and head. Returns the loss
    /// before the update.
    pub fn step(&mut self, images: &Tensor, targets: &Targets) -> Result<f64> {
        if images.shape().first() != Some(&targets.len()) {
            return Err(Error::shape(
                "finetune_step",
                images.shape(),
                &[targets.len()],
            ));
        }
        let mut tape = Tape::new();
        let db = self.model.bind(&mut tape)?;
        let hb = self.head.params.bind(&mut tape, Binding::Train)?;
        let x = tape.constant(images.clone())?;
        let fused = self.model.forward(&mut tape, &db, x)?;
        let out = self.head.forward(&mut tape, &hb, &fused)?;
        let loss = task_loss(&mut tape, &self.head, out, targets)?;
        let value = tape.value(loss).item();
        let grads: Gradients = tape.backward(loss)?;
        self.model.special.params.accumulate(&grads, &db.special);
        self.head.params.accumulate(&grads, &hb);
        self.opt
            .step_sets(&mut [&mut self.model.special.params, &mut self.head.params])?;
        Ok(value)
    }

    pub fn calibrate(&mut self, images: &Tensor) -> Result<()> {
        self.head.calibrate(&self.model, images)
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<Prediction>> {
        predict(&self.model, &self.head, images)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Class { id: usize, probabilities: Vec<f64> },
    Fraction(f64),
    Mask(Vec<u8>),
}

/// Turn raw head outputs into task predictions for every row.
pub fn decode_outputs(task: Task, out: &Tensor) -> Vec<Prediction> {
    let n = out.shape()[0];
    let per = out.len() / n;
    out.data()
        .chunks(per)
        .map(|row| match task {
            Task::Classification { .. } => {
                let probabilities = softmax_row(row);
                let id = argmax(row);
                Prediction::Class { id, probabilities }
            }
            Task::Regression => Prediction::Fraction(logistic(row[0])),
            Task::Segmentation => {
                Prediction::Mask(row.iter().map(|&z| u8::from(logistic(z) > 0.5)).collect())
            }
        })
        .collect()
}

/// First index of the largest value.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

pub fn predict(model: &DualEncoder, head: &TaskHead, images: &Tensor) -> Result<Vec<Prediction>> {
    let mut tape = Tape::new();
    let db = DualBound {
        generic: model.generic.params.bind(&mut tape, Binding::Frozen)?,
        special: model.special.params.bind(&mut tape, Binding::Frozen)?,
    };
    let hb = head.params.bind(&mut tape, Binding::Frozen)?;
    let x = tape.constant(images.clone())?;
    let fused = model.forward(&mut tape, &db, x)?;
    let out = head.forward(&mut tape, &hb, &fused)?;
    Ok(decode_outputs(head.task(), tape.value(out)))
}
