//! The self-supervised "generator": encoder, heads, negative queue and the two
//! contrastive objectives (InfoNCE against a queue, and the negative-free
//! stop-gradient cosine loss).
//!
//! BYOL- and SimCLR-like variants are configurations of [`SslConfig`]: the
//! target branch is either a momentum copy of the online network or the online
//! network itself behind a stop-gradient, and the predictor is optional.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{standardize_columns, Binding, Bound, Conv, Linear, ParamSet, LEAKY_SLOPE};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Tolerance on unit norms accepted by the contrastive losses and the queue.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Output channels of the strided conv blocks.
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            widths: vec![8, 16, 32],
            kernel: 3,
            stride: 2,
            feature_dim: 32,
        }
    }
}

impl EncoderConfig {
    /// Spatial side of every conv tap for a square input, or `None` if the
    /// input is too small.
    pub fn tap_sizes(&self, input: usize) -> Option<Vec<usize>> {
        let mut sizes = Vec::with_capacity(self.widths.len());
        let mut s = input;
        for _ in &self.widths {
            if s < self.kernel {
                return None;
            }
            s = (s - self.kernel) / self.stride + 1;
            sizes.push(s);
        }
        Some(sizes)
    }
}

/// Map pixel values from `[0, 1]` to `[-1, 1]`.
fn center_pixels(tape: &mut Tape, x: Var) -> Result<Var> {
    let c = tape.shape(x)[1];
    let y = tape.scale(x, 2.0)?;
    let shift = tape.constant(Tensor::new(&[c], alloc::vec![-1.0; c])?)?;
    tape.add_bias(y, shift, 1)
}

/// Strided conv blocks, global mean pool and a linear projection to `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub params: ParamSet,
    convs: Vec<Conv>,
    fc: Linear,
    config: EncoderConfig,
}

/// Encoder features plus the output of every block.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub features: Var,
    pub taps: Vec<Var>,
}

impl Encoder {
    pub fn new(config: &EncoderConfig, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        let mut convs = Vec::with_capacity(config.widths.len());
        let mut c_in = config.in_channels;
        for (i, &w) in config.widths.iter().enumerate() {
            convs.push(Conv::new(
                &mut params,
                &format!("conv{i}"),
                c_in,
                w,
                config.kernel,
                config.stride,
                rng,
            ));
            c_in = w;
        }
        let fc = Linear::new(&mut params, "fc", c_in, config.feature_dim, false, rng);
        Encoder {
            params,
            convs,
            fc,
            config: config.clone(),
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Conv blocks plus the pooled projection block.
    pub fn num_blocks(&self) -> usize {
        self.convs.len() + 1
    }

    /// Check an input shape, returning it as `[N, C, H, W]`.
    pub fn input_shape(&self, shape: &[usize]) -> Result<[usize; 4]> {
        let s = match shape.len() {
            3 => [1, shape[0], shape[1], shape[2]],
            4 => [shape[0], shape[1], shape[2], shape[3]],
            _ => return Err(Error::shape("encode", shape, &[self.config.in_channels])),
        };
        if s[1] != self.config.in_channels || s[2] != s[3] || self.config.tap_sizes(s[2]).is_none()
        {
            return Err(Error::shape("encode", shape, &[self.config.in_channels]));
        }
        Ok(s)
    }

    /// Apply block `l` to the output of block `l - 1` (or the image for `l = 0`,
    /// rescaled to `[-1, 1]`).
    pub fn block(&self, l: usize, tape: &mut Tape, bound: &Bound, input: Var) -> Result<Var> {
        if l < self.convs.len() {
            let input = if l == 0 {
                center_pixels(tape, input)?
            } else {
                input
            };
            let y = self.convs[l].forward(tape, bound, input)?;
            tape.leaky_relu(y, LEAKY_SLOPE)
        } else {
            let s = tape.shape(input).to_vec();
            let flat = tape.reshape(input, &[s[0], s[1], s[2] * s[3]])?;
            let pooled = tape.mean(flat, Some(2))?;
            self.fc.forward(tape, bound, pooled)
        }
    }

    /// Encode `[N,C,H,W]` (or a single `[C,H,W]` image, treated as `N = 1`).
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Encoded> {
        let s = self.input_shape(tape.shape(x))?;
        let mut h = if tape.shape(x).len() == 3 {
            tape.reshape(x, &s)?
        } else {
            x
        };
        let mut taps = Vec::with_capacity(self.num_blocks());
        for l in 0..self.num_blocks() {
            h = self.block(l, tape, bound, h)?;
            taps.push(h);
        }
        Ok(Encoded { features: h, taps })
    }

    /// Forward without gradients, returning `[N, d]` feature values.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, Binding::Frozen)?;
        let x = tape.constant(images.clone())?;
        let out = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(out.features).clone())
    }
}

/// Two-layer MLP head: `linear -> LeakyReLU -> linear`, width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub params: ParamSet,
    first: Linear,
    second: Linear,
}

impl ProjectionHead {
    pub fn new(dim: usize, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        let first = Linear::new(&mut params, "fc0", dim, dim, true, rng);
        let second = Linear::new(&mut params, "fc1", dim, dim, false, rng);
        ProjectionHead {
            params,
            first,
            second,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, bound, x)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        self.second.forward(tape, bound, h)
    }
}

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    let d = *t.shape().last().unwrap_or(&1);
    for (i, row) in t.data().chunks(d).enumerate() {
        let norm = libm::sqrt(row.iter().map(|x| x * x).sum::<f64>());
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::invalid(format!(
                "{what} row {i} has norm {norm}, expected unit norm"
            )));
        }
    }
    Ok(())
}

fn as_rows(tape: &mut Tape, v: Var) -> Result<Var> {
    match tape.shape(v).len() {
        1 => {
            let d = tape.shape(v)[0];
            tape.reshape(v, &[1, d])
        }
        2 => Ok(v),
        _ => Err(Error::shape("as_rows", tape.shape(v), &[0, 0])),
    }
}

/// InfoNCE: `-log(e^{a.p/t} / (e^{a.p/t} + sum_k e^{a.n_k/t}))`, averaged
/// over anchor rows. Anchors and positives are `[d]` or `[N,d]`; `negatives`
/// is `[K,d]` and is never differentiated.
pub fn info_nce_loss(
    tape: &mut Tape,
    anchor: Var,
    positive: Var,
    negatives: &Tensor,
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "temperature {temperature} must be > 0"
        )));
    }
    if negatives.rank() != 2 {
        return Err(Error::invalid("at least one negative is required"));
    }
    check_unit_rows(tape.value(anchor), "anchor")?;
    check_unit_rows(tape.value(positive), "positive")?;
    check_unit_rows(negatives, "negative")?;
    let a = as_rows(tape, anchor)?;
    let p = as_rows(tape, positive)?;
    if tape.shape(a) != tape.shape(p) || tape.shape(a)[1] != negatives.shape()[1] {
        return Err(Error::shape(
            "info_nce_loss",
            tape.shape(a),
            negatives.shape(),
        ));
    }
    let n = tape.shape(a)[0];
    let ap = tape.mul(a, p)?;
    let pos = tape.sum(ap, Some(1))?;
    let pos = tape.reshape(pos, &[n, 1])?;
    let neg_t = tape.constant(negatives.clone())?;
    let neg_t = tape.transpose(neg_t)?;
    let neg = tape.matmul(a, neg_t)?;
    let logits = tape.concat(&[pos, neg], 1)?;
    let logits = tape.scale(logits, 1.0 / temperature)?;
    tape.cross_entropy(logits, &vec![0; n])
}

/// `1 - cos(s1, s2)` averaged over rows, with `s2` behind a stop-gradient.
pub fn cosine_regression_loss(tape: &mut Tape, s1: Var, s2: Var) -> Result<Var> {
    let a = as_rows(tape, s1)?;
    let b = as_rows(tape, s2)?;
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(
            "cosine_regression_loss",
            tape.shape(a),
            tape.shape(b),
        ));
    }
    let b = tape.detach(b)?;
    let an = tape.l2_normalize(a)?;
    let bn = tape.l2_normalize(b)?;
    let prod = tape.mul(an, bn)?;
    let cos = tape.sum(prod, Some(1))?;
    let mean_cos = tape.mean(cos, None)?;
    let neg = tape.scale(mean_cos, -1.0)?;
    let one = tape.constant(Tensor::scalar(1.0))?;
    tape.add(one, neg)
}

/// Symmetrized stop-gradient loss `D(p1, z2)/2 + D(p2, z1)/2`.
pub fn simsiam_loss(tape: &mut Tape, z1: Var, z2: Var, p1: Var, p2: Var) -> Result<Var> {
    let l1 = cosine_regression_loss(tape, p1, z2)?;
    let l2 = cosine_regression_loss(tape, p2, z1)?;
    let s = tape.add(l1, l2)?;
    tape.scale(s, 0.5)
}

/// `target <- m * target + (1 - m) * online`, elementwise.
pub fn momentum_update(online: &ParamSet, target: &mut ParamSet, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("momentum {m} outside [0,1]")));
    }
    target.check_compatible(online)?;
    for (t, o) in target.iter_mut().zip(online.iter()) {
        for (tv, ov) in t.value.data_mut().iter_mut().zip(o.value.data()) {
            *tv = m * *tv + (1.0 - m) * ov;
        }
    }
    Ok(())
}

/// FIFO ring of unit-norm feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    items: VecDeque<Vec<f64>>,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::invalid(
                "queue capacity and dimension must be positive",
            ));
        }
        Ok(NegativeQueue {
            capacity,
            dim,
            items: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Push the rows of a `[B, d]` (or `[d]`) tensor, evicting the oldest.
    pub fn push(&mut self, batch: &Tensor) -> Result<()> {
        if *batch.shape().last().unwrap_or(&0) != self.dim {
            return Err(Error::shape("queue push", batch.shape(), &[self.dim]));
        }
        check_unit_rows(batch, "queued vector")?;
        for row in batch.data().chunks(self.dim) {
            if self.items.len() == self.capacity {
                self.items.pop_front();
            }
            self.items.push_back(row.to_vec());
        }
        Ok(())
    }

    /// Fill to capacity with random unit vectors.
    pub fn fill_random(&mut self, rng: &mut Rng) {
        while self.items.len() < self.capacity {
            let mut v: Vec<f64> = (0..self.dim).map(|_| rng.normal()).collect();
            let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>()).max(1e-300);
            v.iter_mut().for_each(|x| *x /= norm);
            self.items.push_back(v);
        }
    }

    /// Copy of the current contents, oldest first, or `None` when empty.
    pub fn snapshot(&self) -> Option<Tensor> {
        if self.items.is_empty() {
            return None;
        }
        let data: Vec<f64> = self.items.iter().flatten().copied().collect();
        Some(Tensor::from_parts(vec![self.items.len(), self.dim], data))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SslMethod {
    InfoNce,
    SimSiam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslConfig {
    pub method: SslMethod,
    pub temperature: f64,
    pub queue_capacity: usize,
    /// Momentum of the target network; `None` means the target branch is
    /// the online network behind a stop-gradient.
    pub momentum: Option<f64>,
    pub predictor: bool,
    /// Standardize projector outputs over the batch (no affine part).
    pub batch_norm: bool,
}

impl SslConfig {
    pub fn infonce() -> Self {
        SslConfig {
            method: SslMethod::InfoNce,
            temperature: 0.2,
            queue_capacity: 256,
            momentum: Some(0.99),
            predictor: false,
            batch_norm: false,
        }
    }

    pub fn simsiam() -> Self {
        SslConfig {
            method: SslMethod::SimSiam,
            temperature: 0.2,
            queue_capacity: 256,
            momentum: None,
            predictor: true,
            batch_norm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetNetwork {
    pub encoder: Encoder,
    pub projector: ProjectionHead,
}

/// Online encoder and heads, plus the optional momentum target and queue.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub encoder: Encoder,
    pub projector: ProjectionHead,
    pub predictor: Option<ProjectionHead>,
    pub target: Option<TargetNetwork>,
    pub queue: Option<NegativeQueue>,
    pub config: SslConfig,
}

/// Online parameter sets of a [`Generator`] bound on one tape.
#[derive(Debug, Clone)]
pub struct GeneratorBound {
    pub encoder: Bound,
    pub projector: Bound,
    pub predictor: Option<Bound>,
}

/// Result of one SSL forward pass over a batch of view pairs.
#[derive(Debug, Clone)]
pub struct SslForward {
    pub loss: Var,
    /// Online encoder features of the first and second views (`S1`, `S2`).
    pub s1: Var,
    pub s2: Var,
    /// Normalized keys to enqueue after the step (InfoNCE only).
    pub keys: Option<Tensor>,
}

impl Generator {
    pub fn new(encoder: &EncoderConfig, config: &SslConfig, rng: &mut Rng) -> Result<Self> {
        if !(config.temperature > 0.0) {
            return Err(Error::invalid("temperature must be > 0"));
        }
        let enc = Encoder::new(encoder, rng);
        let projector = ProjectionHead::new(encoder.feature_dim, rng);
        let predictor = config
            .predictor
            .then(|| ProjectionHead::new(encoder.feature_dim, rng));
        let target = config.momentum.map(|_| TargetNetwork {
            encoder: frozen(&enc),
            projector: frozen_head(&projector),
        });
        let queue = match config.method {
            SslMethod::InfoNce => {
                let mut q = NegativeQueue::new(config.queue_capacity, encoder.feature_dim)?;
                q.fill_random(rng);
                Some(q)
            }
            SslMethod::SimSiam => None,
        };
        Ok(Generator {
            encoder: enc,
            projector,
            predictor,
            target,
            queue,
            config: config.clone(),
        })
    }

    pub fn bind(&self, tape: &mut Tape, binding: Binding) -> Result<GeneratorBound> {
        Ok(GeneratorBound {
            encoder: self.encoder.params.bind(tape, binding)?,
            projector: self.projector.params.bind(tape, binding)?,
            predictor: self
                .predictor
                .as_ref()
                .map(|p| p.params.bind(tape, binding))
                .transpose()?,
        })
    }

    /// Online parameter sets in a fixed order.
    pub fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        let mut sets = vec![&mut self.encoder.params, &mut self.projector.params];
        if let Some(p) = &mut self.predictor {
            sets.push(&mut p.params);
        }
        sets
    }

    pub fn param_sets(&self) -> Vec<&ParamSet> {
        let mut sets = vec![&self.encoder.params, &self.projector.params];
        if let Some(p) = &self.predictor {
            sets.push(&p.params);
        }
        sets
    }

    pub fn accumulate(&mut self, grads: &crate::autodiff::Gradients, bound: &GeneratorBound) {
        self.encoder.params.accumulate(grads, &bound.encoder);
        self.projector.params.accumulate(grads, &bound.projector);
        if let (Some(p), Some(b)) = (&mut self.predictor, &bound.predictor) {
            p.params.accumulate(grads, b);
        }
    }

    /// Digest over every online parameter.
    pub fn digest(&self) -> u64 {
        self.param_sets()
            .iter()
            .fold(0u64, |acc, s| crate::rng::splitmix64(acc ^ s.digest()))
    }

    /// Online encoder features `enc(x)`.
    pub fn features(&self, tape: &mut Tape, bound: &GeneratorBound, x: Var) -> Result<Var> {
        Ok(self.encoder.forward(tape, &bound.encoder, x)?.features)
    }

    /// Online projection `proj(enc(x))`.
    pub fn project(&self, tape: &mut Tape, bound: &GeneratorBound, x: Var) -> Result<Var> {
        let f = self.features(tape, bound, x)?;
        self.projector.forward(tape, &bound.projector, f)
    }

    fn normalize_batch(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        if self.config.batch_norm {
            standardize_columns(tape, z)
        } else {
            Ok(z)
        }
    }

    /// Target-branch projection. Never carries gradient.
    fn target_projection(&self, tape: &mut Tape, bound: &GeneratorBound, x: Var) -> Result<Var> {
        match &self.target {
            Some(t) => {
                let eb = t.encoder.params.bind(tape, Binding::Frozen)?;
                let pb = t.projector.params.bind(tape, Binding::Frozen)?;
                let e = t.encoder.forward(tape, &eb, x)?;
                let z = t.projector.forward(tape, &pb, e.features)?;
                self.normalize_batch(tape, z)
            }
            None => {
                let z = self.project(tape, bound, x)?;
                let z = self.normalize_batch(tape, z)?;
                tape.detach(z)
            }
        }
    }

    fn predict(&self, tape: &mut Tape, bound: &GeneratorBound, z: Var) -> Result<Var> {
        match (&self.predictor, &bound.predictor) {
            (Some(p), Some(b)) => p.forward(tape, b, z),
            _ => Ok(z),
        }
    }

    /// SSL loss for first views `v1` and second views `v2` (`[N,C,H,W]`).
    /// When `need_pair` is false the second online projection is skipped
    /// where the objective does not need it, and `s2` aliases `s1`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &GeneratorBound,
        v1: Var,
        v2: Var,
        need_pair: bool,
    ) -> Result<SslForward> {
        match self.config.method {
            SslMethod::SimSiam => {
                let f1 = self.features(tape, bound, v1)?;
                let f2 = self.features(tape, bound, v2)?;
                let z1 = self.projector.forward(tape, &bound.projector, f1)?;
                let z1 = self.normalize_batch(tape, z1)?;
                let z2 = self.projector.forward(tape, &bound.projector, f2)?;
                let z2 = self.normalize_batch(tape, z2)?;
                let p1 = self.predict(tape, bound, z1)?;
                let p2 = self.predict(tape, bound, z2)?;
                let (t1, t2) = if self.target.is_some() {
                    (
                        self.target_projection(tape, bound, v1)?,
                        self.target_projection(tape, bound, v2)?,
                    )
                } else {
                    (z1, z2)
                };
                let loss = simsiam_loss(tape, t1, t2, p1, p2)?;
                Ok(SslForward {
                    loss,
                    s1: f1,
                    s2: f2,
                    keys: None,
                })
            }
            SslMethod::InfoNce => {
                let f1 = self.features(tape, bound, v1)?;
                let z1 = self.projector.forward(tape, &bound.projector, f1)?;
                let z1 = self.normalize_batch(tape, z1)?;
                let q = self.predict(tape, bound, z1)?;
                let q = tape.l2_normalize(q)?;
                let k = self.target_projection(tape, bound, v2)?;
                let k = tape.l2_normalize(k)?;
                let negatives = self
                    .queue
                    .as_ref()
                    .and_then(NegativeQueue::snapshot)
                    .ok_or_else(|| Error::invalid("InfoNCE needs a non-empty negative queue"))?;
                let loss = info_nce_loss(tape, q, k, &negatives, self.config.temperature)?;
                let s2 = if need_pair {
                    self.features(tape, bound, v2)?
                } else {
                    f1
                };
                Ok(SslForward {
                    loss,
                    s1: f1,
                    s2,
                    keys: Some(tape.value(k).clone()),
                })
            }
        }
    }

    /// Bookkeeping after an online update: momentum target and queue.
    pub fn after_step(&mut self, keys: Option<&Tensor>) -> Result<()> {
        if let (Some(t), Some(m)) = (&mut self.target, self.config.momentum) {
            momentum_update(&self.encoder.params, &mut t.encoder.params, m)?;
            momentum_update(&self.projector.params, &mut t.projector.params, m)?;
        }
        if let (Some(q), Some(k)) = (&mut self.queue, keys) {
            q.push(k)?;
        }
        Ok(())
    }
}

fn frozen(e: &Encoder) -> Encoder {
    let mut c = e.clone();
    c.params.freeze();
    c
}

fn frozen_head(h: &ProjectionHead) -> ProjectionHead {
    let mut c = h.clone();
    c.params.freeze();
    c
}
