//! Stain discriminator and the alternating generator/discriminator trainer.
//!
//! For a batch whose patches come from a few slides, the relation matrix `R`
//! marks same-slide pairs and the affinity matrix `A` compares discriminator
//! embeddings of the two views:
//!
//! ```text
//! A   = sigmoid(norm(D(S1)) . norm(D(S2))^T / tau_a)
//! L_D = mean_{r=0} A - mean_{r=1} A
//! L_G = L_ssl - sum(A) / N^2
//! ```
//!
//! The discriminator learns to raise same-slide affinity and suppress
//! cross-slide affinity; the generator pushes every affinity up so stain
//! identity cannot be read off its features. Each step runs a discriminator
//! phase on detached generator outputs, then a generator phase with the
//! discriminator frozen, each on a fresh tape.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{standardize_columns, Binding, Bound, Linear, ParamSet, LEAKY_SLOPE};
use crate::optim::SgdState;
use crate::rng::Rng;
use crate::ssl::Generator;
use crate::synth::MiniBatch;
use crate::tensor::Tensor;

/// Three dense layers of width `d` with an additive input shortcut.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub params: ParamSet,
    layers: [Linear; 3],
}

impl Discriminator {
    pub fn new(dim: usize, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        let layers = [
            Linear::new(&mut params, "fc0", dim, dim, true, rng),
            Linear::new(&mut params, "fc1", dim, dim, true, rng),
            Linear::new(&mut params, "fc2", dim, dim, false, rng),
        ];
        Discriminator { params, layers }
    }

    pub fn dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(tape, bound, x)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = self.layers[1].forward(tape, bound, h)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = self.layers[2].forward(tape, bound, h)?;
        tape.add(h, x)
    }
}

/// `r_ij = 1` iff patches `i` and `j` come from the same slide.
pub fn relation_matrix(slide_ids: &[u32]) -> Result<Tensor> {
    let n = slide_ids.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "relation matrix needs N >= 2, got {n}"
        )));
    }
    let data = slide_ids
        .iter()
        .flat_map(|a| slide_ids.iter().map(move |b| f64::from(u8::from(a == b))))
        .collect();
    Tensor::new(&[n, n], data)
}

/// Standardize every feature column over the joint rows of `s1` and `s2`.
/// Encoder features share a large common component that would otherwise
/// saturate every affinity, and the rescaling stops the generator from
/// winning by shrinking its features.
pub fn standardize_pair(tape: &mut Tape, s1: Var, s2: Var) -> Result<(Var, Var)> {
    let n1 = tape.shape(s1)[0];
    let n2 = tape.shape(s2)[0];
    let both = tape.concat(&[s1, s2], 0)?;
    let both = standardize_columns(tape, both)?;
    Ok((tape.narrow(both, 0, 0, n1)?, tape.narrow(both, 0, n1, n2)?))
}

/// Squashed stain affinities between discriminator embeddings of `s1` and `s2`.
pub fn affinity_matrix(
    tape: &mut Tape,
    disc: &Discriminator,
    bound: &Bound,
    s1: Var,
    s2: Var,
    tau_a: f64,
) -> Result<Var> {
    if !(tau_a > 0.0) {
        return Err(Error::invalid(format!(
            "affinity temperature {tau_a} must be > 0"
        )));
    }
    if tape.shape(s1) != tape.shape(s2) {
        return Err(Error::shape(
            "affinity_matrix",
            tape.shape(s1),
            tape.shape(s2),
        ));
    }
    let l1 = disc.forward(tape, bound, s1)?;
    let l2 = disc.forward(tape, bound, s2)?;
    let l1 = tape.l2_normalize(l1)?;
    let l2 = tape.l2_normalize(l2)?;
    let l2t = tape.transpose(l2)?;
    let sim = tape.matmul(l1, l2t)?;
    let logits = tape.scale(sim, 1.0 / tau_a)?;
    tape.sigmoid(logits)
}

/// Mean cross-source affinity minus mean same-source affinity.
pub fn loss_d(tape: &mut Tape, a: Var, relation: &Tensor) -> Result<Var> {
    if tape.shape(a) != relation.shape() {
        return Err(Error::shape("loss_d", tape.shape(a), relation.shape()));
    }
    let same: f64 = relation.data().iter().sum();
    let diff = relation.len() as f64 - same;
    if same == 0.0 || diff == 0.0 {
        return Err(Error::degenerate(
            "relation matrix must contain both same-source and cross-source pairs",
        ));
    }
    let inverse = Tensor::from_parts(
        relation.shape().to_vec(),
        relation.data().iter().map(|r| 1.0 - r).collect(),
    );
    let r = tape.constant(relation.clone())?;
    let not_r = tape.constant(inverse)?;
    let cross = tape.mul(a, not_r)?;
    let cross = tape.sum(cross, None)?;
    let cross = tape.scale(cross, 1.0 / diff)?;
    let same_a = tape.mul(a, r)?;
    let same_a = tape.sum(same_a, None)?;
    let same_a = tape.scale(same_a, 1.0 / same)?;
    tape.sub(cross, same_a)
}

/// Adversarial generator term `-sum(A) / N^2`.
pub fn loss_g_adv(tape: &mut Tape, a: Var) -> Result<Var> {
    let t = tape.value(a);
    if t.rank() != 2 || t.shape()[0] != t.shape()[1] {
        return Err(Error::shape(
            "loss_g_adv",
            t.shape(),
            &[t.shape()[0], t.shape()[0]],
        ));
    }
    if t.data().iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("affinity matrix has negative entries"));
    }
    let n = t.shape()[0] as f64;
    let s = tape.sum(a, None)?;
    tape.scale(s, -1.0 / (n * n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub lr_g: f64,
    pub lr_d: f64,
    pub sgd_momentum: f64,
    /// Add the stain discriminator; `false` trains the plain SSL method.
    pub sassl: bool,
    pub lambda_adv: f64,
    pub tau_a: f64,
    /// Discriminator steps per generator step.
    pub d_steps: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            lr_g: 0.01,
            lr_d: 0.2,
            sgd_momentum: 0.9,
            sassl: true,
            lambda_adv: 1.0,
            tau_a: 0.1,
            d_steps: 10,
        }
    }
}

/// Losses reported by one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub ssl: f64,
    /// `L_ssl + lambda * L_G_adv` (equals `ssl` without the discriminator).
    pub generator: f64,
    /// Discriminator loss of the last D step, when the discriminator is on.
    pub discriminator: Option<f64>,
}

/// Generator and optional discriminator with their optimizers.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub generator: Generator,
    pub discriminator: Option<Discriminator>,
    opt_g: SgdState,
    opt_d: SgdState,
    pub options: TrainOptions,
}

fn in_phase(phase: &str, e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{phase} phase: {m}")),
        other => other,
    }
}

impl Trainer {
    /// `disc_rng` is used only when the discriminator is enabled, so the
    /// generator's initialization never depends on it.
    pub fn new(generator: Generator, options: TrainOptions, disc_rng: &mut Rng) -> Result<Self> {
        if !(options.lambda_adv >= 0.0) {
            return Err(Error::invalid("lambda_adv must be >= 0"));
        }
        if options.sassl && options.d_steps == 0 {
            return Err(Error::invalid("d_steps must be at least 1"));
        }
        let discriminator = options
            .sassl
            .then(|| Discriminator::new(generator.encoder.feature_dim(), disc_rng));
        Ok(Trainer {
            opt_g: SgdState::new(options.lr_g, options.sgd_momentum)?,
            opt_d: SgdState::new(options.lr_d, options.sgd_momentum)?,
            generator,
            discriminator,
            options,
        })
    }

    /// Generator features of both views, computed without a gradient path.
    pub fn detached_features(&self, batch: &MiniBatch) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let gb = self.generator.bind(&mut tape, Binding::Frozen)?;
        let v1 = tape.constant(batch.first_views())?;
        let v2 = tape.constant(batch.second_views())?;
        let s1 = self.generator.features(&mut tape, &gb, v1)?;
        let s2 = self.generator.features(&mut tape, &gb, v2)?;
        Ok((tape.value(s1).clone(), tape.value(s2).clone()))
    }

    /// One discriminator update on precomputed generator features.
    pub fn discriminator_update(
        &mut self,
        s1: &Tensor,
        s2: &Tensor,
        relation: &Tensor,
    ) -> Result<f64> {
        let disc = self
            .discriminator
            .as_mut()
            .ok_or_else(|| Error::invalid("discriminator is disabled"))?;
        let mut tape = Tape::new();
        let s1 = tape.constant(s1.clone())?;
        let s2 = tape.constant(s2.clone())?;
        let db = disc.params.bind(&mut tape, Binding::Train)?;
        let (s1, s2) = standardize_pair(&mut tape, s1, s2)?;
        let a = affinity_matrix(&mut tape, disc, &db, s1, s2, self.options.tau_a)?;
        let loss = loss_d(&mut tape, a, relation)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        disc.params.accumulate(&grads, &db);
        self.opt_d.step(&mut disc.params)?;
        Ok(value)
    }

    /// One discriminator update against detached generator outputs.
    pub fn discriminator_step(&mut self, batch: &MiniBatch, relation: &Tensor) -> Result<f64> {
        if self.discriminator.is_none() {
            return Err(Error::invalid("discriminator is disabled"));
        }
        let (s1, s2) = self.detached_features(batch)?;
        self.discriminator_update(&s1, &s2, relation)
    }

    /// One generator update; the discriminator (if any) is frozen.
    /// Returns `(L_ssl, L_G)`.
    pub fn generator_step(&mut self, batch: &MiniBatch) -> Result<(f64, f64)> {
        let adversarial = self.discriminator.is_some() && self.options.lambda_adv != 0.0;
        let mut tape = Tape::new();
        let gb = self.generator.bind(&mut tape, Binding::Train)?;
        let v1 = tape.constant(batch.first_views())?;
        let v2 = tape.constant(batch.second_views())?;
        let out = self
            .generator
            .forward(&mut tape, &gb, v1, v2, adversarial)?;
        let ssl = tape.value(out.loss).item();
        let total = match (&self.discriminator, adversarial) {
            (Some(disc), true) => {
                let db = disc.params.bind(&mut tape, Binding::Frozen)?;
                let (s1, s2) = standardize_pair(&mut tape, out.s1, out.s2)?;
                let a = affinity_matrix(&mut tape, disc, &db, s1, s2, self.options.tau_a)?;
                let adv = loss_g_adv(&mut tape, a)?;
                let adv = tape.scale(adv, self.options.lambda_adv)?;
                tape.add(out.loss, adv)?
            }
            _ => out.loss,
        };
        let total_value = tape.value(total).item();
        let grads = tape.backward(total)?;
        self.generator.accumulate(&grads, &gb);
        self.opt_g.step_sets(&mut self.generator.param_sets_mut())?;
        self.generator.after_step(out.keys.as_ref())?;
        Ok((ssl, total_value))
    }

    /// `d_steps` discriminator updates (when enabled) followed by one
    /// generator update.
    pub fn step(&mut self, batch: &MiniBatch) -> Result<StepLosses> {
        let relation = relation_matrix(&batch.slide_ids)?;
        let mut discriminator = None;
        if self.discriminator.is_some() {
            // the generator is fixed during this phase, so its features are
            // computed once for all D updates
            let (s1, s2) = self
                .detached_features(batch)
                .map_err(|e| in_phase("discriminator", e))?;
            for _ in 0..self.options.d_steps {
                let ld = self
                    .discriminator_update(&s1, &s2, &relation)
                    .map_err(|e| in_phase("discriminator", e))?;
                discriminator = Some(ld);
            }
        }
        let (ssl, generator) = self
            .generator_step(batch)
            .map_err(|e| in_phase("generator", e))?;
        Ok(StepLosses {
            ssl,
            generator,
            discriminator,
        })
    }

    /// Current discriminator loss on a batch, without updating anything.
    pub fn evaluate_loss_d(&self, batch: &MiniBatch) -> Result<f64> {
        let disc = self
            .discriminator
            .as_ref()
            .ok_or_else(|| Error::invalid("discriminator is disabled"))?;
        let relation = relation_matrix(&batch.slide_ids)?;
        let mut tape = Tape::new();
        let gb = self.generator.bind(&mut tape, Binding::Frozen)?;
        let v1 = tape.constant(batch.first_views())?;
        let v2 = tape.constant(batch.second_views())?;
        let s1 = self.generator.features(&mut tape, &gb, v1)?;
        let s2 = self.generator.features(&mut tape, &gb, v2)?;
        let db = disc.params.bind(&mut tape, Binding::Frozen)?;
        let (s1, s2) = standardize_pair(&mut tape, s1, s2)?;
        let a = affinity_matrix(&mut tape, disc, &db, s1, s2, self.options.tau_a)?;
        let loss = loss_d(&mut tape, a, &relation)?;
        Ok(tape.value(loss).item())
    }
}

/// Affinity values for plain feature rows with a given discriminator.
pub fn affinity_values(
    disc: &Discriminator,
    s1: &Tensor,
    s2: &Tensor,
    tau_a: f64,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = disc.params.bind(&mut tape, Binding::Frozen)?;
    let x1 = tape.constant(s1.clone())?;
    let x2 = tape.constant(s2.clone())?;
    let a = affinity_matrix(&mut tape, disc, &b, x1, x2, tau_a)?;
    Ok(tape.value(a).clone())
}

/// Shapes of the relation-matrix cases for a batch of four.
pub fn relation_ones(relation: &Tensor) -> Vec<(usize, usize)> {
    let n = relation.shape()[0];
    (0..n * n)
        .filter(|&i| relation.data()[i] == 1.0)
        .map(|i| (i / n, i % n))
        .collect()
}
