//! Seeded pretraining, fine-tuning and probing loops shared by the CLI and
//! the tests.

use alloc::vec::Vec;

use crate::adversary::{StepLosses, TrainOptions, Trainer};
use crate::error::{Error, Result};
use crate::metrics::{linear_probe, majority_rate, ProbeResult};
use crate::optim::SgdState;
use crate::rng::{mix_seed, Rng};
use crate::ssl::{Encoder, EncoderConfig, Generator, SslConfig};
use crate::synth::{center_view, sample_batch, AugmentConfig, Dataset, Patch};
use crate::tensor::Tensor;
use crate::transfer::{DualEncoder, FineTuner, Prediction, Targets, Task, TaskHead};

/// Stream tags for [`mix_seed`].
pub const STREAM_INIT_G: u64 = 1;
pub const STREAM_INIT_D: u64 = 2;
pub const STREAM_BATCH: u64 = 3;
pub const STREAM_HEAD: u64 = 4;
pub const STREAM_FINETUNE: u64 = 5;
pub const STREAM_PROBE: u64 = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub ssl: SslConfig,
    pub train: TrainOptions,
    pub augment: AugmentConfig,
    pub batch: usize,
    pub per_slide: usize,
    pub steps: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            seed: 0,
            encoder: EncoderConfig::default(),
            ssl: SslConfig::simsiam(),
            train: TrainOptions::default(),
            augment: AugmentConfig::default(),
            batch: 32,
            per_slide: 4,
            steps: 2000,
        }
    }
}

/// Fresh trainer; generator and discriminator draw from separate streams so
/// switching the discriminator off leaves the generator initialization alone.
pub fn build_trainer(config: &PretrainConfig) -> Result<Trainer> {
    let mut g_rng = Rng::derived(config.seed, &[STREAM_INIT_G]);
    let generator = Generator::new(&config.encoder, &config.ssl, &mut g_rng)?;
    let mut d_rng = Rng::derived(config.seed, &[STREAM_INIT_D]);
    Trainer::new(generator, config.train.clone(), &mut d_rng)
}

/// Runs steps `start..start + count` of the schedule. Batch `t` always uses
/// the same seed, so a run can be split without changing its outcome.
pub fn pretrain_steps(
    trainer: &mut Trainer,
    config: &PretrainConfig,
    dataset: &Dataset,
    start: usize,
    count: usize,
    mut on_step: impl FnMut(usize, &StepLosses),
) -> Result<()> {
    if dataset.slide_count() < 2 {
        return Err(Error::degenerate("pretraining needs at least 2 slides"));
    }
    for t in start..start + count {
        let seed = mix_seed(config.seed, &[STREAM_BATCH, t as u64]);
        let batch = sample_batch(
            dataset,
            config.batch,
            config.per_slide,
            &config.augment,
            seed,
        )?;
        let losses = trainer.step(&batch)?;
        on_step(t, &losses);
    }
    Ok(())
}

/// Builds a trainer and runs the full schedule.
pub fn pretrain(
    config: &PretrainConfig,
    dataset: &Dataset,
    on_step: impl FnMut(usize, &StepLosses),
) -> Result<Trainer> {
    let mut trainer = build_trainer(config)?;
    pretrain_steps(&mut trainer, config, dataset, 0, config.steps, on_step)?;
    Ok(trainer)
}

const EMBED_CHUNK: usize = 64;

/// Images for a set of patches, center-cropped to `crop` (or whole when
/// `crop` equals the patch size).
pub fn patch_images(patches: &[&Patch], crop: usize) -> Result<Tensor> {
    let views = patches
        .iter()
        .map(|p| center_view(p, crop))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&views)
}

/// Encoder features `[N, d]` for every patch.
pub fn embed_patches(encoder: &Encoder, patches: &[&Patch], crop: usize) -> Result<Tensor> {
    if patches.is_empty() {
        return Err(Error::invalid("nothing to embed"));
    }
    let mut data = Vec::with_capacity(patches.len() * encoder.feature_dim());
    for chunk in patches.chunks(EMBED_CHUNK) {
        let feats = encoder.embed(&patch_images(chunk, crop)?)?;
        data.extend_from_slice(feats.data());
    }
    Tensor::new(&[patches.len(), encoder.feature_dim()], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub stain: ProbeResult,
    pub content: ProbeResult,
    pub stain_chance: f64,
    pub content_chance: f64,
}

/// Stain (slide id) and content (class) probes on the same features.
pub fn probe_features(features: &Tensor, patches: &[&Patch], seed: u64) -> Result<ProbeReport> {
    let stain_labels: Vec<u64> = patches.iter().map(|p| u64::from(p.slide_id)).collect();
    let content_labels: Vec<u64> = patches.iter().map(|p| p.content_label as u64).collect();
    let split = mix_seed(seed, &[STREAM_PROBE]);
    Ok(ProbeReport {
        stain: linear_probe(features, &stain_labels, split)?,
        content: linear_probe(features, &content_labels, split)?,
        stain_chance: majority_rate(&stain_labels),
        content_chance: majority_rate(&content_labels),
    })
}

pub fn probe_encoder(
    encoder: &Encoder,
    dataset: &Dataset,
    crop: usize,
    seed: u64,
) -> Result<ProbeReport> {
    let patches: Vec<&Patch> = dataset.patches.iter().collect();
    let features = embed_patches(encoder, &patches, crop)?;
    probe_features(&features, &patches, seed)
}

/// Targets of `task` for a list of patches.
pub fn task_targets(task: Task, patches: &[&Patch]) -> Result<Targets> {
    Ok(match task {
        Task::Classification { classes } => {
            if let Some(p) = patches.iter().find(|p| p.content_label >= classes) {
                return Err(Error::invalid(alloc::format!(
                    "class {} out of range for {classes} classes",
                    p.content_label
                )));
            }
            Targets::Classes(patches.iter().map(|p| p.content_label).collect())
        }
        Task::Regression => {
            Targets::Fractions(patches.iter().map(|p| p.content_fraction).collect())
        }
        Task::Segmentation => Targets::Masks(patches.iter().map(|p| p.mask.clone()).collect()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub seed: u64,
    pub task: Task,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch: usize,
    pub steps: usize,
    /// Start the special encoder at zero instead of a copy of the generic one.
    pub zero_special: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            seed: 0,
            task: Task::Classification { classes: 2 },
            learning_rate: 0.005,
            momentum: 0.9,
            batch: 32,
            steps: 200,
            zero_special: false,
        }
    }
}

/// Dual encoder and head for `config.task`, with the head input calibrated
/// on `train`.
pub fn build_finetuner(
    generic: &Encoder,
    config: &FinetuneConfig,
    train: &Dataset,
) -> Result<FineTuner> {
    let size = train
        .patches
        .first()
        .map(Patch::size)
        .ok_or_else(|| Error::degenerate("empty fine-tuning set"))?;
    let model = if config.zero_special {
        DualEncoder::with_zero_special(generic)
    } else {
        DualEncoder::from_pretrained(generic)
    };
    let mut rng = Rng::derived(config.seed, &[STREAM_HEAD]);
    let head = TaskHead::for_task(config.task, generic, size, &mut rng)?;
    let mut tuner = FineTuner::new(
        model,
        head,
        SgdState::new(config.learning_rate, config.momentum)?,
    );
    let refs: Vec<&Patch> = train.patches.iter().collect();
    tuner.calibrate(&patch_images(&refs, size)?)?;
    Ok(tuner)
}

/// Runs fine-tuning steps `start..start + count` on random minibatches.
pub fn finetune_steps(
    tuner: &mut FineTuner,
    config: &FinetuneConfig,
    dataset: &Dataset,
    start: usize,
    count: usize,
    mut on_step: impl FnMut(usize, f64),
) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::degenerate("empty fine-tuning set"));
    }
    let size = dataset.patches[0].size();
    let b = config.batch.min(dataset.len());
    if b == 0 {
        return Err(Error::invalid("batch must be positive"));
    }
    for t in start..start + count {
        let mut rng = Rng::derived(config.seed, &[STREAM_FINETUNE, t as u64]);
        let picks: Vec<&Patch> = (0..b)
            .map(|_| &dataset.patches[rng.below(dataset.len())])
            .collect();
        let images = patch_images(&picks, size)?;
        let targets = task_targets(config.task, &picks)?;
        let loss = tuner.step(&images, &targets)?;
        on_step(t, loss);
    }
    Ok(())
}

/// Predictions for every patch, in order.
pub fn predict_dataset(tuner: &FineTuner, dataset: &Dataset) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(dataset.len());
    let refs: Vec<&Patch> = dataset.patches.iter().collect();
    for chunk in refs.chunks(EMBED_CHUNK) {
        let size = chunk[0].size();
        out.extend(tuner.predict(&patch_images(chunk, size)?)?);
    }
    Ok(out)
}

/// Fraction of patches whose predicted class matches.
pub fn classification_accuracy(preds: &[Prediction], patches: &[Patch]) -> f64 {
    let hits = preds
        .iter()
        .zip(patches)
        .filter(
            |(p, patch)| matches!(p, Prediction::Class { id, .. } if *id == patch.content_label),
        )
        .count();
    hits as f64 / patches.len().max(1) as f64
}
