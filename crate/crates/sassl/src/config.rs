//! Run configuration: TOML with `[section]` tables, every field optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sassl_core::adversary::TrainOptions;
use sassl_core::experiment::{FinetuneConfig, PretrainConfig};
use sassl_core::ssl::{EncoderConfig, SslConfig};
use sassl_core::synth::{AugmentConfig, DatasetConfig, RenderConfig};
use sassl_core::transfer::Task;

use crate::error::{CliError, Result};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "SASSL_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory; see [`RunConfig::resolve_out`].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub data: DataSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub augment: AugmentSection,
    pub finetune: FinetuneSection,
    pub report: ReportSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// CSV index of patches on disk; the synthetic generator is used when
    /// absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<PathBuf>,
    pub n_slides: usize,
    pub patches_per_slide: usize,
    /// Leading patches of every slide used for training; the rest are held
    /// out for probing and evaluation.
    pub train_per_slide: usize,
    pub perturbation: f64,
    pub patch_size: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub feature_dim: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Infonce,
    Simsiam,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Infonce => "infonce",
            Method::Simsiam => "simsiam",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub method: Method,
    pub sassl: bool,
    pub lambda_adv: f64,
    /// InfoNCE temperature.
    pub temperature: f64,
    pub tau_a: f64,
    /// Momentum of the InfoNCE target encoder.
    pub momentum: f64,
    pub queue_capacity: usize,
    pub batch: usize,
    pub per_slide: usize,
    pub steps: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub sgd_momentum: f64,
    pub d_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub crop: usize,
    pub flip_prob: f64,
    pub jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskName {
    Classification,
    Regression,
    Segmentation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub task: TaskName,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub zero_special: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub runs: Vec<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: None,
            data: DataSection::default(),
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            augment: AugmentSection::default(),
            finetune: FinetuneSection::default(),
            report: ReportSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            index: None,
            n_slides: 16,
            patches_per_slide: 288,
            train_per_slide: 32,
            perturbation: 0.4,
            patch_size: 32,
            classes: 2,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        ModelSection {
            feature_dim: e.feature_dim,
            widths: e.widths,
            kernel: e.kernel,
            stride: e.stride,
        }
    }
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        let infonce = SslConfig::infonce();
        PretrainSection {
            method: Method::Simsiam,
            sassl: p.train.sassl,
            lambda_adv: p.train.lambda_adv,
            temperature: infonce.temperature,
            tau_a: p.train.tau_a,
            momentum: infonce.momentum.unwrap_or(0.99),
            queue_capacity: infonce.queue_capacity,
            batch: p.batch,
            per_slide: p.per_slide,
            steps: p.steps,
            lr_g: p.train.lr_g,
            lr_d: p.train.lr_d,
            sgd_momentum: p.train.sgd_momentum,
            d_steps: p.train.d_steps,
        }
    }
}

impl Default for AugmentSection {
    fn default() -> Self {
        let a = AugmentConfig::default();
        AugmentSection {
            crop: a.crop,
            flip_prob: a.flip_prob,
            jitter: a.jitter,
        }
    }
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        FinetuneSection {
            task: TaskName::Classification,
            steps: f.steps,
            lr: f.learning_rate,
            momentum: f.momentum,
            batch: f.batch,
            zero_special: f.zero_special,
        }
    }
}

fn bad(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::config(format!("{field}: {msg}"))
}

fn check(ok: bool, field: &str, msg: impl std::fmt::Display) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(bad(field, msg))
    }
}

fn finite_in(v: f64, lo: f64, hi: f64, hi_open: bool, field: &str) -> Result<()> {
    let upper = if hi_open { v < hi } else { v <= hi };
    let range = if hi_open {
        format!("[{lo}, {hi})")
    } else {
        format!("[{lo}, {hi}]")
    };
    check(
        v.is_finite() && v >= lo && upper,
        field,
        format!("{v} outside {range}"),
    )
}

fn positive(v: f64, field: &str) -> Result<()> {
    check(v.is_finite() && v > 0.0, field, format!("{v} must be > 0"))
}

impl RunConfig {
    /// Parses TOML text and validates it.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Rejects every out-of-range field, naming it.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        check(d.n_slides >= 1, "data.n_slides", "must be at least 1")?;
        check(
            d.patches_per_slide >= 1,
            "data.patches_per_slide",
            "must be at least 1",
        )?;
        check(
            d.train_per_slide >= 1 && d.train_per_slide <= d.patches_per_slide,
            "data.train_per_slide",
            format!(
                "{} outside [1, data.patches_per_slide = {}]",
                d.train_per_slide, d.patches_per_slide
            ),
        )?;
        finite_in(d.perturbation, 0.0, 1.0, false, "data.perturbation")?;
        check(
            (2..=16).contains(&d.classes),
            "data.classes",
            format!("{} outside [2, 16]", d.classes),
        )?;

        let m = &self.model;
        check(
            m.feature_dim >= 1,
            "model.feature_dim",
            "must be at least 1",
        )?;
        check(
            m.widths.len() >= 2 && m.widths.iter().all(|&w| w >= 1),
            "model.widths",
            "needs at least 2 blocks, each at least 1 channel wide",
        )?;
        check(m.kernel >= 1, "model.kernel", "must be at least 1")?;
        check(m.stride >= 1, "model.stride", "must be at least 1")?;

        let a = &self.augment;
        check(
            a.crop >= 1 && a.crop <= d.patch_size,
            "augment.crop",
            format!("{} outside [1, data.patch_size = {}]", a.crop, d.patch_size),
        )?;
        check(
            self.encoder().tap_sizes(a.crop).is_some(),
            "augment.crop",
            format!("{} too small for the encoder", a.crop),
        )?;
        check(
            self.encoder().tap_sizes(d.patch_size).is_some(),
            "data.patch_size",
            format!("{} too small for the encoder", d.patch_size),
        )?;
        finite_in(a.flip_prob, 0.0, 1.0, false, "augment.flip_prob")?;
        finite_in(a.jitter, 0.0, 1.0, false, "augment.jitter")?;

        let p = &self.pretrain;
        check(
            p.lambda_adv.is_finite() && p.lambda_adv >= 0.0,
            "pretrain.lambda_adv",
            format!("{} must be finite and >= 0", p.lambda_adv),
        )?;
        positive(p.temperature, "pretrain.temperature")?;
        positive(p.tau_a, "pretrain.tau_a")?;
        finite_in(p.momentum, 0.0, 1.0, true, "pretrain.momentum")?;
        check(
            p.queue_capacity >= 1,
            "pretrain.queue_capacity",
            "must be at least 1",
        )?;
        check(p.per_slide >= 2, "pretrain.per_slide", "must be at least 2")?;
        check(
            p.batch >= p.per_slide && p.batch % p.per_slide == 0,
            "pretrain.batch",
            format!(
                "{} is not a positive multiple of pretrain.per_slide = {}",
                p.batch, p.per_slide
            ),
        )?;
        check(
            p.per_slide <= d.train_per_slide,
            "pretrain.per_slide",
            format!(
                "{} exceeds data.train_per_slide = {}",
                p.per_slide, d.train_per_slide
            ),
        )?;
        positive(p.lr_g, "pretrain.lr_g")?;
        positive(p.lr_d, "pretrain.lr_d")?;
        finite_in(p.sgd_momentum, 0.0, 1.0, true, "pretrain.sgd_momentum")?;
        check(p.d_steps >= 1, "pretrain.d_steps", "must be at least 1")?;

        let f = &self.finetune;
        positive(f.lr, "finetune.lr")?;
        finite_in(f.momentum, 0.0, 1.0, true, "finetune.momentum")?;
        check(f.batch >= 1, "finetune.batch", "must be at least 1")?;
        Ok(())
    }

    /// SHA-256 of the canonical TOML, leaving out the output directory so the
    /// same experiment hashes the same wherever it is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `--out`, then the `out` key, then `$SASSL_OUT/<config stem>`.
    pub fn resolve_out(
        &self,
        flag: Option<&Path>,
        env: Option<&Path>,
        config_path: &Path,
    ) -> Result<PathBuf> {
        if let Some(p) = flag {
            return Ok(p.to_path_buf());
        }
        if let Some(p) = &self.out {
            return Ok(p.clone());
        }
        if let Some(root) = env {
            let stem = config_path
                .file_stem()
                .map(|s| s.to_os_string())
                .unwrap_or_else(|| "run".into());
            return Ok(root.join(stem));
        }
        Err(CliError::config(format!(
            "no output directory: pass --out, set `out`, or set {OUT_ENV}"
        )))
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: 3,
            widths: self.model.widths.clone(),
            kernel: self.model.kernel,
            stride: self.model.stride,
            feature_dim: self.model.feature_dim,
        }
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            seed: self.seed,
            n_slides: self.data.n_slides,
            patches_per_slide: self.data.patches_per_slide,
            perturbation: self.data.perturbation,
            render: RenderConfig {
                size: self.data.patch_size,
                classes: self.data.classes,
            },
        }
    }

    pub fn ssl(&self) -> SslConfig {
        let p = &self.pretrain;
        let mut ssl = match p.method {
            Method::Infonce => SslConfig::infonce(),
            Method::Simsiam => SslConfig::simsiam(),
        };
        ssl.temperature = p.temperature;
        ssl.queue_capacity = p.queue_capacity;
        if ssl.momentum.is_some() {
            ssl.momentum = Some(p.momentum);
        }
        ssl
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            seed: self.seed,
            encoder: self.encoder(),
            ssl: self.ssl(),
            train: TrainOptions {
                lr_g: p.lr_g,
                lr_d: p.lr_d,
                sgd_momentum: p.sgd_momentum,
                sassl: p.sassl,
                lambda_adv: p.lambda_adv,
                tau_a: p.tau_a,
                d_steps: p.d_steps,
            },
            augment: AugmentConfig {
                crop: self.augment.crop,
                flip_prob: self.augment.flip_prob,
                jitter: self.augment.jitter,
            },
            batch: p.batch,
            per_slide: p.per_slide,
            steps: p.steps,
        }
    }

    pub fn task(&self) -> Task {
        match self.finetune.task {
            TaskName::Classification => Task::Classification {
                classes: self.data.classes,
            },
            TaskName::Regression => Task::Regression,
            TaskName::Segmentation => Task::Segmentation,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            seed: self.seed,
            task: self.task(),
            learning_rate: f.lr,
            momentum: f.momentum,
            batch: f.batch,
            steps: f.steps,
            zero_special: f.zero_special,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_configs_match_defaults() {
        let full = RunConfig::from_toml(include_str!("../../../configs/sassl.toml")).unwrap();
        assert_eq!(full, RunConfig::default());
        let base = RunConfig::from_toml(include_str!("../../../configs/baseline.toml")).unwrap();
        assert!(!base.pretrain.sassl);
        assert_eq!(base.hash(), {
            let mut c = RunConfig::default();
            c.pretrain.sassl = false;
            c.hash()
        });
    }

    fn expect_field(text: &str, field: &str) {
        match RunConfig::from_toml(text) {
            Err(CliError::Config(m)) => assert!(m.contains(field), "{m:?} does not name {field}"),
            other => panic!("expected a config error for {field}, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.seed = 9;
        c.pretrain.method = Method::Infonce;
        c.finetune.task = TaskName::Segmentation;
        c.data.index = Some("data/index.csv".into());
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn out_of_range_fields_are_named() {
        let cases = [
            ("[data]\nn_slides = 0", "data.n_slides"),
            ("[data]\npatches_per_slide = 0", "data.patches_per_slide"),
            ("[data]\ntrain_per_slide = 500", "data.train_per_slide"),
            ("[data]\nperturbation = 1.5", "data.perturbation"),
            ("[data]\nperturbation = -0.1", "data.perturbation"),
            ("[data]\nclasses = 1", "data.classes"),
            (
                "[data]\npatch_size = 4\n[augment]\ncrop = 4",
                "augment.crop",
            ),
            ("[model]\nfeature_dim = 0", "model.feature_dim"),
            ("[model]\nwidths = [8]", "model.widths"),
            ("[model]\nkernel = 0", "model.kernel"),
            ("[model]\nstride = 0", "model.stride"),
            ("[augment]\ncrop = 40", "augment.crop"),
            ("[augment]\nflip_prob = 2.0", "augment.flip_prob"),
            ("[augment]\njitter = -1.0", "augment.jitter"),
            ("[pretrain]\nlambda_adv = -1.0", "pretrain.lambda_adv"),
            ("[pretrain]\ntemperature = 0.0", "pretrain.temperature"),
            ("[pretrain]\ntau_a = -0.5", "pretrain.tau_a"),
            ("[pretrain]\nmomentum = 1.0", "pretrain.momentum"),
            ("[pretrain]\nqueue_capacity = 0", "pretrain.queue_capacity"),
            ("[pretrain]\nper_slide = 1", "pretrain.per_slide"),
            ("[pretrain]\nbatch = 30", "pretrain.batch"),
            ("[pretrain]\nlr_g = 0.0", "pretrain.lr_g"),
            ("[pretrain]\nlr_d = nan", "pretrain.lr_d"),
            ("[pretrain]\nsgd_momentum = 1.2", "pretrain.sgd_momentum"),
            ("[pretrain]\nd_steps = 0", "pretrain.d_steps"),
            ("[finetune]\nlr = -1.0", "finetune.lr"),
            ("[finetune]\nmomentum = -0.1", "finetune.momentum"),
            ("[finetune]\nbatch = 0", "finetune.batch"),
        ];
        for (text, field) in cases {
            expect_field(text, field);
        }
    }

    #[test]
    fn unknown_keys_and_variants_are_rejected() {
        expect_field("[pretrain]\nlamda = 1.0", "lamda");
        expect_field("[pretrain]\nmethod = \"byol\"", "byol");
        expect_field("[finetune]\ntask = \"detection\"", "detection");
    }

    #[test]
    fn hash_ignores_output_dir() {
        let mut a = RunConfig::default();
        let mut b = a.clone();
        a.out = Some("x".into());
        b.out = Some("y".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn output_dir_precedence() {
        let cfg_path = Path::new("configs/base.toml");
        let mut c = RunConfig::default();
        let env = Path::new("/tmp/runs");
        assert_eq!(
            c.resolve_out(None, Some(env), cfg_path).unwrap(),
            PathBuf::from("/tmp/runs/base")
        );
        c.out = Some("here".into());
        assert_eq!(
            c.resolve_out(None, Some(env), cfg_path).unwrap(),
            PathBuf::from("here")
        );
        assert_eq!(
            c.resolve_out(Some(Path::new("flag")), Some(env), cfg_path)
                .unwrap(),
            PathBuf::from("flag")
        );
        c.out = None;
        assert!(matches!(
            c.resolve_out(None, None, cfg_path),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn builds_core_configs() {
        let mut c = RunConfig::default();
        c.pretrain.method = Method::Infonce;
        c.pretrain.momentum = 0.9;
        let p = c.pretrain_config();
        assert_eq!(p.ssl.momentum, Some(0.9));
        assert_eq!(p.batch % p.per_slide, 0);
        c.pretrain.method = Method::Simsiam;
        assert_eq!(c.pretrain_config().ssl.momentum, None);
        assert_eq!(c.task(), Task::Classification { classes: 2 });
    }
}
