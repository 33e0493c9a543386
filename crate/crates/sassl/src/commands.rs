//! The six subcommands. Each reads the effective config, writes its
//! artifacts under the run directory and returns what it wrote.
//!
//! Run directory layout:
//!
//! ```text
//! config.toml            effective config of the last command
//! data/index.csv         synth output (plus slide_*/patch_*.ppm|_mask.pgm)
//! pretrain/              checkpoint of the pretrained generator
//! pretrain_loss.csv      step,L_ssl,L_G[,L_D]
//! finetune/              dual encoder and task head checkpoint
//! finetune_loss.csv      step,loss
//! probe.csv / probe.md   stain and content probe accuracies
//! eval.csv / eval.md     task metrics on the held-out patches
//! report.csv / report.md comparison across runs
//! ```

use std::path::{Path, PathBuf};

use sassl_core::adversary::Trainer;
use sassl_core::experiment::{
    build_finetuner, build_trainer, embed_patches, finetune_steps, patch_images, pretrain_steps,
    probe_features, ProbeReport,
};
use sassl_core::metrics::{classification_scores, qwk, regression_scores, segmentation_scores};
use sassl_core::rng::Rng;
use sassl_core::ssl::{Encoder, Generator};
use sassl_core::synth::{generate_dataset, Dataset, Patch};
use sassl_core::transfer::{predict, DualEncoder, Prediction, Task, TaskHead};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Context, Result};
use crate::io::{csv_writer, ingest_patches, write_dataset, write_file};
use crate::report::{Cell, Table};

pub const PRETRAIN_DIR: &str = "pretrain";
pub const FINETUNE_DIR: &str = "finetune";
pub const DATA_DIR: &str = "data";
pub const CONFIG_FILE: &str = "config.toml";

/// A validated config bound to its run directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Run {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>) -> Self {
        Run {
            config,
            out: out.into(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn save_config(&self) -> Result<()> {
        write_file(&self.path(CONFIG_FILE), self.config.to_toml().as_bytes())
    }
}

/// Patches from the configured index, or the synthetic generator.
pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    match &config.data.index {
        Some(index) => ingest_patches(index),
        None => generate_dataset(&config.dataset()).context("generating the dataset"),
    }
}

/// Leading `train_per_slide` patches of each slide, and the rest.
pub fn split(config: &RunConfig, data: &Dataset) -> (Dataset, Dataset) {
    let t = config.data.train_per_slide;
    (
        data.split_within_slides(|p, _| p < t),
        data.split_within_slides(|p, _| p >= t),
    )
}

fn held_out(config: &RunConfig) -> Result<Dataset> {
    let (_, held) = split(config, &load_dataset(config)?);
    if held.is_empty() {
        return Err(CliError::data(format!(
            "no held-out patches: data.train_per_slide = {} covers every slide",
            config.data.train_per_slide
        )));
    }
    Ok(held)
}

pub fn synth(run: &Run) -> Result<PathBuf> {
    run.save_config()?;
    let data = generate_dataset(&run.config.dataset()).context("generating the dataset")?;
    write_dataset(&run.path(DATA_DIR), &data)
}

/// Generator (and discriminator) parameters as a checkpoint.
pub fn trainer_checkpoint(trainer: &Trainer, hash: &str, step: u64) -> Checkpoint {
    let g = &trainer.generator;
    let mut c = Checkpoint::new(hash, step);
    c.push_set("encoder", &g.encoder.params);
    c.push_set("projector", &g.projector.params);
    if let Some(p) = &g.predictor {
        c.push_set("predictor", &p.params);
    }
    if let Some(t) = &g.target {
        c.push_set("target.encoder", &t.encoder.params);
        c.push_set("target.projector", &t.projector.params);
    }
    if let Some(d) = &trainer.discriminator {
        c.push_set("discriminator", &d.params);
    }
    c
}

fn f(v: f64) -> String {
    v.to_string()
}

pub fn pretrain(run: &Run) -> Result<Checkpoint> {
    run.save_config()?;
    let cfg = run.config.pretrain_config();
    let (train, _) = split(&run.config, &load_dataset(&run.config)?);
    let mut trainer = build_trainer(&cfg).context("building the trainer")?;
    let sassl = trainer.discriminator.is_some();

    let mut log = csv_writer(Vec::new());
    let mut header = vec!["step", "L_ssl", "L_G"];
    if sassl {
        header.push("L_D");
    }
    log.write_record(&header).expect("in-memory write");
    let mut rows = Vec::with_capacity(cfg.steps);
    pretrain_steps(&mut trainer, &cfg, &train, 0, cfg.steps, |t, l| {
        let mut row = vec![t.to_string(), f(l.ssl), f(l.generator)];
        if let Some(d) = l.discriminator {
            row.push(f(d));
        }
        rows.push(row);
    })
    .context("pretraining")?;
    for r in &rows {
        log.write_record(r).expect("in-memory write");
    }
    write_file(
        &run.path("pretrain_loss.csv"),
        &log.into_inner().expect("in-memory flush"),
    )?;

    let ckpt = trainer_checkpoint(&trainer, &run.config.hash(), cfg.steps as u64);
    ckpt.save(&run.path(PRETRAIN_DIR))?;
    Ok(ckpt)
}

/// Encoder of the configured shape with values from `section` of `ckpt`.
pub fn load_encoder(config: &RunConfig, ckpt: &Checkpoint, section: &str) -> Result<Encoder> {
    // the values are overwritten, the seed only fills the shapes
    let mut enc = Encoder::new(&config.encoder(), &mut Rng::new(0));
    ckpt.load_set(section, &mut enc.params)?;
    Ok(enc)
}

/// Generator of the configured shape restored from a pretraining checkpoint.
pub fn load_generator(config: &RunConfig, ckpt: &Checkpoint) -> Result<Generator> {
    let mut g = Generator::new(&config.encoder(), &config.ssl(), &mut Rng::new(0))
        .context("building the generator")?;
    ckpt.load_set("encoder", &mut g.encoder.params)?;
    ckpt.load_set("projector", &mut g.projector.params)?;
    if let Some(p) = &mut g.predictor {
        ckpt.load_set("predictor", &mut p.params)?;
    }
    if let Some(t) = &mut g.target {
        ckpt.load_set("target.encoder", &mut t.encoder.params)?;
        ckpt.load_set("target.projector", &mut t.projector.params)?;
    }
    Ok(g)
}

fn pretrained_encoder(run: &Run) -> Result<Encoder> {
    let ckpt = Checkpoint::load(&run.path(PRETRAIN_DIR))?;
    load_encoder(&run.config, &ckpt, "encoder")
}

pub fn finetune(run: &Run) -> Result<Checkpoint> {
    run.save_config()?;
    let generic = pretrained_encoder(run)?;
    let cfg = run.config.finetune_config();
    let (train, _) = split(&run.config, &load_dataset(&run.config)?);
    if train.is_empty() {
        return Err(CliError::data("empty training split"));
    }
    let mut tuner = build_finetuner(&generic, &cfg, &train).context("building the task model")?;

    let mut log = csv_writer(Vec::new());
    log.write_record(["step", "loss"]).expect("in-memory write");
    let mut rows = Vec::with_capacity(cfg.steps);
    finetune_steps(&mut tuner, &cfg, &train, 0, cfg.steps, |t, l| {
        rows.push([t.to_string(), f(l)])
    })
    .context("fine-tuning")?;
    for r in &rows {
        log.write_record(r).expect("in-memory write");
    }
    write_file(
        &run.path("finetune_loss.csv"),
        &log.into_inner().expect("in-memory flush"),
    )?;

    let mut ckpt = Checkpoint::new(run.config.hash(), cfg.steps as u64);
    ckpt.push_set("generic", &tuner.model.generic.params);
    ckpt.push_set("special", &tuner.model.special.params);
    ckpt.push_set("head", &tuner.head.params);
    ckpt.save(&run.path(FINETUNE_DIR))?;
    Ok(ckpt)
}

pub fn probe_table(report: &ProbeReport) -> Table {
    let mut t = Table::new(["probe", "accuracy", "chance", "classes", "train", "test"]);
    for (name, r, chance) in [
        ("stain", &report.stain, report.stain_chance),
        ("content", &report.content, report.content_chance),
    ] {
        t.push(vec![
            name.into(),
            r.accuracy.into(),
            chance.into(),
            r.classes.into(),
            r.train.into(),
            r.test.into(),
        ]);
    }
    t
}

pub fn probe(run: &Run) -> Result<ProbeReport> {
    run.save_config()?;
    let encoder = pretrained_encoder(run)?;
    let held = held_out(&run.config)?;
    let refs: Vec<&Patch> = held.patches.iter().collect();
    let crop = run.config.augment.crop;
    let features = embed_patches(&encoder, &refs, crop).context("embedding held-out patches")?;
    let report = probe_features(&features, &refs, run.config.seed).context("linear probe")?;
    probe_table(&report).write(&run.out, "probe")?;
    Ok(report)
}

/// Task metrics for predictions against the patches they were made on.
pub fn score(task: Task, preds: &[Prediction], patches: &[Patch]) -> Result<Table> {
    let mismatch = || CliError::data(format!("predictions do not match a {task:?} task"));
    match task {
        Task::Classification { classes } => {
            let truth: Vec<usize> = patches.iter().map(|p| p.content_label).collect();
            let guess = preds
                .iter()
                .map(|p| match p {
                    Prediction::Class { id, .. } => Ok(*id),
                    _ => Err(mismatch()),
                })
                .collect::<Result<Vec<_>>>()?;
            let k = qwk(&truth, &guess, classes).context("qwk")?;
            let s = classification_scores(&truth, &guess, classes).context("f1")?;
            let mut header = vec!["qwk".to_string(), "acc".to_string()];
            header.extend((0..classes).map(|c| format!("f1_{c}")));
            header.push("f1_micro".into());
            let mut row = vec![k.into(), s.accuracy.into()];
            row.extend(s.f1.iter().map(|&v| Cell::from(v)));
            row.push(s.micro_f1.into());
            let mut t = Table::new(header);
            t.push(row);
            Ok(t)
        }
        Task::Regression => {
            let truth: Vec<f64> = patches.iter().map(|p| p.content_fraction).collect();
            let guess = preds
                .iter()
                .map(|p| match p {
                    Prediction::Fraction(v) => Ok(*v),
                    _ => Err(mismatch()),
                })
                .collect::<Result<Vec<_>>>()?;
            let s = regression_scores(&truth, &guess).context("regression metrics")?;
            let mut t = Table::new(["mae", "mse", "r2"]);
            t.push(vec![s.mae.into(), s.mse.into(), s.r2.into()]);
            Ok(t)
        }
        Task::Segmentation => {
            let mut truth = Vec::new();
            let mut guess = Vec::new();
            for (p, patch) in preds.iter().zip(patches) {
                match p {
                    Prediction::Mask(m) if m.len() == patch.mask.len() => {
                        guess.extend_from_slice(m);
                        truth.extend_from_slice(&patch.mask);
                    }
                    _ => return Err(mismatch()),
                }
            }
            let s = segmentation_scores(&guess, &truth).context("segmentation metrics")?;
            let mut t = Table::new(["pa", "dice", "miou"]);
            t.push(vec![s.pixel_accuracy.into(), s.dice.into(), s.miou.into()]);
            Ok(t)
        }
    }
}

/// Dual encoder and head restored from a fine-tuning checkpoint.
pub fn load_task_model(
    run: &Run,
    ckpt: &Checkpoint,
    size: usize,
) -> Result<(DualEncoder, TaskHead)> {
    let generic = load_encoder(&run.config, ckpt, "generic")?;
    let special = load_encoder(&run.config, ckpt, "special")?;
    let task = run.config.task();
    let mut head =
        TaskHead::for_task(task, &generic, size, &mut Rng::new(0)).context("building the head")?;
    ckpt.load_set("head", &mut head.params).map_err(|e| {
        CliError::data(format!(
            "task/checkpoint mismatch: config asks for {task:?} ({e})"
        ))
    })?;
    let model = DualEncoder::new(generic, special).context("dual encoder")?;
    Ok((model, head))
}

pub fn eval(run: &Run) -> Result<Table> {
    run.save_config()?;
    let held = held_out(&run.config)?;
    let size = held.patches[0].size();
    let ckpt = Checkpoint::load(&run.path(FINETUNE_DIR))?;
    let (model, head) = load_task_model(run, &ckpt, size)?;
    let mut preds = Vec::with_capacity(held.len());
    for chunk in held.patches.chunks(64) {
        let refs: Vec<&Patch> = chunk.iter().collect();
        let images = patch_images(&refs, size).context("held-out images")?;
        preds.extend(predict(&model, &head, &images).context("prediction")?);
    }
    let table = score(run.config.task(), &preds, &held.patches)?;
    table.write(&run.out, "eval")?;
    Ok(table)
}

/// Headline metric of an eval table.
fn primary_metric(eval: &Table) -> Option<&'static str> {
    ["qwk", "dice", "r2"]
        .into_iter()
        .find(|m| eval.column(m).is_some())
}

struct RunSummary {
    name: String,
    method: String,
    sassl: bool,
    stain: f64,
    content: f64,
    eval: Option<(&'static str, f64)>,
}

fn read_number(table: &Table, row: usize, col: usize, path: &Path) -> Result<f64> {
    let s = table.text(row, col);
    s.parse()
        .map_err(|_| CliError::data(format!("{}: bad number {s:?}", path.display())))
}

fn summarize(dir: &Path) -> Result<RunSummary> {
    let name = dir.display().to_string();
    let missing = |what: &str| CliError::data(format!("run {name}: missing {what}"));
    let cfg_path = dir.join(CONFIG_FILE);
    if !cfg_path.is_file() {
        return Err(missing(CONFIG_FILE));
    }
    let config = RunConfig::load(&cfg_path)?;
    let probe_path = dir.join("probe.csv");
    if !probe_path.is_file() {
        return Err(missing("probe.csv"));
    }
    let probe = Table::read_csv(&probe_path)?;
    let acc = probe
        .column("accuracy")
        .ok_or_else(|| CliError::data(format!("{}: no accuracy column", probe_path.display())))?;
    let mut stain = None;
    let mut content = None;
    for r in 0..probe.rows.len() {
        let v = read_number(&probe, r, acc, &probe_path)?;
        match probe.text(r, 0).as_str() {
            "stain" => stain = Some(v),
            "content" => content = Some(v),
            _ => {}
        }
    }
    let (Some(stain), Some(content)) = (stain, content) else {
        return Err(CliError::data(format!(
            "{}: needs stain and content rows",
            probe_path.display()
        )));
    };
    let eval_path = dir.join("eval.csv");
    let eval = if eval_path.is_file() {
        let t = Table::read_csv(&eval_path)?;
        match primary_metric(&t) {
            Some(m) if !t.rows.is_empty() => Some((
                m,
                read_number(&t, 0, t.column(m).expect("found"), &eval_path)?,
            )),
            _ => None,
        }
    } else {
        None
    };
    Ok(RunSummary {
        name,
        method: config.pretrain.method.name().to_string(),
        sassl: config.pretrain.sassl,
        stain,
        content,
        eval,
    })
}

/// One row per run, sorted by method then SASSL off/on; deltas are taken
/// against the run of the same method with SASSL off.
pub fn report(run: &Run, runs: &[PathBuf]) -> Result<Table> {
    if runs.len() < 2 {
        return Err(CliError::data(format!(
            "report needs at least 2 runs, got {}",
            runs.len()
        )));
    }
    let mut summaries = runs
        .iter()
        .map(|d| summarize(d))
        .collect::<Result<Vec<_>>>()?;
    summaries.sort_by(|a, b| (&a.method, a.sassl).cmp(&(&b.method, b.sassl)));

    let mut t = Table::new([
        "run",
        "ssl_method",
        "sassl",
        "stain_probe",
        "content_probe",
        "eval_metric",
        "eval_value",
        "delta_stain",
        "delta_content",
        "delta_eval",
    ]);
    for s in &summaries {
        let base = summaries
            .iter()
            .find(|b| b.method == s.method && !b.sassl)
            .filter(|_| s.sassl);
        let delta = |v: f64, b: f64| Cell::Num(v - b);
        let (metric, value) = match s.eval {
            Some((m, v)) => (Cell::from(m), Cell::Num(v)),
            None => (Cell::Empty, Cell::Empty),
        };
        let (ds, dc, de) = match base {
            Some(b) => (
                delta(s.stain, b.stain),
                delta(s.content, b.content),
                match (s.eval, b.eval) {
                    (Some((m1, v1)), Some((m2, v2))) if m1 == m2 => delta(v1, v2),
                    _ => Cell::Empty,
                },
            ),
            None => (Cell::Empty, Cell::Empty, Cell::Empty),
        };
        t.push(vec![
            s.name.as_str().into(),
            s.method.as_str().into(),
            if s.sassl { "on" } else { "off" }.into(),
            s.stain.into(),
            s.content.into(),
            metric,
            value,
            ds,
            dc,
            de,
        ]);
    }
    t.write(&run.out, "report")?;
    Ok(t)
}
