//! Two-workflow training loop.
//!
//! Every step draws one mini-batch and runs, per sample:
//!
//! 1. the student on the unmasked image (train mode) into the head, giving
//!    the cross-entropy term;
//! 2. the teacher on the unmasked image (eval mode, no trace kept) and the
//!    student on a block-masked copy (train mode), giving the smooth-L1
//!    embedding term.
//!
//! Gradients of `ce + λ·d2v` flow into the student only. The optimizer steps
//! first, then the teacher is pulled toward the post-step student. In
//! `ce_only` mode the embedding term is still evaluated and logged against
//! the frozen initial teacher, but it is neither optimized nor is the teacher
//! updated.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledCorpus, LabeledSample};
use crate::ema::{ema_update, init_teacher, EmaConfig, TeacherState};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy_logit_grad, data2vec_student_grad, regression_target, sample_log_prob, smooth_l1,
    LossConfig, LossReport,
};
use crate::masking::{apply_mask, generate_mask, MaskConfig};
use crate::model::{
    init_model, load_checkpoint, save_checkpoint, CheckpointMeta, Mode, ModelConfig, ModelParams,
    Network, Real, Role,
};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Composite,
    CeOnly,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Composite => "composite",
            TrainMode::CeOnly => "ce_only",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "composite" => Ok(TrainMode::Composite),
            "ce_only" | "ce-only" => Ok(TrainMode::CeOnly),
            other => Err(Error::config("mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub ema: EmaConfig,
    pub mask: MaskConfig,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_steps: u64,
    pub seed: u64,
    pub mode: TrainMode,
    /// Checkpoint interval in steps; a final checkpoint is always written.
    pub checkpoint_every: u64,
    /// Per-family train share of the corpus split.
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            ema: EmaConfig::default(),
            mask: MaskConfig::default(),
            optimizer: AdamConfig::default(),
            batch_size: 32,
            learning_rate: 1e-4,
            max_steps: 1000,
            seed: 0,
            mode: TrainMode::Composite,
            checkpoint_every: 500,
            train_fraction: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.ema.validate()?;
        self.mask.validate(self.model.input_size)?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: ModelParams<f32>,
    pub teacher: TeacherState<f32>,
    pub optimizer: Adam<f32>,
    /// Number of completed optimizer steps.
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub ce: f64,
    pub d2v: f64,
    pub composite: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// `None` for families without samples in the evaluated corpus.
    pub per_family_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub family_names: Vec<String>,
}

/// Loss terms and (optionally) gradients for one batch.
pub struct BatchPass<T> {
    pub report: LossReport,
    pub grads: Option<ModelParams<T>>,
}

struct SamplePass<T> {
    log_prob: f64,
    d2v_sum: f64,
    d2v_count: usize,
    grads: Option<ModelParams<T>>,
}

/// Everything a step needs besides parameters and data.
#[derive(Clone, Copy)]
pub struct StepContext<'a> {
    pub network: &'a Network,
    pub loss: &'a LossConfig,
    pub mask: &'a MaskConfig,
    pub mode: TrainMode,
    pub seed: u64,
    pub step: u64,
}

impl StepContext<'_> {
    fn sample_pass<T: Real>(
        &self,
        student: &ModelParams<T>,
        teacher: &ModelParams<T>,
        sample: &LabeledSample,
        slot: usize,
        batch: usize,
        want_grads: bool,
    ) -> Result<SamplePass<T>> {
        let net = self.network;
        let keys = [self.step, slot as u64];
        let mut drop_sup = stream(self.seed, Purpose::DropoutSupervised, &keys);
        let mut drop_masked = stream(self.seed, Purpose::DropoutMasked, &keys);
        let mut mask_rng = stream(self.seed, Purpose::Mask, &keys);

        // workflow 1: supervised pass on the unmasked image
        let (emb, enc_trace) = net.encoder_forward_traced(student, &sample.image, Mode::Train, &mut drop_sup)?;
        let head = net.head_forward_traced(student, &emb, Mode::Train, &mut drop_sup)?;
        let log_prob = sample_log_prob(&head.probs, sample.family_id, self.loss);

        // workflow 2: teacher target from the unmasked image, student on the masked one
        let target_block = net.encoder_forward(teacher, &sample.image, Mode::Eval, &mut drop_masked)?;
        let target = regression_target(&target_block, self.loss);
        let mask = generate_mask(self.mask, sample.image.height, &mut mask_rng)?;
        let masked = apply_mask(&sample.image, &mask)?;
        let (pred, pred_trace) = net.encoder_forward_traced(student, &masked, Mode::Train, &mut drop_masked)?;
        let d2v_sum: f64 = target
            .iter()
            .zip(&pred.values)
            .map(|(&z, &zh)| smooth_l1(zh.as_f64() - z, self.loss.beta))
            .sum();

        let grads = if want_grads {
            let mut g = student.zeros_like();
            let d_logits = cross_entropy_logit_grad(&head.probs, sample.family_id, 1.0 / batch as f64, self.loss);
            let d_emb = net.head_backward(student, &head, &d_logits, &mut g);
            net.encoder_backward(student, &enc_trace, &d_emb, &mut g);
            let lambda = self.loss.lambda_weight;
            if self.mode == TrainMode::Composite && lambda > 0.0 {
                let d_pred = data2vec_student_grad(&target, &pred, batch, lambda, self.loss);
                net.encoder_backward(student, &pred_trace, &d_pred, &mut g);
            }
            Some(g)
        } else {
            None
        };
        Ok(SamplePass {
            log_prob,
            d2v_sum,
            d2v_count: pred.values.len(),
            grads,
        })
    }

    /// Forward (and backward when `want_grads`) over a batch. The teacher is
    /// only read.
    pub fn batch_pass<T: Real>(
        &self,
        student: &ModelParams<T>,
        teacher: &ModelParams<T>,
        batch: &[&LabeledSample],
        want_grads: bool,
    ) -> Result<BatchPass<T>> {
        if batch.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let m = batch.len();
        let mut grads = want_grads.then(|| student.zeros_like());
        let (mut ce_sum, mut d2v_sum, mut d2v_count) = (0.0, 0.0, 0usize);
        // bounded fan-out; accumulation stays in batch order
        let width = rayon::current_num_threads().max(1);
        for (c, chunk) in batch.chunks(width).enumerate() {
            let parts = chunk
                .par_iter()
                .enumerate()
                .map(|(i, s)| self.sample_pass(student, teacher, s, c * width + i, m, want_grads))
                .collect::<Result<Vec<_>>>()?;
            for p in parts {
                ce_sum -= p.log_prob;
                d2v_sum += p.d2v_sum;
                d2v_count += p.d2v_count;
                if let (Some(acc), Some(g)) = (grads.as_mut(), p.grads.as_ref()) {
                    acc.add_assign(g);
                }
            }
        }
        let report = LossReport::new(ce_sum / m as f64, d2v_sum / d2v_count as f64, m, self.loss);
        Ok(BatchPass { report, grads })
    }
}

/// Owns the validated config and the network built from it.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    network: Network,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricsRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub report: Option<EvalReport>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let network = Network::new(&config.model)?;
        Ok(Self { config, network })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn init_state(&self) -> Result<TrainState> {
        let student: ModelParams<f32> = init_model(&self.config.model, self.config.seed)?;
        let teacher = init_teacher(&student);
        let optimizer = Adam::new(self.config.optimizer, &student);
        Ok(TrainState {
            student,
            teacher,
            optimizer,
            step: 0,
        })
    }

    pub fn context(&self, step: u64) -> StepContext<'_> {
        StepContext {
            network: &self.network,
            loss: &self.config.loss,
            mask: &self.config.mask,
            mode: self.config.mode,
            seed: self.config.seed,
            step,
        }
    }

    /// Loss report and student gradients for the next step; the state is
    /// only read.
    pub fn compute_gradients(
        &self,
        state: &TrainState,
        batch: &[&LabeledSample],
    ) -> Result<(LossReport, ModelParams<f32>)> {
        let pass = self
            .context(state.step)
            .batch_pass(&state.student, &state.teacher.params, batch, true)?;
        let r = pass.report;
        if !r.ce.is_finite() || !r.d2v.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: state.step,
                ce: r.ce,
                d2v: r.d2v,
            });
        }
        Ok((r, pass.grads.expect("gradients requested")))
    }

    pub fn apply_optimizer(&self, state: &mut TrainState, grads: &ModelParams<f32>) {
        state
            .optimizer
            .step(&mut state.student, grads, self.config.learning_rate);
    }

    pub fn update_teacher(&self, state: &mut TrainState) -> Result<()> {
        if self.config.mode == TrainMode::Composite {
            ema_update(&mut state.teacher, &state.student, &self.config.ema)?;
        }
        Ok(())
    }

    pub fn train_step(&self, state: &mut TrainState, batch: &[&LabeledSample]) -> Result<MetricsRecord> {
        let (report, grads) = self.compute_gradients(state, batch)?;
        self.apply_optimizer(state, &grads);
        self.update_teacher(state)?;
        let record = MetricsRecord {
            step: state.step,
            ce: report.ce,
            d2v: report.d2v,
            composite: report.composite,
        };
        state.step += 1;
        Ok(record)
    }

    /// Corpus indices for `step`: consecutive slices of per-epoch shuffles,
    /// so the sequence depends only on the seed and the step number.
    pub fn batch_indices(&self, step: u64, n: usize) -> Vec<usize> {
        let bs = self.config.batch_size;
        let first = step as usize * bs;
        let mut out = Vec::with_capacity(bs);
        let mut cached: Option<(usize, Vec<usize>)> = None;
        for pos in first..first + bs {
            let epoch = pos / n;
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut stream(self.config.seed, Purpose::Shuffle, &[epoch as u64]));
                cached = Some((epoch, perm));
            }
            out.push(cached.as_ref().unwrap().1[pos % n]);
        }
        out
    }

    pub fn checkpoint_meta(&self, state: &TrainState) -> CheckpointMeta {
        CheckpointMeta {
            format_version: 1,
            step: state.step,
            model: self.config.model.clone(),
            extra: serde_json::json!({
                "adam_steps": state.optimizer.steps,
                "teacher_last_update_step": state.teacher.last_update_step,
                "seed": self.config.seed,
                "mode": self.config.mode.as_str(),
            }),
        }
    }

    pub fn save_state(&self, path: &Path, state: &TrainState) -> std::io::Result<()> {
        save_checkpoint(
            path,
            &self.checkpoint_meta(state),
            &[
                ("student", &state.student),
                ("teacher", &state.teacher.params),
                ("adam_m", &state.optimizer.m),
                ("adam_v", &state.optimizer.v),
            ],
        )
    }

    pub fn load_state(&self, path: &Path) -> Result<TrainState> {
        let (meta, mut groups) = load_checkpoint(path, &self.config.model)?;
        let mut take = |name: &str| {
            groups.remove(name).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                reason: format!("missing tensor group `{name}`"),
            })
        };
        let student = take("student")?.with_role(Role::Student);
        let teacher = take("teacher")?.with_role(Role::Teacher);
        let m = take("adam_m")?;
        let v = take("adam_v")?;
        let num = |key: &str| meta.extra.get(key).and_then(|v| v.as_u64()).unwrap_or(0);
        Ok(TrainState {
            student,
            teacher: TeacherState {
                params: teacher,
                last_update_step: num("teacher_last_update_step"),
            },
            optimizer: Adam {
                config: self.config.optimizer,
                m,
                v,
                steps: num("adam_steps"),
            },
            step: meta.step,
        })
    }

    /// Runs from `resume` (or a fresh state) up to `max_steps`. With a run
    /// directory, checkpoints go to `checkpoints/` and metrics to
    /// `metrics.jsonl`.
    pub fn train(
        &self,
        train: &LabeledCorpus,
        eval: Option<&LabeledCorpus>,
        run_dir: Option<&Path>,
        resume: Option<TrainState>,
    ) -> Result<TrainOutcome> {
        if train.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        self.check_corpus(train)?;
        let mut state = match resume {
            Some(s) => s,
            None => self.init_state()?,
        };
        let writer = run_dir.map(|d| MetricsWriter::open(d, state.step)).transpose()?;
        let ckpt_dir = run_dir.map(|d| d.join("checkpoints"));
        if let Some(dir) = &ckpt_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut checkpoints = Vec::new();
        let mut metrics = Vec::new();
        let save = |state: &TrainState, checkpoints: &mut Vec<PathBuf>| -> Result<()> {
            if let Some(dir) = &ckpt_dir {
                let path = checkpoint_path(dir, state.step);
                self.save_state(&path, state).map_err(|source| Error::CheckpointWrite {
                    source,
                    last_good: checkpoints.last().cloned(),
                })?;
                checkpoints.push(path);
            }
            Ok(())
        };
        if state.step == 0 && self.config.max_steps == 0 {
            save(&state, &mut checkpoints)?;
        }
        while state.step < self.config.max_steps {
            let idx = self.batch_indices(state.step, train.len());
            let batch: Vec<&LabeledSample> = idx.iter().map(|&i| &train.samples[i]).collect();
            let record = self.train_step(&mut state, &batch)?;
            if record.step % 50 == 0 {
                log::info!(
                    "step {} ce {:.4} d2v {:.5} composite {:.4}",
                    record.step,
                    record.ce,
                    record.d2v,
                    record.composite
                );
            }
            if let Some(w) = &writer {
                w.send(record);
            }
            metrics.push(record);
            if state.step % self.config.checkpoint_every == 0 || state.step == self.config.max_steps {
                save(&state, &mut checkpoints)?;
            }
        }
        if let Some(w) = writer {
            w.finish()?;
        }
        let report = eval
            .filter(|c| !c.is_empty())
            .map(|c| evaluate(&self.network, &state.student, c))
            .transpose()?;
        Ok(TrainOutcome {
            state,
            metrics,
            checkpoints,
            report,
        })
    }

    fn check_corpus(&self, corpus: &LabeledCorpus) -> Result<()> {
        let size = self.config.model.input_size;
        if let Some(s) = corpus.samples.iter().find(|s| s.image.height != size || s.image.width != size) {
            return Err(Error::shape(
                format!("{size}x{size} images"),
                format!("{}x{} for `{}`", s.image.height, s.image.width, s.source_id),
            ));
        }
        if corpus.families() > self.config.model.families {
            return Err(Error::config(
                "model.families",
                format!(
                    "corpus has {} families but the head has {}",
                    corpus.families(),
                    self.config.model.families
                ),
            ));
        }
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:08}.ckpt"))
}

/// Latest `step_*.ckpt` in a checkpoint directory.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut best: Option<PathBuf> = None;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("step_") && name.ends_with(".ckpt") && best.as_ref().is_none_or(|b| path > *b) {
            best = Some(path);
        }
    }
    Ok(best)
}

/// Step-ordered JSON-lines writer on a background thread.
struct MetricsWriter {
    tx: mpsc::Sender<MetricsRecord>,
    handle: thread::JoinHandle<std::io::Result<()>>,
    path: PathBuf,
}

impl MetricsWriter {
    /// Opens `metrics.jsonl`, dropping any records at or beyond `from_step`
    /// left by an interrupted run.
    fn open(dir: &Path, from_step: u64) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.jsonl");
        let kept: Vec<String> = match fs::read_to_string(&path) {
            Ok(text) => text
                .lines()
                .filter(|l| {
                    serde_json::from_str::<MetricsRecord>(l)
                        .map(|r| r.step < from_step)
                        .unwrap_or(false)
                })
                .map(str::to_owned)
                .collect(),
            Err(_) => Vec::new(),
        };
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let (tx, rx) = mpsc::channel::<MetricsRecord>();
        let handle = thread::spawn(move || {
            let mut w = BufWriter::new(file);
            for line in kept {
                writeln!(w, "{line}")?;
            }
            for rec in rx {
                serde_json::to_writer(&mut w, &rec)?;
                writeln!(w)?;
                w.flush()?;
            }
            w.flush()
        });
        Ok(Self { tx, handle, path })
    }

    fn send(&self, record: MetricsRecord) {
        // a dead writer surfaces its error in finish()
        let _ = self.tx.send(record);
    }

    fn finish(self) -> Result<()> {
        drop(self.tx);
        match self.handle.join() {
            Ok(r) => r.map_err(|e| Error::io(&self.path, e)),
            Err(_) => Err(Error::io(&self.path, std::io::Error::other("metrics writer panicked"))),
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Accuracy, per-family accuracy and confusion matrix of eval-mode predictions.
pub fn evaluate<T: Real>(network: &Network, params: &ModelParams<T>, corpus: &LabeledCorpus) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let preds = corpus
        .samples
        .par_iter()
        .map(|s| network.predict(params, &s.image))
        .collect::<Result<Vec<_>>>()?;
    Ok(report_from_predictions(
        corpus.samples.iter().map(|s| s.family_id).zip(preds),
        corpus.family_names.clone(),
        network.config().families,
    ))
}

pub fn report_from_predictions(
    pairs: impl IntoIterator<Item = (usize, usize)>,
    family_names: Vec<String>,
    classes: usize,
) -> EvalReport {
    let n = classes.max(family_names.len());
    let mut confusion = vec![vec![0usize; n]; n];
    let mut total = 0;
    let mut correct = 0;
    for (truth, pred) in pairs {
        confusion[truth][pred] += 1;
        total += 1;
        correct += usize::from(truth == pred);
    }
    let per_family_accuracy = (0..family_names.len())
        .map(|f| {
            let row: usize = confusion[f].iter().sum();
            (row > 0).then(|| confusion[f][f] as f64 / row as f64)
        })
        .collect();
    EvalReport {
        total,
        correct,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        per_family_accuracy,
        confusion,
        family_names,
    }
}
