//! Optimisation loop: learning-rate schedule, Adam, pretraining and
//! finetuning steps, duration-bucketed batching, checkpoints and loss logs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flowpath::{
    cfm_loss, cfm_loss_gradient, masked_cfm_loss, stratified_times, training_tuple_at,
    FlowPathConfig,
};
use crate::masking::{apply_mask, maybe_drop_condition, sample_mask, ConditionInput};
use crate::sampler::FeatureSetup;
use crate::spectral::{AudioSignal, FeatureGrid};
use crate::tasks::{build_condition, build_target, TaskKind, TsePromptSpec};
use crate::vectorfield::{GradientTape, Gradients, ModelConfig, VectorFieldModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Pretrain,
    Finetune,
    Scratch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSupport {
    #[default]
    AllFrames,
    MaskedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub ratio: f64,
    pub min_span: usize,
    pub drop_prob: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            ratio: 0.7,
            min_span: 10,
            drop_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Seconds of audio per optimisation step.
    pub batch_seconds: f64,
    /// Random crop length in seconds; `None` trains on whole utterances.
    pub segment_seconds: Option<f64>,
    pub seed: u64,
    pub mask: MaskConfig,
    pub task: Option<TaskKind>,
    pub loss_support: LossSupport,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub adam: AdamConfig,
    pub flow: FlowPathConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            mode: TrainMode::Pretrain,
            peak_lr: 5e-5,
            final_lr: 1e-5,
            warmup_steps: 5_000,
            total_steps: 600_000,
            batch_seconds: 131.0,
            segment_seconds: None,
            seed: 0,
            mask: MaskConfig::default(),
            task: None,
            loss_support: LossSupport::AllFrames,
            grad_clip: Some(1.0),
            adam: AdamConfig::default(),
            flow: FlowPathConfig::default(),
        }
    }

    pub fn finetune(task: TaskKind) -> Self {
        Self {
            mode: TrainMode::Finetune,
            peak_lr: 2e-5,
            final_lr: 0.0,
            total_steps: 100_000,
            batch_seconds: 50.0,
            task: Some(task),
            ..Self::pretrain()
        }
    }

    pub fn scratch(task: TaskKind) -> Self {
        Self {
            mode: TrainMode::Scratch,
            peak_lr: 1e-4,
            ..Self::finetune(task)
        }
    }

    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!(
                "peak_lr must be positive, got {}",
                self.peak_lr
            )));
        }
        if !(0.0..=self.peak_lr).contains(&self.final_lr) {
            return Err(Error::Config(format!(
                "final_lr must lie in [0, peak_lr], got {}",
                self.final_lr
            )));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.batch_seconds > 0.0) {
            return Err(Error::Config("batch_seconds must be positive".into()));
        }
        if let Some(s) = self.segment_seconds {
            if !(s > 0.0) {
                return Err(Error::Config("segment_seconds must be positive".into()));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.mask.ratio) || self.mask.min_span == 0 {
            return Err(Error::Config(format!(
                "invalid mask settings {:?}",
                self.mask
            )));
        }
        if !(0.0..=1.0).contains(&self.mask.drop_prob) {
            return Err(Error::Config("drop_prob must lie in [0, 1]".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        self.flow.validate()?;
        match (self.mode, self.task) {
            (TrainMode::Pretrain, _) => Ok(()),
            (_, Some(_)) => Ok(()),
            (_, None) => Err(Error::Config("finetuning requires a task".into())),
        }
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine annealing to `final_lr`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(invalid(format!(
            "step {step} is beyond total_steps {}",
            cfg.total_steps
        )));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.peak_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    Ok(cfg.final_lr
        + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

/// Scales `grad` in place so its norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossStats {
    pub count: u64,
    pub sum: f64,
    pub last: f64,
    /// Conditions replaced by the null condition.
    pub null_conditions: u64,
    pub items: u64,
}

impl LossStats {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: u64,
    pub model: VectorFieldModel,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub stats: LossStats,
}

impl TrainState {
    /// Fresh model initialised from `cfg.seed`.
    pub fn new(model_config: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = VectorFieldModel::init(model_config, &mut rng)?;
        Ok(Self::with_rng(model, cfg, rng))
    }

    /// Starts a new optimisation run from existing weights.
    pub fn from_model(model: VectorFieldModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self::with_rng(model, cfg, rng))
    }

    fn with_rng(model: VectorFieldModel, config: TrainConfig, rng: ChaCha8Rng) -> Self {
        let optimizer = Adam::new(config.adam, model.num_parameters());
        Self {
            config,
            step: 0,
            model,
            optimizer,
            rng,
            stats: LossStats::default(),
        }
    }

    pub fn current_lr(&self) -> Result<f64> {
        lr_schedule(self.step, &self.config)
    }

    fn apply(&mut self, mut grad: Vec<f64>, loss: f64) -> Result<StepReport> {
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                loss,
            });
        }
        let lr = self.current_lr()?;
        let grad_norm = match self.config.grad_clip {
            Some(c) => clip_grad_norm(&mut grad, c),
            None => grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                loss: grad_norm,
            });
        }
        self.optimizer
            .update(self.model.parameters_mut(), &grad, lr);
        let report = StepReport {
            step: self.step,
            lr,
            loss,
            grad_norm,
        };
        self.step += 1;
        self.stats.count += 1;
        self.stats.sum += loss;
        self.stats.last = loss;
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

struct ItemResult {
    loss: f64,
    grad: Gradients,
    null: bool,
}

fn item_gradient(
    model: &VectorFieldModel,
    x1: &FeatureGrid,
    cond: &ConditionInput,
    weights: Option<&[bool]>,
    t: f64,
    flow: &FlowPathConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ItemResult> {
    let (c, l) = x1.shape();
    let tuple = training_tuple_at(x1.as_slice(), t, flow, rng)?;
    let x_t = FeatureGrid::from_flat(c, l, tuple.x_t)?;
    let mut tape = GradientTape::new();
    let pred = model.forward_recorded(&mut tape, &x_t, cond, tuple.t)?;
    let (loss, grad) = match weights {
        None => (
            cfm_loss(pred.as_slice(), &tuple.target)?,
            cfm_loss_gradient(pred.as_slice(), &tuple.target)?,
        ),
        Some(w) => masked_cfm_loss(pred.as_slice(), &tuple.target, w)?,
    };
    let grad = model.backward(&mut tape, &FeatureGrid::from_flat(c, l, grad)?)?;
    Ok(ItemResult {
        loss,
        grad,
        null: cond.is_null,
    })
}

/// Averages per-item results in index order so the sum is reproducible.
fn reduce(state: &mut TrainState, results: Vec<Result<ItemResult>>) -> Result<StepReport> {
    let n = results.len() as f64;
    let mut total = vec![0.0; state.model.num_parameters()];
    let mut loss = 0.0;
    for r in results {
        let r = r?;
        loss += r.loss;
        for (t, g) in total.iter_mut().zip(&r.grad.values) {
            *t += g;
        }
        state.stats.items += 1;
        state.stats.null_conditions += r.null as u64;
    }
    for t in &mut total {
        *t /= n;
    }
    state.apply(total, loss / n)
}

/// Per-item rng seeds and stratified flow times, both drawn from the state rng.
fn item_draws(state: &mut TrainState, n: usize) -> Vec<(u64, f64)> {
    let seeds: Vec<u64> = (0..n).map(|_| state.rng.random()).collect();
    let times = stratified_times(n, &mut state.rng);
    seeds.into_iter().zip(times).collect()
}

/// One update on clean features: span-mask, maybe drop the condition, then
/// regress the conditional field.
pub fn pretrain_step(state: &mut TrainState, batch: &[FeatureGrid]) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if state.config.mode != TrainMode::Pretrain {
        return Err(Error::Config("pretrain_step requires pretrain mode".into()));
    }
    let draws = item_draws(state, batch.len());
    let cfg = &state.config;
    let model = &state.model;
    let results: Vec<Result<ItemResult>> = batch
        .par_iter()
        .zip(draws)
        .map(|(x1, (seed, t))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = sample_mask(x1.frames(), cfg.mask.ratio, cfg.mask.min_span, &mut rng)?;
            let cond = apply_mask(x1, &mask)?;
            let cond = maybe_drop_condition(cond, cfg.mask.drop_prob, &mut rng)?;
            let weights: Option<Vec<bool>> = match cfg.loss_support {
                LossSupport::MaskedOnly if !cond.is_null => {
                    let l = x1.frames();
                    Some((0..x1.len()).map(|i| mask.frame_flags[i % l]).collect())
                }
                _ => None,
            };
            item_gradient(model, x1, &cond, weights.as_deref(), t, &cfg.flow, &mut rng)
        })
        .collect();
    reduce(state, results)
}

/// Condition and target features for one finetuning utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneExample {
    pub condition: FeatureGrid,
    pub target: FeatureGrid,
    /// Extraction examples keep their prompt and are never cropped.
    pub croppable: bool,
}

impl FinetuneExample {
    pub fn new(condition: FeatureGrid, target: FeatureGrid, croppable: bool) -> Result<Self> {
        if condition.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", target.shape()),
                actual: format!("condition {:?}", condition.shape()),
            });
        }
        Ok(Self {
            condition,
            target,
            croppable,
        })
    }

    pub fn from_audio(
        task: TaskKind,
        degraded: &AudioSignal,
        clean: &AudioSignal,
        reference: Option<&AudioSignal>,
        prompt: &TsePromptSpec,
        setup: &FeatureSetup,
    ) -> Result<Self> {
        if degraded.len() != clean.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} samples", clean.len()),
                actual: format!("degraded with {} samples", degraded.len()),
            });
        }
        let cond = build_condition(
            task,
            degraded,
            reference,
            prompt,
            &setup.stft,
            &setup.compression,
        )?;
        let target = build_target(
            task,
            clean,
            reference,
            prompt,
            &setup.stft,
            &setup.compression,
        )?;
        Self::new(
            cond.features,
            target,
            task != TaskKind::TargetSpeakerExtract,
        )
    }

    pub fn frames(&self) -> usize {
        self.target.frames()
    }

    pub fn crop(&self, start: usize, len: usize) -> FinetuneExample {
        FinetuneExample {
            condition: self.condition.crop_frames(start, len),
            target: self.target.crop_frames(start, len),
            croppable: self.croppable,
        }
    }
}

/// One update on (condition, target) pairs. The condition is always fed.
pub fn finetune_step(state: &mut TrainState, batch: &[FinetuneExample]) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if state.config.mode == TrainMode::Pretrain {
        return Err(Error::Config(
            "finetune_step requires finetune or scratch mode".into(),
        ));
    }
    for ex in batch {
        if ex.condition.shape() != ex.target.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", ex.target.shape()),
                actual: format!("condition {:?}", ex.condition.shape()),
            });
        }
    }
    let draws = item_draws(state, batch.len());
    let cfg = &state.config;
    let model = &state.model;
    let results: Vec<Result<ItemResult>> = batch
        .par_iter()
        .zip(draws)
        .map(|(ex, (seed, t))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cond = ConditionInput::new(ex.condition.clone());
            item_gradient(model, &ex.target, &cond, None, t, &cfg.flow, &mut rng)
        })
        .collect();
    reduce(state, results)
}

/// Draws batches of neighbouring-length utterances filling `batch_seconds`.
#[derive(Debug, Clone)]
pub struct DurationBatcher {
    order: Vec<usize>,
    lengths: Vec<usize>,
    frames_per_batch: usize,
    segment_frames: Option<usize>,
}

impl DurationBatcher {
    /// `lengths` in frames; `frame_seconds` is the hop duration.
    pub fn new(lengths: Vec<usize>, frame_seconds: f64, cfg: &TrainConfig) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::Empty("training set"));
        }
        if lengths.contains(&0) {
            return Err(invalid("training utterances must have at least one frame"));
        }
        let mut order: Vec<usize> = (0..lengths.len()).collect();
        order.sort_by_key(|&i| (lengths[i], i));
        let segment_frames = cfg
            .segment_seconds
            .map(|s| ((s / frame_seconds).round() as usize).max(1));
        Ok(Self {
            order,
            lengths,
            frames_per_batch: ((cfg.batch_seconds / frame_seconds).floor() as usize).max(1),
            segment_frames,
        })
    }

    pub fn segment_frames(&self) -> Option<usize> {
        self.segment_frames
    }

    fn effective(&self, i: usize) -> usize {
        match self.segment_frames {
            Some(s) => self.lengths[i].min(s),
            None => self.lengths[i],
        }
    }

    /// Indices of one batch: a random anchor in length order extended to
    /// its neighbours until the duration budget is used. Always nonempty.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let n = self.order.len();
        let anchor = rng.random_range(0..n);
        let mut picked = vec![self.order[anchor]];
        let mut used = self.effective(self.order[anchor]);
        let (mut lo, mut hi) = (anchor, anchor + 1);
        loop {
            let next = if hi < n {
                hi += 1;
                hi - 1
            } else if lo > 0 {
                lo -= 1;
                lo
            } else {
                break;
            };
            let idx = self.order[next];
            let len = self.effective(idx);
            if used + len > self.frames_per_batch {
                break;
            }
            used += len;
            picked.push(idx);
        }
        picked
    }

    /// Random start for a crop of at most `segment_frames`.
    pub fn crop_start<R: Rng + ?Sized>(&self, frames: usize, rng: &mut R) -> (usize, usize) {
        match self.segment_frames {
            Some(s) if frames > s => (rng.random_range(0..=frames - s), s),
            _ => (0, frames),
        }
    }
}

/// Training data for [`run_steps`].
#[derive(Debug, Clone)]
pub enum TrainingData {
    Pretrain(Vec<FeatureGrid>),
    Finetune(Vec<FinetuneExample>),
}

impl TrainingData {
    pub fn lengths(&self) -> Vec<usize> {
        match self {
            TrainingData::Pretrain(v) => v.iter().map(FeatureGrid::frames).collect(),
            TrainingData::Finetune(v) => v.iter().map(FinetuneExample::frames).collect(),
        }
    }
}

/// Samples a batch from the state's generator, crops it and takes one step.
pub fn train_step(
    state: &mut TrainState,
    data: &TrainingData,
    batcher: &DurationBatcher,
) -> Result<StepReport> {
    let picked = batcher.sample(&mut state.rng);
    match data {
        TrainingData::Pretrain(items) => {
            let batch: Vec<FeatureGrid> = picked
                .iter()
                .map(|&i| {
                    let (s, l) = batcher.crop_start(items[i].frames(), &mut state.rng);
                    items[i].crop_frames(s, l)
                })
                .collect();
            pretrain_step(state, &batch)
        }
        TrainingData::Finetune(items) => {
            let batch: Vec<FinetuneExample> = picked
                .iter()
                .map(|&i| {
                    let ex = &items[i];
                    if ex.croppable {
                        let (s, l) = batcher.crop_start(ex.frames(), &mut state.rng);
                        ex.crop(s, l)
                    } else {
                        ex.clone()
                    }
                })
                .collect();
            finetune_step(state, &batch)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

impl From<&StepReport> for LossRecord {
    fn from(r: &StepReport) -> Self {
        Self {
            step: r.step,
            lr: r.lr,
            loss: r.loss,
        }
    }
}

pub fn write_loss_record(out: &mut impl Write, record: &LossRecord) -> Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Runs `steps` updates (stopping early at `total_steps`), logging each.
pub fn run_steps(
    state: &mut TrainState,
    data: &TrainingData,
    batcher: &DurationBatcher,
    steps: u64,
    log: &mut impl Write,
) -> Result<Vec<StepReport>> {
    let mut reports = Vec::new();
    for _ in 0..steps {
        if state.step >= state.config.total_steps {
            break;
        }
        let report = train_step(state, data, batcher)?;
        write_loss_record(log, &LossRecord::from(&report))?;
        reports.push(report);
    }
    log.flush()?;
    Ok(reports)
}

const MAGIC: &[u8; 8] = b"SFLOWCKP";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SegmentInfo {
    name: String,
    offset: usize,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    adam_t: u64,
    rng_seed: [u8; 32],
    rng_stream: u64,
    /// Decimal string; JSON numbers cannot carry a u128 exactly.
    rng_word_pos: String,
    stats: LossStats,
    segments: Vec<SegmentInfo>,
    checksum: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn encode_f64s(values: &[f64], out: &mut Vec<u8>) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn decode_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

/// Binary container: magic, version, length-prefixed JSON header, then the
/// parameters and both Adam moments as little-endian f64.
pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let mut payload = Vec::new();
    encode_f64s(state.model.parameters(), &mut payload);
    encode_f64s(&state.optimizer.m, &mut payload);
    encode_f64s(&state.optimizer.v, &mut payload);
    let header = CheckpointHeader {
        model: *state.model.config(),
        train: state.config.clone(),
        step: state.step,
        adam_t: state.optimizer.t,
        rng_seed: state.rng.get_seed(),
        rng_stream: state.rng.get_stream(),
        rng_word_pos: state.rng.get_word_pos().to_string(),
        stats: state.stats,
        segments: state
            .model
            .segments()
            .into_iter()
            .map(|(name, offset, rows, cols)| SegmentInfo {
                name,
                offset,
                rows,
                cols,
            })
            .collect(),
        checksum: fnv1a(&payload),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let corrupt = |msg: &str| Error::CorruptCheckpoint(msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < header_len {
        return Err(corrupt("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
    let payload = &body[header_len..];
    let n = crate::vectorfield::parameter_count(&header.model);
    if payload.len() != 3 * n * 8 {
        return Err(corrupt(
            "payload length does not match the model configuration",
        ));
    }
    if fnv1a(payload) != header.checksum {
        return Err(corrupt("payload checksum mismatch"));
    }
    let model = VectorFieldModel::from_parameters(&header.model, decode_f64s(&payload[..n * 8]))?;
    let expected: Vec<(String, usize, usize, usize)> = model.segments();
    let stored: Vec<(String, usize, usize, usize)> = header
        .segments
        .into_iter()
        .map(|s| (s.name, s.offset, s.rows, s.cols))
        .collect();
    if expected != stored {
        return Err(Error::IncompatibleCheckpoint(
            "parameter segments differ".into(),
        ));
    }
    let mut optimizer = Adam::new(header.train.adam, n);
    optimizer.m = decode_f64s(&payload[n * 8..2 * n * 8]);
    optimizer.v = decode_f64s(&payload[2 * n * 8..]);
    optimizer.t = header.adam_t;
    let mut rng = ChaCha8Rng::from_seed(header.rng_seed);
    rng.set_stream(header.rng_stream);
    rng.set_word_pos(
        header
            .rng_word_pos
            .parse()
            .map_err(|_| corrupt("bad generator position"))?,
    );
    Ok(TrainState {
        config: header.train,
        step: header.step,
        model,
        optimizer,
        rng,
        stats: header.stats,
    })
}

/// Loads a checkpoint and checks it was written for `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    if state.model.config() != expected {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint model {:?} does not match configured {:?}",
            state.model.config(),
            expected
        )));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand_distr::StandardNormal;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            feature_channels: 6,
            time_embed_dim: 8,
            feedforward_dim: 16,
            learned_null: false,
        }
    }

    fn grids(n: usize, frames: usize, seed: u64) -> Vec<FeatureGrid> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                FeatureGrid::new(Array2::from_shape_fn((6, frames), |_| {
                    rng.sample(StandardNormal)
                }))
            })
            .collect()
    }

    fn small_cfg(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            peak_lr: 1e-3,
            final_lr: 1e-4,
            warmup_steps: 2,
            total_steps: 100,
            batch_seconds: 1.0,
            seed: 3,
            task: (mode != TrainMode::Pretrain).then_some(TaskKind::Denoise),
            mask: MaskConfig {
                min_span: 2,
                ..MaskConfig::default()
            },
            ..TrainConfig::pretrain()
        }
    }

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::pretrain();
        assert_eq!(lr_schedule(5_000, &cfg).unwrap(), 5e-5);
        assert!((lr_schedule(600_000, &cfg).unwrap() - 1e-5).abs() < 1e-20);
        assert!((lr_schedule(2_500, &cfg).unwrap() - 2.5e-5).abs() < 1e-20);
        assert_eq!(lr_schedule(0, &cfg).unwrap(), 0.0);
        assert!(lr_schedule(600_001, &cfg).is_err());
        let mut prev = f64::INFINITY;
        for s in (5_000..=600_000).step_by(997) {
            let lr = lr_schedule(s, &cfg).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
        let ft = TrainConfig::finetune(TaskKind::Denoise);
        assert_eq!(lr_schedule(5_000, &ft).unwrap(), 2e-5);
        assert!(lr_schedule(ft.total_steps, &ft).unwrap().abs() < 1e-20);
        assert_eq!(
            lr_schedule(5_000, &TrainConfig::scratch(TaskKind::Denoise)).unwrap(),
            1e-4
        );
    }

    #[test]
    fn config_invariants() {
        let mut cfg = TrainConfig::pretrain();
        cfg.final_lr = 1e-4;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::pretrain();
        cfg.warmup_steps = cfg.total_steps;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::finetune(TaskKind::Denoise);
        cfg.task = None;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::scratch(TaskKind::CodecRestore)
            .validate()
            .is_ok());
    }

    #[test]
    fn adam_solves_a_quadratic() {
        // f(x) = (x - 3)^2
        let mut x = vec![-4.0];
        let mut adam = Adam::new(AdamConfig::default(), 1);
        for k in 0..20_000 {
            let g = vec![2.0 * (x[0] - 3.0)];
            let lr = if k < 10_000 { 0.05 } else { 0.001 };
            adam.update(&mut x, &g, lr);
        }
        assert!((x[0] - 3.0).abs() < 1e-6, "{}", x[0]);
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut g = vec![0.3, 0.4];
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g, vec![0.3, 0.4]);
    }

    #[test]
    fn first_loss_is_mean_squared_target() {
        let mut state = TrainState::new(&tiny_model(), small_cfg(TrainMode::Pretrain)).unwrap();
        let batch = grids(3, 12, 1);
        let mut probe = state.rng.clone();
        let seeds: Vec<u64> = (0..3).map(|_| probe.random()).collect();
        let times = stratified_times(3, &mut probe);
        let mut expected = 0.0;
        for ((x1, seed), t) in batch.iter().zip(seeds).zip(times) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = sample_mask(12, 0.7, 2, &mut rng).unwrap();
            let cond = apply_mask(x1, &mask).unwrap();
            maybe_drop_condition(cond, 0.1, &mut rng).unwrap();
            let tuple =
                training_tuple_at(x1.as_slice(), t, &FlowPathConfig::default(), &mut rng).unwrap();
            expected += tuple.target.iter().map(|v| v * v).sum::<f64>() / tuple.target.len() as f64;
        }
        let report = pretrain_step(&mut state, &batch).unwrap();
        assert!((report.loss - expected / 3.0).abs() < 1e-12);
        assert_eq!(report.lr, 0.0);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn steps_are_deterministic_and_use_the_schedule() {
        let run = || {
            let mut state = TrainState::new(&tiny_model(), small_cfg(TrainMode::Pretrain)).unwrap();
            let batch = grids(2, 10, 2);
            (0..5)
                .map(|_| pretrain_step(&mut state, &batch).unwrap())
                .collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        let cfg = small_cfg(TrainMode::Pretrain);
        for r in &a {
            assert_eq!(r.lr, lr_schedule(r.step, &cfg).unwrap());
        }
    }

    #[test]
    fn mode_checks() {
        let mut pre = TrainState::new(&tiny_model(), small_cfg(TrainMode::Pretrain)).unwrap();
        let ex =
            FinetuneExample::new(grids(1, 5, 0).remove(0), grids(1, 5, 1).remove(0), true).unwrap();
        assert!(finetune_step(&mut pre, &[ex]).is_err());
        let mut ft = TrainState::new(&tiny_model(), small_cfg(TrainMode::Scratch)).unwrap();
        assert!(pretrain_step(&mut ft, &grids(1, 5, 0)).is_err());
        assert!(pretrain_step(&mut pre, &[]).is_err());
        assert!(
            FinetuneExample::new(grids(1, 5, 0).remove(0), grids(1, 6, 1).remove(0), true).is_err()
        );
    }

    #[test]
    fn finetune_never_drops_condition() {
        let mut cfg = small_cfg(TrainMode::Finetune);
        cfg.total_steps = 20_000;
        let mut state = TrainState::new(&tiny_model(), cfg).unwrap();
        let c = grids(2, 3, 4);
        let ex = FinetuneExample::new(c[0].clone(), c[1].clone(), true).unwrap();
        for _ in 0..10_000 {
            finetune_step(&mut state, std::slice::from_ref(&ex)).unwrap();
        }
        assert_eq!(state.stats.items, 10_000);
        assert_eq!(state.stats.null_conditions, 0);
    }

    #[test]
    fn pretraining_drops_some_conditions() {
        let mut state = TrainState::new(&tiny_model(), small_cfg(TrainMode::Pretrain)).unwrap();
        let batch = grids(10, 4, 5);
        for _ in 0..20 {
            pretrain_step(&mut state, &batch).unwrap();
        }
        let rate = state.stats.null_conditions as f64 / state.stats.items as f64;
        assert!(rate > 0.02 && rate < 0.25, "{rate}");
    }

    #[test]
    fn batcher_respects_budget() {
        let cfg = TrainConfig {
            batch_seconds: 2.0,
            segment_seconds: Some(0.5),
            ..small_cfg(TrainMode::Pretrain)
        };
        let lengths: Vec<usize> = (0..40).map(|i| 20 + 7 * i).collect();
        let b = DurationBatcher::new(lengths.clone(), 0.01, &cfg).unwrap();
        assert_eq!(b.segment_frames(), Some(50));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let picked = b.sample(&mut rng);
            assert!(!picked.is_empty());
            let used: usize = picked.iter().map(|&i| lengths[i].min(50)).sum();
            assert!(used <= 200 || picked.len() == 1);
            let mut sorted = picked.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), picked.len());
        }
        let (s, l) = b.crop_start(120, &mut rng);
        assert_eq!(l, 50);
        assert!(s + l <= 120);
        assert_eq!(b.crop_start(30, &mut rng), (0, 30));
        assert!(DurationBatcher::new(vec![], 0.01, &cfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let data = TrainingData::Pretrain(grids(6, 15, 6));
        let cfg = TrainConfig {
            batch_seconds: 0.3,
            ..small_cfg(TrainMode::Pretrain)
        };
        let batcher = DurationBatcher::new(data.lengths(), 0.008, &cfg).unwrap();
        let mut state = TrainState::new(&tiny_model(), cfg).unwrap();
        run_steps(&mut state, &data, &batcher, 3, &mut std::io::sink()).unwrap();
        save_checkpoint(&state, &path).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap();
        assert_eq!(resumed.model, state.model);

        let x = grids(2, 7, 9);
        let cond = ConditionInput::new(x[1].clone());
        assert_eq!(
            state.model.forward(&x[0], &cond, 0.4).unwrap(),
            resumed.model.forward(&x[0], &cond, 0.4).unwrap()
        );

        let a = run_steps(&mut state, &data, &batcher, 10, &mut std::io::sink()).unwrap();
        let b = run_steps(&mut resumed, &data, &batcher, 10, &mut std::io::sink()).unwrap();
        assert_eq!(a, b);
        assert_eq!(state.model, resumed.model);

        let other = ModelConfig {
            model_dim: 12,
            ..tiny_model()
        };
        assert!(matches!(
            load_checkpoint_for(&path, &other),
            Err(Error::IncompatibleCheckpoint(_))
        ));
        assert!(load_checkpoint_for(&path, &tiny_model()).is_ok());

        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CorruptCheckpoint(_))
        ));
        std::fs::write(&path, b"garbage").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn loss_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.jsonl");
        let mut f = File::create(&path).unwrap();
        let recs = [
            LossRecord {
                step: 0,
                lr: 0.0,
                loss: 1.5,
            },
            LossRecord {
                step: 1,
                lr: 1e-4,
                loss: 1.25,
            },
        ];
        for r in &recs {
            write_loss_record(&mut f, r).unwrap();
        }
        drop(f);
        assert_eq!(read_loss_log(&path).unwrap(), recs);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut state = TrainState::new(&tiny_model(), small_cfg(TrainMode::Scratch)).unwrap();
        let err = state
            .apply(vec![0.0; state.model.num_parameters()], f64::NAN)
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step: 0, .. }));
    }
}
