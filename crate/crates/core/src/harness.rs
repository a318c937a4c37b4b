//! Run configuration, manifests, toy corpus synthesis, evaluation and the
//! command-line front end.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowpath::FlowPathConfig;
use crate::metrics::{lsd, si_sdr, si_sdr_improvement, MetricsReport, UtteranceScore};
use crate::sampler::{generate, FeatureSetup, GenerationRequest, SolverConfig};
use crate::spectral::{
    quantize_pcm16, read_wav, write_wav, AudioSignal, CompressionParams, StftParams,
};
use crate::tasks::{
    bandwidth_reduce, codec_degrade, mix_two_speakers, TaskKind, TsePromptSpec, SAMPLE_RATE,
};
use crate::training::{
    load_checkpoint, load_checkpoint_for, run_steps, save_checkpoint, DurationBatcher,
    FinetuneExample, TrainConfig, TrainMode, TrainState, TrainingData,
};
use crate::vectorfield::{ModelConfig, VectorFieldModel};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct IoConfig {
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

/// Every tunable in one place; loaded from TOML with the standard defaults for
/// anything left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub stft: StftParams,
    pub compression: CompressionParams,
    pub flow: FlowPathConfig,
    pub model: ModelConfig,
    pub solver: SolverConfig,
    pub train: TrainConfig,
    pub tse: TsePromptSpec,
    pub io: IoConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.compression.validate()?;
        self.flow.validate()?;
        self.model.validate()?;
        self.solver.validate()?;
        self.train.validate()?;
        self.tse.validate()?;
        if self.model.feature_channels != self.stft.feature_channels() {
            return Err(Error::Config(format!(
                "model.feature_channels = {} but the STFT yields {} channels",
                self.model.feature_channels,
                self.stft.feature_channels()
            )));
        }
        if self.train.flow != self.flow {
            return Err(Error::Config("train.flow and flow disagree".into()));
        }
        Ok(())
    }

    pub fn setup(&self) -> FeatureSetup {
        FeatureSetup {
            stft: self.stft,
            compression: self.compression,
        }
    }

    /// Parses TOML and returns the config plus the dotted keys it set.
    pub fn from_toml_str(text: &str) -> Result<(Self, Vec<String>)> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut keys = Vec::new();
        flatten_keys("", &table, &mut keys);
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        // keep the two flow-path views in step when only one was given
        if !keys.iter().any(|k| k.starts_with("train.flow.")) {
            cfg.train.flow = cfg.flow;
        } else if !keys.iter().any(|k| k.starts_with("flow.")) {
            cfg.flow = cfg.train.flow;
        }
        Ok((cfg, keys))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Vec<String>)> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn flatten_keys(prefix: &str, table: &toml::Table, out: &mut Vec<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten_keys(&key, t, out),
            other => out.push(format!("{key} = {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub clean_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degraded_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_path: Option<PathBuf>,
    pub task: TaskKind,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl ManifestRecord {
    fn validate(&self, base: &Path) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.degraded_path.is_none() {
            return Err(format!(
                "missing field `degraded_path` for task {}",
                self.task
            ));
        }
        if self.task.needs_reference() && self.reference_path.is_none() {
            return Err(format!(
                "missing field `reference_path` for task {}",
                self.task
            ));
        }
        for p in [
            Some(&self.clean_path),
            self.degraded_path.as_ref(),
            self.reference_path.as_ref(),
        ]
        .into_iter()
        .flatten()
        {
            let full = base.join(p);
            if !full.is_file() {
                return Err(format!("file not found: {}", full.display()));
            }
        }
        Ok(())
    }

    /// Paths in a manifest are relative to the manifest's directory.
    pub fn resolve(&self, base: &Path) -> ManifestRecord {
        ManifestRecord {
            clean_path: base.join(&self.clean_path),
            degraded_path: self.degraded_path.as_ref().map(|p| base.join(p)),
            reference_path: self.reference_path.as_ref().map(|p| base.join(p)),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ManifestLoad {
    pub records: Vec<ManifestRecord>,
    /// Line-numbered problems and warnings from a lenient load.
    pub issues: Vec<String>,
}

fn manifest_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Reads a JSON-lines manifest. In strict mode the first bad record is an
/// error; otherwise bad records are skipped and listed in `issues`. Returned
/// records have their paths resolved against the manifest directory.
pub fn load_manifest_with(path: impl AsRef<Path>, strict: bool) -> Result<ManifestLoad> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = manifest_base(path);
    let mut out = ManifestLoad::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<ManifestRecord>(line)
            .map_err(|e| e.to_string())
            .and_then(|r| r.validate(&base).map(|_| r));
        match parsed {
            Ok(r) => out.records.push(r.resolve(&base)),
            Err(reason) if strict => {
                return Err(Error::Manifest {
                    line: line_no,
                    reason,
                })
            }
            Err(reason) => out.issues.push(format!("line {line_no}: {reason}")),
        }
    }
    if out.records.is_empty() && out.issues.is_empty() {
        out.issues
            .push(format!("warning: manifest {} is empty", path.display()));
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    Ok(load_manifest_with(path, true)?.records)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Timbre of a toy "speaker".
#[derive(Debug, Clone, PartialEq)]
pub struct ToyVoice {
    pub f0: f64,
    pub harmonic_amps: Vec<f64>,
    pub vibrato_rate: f64,
    pub vibrato_depth: f64,
}

impl ToyVoice {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let n = rng.random_range(3..=6);
        Self {
            f0: rng.random_range(80.0..=300.0),
            harmonic_amps: (1..=n)
                .map(|k| rng.random_range(0.5..1.0) / k as f64)
                .collect(),
            vibrato_rate: rng.random_range(3.0..7.0),
            vibrato_depth: rng.random_range(0.005..0.03),
        }
    }
}

fn one_pole_noise<R: Rng + ?Sized>(len: usize, pole: f64, rng: &mut R) -> Vec<f64> {
    let mut y = 0.0;
    (0..len)
        .map(|_| {
            let x: f64 = rng.sample(StandardNormal);
            y = pole * y + (1.0 - pole) * x;
            y
        })
        .collect()
}

/// The toy noise floor occupies `0..8/FLOOR_BAND_FACTOR` kHz, the band the
/// harmonics can reach (6 x 300 Hz). A full-band floor would dominate the
/// compressed-feature loss with bins the condition says nothing about.
const FLOOR_BAND_FACTOR: usize = 4;

/// Harmonic clip with vibrato, syllable-rate amplitude modulation and a
/// band-limited noise floor 30 dB below the harmonic part.
pub fn render_toy_clip<R: Rng + ?Sized>(
    voice: &ToyVoice,
    seconds: f64,
    rng: &mut R,
) -> AudioSignal {
    let sr = SAMPLE_RATE as f64;
    let len = (seconds * sr).round() as usize;
    let phases: Vec<f64> = voice
        .harmonic_amps
        .iter()
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();
    let am_rate = rng.random_range(2.0..6.0);
    let am_phase = rng.random_range(0.0..2.0 * PI);
    let vib_phase = rng.random_range(0.0..2.0 * PI);
    let fade = (0.02 * sr) as usize;
    let mut phase = 0.0;
    let mut harmonic = Vec::with_capacity(len);
    for n in 0..len {
        let t = n as f64 / sr;
        let f = voice.f0
            * (1.0 + voice.vibrato_depth * (2.0 * PI * voice.vibrato_rate * t + vib_phase).sin());
        phase += 2.0 * PI * f / sr;
        let mut s = 0.0;
        for (k, (a, p)) in voice.harmonic_amps.iter().zip(&phases).enumerate() {
            let h = (k + 1) as f64;
            if h * f < 0.45 * sr {
                s += a * (h * phase + p).sin();
            }
        }
        let env = 0.55 + 0.45 * (2.0 * PI * am_rate * t + am_phase).sin();
        let edge = (n.min(len - 1 - n) as f64 / fade as f64).min(1.0);
        harmonic.push(s * env * edge);
    }
    let e_h: f64 = harmonic.iter().map(|v| v * v).sum();
    let white: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let white = AudioSignal::new(white, SAMPLE_RATE).expect("finite noise");
    let floor = bandwidth_reduce(&white, FLOOR_BAND_FACTOR)
        .expect("valid band factor")
        .into_samples();
    let e_f: f64 = floor.iter().map(|v| v * v).sum::<f64>().max(1e-300);
    let g = (e_h / e_f * 10f64.powf(-30.0 / 10.0)).sqrt();
    let mut samples: Vec<f64> = harmonic
        .iter()
        .zip(&floor)
        .map(|(h, f)| h + g * f)
        .collect();
    let peak = samples
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let target = rng.random_range(0.3..0.7);
    for s in &mut samples {
        *s *= target / peak;
    }
    AudioSignal::new(samples, SAMPLE_RATE).expect("finite toy clip")
}

/// One synthesised training/evaluation example, already 16-bit quantised.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthItem {
    pub id: String,
    pub task: TaskKind,
    pub clean: AudioSignal,
    pub degraded: AudioSignal,
    pub reference: Option<AudioSignal>,
    pub params: BTreeMap<String, f64>,
}

fn residual_snr_db(clean: &AudioSignal, degraded: &AudioSignal) -> f64 {
    let noise: f64 = clean
        .samples()
        .iter()
        .zip(degraded.samples())
        .map(|(c, d)| (d - c) * (d - c))
        .sum();
    10.0 * (clean.energy() / noise).log10()
}

/// Rescales both signals together when the louder one would clip.
fn joint_headroom(a: AudioSignal, b: AudioSignal) -> (AudioSignal, AudioSignal) {
    let peak = a
        .samples()
        .iter()
        .chain(b.samples())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.99 {
        let g = 0.99 / peak;
        (a.scaled(g), b.scaled(g))
    } else {
        (a, b)
    }
}

pub fn synth_item(task: TaskKind, index: usize, seed: u64) -> Result<SynthItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = format!("{}_{index:05}", task.as_str());
    let voice = ToyVoice::random(&mut rng);
    let clean = render_toy_clip(&voice, rng.random_range(1.0..=3.0), &mut rng);
    let mut params = BTreeMap::new();
    let (clean, degraded, reference) = match task {
        TaskKind::Denoise => {
            let snr = rng.random_range(0.0..=10.0);
            let pole = rng.random_range(0.0..0.9);
            let noise = one_pole_noise(clean.len(), pole, &mut rng);
            let e_n: f64 = noise.iter().map(|v| v * v).sum();
            let g = (clean.energy() / (e_n * 10f64.powf(snr / 10.0))).sqrt();
            let mixed: Vec<f64> = clean
                .samples()
                .iter()
                .zip(&noise)
                .map(|(c, n)| c + g * n)
                .collect();
            let (c, d) = joint_headroom(clean, AudioSignal::new(mixed, SAMPLE_RATE)?);
            let (c, d) = (quantize_pcm16(&c), quantize_pcm16(&d));
            params.insert("requested_snr_db".into(), snr);
            params.insert("noise_pole".into(), pole);
            params.insert("snr_db".into(), residual_snr_db(&c, &d));
            (c, d, None)
        }
        TaskKind::BandwidthExtend => {
            let factor = [2usize, 4, 8][rng.random_range(0..3)];
            let d = bandwidth_reduce(&clean, factor)?;
            let (c, d) = joint_headroom(clean, d);
            params.insert("factor".into(), factor as f64);
            (quantize_pcm16(&c), quantize_pcm16(&d), None)
        }
        TaskKind::CodecRestore => {
            let bits = rng.random_range(4..=8u32);
            let d = codec_degrade(&clean, bits)?;
            params.insert("bits".into(), bits as f64);
            (quantize_pcm16(&clean), quantize_pcm16(&d), None)
        }
        TaskKind::TargetSpeakerExtract => {
            let other = ToyVoice::random(&mut rng);
            let interferer = render_toy_clip(&other, rng.random_range(1.0..=3.0), &mut rng);
            let reference = render_toy_clip(&voice, rng.random_range(3.0..=4.0), &mut rng);
            let mix = mix_two_speakers(&clean, &interferer, &mut rng)?;
            params.insert("gain_db".into(), mix.gain_db);
            let (c, d) = joint_headroom(mix.target, mix.mixture);
            (
                quantize_pcm16(&c),
                quantize_pcm16(&d),
                Some(quantize_pcm16(&reference)),
            )
        }
    };
    Ok(SynthItem {
        id,
        task,
        clean,
        degraded,
        reference,
        params,
    })
}

/// Items `0..count` with per-item seeds drawn from `seed`.
pub fn synth_items(task: TaskKind, count: usize, seed: u64) -> Result<Vec<SynthItem>> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..count).map(|_| master.random()).collect();
    seeds
        .into_par_iter()
        .enumerate()
        .map(|(i, s)| synth_item(task, i, s))
        .collect()
}

/// Writes clean/degraded(/reference) WAVs and `manifest.jsonl` into `out_dir`.
pub fn synth_toy_corpus(
    task: TaskKind,
    count: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let items = synth_items(task, count, seed)?;
    let records = items
        .par_iter()
        .map(|item| {
            let clean = PathBuf::from(format!("{}_clean.wav", item.id));
            let degraded = PathBuf::from(format!("{}_degraded.wav", item.id));
            write_wav(out_dir.join(&clean), &item.clean)?;
            write_wav(out_dir.join(&degraded), &item.degraded)?;
            let reference = match &item.reference {
                Some(r) => {
                    let p = PathBuf::from(format!("{}_reference.wav", item.id));
                    write_wav(out_dir.join(&p), r)?;
                    Some(p)
                }
                None => None,
            };
            Ok(ManifestRecord {
                id: item.id.clone(),
                clean_path: clean,
                degraded_path: Some(degraded),
                reference_path: reference,
                task,
                params: item.params.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

/// Audio for one resolved manifest record.
#[derive(Debug, Clone)]
pub struct LoadedRecord {
    pub record: ManifestRecord,
    pub clean: AudioSignal,
    pub degraded: AudioSignal,
    pub reference: Option<AudioSignal>,
}

pub fn load_record_audio(record: &ManifestRecord) -> Result<LoadedRecord> {
    let clean = read_wav(&record.clean_path)?;
    let degraded_path = record
        .degraded_path
        .as_ref()
        .ok_or_else(|| Error::MissingField {
            field: "degraded_path",
            task: record.task.to_string(),
        })?;
    let degraded = read_wav(degraded_path)?;
    let reference = record.reference_path.as_ref().map(read_wav).transpose()?;
    Ok(LoadedRecord {
        record: record.clone(),
        clean,
        degraded,
        reference,
    })
}

/// Scores estimates against the clean references. `degraded` is the
/// unprocessed input (the mixture for extraction).
pub fn score_utterance(
    id: &str,
    estimate: &AudioSignal,
    degraded: &AudioSignal,
    clean: &AudioSignal,
    stft: &StftParams,
) -> Result<UtteranceScore> {
    Ok(UtteranceScore {
        id: id.to_string(),
        si_sdr: si_sdr(estimate, clean)?,
        si_sdr_improvement: si_sdr_improvement(estimate, degraded, clean)?,
        lsd: lsd(estimate, clean, stft)?,
    })
}

/// Where the estimates for `evaluate` come from.
pub enum EstimateSource<'a> {
    /// `<dir>/<id>.wav`
    Directory(&'a Path),
    Model(&'a VectorFieldModel),
}

/// Runs (or reads) an estimate for each record and aggregates the scores.
/// Generation seeds are drawn per record from `seed` in manifest order.
pub fn evaluate_records(
    records: &[LoadedRecord],
    source: &EstimateSource,
    cfg: &RunConfig,
    seed: u64,
) -> Result<MetricsReport> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = records.iter().map(|_| master.random()).collect();
    let setup = cfg.setup();
    let scores = records
        .par_iter()
        .zip(seeds)
        .map(|(r, s)| {
            let estimate = match source {
                EstimateSource::Directory(dir) => {
                    read_wav(dir.join(format!("{}.wav", r.record.id)))?
                }
                EstimateSource::Model(model) => {
                    let req = GenerationRequest {
                        task: r.record.task,
                        audio: r.degraded.clone(),
                        reference: r.reference.clone(),
                        prompt: cfg.tse,
                    };
                    generate(
                        model,
                        &req,
                        &setup,
                        &cfg.solver,
                        &mut ChaCha8Rng::seed_from_u64(s),
                    )?
                }
            };
            score_utterance(&r.record.id, &estimate, &r.degraded, &r.clean, &cfg.stft)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_scores(scores)
}

/// Finetuning examples for a task from loaded audio.
pub fn finetune_examples(
    records: &[LoadedRecord],
    task: TaskKind,
    cfg: &RunConfig,
) -> Result<Vec<FinetuneExample>> {
    let setup = cfg.setup();
    records
        .par_iter()
        .map(|r| {
            FinetuneExample::from_audio(
                task,
                &r.degraded,
                &r.clean,
                r.reference.as_ref(),
                &cfg.tse,
                &setup,
            )
        })
        .collect()
}

#[derive(Debug, Parser)]
#[command(
    name = "stftflow",
    version,
    about = "Flow-matching speech restoration on compressed STFT features"
)]
pub struct Cli {
    /// Seed for every random choice in the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML run configuration; unspecified keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training manifest (overrides io.manifest).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Where to write the final checkpoint (overrides io.checkpoint).
    #[arg(long)]
    pub checkpoint_out: Option<PathBuf>,
    /// Resume from this checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Number of updates to run in this invocation (default: up to total_steps).
    #[arg(long)]
    pub steps: Option<u64>,
    /// Line-delimited loss log (overrides io.loss_log).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Masked-condition pretraining on clean audio.
    Pretrain(TrainArgs),
    /// Task finetuning; without --init the model trains from scratch.
    Finetune {
        #[arg(long, value_enum)]
        task: TaskKind,
        /// Pretrained checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Restore a single degraded recording.
    Enhance {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "denoise")]
        task: TaskKind,
    },
    /// Extract the reference speaker from a mixture.
    Extract {
        #[arg(long)]
        mixture: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score estimates against a manifest.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of `<id>.wav` estimates.
        #[arg(long, conflicts_with = "checkpoint")]
        estimates: Option<PathBuf>,
        /// Generate estimates with this model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write per-utterance records and the summary here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Synthesise a toy corpus with a manifest.
    SynthData {
        #[arg(long, value_enum)]
        task: TaskKind,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load_run_config(cli: &Cli, out: &mut impl Write) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let (cfg, keys) = RunConfig::load(path)?;
            writeln!(out, "config: {}", path.display())?;
            for k in keys {
                writeln!(out, "  override {k}")?;
            }
            cfg
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        writeln!(out, "  override seed = {seed}")?;
    }
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

fn require<T: Clone>(value: Option<&T>, what: &str) -> Result<T> {
    value
        .cloned()
        .ok_or_else(|| Error::Config(format!("{what} is required (flag or config)")))
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<VectorFieldModel> {
    let state = load_checkpoint(path)?;
    if state.model.config().feature_channels != cfg.stft.feature_channels() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint expects {} feature channels, STFT settings give {}",
            state.model.config().feature_channels,
            cfg.stft.feature_channels()
        )));
    }
    Ok(state.model)
}

fn train_command(
    cfg: &RunConfig,
    args: &TrainArgs,
    task: Option<TaskKind>,
    init: Option<&PathBuf>,
    out: &mut impl Write,
) -> Result<()> {
    let manifest = require(
        args.manifest.as_ref().or(cfg.io.manifest.as_ref()),
        "--manifest",
    )?;
    let ckpt_out = require(
        args.checkpoint_out.as_ref().or(cfg.io.checkpoint.as_ref()),
        "--checkpoint-out",
    )?;
    let records: Vec<LoadedRecord> = load_manifest(&manifest)?
        .iter()
        .map(load_record_audio)
        .collect::<Result<_>>()?;
    if records.is_empty() {
        return Err(Error::Empty("training manifest"));
    }
    let setup = cfg.setup();

    let mut train_cfg = cfg.train.clone();
    match task {
        None => train_cfg.mode = TrainMode::Pretrain,
        Some(t) => {
            train_cfg.task = Some(t);
            train_cfg.mode = if init.is_some() {
                TrainMode::Finetune
            } else {
                TrainMode::Scratch
            };
        }
    }
    let mut state = match (&args.resume, init) {
        (Some(path), _) => {
            let mut s = load_checkpoint_for(path, &cfg.model)?;
            s.config.total_steps = train_cfg.total_steps;
            s
        }
        (None, Some(path)) => {
            TrainState::from_model(load_checkpoint_for(path, &cfg.model)?.model, train_cfg)?
        }
        (None, None) => TrainState::new(&cfg.model, train_cfg)?,
    };
    let data = match task {
        None => TrainingData::Pretrain(
            records
                .par_iter()
                .map(|r| crate::spectral::analyze(&r.clean, &setup.stft, &setup.compression))
                .collect::<Result<_>>()?,
        ),
        Some(t) => TrainingData::Finetune(finetune_examples(&records, t, cfg)?),
    };
    let frame_seconds = cfg.stft.hop_size as f64 / SAMPLE_RATE as f64;
    let batcher = DurationBatcher::new(data.lengths(), frame_seconds, &state.config)?;
    let steps = args
        .steps
        .unwrap_or(state.config.total_steps.saturating_sub(state.step));
    let log_path = args.log.as_ref().or(cfg.io.loss_log.as_ref());
    writeln!(
        out,
        "training {} utterances, {} parameters, mode {:?}, steps {}..{}",
        records.len(),
        state.model.num_parameters(),
        state.config.mode,
        state.step,
        (state.step + steps).min(state.config.total_steps)
    )?;
    let reports = match log_path {
        Some(p) => {
            let file = fs::OpenOptions::new()
                .create(true)
                .append(args.resume.is_some())
                .write(true)
                .truncate(args.resume.is_none())
                .open(p)?;
            run_steps(
                &mut state,
                &data,
                &batcher,
                steps,
                &mut BufWriter::new(file),
            )?
        }
        None => run_steps(&mut state, &data, &batcher, steps, &mut std::io::sink())?,
    };
    if let Some(last) = reports.last() {
        writeln!(
            out,
            "step {} lr {:.3e} loss {:.6}",
            last.step, last.lr, last.loss
        )?;
    }
    save_checkpoint(&state, &ckpt_out)?;
    writeln!(out, "checkpoint written to {}", ckpt_out.display())?;
    Ok(())
}

fn run(cli: Cli, out: &mut impl Write) -> Result<()> {
    let cfg = load_run_config(&cli, out)?;
    cfg.validate()?;
    match &cli.command {
        Command::Pretrain(args) => train_command(&cfg, args, None, None, out),
        Command::Finetune { task, init, train } => {
            train_command(&cfg, train, Some(*task), init.as_ref(), out)
        }
        Command::Enhance {
            input,
            out: dest,
            checkpoint,
            task,
        } => {
            if *task == TaskKind::TargetSpeakerExtract {
                return Err(Error::Config(
                    "use `extract` for target speaker extraction".into(),
                ));
            }
            let ckpt = require(
                checkpoint.as_ref().or(cfg.io.checkpoint.as_ref()),
                "--checkpoint",
            )?;
            let model = load_model(&ckpt, &cfg)?;
            let audio = read_wav(input)?;
            let req = GenerationRequest {
                task: *task,
                audio,
                reference: None,
                prompt: cfg.tse,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let est = generate(&model, &req, &cfg.setup(), &cfg.solver, &mut rng)?;
            write_wav(dest, &est)?;
            writeln!(out, "wrote {} ({} samples)", dest.display(), est.len())?;
            Ok(())
        }
        Command::Extract {
            mixture,
            reference,
            out: dest,
            checkpoint,
        } => {
            let ckpt = require(
                checkpoint.as_ref().or(cfg.io.checkpoint.as_ref()),
                "--checkpoint",
            )?;
            let model = load_model(&ckpt, &cfg)?;
            let req = GenerationRequest {
                task: TaskKind::TargetSpeakerExtract,
                audio: read_wav(mixture)?,
                reference: Some(read_wav(reference)?),
                prompt: cfg.tse,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let est = generate(&model, &req, &cfg.setup(), &cfg.solver, &mut rng)?;
            write_wav(dest, &est)?;
            writeln!(out, "wrote {} ({} samples)", dest.display(), est.len())?;
            Ok(())
        }
        Command::Evaluate {
            manifest,
            estimates,
            checkpoint,
            report,
        } => {
            let loaded = load_manifest_with(manifest, true)?;
            for issue in &loaded.issues {
                writeln!(out, "{issue}")?;
            }
            let records: Vec<LoadedRecord> = loaded
                .records
                .iter()
                .map(load_record_audio)
                .collect::<Result<_>>()?;
            let model;
            let source = match (
                estimates,
                checkpoint.as_ref().or(cfg.io.checkpoint.as_ref()),
            ) {
                (Some(dir), _) => EstimateSource::Directory(dir),
                (None, Some(ckpt)) => {
                    model = load_model(ckpt, &cfg)?;
                    EstimateSource::Model(&model)
                }
                (None, None) => {
                    return Err(Error::Config(
                        "evaluate needs --estimates or --checkpoint".into(),
                    ))
                }
            };
            let result = evaluate_records(&records, &source, &cfg, cfg.seed)?;
            if let Some(path) = report {
                fs::write(path, result.to_jsonl()?)?;
            }
            write!(out, "{}", result.summary_table())?;
            Ok(())
        }
        Command::SynthData {
            task,
            count,
            out_dir,
        } => {
            let manifest = synth_toy_corpus(*task, *count, cfg.seed, out_dir)?;
            writeln!(out, "wrote {count} items and {}", manifest.display())?;
            Ok(())
        }
    }
}

/// Parses `argv`, runs the command and returns the process exit status.
/// Output goes to `out`; diagnostics and usage go to `err`.
pub fn cli_dispatch<I, T>(argv: I, out: &mut impl Write, err: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                let _ = write!(out, "{e}");
            } else {
                let _ = write!(err, "{e}");
            }
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}
