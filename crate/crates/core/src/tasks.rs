//! Task conditions and the degradations used to build training pairs.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::masking::ConditionInput;
use crate::spectral::{analyze, AudioSignal, CompressionParams, FeatureGrid, StftParams};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum TaskKind {
    Denoise,
    BandwidthExtend,
    CodecRestore,
    TargetSpeakerExtract,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Denoise,
        TaskKind::BandwidthExtend,
        TaskKind::CodecRestore,
        TaskKind::TargetSpeakerExtract,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Denoise => "denoise",
            TaskKind::BandwidthExtend => "bandwidth_extend",
            TaskKind::CodecRestore => "codec_restore",
            TaskKind::TargetSpeakerExtract => "target_speaker_extract",
        }
    }

    pub fn needs_reference(self) -> bool {
        self == TaskKind::TargetSpeakerExtract
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsePromptSpec {
    pub prompt_seconds: f64,
    pub sample_rate: u32,
}

impl Default for TsePromptSpec {
    fn default() -> Self {
        Self {
            prompt_seconds: 3.0,
            sample_rate: SAMPLE_RATE,
        }
    }
}

impl TsePromptSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.prompt_seconds >= 0.0 && self.prompt_seconds.is_finite()) {
            return Err(invalid(format!(
                "prompt_seconds must be non-negative, got {}",
                self.prompt_seconds
            )));
        }
        if self.sample_rate == 0 {
            return Err(invalid("prompt sample rate must be positive"));
        }
        Ok(())
    }

    pub fn prompt_samples(&self) -> usize {
        (self.prompt_seconds * self.sample_rate as f64).round() as usize
    }
}

/// First `prompt_seconds` of the reference; shorter references are
/// zero-padded so the prompt always has a fixed length.
pub fn tse_prompt(reference: &AudioSignal, spec: &TsePromptSpec) -> Result<AudioSignal> {
    spec.validate()?;
    if reference.sample_rate() != spec.sample_rate {
        return Err(Error::SampleRateMismatch(
            spec.sample_rate,
            reference.sample_rate(),
        ));
    }
    Ok(reference.segment(0, spec.prompt_samples()))
}

/// The waveform whose features form the condition: the degraded signal, or
/// for extraction the reference prompt followed by the mixture.
pub fn condition_audio(
    task: TaskKind,
    degraded: &AudioSignal,
    reference: Option<&AudioSignal>,
    spec: &TsePromptSpec,
) -> Result<AudioSignal> {
    match task {
        TaskKind::TargetSpeakerExtract => {
            let reference = reference.ok_or_else(|| Error::MissingField {
                field: "reference",
                task: task.to_string(),
            })?;
            if reference.sample_rate() != degraded.sample_rate() {
                return Err(Error::SampleRateMismatch(
                    degraded.sample_rate(),
                    reference.sample_rate(),
                ));
            }
            tse_prompt(reference, spec)?.concat(degraded)
        }
        _ => Ok(degraded.clone()),
    }
}

/// The waveform the model learns to generate for a given clean target.
pub fn target_audio(
    task: TaskKind,
    clean: &AudioSignal,
    reference: Option<&AudioSignal>,
    spec: &TsePromptSpec,
) -> Result<AudioSignal> {
    condition_audio(task, clean, reference, spec)
}

pub fn build_condition(
    task: TaskKind,
    degraded: &AudioSignal,
    reference: Option<&AudioSignal>,
    spec: &TsePromptSpec,
    params: &StftParams,
    cp: &CompressionParams,
) -> Result<ConditionInput> {
    let audio = condition_audio(task, degraded, reference, spec)?;
    Ok(ConditionInput::new(analyze(&audio, params, cp)?))
}

/// Features of [`target_audio`].
pub fn build_target(
    task: TaskKind,
    clean: &AudioSignal,
    reference: Option<&AudioSignal>,
    spec: &TsePromptSpec,
    params: &StftParams,
    cp: &CompressionParams,
) -> Result<FeatureGrid> {
    analyze(&target_audio(task, clean, reference, spec)?, params, cp)
}

/// Largest shortfall tolerated by [`trim_tse_output`]; one default hop.
pub const TSE_TRIM_SLACK: usize = 128;

/// Drops the prompt region and returns exactly `mixture_len` samples.
pub fn trim_tse_output(
    generated: &AudioSignal,
    spec: &TsePromptSpec,
    mixture_len: usize,
) -> Result<AudioSignal> {
    spec.validate()?;
    let start = spec.prompt_samples();
    let needed = start + mixture_len;
    if generated.len() + TSE_TRIM_SLACK < needed {
        return Err(invalid(format!(
            "generated output has {} samples, expected at least {needed}",
            generated.len()
        )));
    }
    Ok(generated.segment(start, mixture_len))
}

fn fit_length<R: Rng + ?Sized>(noise: &[f64], len: usize, rng: &mut R) -> Vec<f64> {
    if noise.len() >= len {
        let start = rng.random_range(0..=noise.len() - len);
        noise[start..start + len].to_vec()
    } else {
        noise.iter().copied().cycle().take(len).collect()
    }
}

/// `clean + g * noise` with `g` set for the requested SNR. Longer noise is
/// cropped at a random offset, shorter noise is looped.
pub fn mix_at_snr<R: Rng + ?Sized>(
    clean: &AudioSignal,
    noise: &AudioSignal,
    snr_db: f64,
    rng: &mut R,
) -> Result<AudioSignal> {
    if clean.sample_rate() != noise.sample_rate() {
        return Err(Error::SampleRateMismatch(
            clean.sample_rate(),
            noise.sample_rate(),
        ));
    }
    if !snr_db.is_finite() {
        return Err(invalid("snr_db must be finite"));
    }
    let clean_energy = clean.energy();
    if clean_energy <= 0.0 {
        return Err(invalid("clean signal has zero energy"));
    }
    if noise.is_empty() || noise.energy() <= 0.0 {
        return Err(invalid("noise signal has zero energy"));
    }
    let fitted = fit_length(noise.samples(), clean.len(), rng);
    let noise_energy: f64 = fitted.iter().map(|v| v * v).sum();
    if noise_energy <= 0.0 {
        return Err(invalid("noise segment has zero energy"));
    }
    let gain = (clean_energy / (noise_energy * 10f64.powf(snr_db / 10.0))).sqrt();
    let mixed = clean
        .samples()
        .iter()
        .zip(&fitted)
        .map(|(c, n)| c + gain * n)
        .collect();
    AudioSignal::new(mixed, clean.sample_rate())
}

/// Kaiser-windowed sinc lowpass, odd length, unit DC gain times `gain`.
fn kaiser_lowpass(cutoff: f64, transition: f64, atten_db: f64, gain: f64) -> Vec<f64> {
    // cutoff and transition as fractions of the sample rate
    let beta = if atten_db > 50.0 {
        0.1102 * (atten_db - 8.7)
    } else {
        0.5842 * (atten_db - 21.0).powf(0.4) + 0.07886 * (atten_db - 21.0)
    };
    let mut taps = ((atten_db - 7.95) / (14.36 * transition)).ceil() as usize;
    taps |= 1;
    let half = (taps / 2) as f64;
    let i0_beta = bessel_i0(beta);
    let mut h: Vec<f64> = (0..taps)
        .map(|n| {
            let m = n as f64 - half;
            let sinc = if m == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * m).sin() / (PI * m)
            };
            let r = m / half;
            sinc * bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0_beta
        })
        .collect();
    let dc: f64 = h.iter().sum();
    for v in &mut h {
        *v *= gain / dc;
    }
    h
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Zero-phase FIR with zero extension at both ends.
fn filter_centered(input: &[f64], h: &[f64]) -> Vec<f64> {
    let half = h.len() / 2;
    let n = input.len();
    (0..n)
        .map(|i| {
            let lo = (i + half + 1).saturating_sub(n);
            let hi = (i + half).min(h.len() - 1);
            (lo..=hi).map(|k| h[k] * input[i + half - k]).sum()
        })
        .collect()
}

const RESAMPLE_ATTEN_DB: f64 = 70.0;

/// Decimates by `factor` and resamples back to 16 kHz. The anti-alias and
/// interpolation filters are linear-phase with their -6 dB point at 0.9 of
/// the reduced Nyquist frequency and the stopband from the Nyquist up.
pub fn bandwidth_reduce(signal: &AudioSignal, factor: usize) -> Result<AudioSignal> {
    if ![1, 2, 4, 8].contains(&factor) {
        return Err(invalid(format!("unsupported down-scaling factor {factor}")));
    }
    if signal.sample_rate() != SAMPLE_RATE {
        return Err(Error::SampleRateMismatch(SAMPLE_RATE, signal.sample_rate()));
    }
    if factor == 1 || signal.is_empty() {
        return Ok(signal.clone());
    }
    let nyquist = 0.5 / factor as f64;
    let transition = 0.2 * nyquist;
    let anti_alias = kaiser_lowpass(0.9 * nyquist, transition, RESAMPLE_ATTEN_DB, 1.0);
    let filtered = filter_centered(signal.samples(), &anti_alias);
    let decimated: Vec<f64> = filtered.iter().step_by(factor).copied().collect();

    let interp = kaiser_lowpass(0.9 * nyquist, transition, RESAMPLE_ATTEN_DB, factor as f64);
    let n = signal.len();
    let half = interp.len() / 2;
    // polyphase evaluation of the zero-stuffed sequence
    let out = (0..n)
        .map(|i| {
            let mut acc = 0.0;
            let first = (i + half + 1).saturating_sub(decimated.len() * factor);
            let mut k = first + (i + half - first) % factor;
            while k < interp.len() && k <= i + half {
                acc += interp[k] * decimated[(i + half - k) / factor];
                k += factor;
            }
            acc
        })
        .collect();
    AudioSignal::new(out, SAMPLE_RATE)
}

const MU: f64 = 255.0;

/// Surrogate for low-bitrate coding: mu-law companding followed by uniform
/// quantisation to `bits` bits and expansion. Samples are clipped to [-1, 1].
pub fn codec_degrade(signal: &AudioSignal, bits: u32) -> Result<AudioSignal> {
    if !(2..=16).contains(&bits) {
        return Err(invalid(format!(
            "bits per sample must lie in [2, 16], got {bits}"
        )));
    }
    let levels = ((1u32 << (bits - 1)) - 1) as f64;
    let ln_mu = MU.ln_1p();
    let out = signal
        .samples()
        .iter()
        .map(|&x| {
            let x = x.clamp(-1.0, 1.0);
            let y = x.signum() * (MU * x.abs()).ln_1p() / ln_mu;
            let q = (y * levels).round() / levels;
            q.signum() * ((q.abs() * ln_mu).exp() - 1.0) / MU
        })
        .collect();
    AudioSignal::new(out, signal.sample_rate())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoSpeakerMix {
    pub mixture: AudioSignal,
    pub target: AudioSignal,
    /// `10 log10(E_target / E_interferer)` after scaling.
    pub gain_db: f64,
}

/// Crops both signals to the shorter length and adds `b` scaled so that the
/// target-to-interferer energy ratio is `gain_db`.
pub fn mix_two_speakers_at(
    a: &AudioSignal,
    b: &AudioSignal,
    gain_db: f64,
) -> Result<TwoSpeakerMix> {
    if a.sample_rate() != b.sample_rate() {
        return Err(Error::SampleRateMismatch(a.sample_rate(), b.sample_rate()));
    }
    let len = a.len().min(b.len());
    if len == 0 {
        return Err(Error::Empty("speaker signal"));
    }
    let target = a.segment(0, len);
    let interferer = b.segment(0, len);
    let (ea, eb) = (target.energy(), interferer.energy());
    let scale = if ea > 0.0 && eb > 0.0 {
        (ea / (eb * 10f64.powf(gain_db / 10.0))).sqrt()
    } else {
        1.0
    };
    let mixed = target
        .samples()
        .iter()
        .zip(interferer.samples())
        .map(|(x, y)| x + scale * y)
        .collect();
    Ok(TwoSpeakerMix {
        mixture: AudioSignal::new(mixed, a.sample_rate())?,
        target,
        gain_db,
    })
}

/// [`mix_two_speakers_at`] with the gain drawn uniformly from [-5, 5] dB.
pub fn mix_two_speakers<R: Rng + ?Sized>(
    a: &AudioSignal,
    b: &AudioSignal,
    rng: &mut R,
) -> Result<TwoSpeakerMix> {
    let gain_db = rng.random_range(-5.0..=5.0);
    mix_two_speakers_at(a, b, gain_db)
}
