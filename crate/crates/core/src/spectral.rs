//! Short-time Fourier analysis/synthesis, power-law magnitude compression and
//! the packing between complex spectrograms and the real feature grid that the
//! flow operates on.
//!
//! Framing convention: frames are centred on multiples of the hop, the signal
//! is reflect-padded by `window_size / 2` on both sides, and a signal of `n`
//! samples yields `1 + n / hop_size` frames (integer division). Synthesis is
//! weighted overlap-add normalised by the per-sample sum of squared windows, so
//! `istft(stft(x), x.len())` reproduces `x` up to float rounding for any hop
//! that keeps that sum away from zero.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Mono waveform with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(invalid("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("audio samples"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    /// Copy of `[start, start + len)`, zero-filled past the end.
    pub fn segment(&self, start: usize, len: usize) -> AudioSignal {
        let samples = (start..start + len)
            .map(|i| self.samples.get(i).copied().unwrap_or(0.0))
            .collect();
        AudioSignal {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    pub fn concat(&self, other: &AudioSignal) -> Result<AudioSignal> {
        if self.sample_rate != other.sample_rate {
            return Err(Error::SampleRateMismatch(
                self.sample_rate,
                other.sample_rate,
            ));
        }
        let mut samples = self.samples.clone();
        samples.extend_from_slice(&other.samples);
        Ok(AudioSignal {
            samples,
            sample_rate: self.sample_rate,
        })
    }

    pub fn scaled(&self, gain: f64) -> AudioSignal {
        AudioSignal {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Hann,
}

impl WindowKind {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StftParams {
    pub window_size: usize,
    pub hop_size: usize,
    pub window: WindowKind,
}

impl Default for StftParams {
    fn default() -> Self {
        Self {
            window_size: 510,
            hop_size: 128,
            window: WindowKind::Hann,
        }
    }
}

impl StftParams {
    pub fn new(window_size: usize, hop_size: usize, window: WindowKind) -> Result<Self> {
        let params = Self {
            window_size,
            hop_size,
            window,
        };
        params.validate()?;
        Ok(params)
    }

    /// Checks `0 < hop <= window` and that overlapping squared windows never
    /// sum to zero (otherwise overlap-add cannot invert the analysis).
    pub fn validate(&self) -> Result<()> {
        if self.window_size < 2 {
            return Err(Error::Stft(format!(
                "window size {} is too small",
                self.window_size
            )));
        }
        if self.hop_size == 0 || self.hop_size > self.window_size {
            return Err(Error::Stft(format!(
                "hop size {} must be in 1..={}",
                self.hop_size, self.window_size
            )));
        }
        let w = self.window.coefficients(self.window_size);
        let peak = w.iter().fold(0.0f64, |m, v| m.max(v * v));
        let min_sum = (0..self.hop_size)
            .map(|offset| {
                w.iter()
                    .skip(offset)
                    .step_by(self.hop_size)
                    .map(|v| v * v)
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        if min_sum < 1e-8 * peak {
            return Err(Error::Stft(format!(
                "window {} / hop {} violates the overlap-add condition (min weight {min_sum:e})",
                self.window_size, self.hop_size
            )));
        }
        Ok(())
    }

    /// One-sided spectrum size, `window_size / 2 + 1`.
    pub fn num_bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    pub fn feature_channels(&self) -> usize {
        2 * self.num_bins()
    }

    pub fn padding(&self) -> usize {
        self.window_size / 2
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        1 + num_samples / self.hop_size
    }

    /// Longest waveform that `frames` frames can resynthesise.
    pub fn max_length(&self, frames: usize) -> usize {
        if frames == 0 {
            return 0;
        }
        (frames - 1) * self.hop_size + self.window_size - self.padding()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    /// `[bins, frames]`.
    pub bins: Array2<Complex64>,
    pub params: StftParams,
}

impl ComplexSpectrogram {
    pub fn num_bins(&self) -> usize {
        self.bins.nrows()
    }

    pub fn num_frames(&self) -> usize {
        self.bins.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.bins
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressionParams {
    pub a: f64,
    pub b: f64,
}

impl Default for CompressionParams {
    fn default() -> Self {
        Self { a: 0.5, b: 0.33 }
    }
}

impl CompressionParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        let cp = Self { a, b };
        cp.validate()?;
        Ok(cp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.b > 0.0 && self.a.is_finite() && self.b.is_finite()) {
            return Err(invalid(format!(
                "compression parameters must be positive (a = {}, b = {})",
                self.a, self.b
            )));
        }
        Ok(())
    }

    pub fn compress_value(&self, z: Complex64) -> Complex64 {
        let mag = z.norm_sqr().sqrt();
        if mag == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        z * (self.b * mag.powf(self.a) / mag)
    }

    pub fn decompress_value(&self, c: Complex64) -> Complex64 {
        let mag = c.norm_sqr().sqrt();
        if mag == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        c * ((mag / self.b).powf(1.0 / self.a) / mag)
    }
}

/// Channel order of a [`FeatureGrid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelLayout {
    /// Channels `0..bins` hold real parts, `bins..2*bins` imaginary parts.
    RealThenImag,
}

/// Real-valued `[channels, frames]` grid; a point in the flow's state space.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub values: Array2<f64>,
    pub layout: ChannelLayout,
}

impl FeatureGrid {
    pub fn new(values: Array2<f64>) -> Self {
        Self {
            values: values.as_standard_layout().into_owned(),
            layout: ChannelLayout::RealThenImag,
        }
    }

    pub fn zeros(channels: usize, frames: usize) -> Self {
        Self::new(Array2::zeros((channels, frames)))
    }

    pub fn from_flat(channels: usize, frames: usize, data: Vec<f64>) -> Result<Self> {
        let values =
            Array2::from_shape_vec((channels, frames), data).map_err(|_| Error::ShapeMismatch {
                expected: format!("{channels}x{frames}"),
                actual: "flat buffer of a different length".into(),
            })?;
        Ok(Self::new(values))
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.channels(), self.frames())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values
            .as_slice()
            .expect("feature grids are kept in standard layout")
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.values
            .as_slice_mut()
            .expect("feature grids are kept in standard layout")
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Frames `[start, start + len)`.
    pub fn crop_frames(&self, start: usize, len: usize) -> FeatureGrid {
        let end = (start + len).min(self.frames());
        FeatureGrid::new(
            self.values
                .slice(ndarray::s![.., start.min(end)..end])
                .to_owned(),
        )
    }

    pub fn concat_frames(&self, other: &FeatureGrid) -> Result<FeatureGrid> {
        if self.channels() != other.channels() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels", self.channels()),
                actual: format!("{} channels", other.channels()),
            });
        }
        let values = ndarray::concatenate(Axis(1), &[self.values.view(), other.values.view()])
            .expect("channel counts checked");
        Ok(FeatureGrid::new(values))
    }
}

fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut planner = FftPlanner::new();
    if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    }
}

pub fn stft(signal: &AudioSignal, params: &StftParams) -> Result<ComplexSpectrogram> {
    if signal.is_empty() {
        return Err(Error::Empty("signal"));
    }
    params.validate()?;
    let n = params.window_size;
    let pad = params.padding() as isize;
    let frames = params.num_frames(signal.len());
    let bins = params.num_bins();
    let window = params.window.coefficients(n);
    let fft = plan(n, false);
    let x = signal.samples();

    let mut out = Array2::<Complex64>::zeros((bins, frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for m in 0..frames {
        let start = (m * params.hop_size) as isize - pad;
        for (k, slot) in buf.iter_mut().enumerate() {
            let idx = reflect_index(start + k as isize, x.len());
            *slot = Complex64::new(x[idx] * window[k], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..bins {
            out[[k, m]] = buf[k];
        }
    }
    Ok(ComplexSpectrogram {
        bins: out,
        params: *params,
    })
}

pub fn istft(spec: &ComplexSpectrogram, length: usize) -> Result<AudioSignal> {
    istft_with_rate(spec, length, 16_000)
}

pub fn istft_with_rate(
    spec: &ComplexSpectrogram,
    length: usize,
    sample_rate: u32,
) -> Result<AudioSignal> {
    let params = spec.params;
    params.validate()?;
    if spec.num_bins() != params.num_bins() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} bins", params.num_bins()),
            actual: format!("{} bins", spec.num_bins()),
        });
    }
    if !spec.is_finite() {
        return Err(Error::NonFinite("spectrogram"));
    }
    let frames = spec.num_frames();
    if length > params.max_length(frames) {
        return Err(invalid(format!(
            "{frames} frames cover at most {} samples, {length} requested",
            params.max_length(frames)
        )));
    }
    let n = params.window_size;
    let hop = params.hop_size;
    let pad = params.padding();
    let bins = params.num_bins();
    let window = params.window.coefficients(n);
    let ifft = plan(n, true);

    let total = (frames.max(1) - 1) * hop + n;
    let mut acc = vec![0.0; total];
    let mut weight = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    for m in 0..frames {
        for (k, slot) in buf.iter_mut().enumerate() {
            *slot = if k < bins {
                spec.bins[[k, m]]
            } else {
                spec.bins[[n - k, m]].conj()
            };
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let offset = m * hop;
        for k in 0..n {
            acc[offset + k] += buf[k].re / n as f64 * window[k];
            weight[offset + k] += window[k] * window[k];
        }
    }
    let samples = (0..length)
        .map(|i| {
            let w = weight[i + pad];
            if w > 1e-12 {
                acc[i + pad] / w
            } else {
                0.0
            }
        })
        .collect();
    AudioSignal::new(samples, sample_rate)
}

pub fn compress(spec: &ComplexSpectrogram, cp: &CompressionParams) -> Result<ComplexSpectrogram> {
    cp.validate()?;
    Ok(ComplexSpectrogram {
        bins: spec.bins.mapv(|z| cp.compress_value(z)),
        params: spec.params,
    })
}

pub fn decompress(spec: &ComplexSpectrogram, cp: &CompressionParams) -> Result<ComplexSpectrogram> {
    cp.validate()?;
    Ok(ComplexSpectrogram {
        bins: spec.bins.mapv(|z| cp.decompress_value(z)),
        params: spec.params,
    })
}

pub fn pack_features(spec: &ComplexSpectrogram) -> Result<FeatureGrid> {
    if !spec.is_finite() {
        return Err(Error::NonFinite("spectrogram"));
    }
    let bins = spec.num_bins();
    let frames = spec.num_frames();
    let mut values = Array2::<f64>::zeros((2 * bins, frames));
    for ((k, m), z) in spec.bins.indexed_iter() {
        values[[k, m]] = z.re;
        values[[bins + k, m]] = z.im;
    }
    Ok(FeatureGrid::new(values))
}

pub fn unpack_features(grid: &FeatureGrid, params: &StftParams) -> Result<ComplexSpectrogram> {
    let channels = grid.channels();
    if !channels.is_multiple_of(2) {
        return Err(invalid(format!("odd channel count {channels}")));
    }
    if channels != params.feature_channels() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} channels", params.feature_channels()),
            actual: format!("{channels} channels"),
        });
    }
    let bins = channels / 2;
    let bins_grid = Array2::from_shape_fn((bins, grid.frames()), |(k, m)| {
        Complex64::new(grid.values[[k, m]], grid.values[[bins + k, m]])
    });
    Ok(ComplexSpectrogram {
        bins: bins_grid,
        params: *params,
    })
}

/// Waveform → compressed, packed features.
pub fn analyze(
    signal: &AudioSignal,
    params: &StftParams,
    cp: &CompressionParams,
) -> Result<FeatureGrid> {
    pack_features(&compress(&stft(signal, params)?, cp)?)
}

/// Packed compressed features → waveform of `length` samples.
pub fn synthesize(
    grid: &FeatureGrid,
    params: &StftParams,
    cp: &CompressionParams,
    length: usize,
    sample_rate: u32,
) -> Result<AudioSignal> {
    let spec = decompress(&unpack_features(grid, params)?, cp)?;
    istft_with_rate(&spec, length, sample_rate)
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioSignal> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::WavFormat {
            path: path.to_path_buf(),
            reason: format!("{} channels, only mono is supported", spec.channels),
        });
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::WavFormat {
                path: path.to_path_buf(),
                reason: format!("{bits}-bit {fmt:?}, expected 16-bit PCM"),
            })
        }
    };
    AudioSignal::new(samples, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, signal: &AudioSignal) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
    for &s in signal.samples() {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Round-trip through 16-bit PCM without touching the filesystem.
pub fn quantize_pcm16(signal: &AudioSignal) -> AudioSignal {
    AudioSignal {
        samples: signal
            .samples()
            .iter()
            .map(|&s| (s * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0)
            .collect(),
        sample_rate: signal.sample_rate(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> AudioSignal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioSignal::new(
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            16_000,
        )
        .unwrap()
    }

    #[test]
    fn default_params_have_256_bins() {
        let p = StftParams::default();
        assert_eq!(p.num_bins(), 256);
        assert_eq!(p.feature_channels(), 512);
    }

    #[test]
    fn rejects_bad_hops() {
        assert!(StftParams::new(510, 0, WindowKind::Hann).is_err());
        assert!(StftParams::new(510, 600, WindowKind::Hann).is_err());
        // hop == window leaves the Hann zero uncovered
        assert!(StftParams::new(512, 512, WindowKind::Hann).is_err());
        assert!(StftParams::new(510, 128, WindowKind::Hann).is_ok());
    }

    #[test]
    fn empty_signal_is_an_error() {
        let s = AudioSignal::new(vec![], 16_000).unwrap();
        assert!(matches!(
            stft(&s, &StftParams::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn zeros_in_zeros_out() {
        let s = AudioSignal::zeros(16_000, 16_000).unwrap();
        let spec = stft(&s, &StftParams::default()).unwrap();
        assert_eq!(spec.num_frames(), 1 + 16_000 / 128);
        assert!(spec.bins.iter().all(|z| z.norm() == 0.0));
        let back = istft(&spec, 16_000).unwrap();
        assert!(back.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bin_centred_sinusoid_concentrates_in_main_lobe() {
        let p = StftParams::default();
        let k = 40usize;
        let f = k as f64 * 16_000.0 / p.window_size as f64;
        let x: Vec<f64> = (0..16_000)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 16_000.0).cos())
            .collect();
        let spec = stft(&AudioSignal::new(x.clone(), 16_000).unwrap(), &p).unwrap();

        // direct DFT of one interior frame as the oracle
        let m = 40;
        let w = p.window.coefficients(p.window_size);
        let start = m * p.hop_size - p.padding();
        let mut oracle = vec![0.0; p.num_bins()];
        for (kk, slot) in oracle.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for n in 0..p.window_size {
                let ang = -2.0 * std::f64::consts::PI * (kk * n) as f64 / p.window_size as f64;
                acc += Complex64::from_polar(x[start + n] * w[n], ang);
            }
            *slot = acc.norm_sqr();
            assert!((acc - spec.bins[[kk, m]]).norm() < 1e-8);
        }
        let total: f64 = oracle.iter().sum();
        let centre = oracle[k] / total;
        let lobe = (oracle[k - 1] + oracle[k] + oracle[k + 1]) / total;
        // Hann: centre bin amplitude N/4, neighbours N/8 -> 1 / 1.5 of the energy
        assert!(
            (centre - 2.0 / 3.0).abs() < 1e-6,
            "centre fraction {centre}"
        );
        assert!(lobe > 0.999, "main lobe fraction {lobe}");
    }

    #[test]
    fn windowed_impulse_restores_at_offset() {
        let p = StftParams::new(16, 4, WindowKind::Hann).unwrap();
        let x: Vec<f64> = (0..40).map(|i| if i == 13 { 1.0 } else { 0.0 }).collect();
        let sig = AudioSignal::new(x.clone(), 16_000).unwrap();
        let spec = stft(&sig, &p).unwrap();
        let back = istft(&spec, 40).unwrap();
        for (a, b) in back.samples().iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn istft_rejects_overlong_length() {
        let p = StftParams::default();
        let spec = stft(&noise(1000, 1), &p).unwrap();
        let frames = spec.num_frames();
        assert!(istft(&spec, p.max_length(frames)).is_ok());
        assert!(istft(&spec, p.max_length(frames) + 1).is_err());
    }

    #[test]
    fn short_signals_round_trip() {
        let p = StftParams::default();
        for len in [1usize, 2, 7, 100, 300] {
            let s = noise(len, len as u64);
            let back = istft(&stft(&s, &p).unwrap(), len).unwrap();
            for (a, b) in back.samples().iter().zip(s.samples()) {
                assert!((a - b).abs() < 1e-9, "len {len}");
            }
        }
    }

    #[test]
    fn compression_values() {
        let cp = CompressionParams::default();
        let z = Complex64::from_polar(1.0, 0.7);
        let c = cp.compress_value(z);
        assert!((c.norm() - 0.33).abs() < 1e-12);
        assert!((c.arg() - 0.7).abs() < 1e-12);
        let c4 = cp.compress_value(Complex64::from_polar(4.0, -2.0));
        assert!((c4.norm() - 0.66).abs() < 1e-12);
        assert_eq!(
            cp.compress_value(Complex64::new(0.0, 0.0)),
            Complex64::new(0.0, 0.0)
        );
        let d = cp.decompress_value(Complex64::from_polar(0.33, 1.1));
        assert!((d.norm() - 1.0).abs() < 1e-12);
        assert!(CompressionParams::new(0.0, 0.33).is_err());
        assert!(CompressionParams::new(0.5, -1.0).is_err());
    }

    #[test]
    fn pack_layout_is_real_then_imag() {
        let p = StftParams::default();
        let spec = ComplexSpectrogram {
            bins: Array2::from_shape_fn((256, 100), |(k, m)| Complex64::new((k + m) as f64, 0.0)),
            params: p,
        };
        let grid = pack_features(&spec).unwrap();
        assert_eq!(grid.shape(), (512, 100));
        assert!(grid
            .values
            .slice(ndarray::s![256.., ..])
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(grid.values[[3, 5]], 8.0);
        assert_eq!(unpack_features(&grid, &p).unwrap(), spec);
    }

    #[test]
    fn unpack_rejects_odd_channels() {
        let grid = FeatureGrid::zeros(7, 3);
        let err = unpack_features(&grid, &StftParams::default()).unwrap_err();
        assert!(err.to_string().contains("odd"));
    }

    #[test]
    fn wav_round_trip_and_rejects_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let s = noise(800, 3).scaled(0.5);
        write_wav(&path, &s).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate(), 16_000);
        assert_eq!(back, quantize_pcm16(&s));

        let stereo = dir.path().join("b.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        for _ in 0..10 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let err = read_wav(&stereo).unwrap_err();
        assert!(err.to_string().contains("mono"));
    }
}
