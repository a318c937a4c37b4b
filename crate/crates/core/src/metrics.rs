//! Objective scores: SI-SDR, its improvement over the unprocessed input, the
//! failure rate used for extraction, and a log-spectral distance.
//!
//! SI-SDR is clamped to `[-SI_SDR_CAP_DB, SI_SDR_CAP_DB]` so that a perfect
//! reconstruction reports +100 dB instead of infinity and corpus means stay
//! finite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{stft, AudioSignal, StftParams};

pub const SI_SDR_CAP_DB: f64 = 100.0;

/// Improvements strictly below this count as failures.
pub const FAILURE_THRESHOLD_DB: f64 = 1.0;

const LSD_FLOOR: f64 = 1e-8;

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} samples", b.len()),
            actual: format!("{} samples", a.len()),
        });
    }
    Ok(())
}

pub fn si_sdr_slices(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    check_lengths(estimate, reference)?;
    let ref_energy: f64 = reference.iter().map(|r| r * r).sum();
    if ref_energy <= 0.0 {
        return Err(Error::InvalidArgument("reference has zero energy".into()));
    }
    let dot: f64 = estimate.iter().zip(reference).map(|(e, r)| e * r).sum();
    let alpha = dot / ref_energy;
    let target = alpha * alpha * ref_energy;
    let distortion: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| {
            let d = alpha * r - e;
            d * d
        })
        .sum();
    if distortion == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    if target == 0.0 {
        return Ok(-SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / distortion).log10()).clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

pub fn si_sdr(estimate: &AudioSignal, reference: &AudioSignal) -> Result<f64> {
    si_sdr_slices(estimate.samples(), reference.samples())
}

pub fn si_sdr_improvement(
    estimate: &AudioSignal,
    degraded: &AudioSignal,
    reference: &AudioSignal,
) -> Result<f64> {
    Ok(si_sdr(estimate, reference)? - si_sdr(degraded, reference)?)
}

pub fn failure_rate(improvements: &[f64]) -> Result<f64> {
    if improvements.is_empty() {
        return Err(Error::Empty("improvement list"));
    }
    let failures = improvements
        .iter()
        .filter(|&&x| x < FAILURE_THRESHOLD_DB)
        .count();
    Ok(failures as f64 / improvements.len() as f64)
}

/// Log-spectral distance in dB: per frame, the RMS over bins of
/// `10 * (log10|E| - log10|R|)`, then the RMS of that over frames.
pub fn lsd(estimate: &AudioSignal, reference: &AudioSignal, params: &StftParams) -> Result<f64> {
    check_lengths(estimate.samples(), reference.samples())?;
    let e = stft(estimate, params)?;
    let r = stft(reference, params)?;
    let bins = e.num_bins() as f64;
    let mut acc = 0.0;
    for (ce, cr) in e.bins.columns().into_iter().zip(r.bins.columns()) {
        let frame: f64 = ce
            .iter()
            .zip(cr.iter())
            .map(|(a, b)| {
                let d = 10.0 * (a.norm().max(LSD_FLOOR).log10() - b.norm().max(LSD_FLOOR).log10());
                d * d
            })
            .sum::<f64>()
            / bins;
        acc += frame;
    }
    Ok((acc / e.num_frames() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    pub si_sdr: f64,
    pub si_sdr_improvement: f64,
    pub lsd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub utterances: Vec<UtteranceScore>,
    pub count: usize,
    pub mean_si_sdr: f64,
    pub mean_si_sdr_improvement: f64,
    pub mean_lsd: f64,
    pub failure_rate: f64,
}

impl MetricsReport {
    pub fn from_scores(utterances: Vec<UtteranceScore>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::Empty("utterance scores"));
        }
        let n = utterances.len() as f64;
        let mean = |f: fn(&UtteranceScore) -> f64| utterances.iter().map(f).sum::<f64>() / n;
        let improvements: Vec<f64> = utterances.iter().map(|u| u.si_sdr_improvement).collect();
        Ok(Self {
            count: utterances.len(),
            mean_si_sdr: mean(|u| u.si_sdr),
            mean_si_sdr_improvement: mean(|u| u.si_sdr_improvement),
            mean_lsd: mean(|u| u.lsd),
            failure_rate: failure_rate(&improvements)?,
            utterances,
        })
    }

    /// One JSON object per utterance followed by a `summary` record.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for u in &self.utterances {
            out.push_str(&serde_json::to_string(u)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&serde_json::json!({
            "summary": {
                "count": self.count,
                "mean_si_sdr": self.mean_si_sdr,
                "mean_si_sdr_improvement": self.mean_si_sdr_improvement,
                "mean_lsd": self.mean_lsd,
                "failure_rate": self.failure_rate,
                "si_sdr_cap_db": SI_SDR_CAP_DB,
            }
        }))?);
        out.push('\n');
        Ok(out)
    }

    pub fn summary_table(&self) -> String {
        format!(
            "{:<12} {:>10}\n{:<12} {:>10}\n{:<12} {:>10.3}\n{:<12} {:>10.3}\n{:<12} {:>10.3}\n{:<12} {:>9.1}%\n(SI-SDR capped at +{SI_SDR_CAP_DB} dB)\n",
            "metric", "value",
            "utterances", self.count,
            "SI-SDR", self.mean_si_sdr,
            "SI-SDRi", self.mean_si_sdr_improvement,
            "LSD", self.mean_lsd,
            "FR", 100.0 * self.failure_rate,
        )
    }
}
