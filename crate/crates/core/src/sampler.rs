//! ODE integration from the Gaussian prior to a feature estimate, and the
//! audio-in/audio-out generation pipeline built on it.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::spectral::{synthesize, AudioSignal, CompressionParams, FeatureGrid, StftParams};
use crate::tasks::{build_condition, trim_tse_output, TaskKind, TsePromptSpec};
use crate::vectorfield::VectorFieldModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    #[default]
    Euler,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub dt: f64,
    pub method: SolverMethod,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dt: 0.2,
            method: SolverMethod::Euler,
        }
    }
}

impl SolverConfig {
    pub fn new(dt: f64) -> Result<Self> {
        let cfg = Self {
            dt,
            method: SolverMethod::Euler,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.steps().map(|_| ())
    }

    /// `1 / dt`, which must be a whole number.
    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0 && self.dt <= 1.0) {
            return Err(invalid(format!("dt must lie in (0, 1], got {}", self.dt)));
        }
        let n = (1.0 / self.dt).round();
        if ((1.0 / self.dt) - n).abs() > 1e-9 * n {
            return Err(invalid(format!(
                "1/dt must be an integer, got dt = {}",
                self.dt
            )));
        }
        Ok(n as usize)
    }
}

/// Integrates `dx/dt = field(x, t)` from `t = 0` to `t = 1`.
pub fn euler_solve<F>(mut field: F, x0: &[f64], cfg: &SolverConfig) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    let steps = cfg.steps()?;
    let dt = cfg.dt;
    let mut x = x0.to_vec();
    for k in 0..steps {
        let v = field(&x, k as f64 * dt)?;
        if v.len() != x.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("field of length {}", x.len()),
                actual: format!("{}", v.len()),
            });
        }
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += dt * vi;
        }
        if x.iter().any(|v| !v.is_finite()) {
            let norm = x
                .iter()
                .filter(|v| v.is_finite())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            return Err(Error::SolverDiverged { step: k, norm });
        }
    }
    Ok(x)
}

/// Everything a single restoration or extraction needs besides the model.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub task: TaskKind,
    /// The degraded input or, for extraction, the mixture.
    pub audio: AudioSignal,
    pub reference: Option<AudioSignal>,
    pub prompt: TsePromptSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FeatureSetup {
    pub stft: StftParams,
    pub compression: CompressionParams,
}

/// Builds the condition, integrates from Gaussian noise and resynthesises a
/// waveform with the same length as `request.audio`.
pub fn generate<R: Rng + ?Sized>(
    model: &VectorFieldModel,
    request: &GenerationRequest,
    setup: &FeatureSetup,
    solver: &SolverConfig,
    rng: &mut R,
) -> Result<AudioSignal> {
    let channels = setup.stft.feature_channels();
    if model.config().feature_channels != channels {
        return Err(Error::ShapeMismatch {
            expected: format!("{channels} feature channels"),
            actual: format!("model with {}", model.config().feature_channels),
        });
    }
    let cond = build_condition(
        request.task,
        &request.audio,
        request.reference.as_ref(),
        &request.prompt,
        &setup.stft,
        &setup.compression,
    )?;
    let frames = cond.features.frames();
    let x0: Vec<f64> = (0..channels * frames)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let solved = euler_solve(
        |x, t| {
            let grid = FeatureGrid::from_flat(channels, frames, x.to_vec())?;
            Ok(model.forward(&grid, &cond, t)?.as_slice().to_vec())
        },
        &x0,
        solver,
    )?;
    let grid = FeatureGrid::from_flat(channels, frames, solved)?;
    let rate = request.audio.sample_rate();
    match request.task {
        TaskKind::TargetSpeakerExtract => {
            let total = request.prompt.prompt_samples() + request.audio.len();
            let full = synthesize(&grid, &setup.stft, &setup.compression, total, rate)?;
            trim_tse_output(&full, &request.prompt, request.audio.len())
        }
        _ => synthesize(
            &grid,
            &setup.stft,
            &setup.compression,
            request.audio.len(),
            rate,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowpath::{conditional_vector_field, target_vector_field, FlowPathConfig};
    use crate::spectral::analyze;
    use crate::vectorfield::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn config_validation() {
        assert_eq!(SolverConfig::default().steps().unwrap(), 5);
        assert_eq!(SolverConfig::new(0.05).unwrap().steps().unwrap(), 20);
        assert_eq!(SolverConfig::new(1.0).unwrap().steps().unwrap(), 1);
        assert!(SolverConfig::new(0.3).is_err());
        assert!(SolverConfig::new(0.0).is_err());
        assert!(SolverConfig::new(1.5).is_err());
    }

    #[test]
    fn zero_field_returns_start() {
        let x0 = vec![0.3, -1.2, 4.0];
        let out =
            euler_solve(|x, _| Ok(vec![0.0; x.len()]), &x0, &SolverConfig::default()).unwrap();
        assert_eq!(out, x0);
    }

    #[test]
    fn evaluation_count_and_times() {
        let mut times = Vec::new();
        euler_solve(
            |x, t| {
                times.push(t);
                Ok(vec![1.0; x.len()])
            },
            &[0.0],
            &SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(times.len(), 5);
        for (k, t) in times.iter().enumerate() {
            assert!((t - 0.2 * k as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn exact_on_constant_target_field() {
        let cfg = FlowPathConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = gaussian(64, &mut rng);
        let x1 = gaussian(64, &mut rng);
        let u = target_vector_field(&x0, &x1, &cfg).unwrap();
        let out = euler_solve(|_, _| Ok(u.clone()), &x0, &SolverConfig::default()).unwrap();
        for ((o, a), b) in out.iter().zip(&x1).zip(&x0) {
            assert!((o - (a + cfg.sigma_min * b)).abs() < 1e-10);
        }
    }

    #[test]
    fn first_order_convergence() {
        let cfg = FlowPathConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = gaussian(32, &mut rng);
        let x1 = gaussian(32, &mut rng);
        let exact: Vec<f64> = x1
            .iter()
            .zip(&x0)
            .map(|(a, b)| a + cfg.sigma_min * b)
            .collect();
        let err = |dt: f64| {
            let out = euler_solve(
                |x, t| conditional_vector_field(x, &x1, t, &cfg),
                &x0,
                &SolverConfig::new(dt).unwrap(),
            )
            .unwrap();
            out.iter()
                .zip(&exact)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2, e3) = (err(0.2), err(0.1), err(0.05));
        assert!(e2 <= 0.5 * e1 + 1e-12, "{e1} {e2}");
        assert!(e3 <= 0.5 * e2 + 1e-12, "{e2} {e3}");
    }

    #[test]
    fn divergence_is_reported() {
        let err = euler_solve(
            |x, t| {
                Ok(if t > 0.3 {
                    vec![f64::INFINITY; x.len()]
                } else {
                    vec![1.0; x.len()]
                })
            },
            &[0.0, 0.0],
            &SolverConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::SolverDiverged { step: 2, .. }));
    }

    fn tiny_model(channels: usize) -> VectorFieldModel {
        let cfg = ModelConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            feature_channels: channels,
            time_embed_dim: 8,
            feedforward_dim: 16,
            learned_null: false,
        };
        VectorFieldModel::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn request(task: TaskKind, len: usize) -> GenerationRequest {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let audio = AudioSignal::new(
            (0..len)
                .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            16_000,
        )
        .unwrap();
        GenerationRequest {
            task,
            reference: task.needs_reference().then(|| audio.clone()),
            audio,
            prompt: TsePromptSpec {
                prompt_seconds: 0.25,
                sample_rate: 16_000,
            },
        }
    }

    #[test]
    fn generation_lengths_and_determinism() {
        let setup = FeatureSetup::default();
        let model = tiny_model(512);
        let solver = SolverConfig::default();
        let req = request(TaskKind::Denoise, 5000);
        let a = generate(
            &model,
            &req,
            &setup,
            &solver,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let b = generate(
            &model,
            &req,
            &setup,
            &solver,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        assert_eq!(a.len(), 5000);
        assert_eq!(a, b);

        let tse = request(TaskKind::TargetSpeakerExtract, 6000);
        let out = generate(
            &model,
            &tse,
            &setup,
            &solver,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        assert_eq!(out.len(), 6000);
    }

    #[test]
    fn zero_model_returns_resynthesised_prior() {
        let setup = FeatureSetup::default();
        let model = tiny_model(512);
        let req = request(TaskKind::Denoise, 3000);
        let out = generate(
            &model,
            &req,
            &setup,
            &SolverConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        let frames = analyze(&req.audio, &setup.stft, &setup.compression)
            .unwrap()
            .frames();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = FeatureGrid::from_flat(512, frames, gaussian(512 * frames, &mut rng)).unwrap();
        let expect = synthesize(&x0, &setup.stft, &setup.compression, 3000, 16_000).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let model = tiny_model(8);
        let req = request(TaskKind::Denoise, 1000);
        let err = generate(
            &model,
            &req,
            &FeatureSetup::default(),
            &SolverConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }
}
