use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stftflow::flowpath::{
    conditional_vector_field, psi_t, stratified_times, target_vector_field, FlowPathConfig,
};
use stftflow::masking::sample_mask;
use stftflow::metrics::si_sdr_slices;
use stftflow::sampler::{euler_solve, SolverConfig};
use stftflow::spectral::{analyze, synthesize, AudioSignal, CompressionParams, StftParams};
use stftflow::tasks::{mix_at_snr, TaskKind};
use stftflow::training::{lr_schedule, TrainConfig};

fn signal(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len..=len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn analysis_round_trip(samples in (600usize..3000).prop_flat_map(signal)) {
        let audio = AudioSignal::new(samples, 16000).unwrap();
        let params = StftParams::default();
        let cp = CompressionParams::default();
        let grid = analyze(&audio, &params, &cp).unwrap();
        prop_assert_eq!(grid.channels(), 512);
        let back = synthesize(&grid, &params, &cp, audio.len(), 16000).unwrap();
        prop_assert!(si_sdr_slices(back.samples(), audio.samples()).unwrap() > 50.0);
    }

    #[test]
    fn compression_inverts(re in -10.0f64..10.0, im in -10.0f64..10.0, a in 0.2f64..1.0, b in 0.1f64..2.0) {
        let cp = CompressionParams::new(a, b).unwrap();
        let z = Complex64::new(re, im);
        let c = cp.compress_value(z);
        prop_assert!((c.norm() - b * z.norm().powf(a)).abs() < 1e-9 * (1.0 + c.norm()));
        prop_assert!((cp.decompress_value(c) - z).norm() < 1e-9 * (1.0 + z.norm()));
    }

    #[test]
    fn flow_field_matches_target_along_path(
        x0 in prop::collection::vec(-3.0f64..3.0, 16),
        x1 in prop::collection::vec(-3.0f64..3.0, 16),
        t in 0.0f64..0.99,
    ) {
        let cfg = FlowPathConfig::default();
        let x = psi_t(&x0, &x1, t, &cfg).unwrap();
        let u = conditional_vector_field(&x, &x1, t, &cfg).unwrap();
        let target = target_vector_field(&x0, &x1, &cfg).unwrap();
        for (a, b) in u.iter().zip(&target) {
            prop_assert!((a - b).abs() < 1e-8);
        }
        let end = psi_t(&x0, &x1, 1.0, &cfg).unwrap();
        for ((e, a), b) in end.iter().zip(&x0).zip(&x1) {
            prop_assert!((e - (b + cfg.sigma_min * a)).abs() < 1e-12);
        }
    }

    #[test]
    fn euler_exact_for_constant_field(
        x0 in prop::collection::vec(-5.0f64..5.0, 8),
        v in prop::collection::vec(-5.0f64..5.0, 8),
        steps in prop::sample::select(vec![1usize, 2, 4, 5, 10]),
    ) {
        let cfg = SolverConfig::new(1.0 / steps as f64).unwrap();
        let mut calls = 0;
        let x = euler_solve(|_, _| { calls += 1; Ok(v.clone()) }, &x0, &cfg).unwrap();
        prop_assert_eq!(calls, steps);
        for ((x, a), b) in x.iter().zip(&x0).zip(&v) {
            prop_assert!((x - (a + b)).abs() < 1e-12);
        }
    }

    #[test]
    fn stratified_times_one_per_stratum(n in 1usize..64, seed: u64) {
        let times = stratified_times(n, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut seen = vec![0; n];
        for t in times {
            prop_assert!((0.0..1.0).contains(&t));
            seen[(t * n as f64) as usize] += 1;
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn mask_runs_respect_min_span(frames in 20usize..200, ratio in 0.3f64..0.8, seed: u64) {
        let mask = sample_mask(frames, ratio, 5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(mask.frame_flags.len(), frames);
        prop_assert!(mask.runs().iter().all(|&r| r >= 5));
        prop_assert!(mask.masked_count() >= (ratio * frames as f64).round() as usize);
    }

    #[test]
    fn mixing_hits_requested_snr(
        clean in signal(800),
        noise in prop::collection::vec(-1.0f64..1.0, 100..1600),
        snr in -5.0f64..20.0,
        seed: u64,
    ) {
        let c = AudioSignal::new(clean, 16000).unwrap();
        let n = AudioSignal::new(noise, 16000).unwrap();
        let mixed = mix_at_snr(&c, &n, snr, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let residual: f64 = mixed.samples().iter().zip(c.samples()).map(|(m, c)| (m - c).powi(2)).sum();
        prop_assert!((10.0 * (c.energy() / residual).log10() - snr).abs() < 1e-9);
    }

    #[test]
    fn schedule_stays_within_bounds(step_frac in 0.0f64..=1.0) {
        for cfg in [TrainConfig::pretrain(), TrainConfig::finetune(TaskKind::Denoise), TrainConfig::scratch(TaskKind::CodecRestore)] {
            let step = (step_frac * cfg.total_steps as f64) as u64;
            let lr = lr_schedule(step, &cfg).unwrap();
            prop_assert!(lr >= 0.0 && lr <= cfg.peak_lr);
            if step >= cfg.warmup_steps {
                prop_assert!(lr >= cfg.final_lr);
            }
        }
    }
}
