//! Pretraining conditions: span masking over frames and condition dropout.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::spectral::FeatureGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    /// `true` marks a masked frame.
    pub frame_flags: Vec<bool>,
    pub ratio: f64,
    pub min_span: usize,
}

impl MaskSpec {
    pub fn masked_count(&self) -> usize {
        self.frame_flags.iter().filter(|&&m| m).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked_count() as f64 / self.frame_flags.len().max(1) as f64
    }

    /// Lengths of maximal runs of masked frames.
    pub fn runs(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = 0;
        for &flag in &self.frame_flags {
            if flag {
                current += 1;
            } else if current > 0 {
                runs.push(current);
                current = 0;
            }
        }
        if current > 0 {
            runs.push(current);
        }
        runs
    }
}

/// Conditioning features handed to the vector-field estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionInput {
    pub features: FeatureGrid,
    /// Unconditional case; `features` is then all zeros.
    pub is_null: bool,
}

impl ConditionInput {
    pub fn new(features: FeatureGrid) -> Self {
        Self {
            features,
            is_null: false,
        }
    }

    pub fn null(channels: usize, frames: usize) -> Self {
        Self {
            features: FeatureGrid::zeros(channels, frames),
            is_null: true,
        }
    }
}

/// Places spans of `min_span..=2*min_span` frames at uniform random starts
/// until at least `round(ratio * frames)` frames are masked. Spans may land on
/// frames that are already masked; every maximal run is then a union of spans
/// and so never shorter than `min_span` (unless `frames < min_span`).
pub fn sample_mask<R: Rng + ?Sized>(
    frames: usize,
    ratio: f64,
    min_span: usize,
    rng: &mut R,
) -> Result<MaskSpec> {
    if frames == 0 {
        return Err(Error::Empty("mask length"));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(invalid(format!(
            "mask ratio must lie in [0, 1], got {ratio}"
        )));
    }
    if min_span == 0 {
        return Err(invalid("minimum span must be at least one frame"));
    }
    let target = (ratio * frames as f64).round() as usize;
    let mut flags = vec![false; frames];
    if target >= frames {
        flags.fill(true);
    } else if target > 0 {
        let mut masked = 0;
        while masked < target {
            let span = rng.random_range(min_span..=2 * min_span).min(frames);
            let start = rng.random_range(0..=frames - span);
            for flag in &mut flags[start..start + span] {
                if !*flag {
                    *flag = true;
                    masked += 1;
                }
            }
        }
    }
    Ok(MaskSpec {
        frame_flags: flags,
        ratio,
        min_span,
    })
}

pub fn apply_mask(clean: &FeatureGrid, mask: &MaskSpec) -> Result<ConditionInput> {
    if mask.frame_flags.len() != clean.frames() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} frames", clean.frames()),
            actual: format!("mask of {} frames", mask.frame_flags.len()),
        });
    }
    let mut features = clean.clone();
    for (mut column, &masked) in features
        .values
        .columns_mut()
        .into_iter()
        .zip(&mask.frame_flags)
    {
        if masked {
            column.fill(0.0);
        }
    }
    Ok(ConditionInput::new(features))
}

pub fn maybe_drop_condition<R: Rng + ?Sized>(
    cond: ConditionInput,
    p: f64,
    rng: &mut R,
) -> Result<ConditionInput> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!(
            "drop probability must lie in [0, 1], got {p}"
        )));
    }
    let u: f64 = rng.random();
    if u < p {
        let (c, f) = cond.features.shape();
        Ok(ConditionInput::null(c, f))
    } else {
        Ok(cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(c: usize, f: usize) -> FeatureGrid {
        FeatureGrid::new(ndarray::Array2::from_shape_fn((c, f), |(i, j)| {
            1.0 + i as f64 + 0.5 * j as f64
        }))
    }

    #[test]
    fn extreme_ratios() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            sample_mask(50, 1.0, 10, &mut rng).unwrap().masked_count(),
            50
        );
        assert_eq!(
            sample_mask(50, 0.0, 10, &mut rng).unwrap().masked_count(),
            0
        );
    }

    #[test]
    fn invalid_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_mask(0, 0.5, 10, &mut rng).is_err());
        assert!(sample_mask(10, 1.5, 10, &mut rng).is_err());
        assert!(sample_mask(10, 0.5, 0, &mut rng).is_err());
        let c = ConditionInput::new(grid(2, 2));
        assert!(maybe_drop_condition(c, -0.1, &mut rng).is_err());
    }

    #[test]
    fn short_sequences_mask_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = sample_mask(4, 0.7, 10, &mut rng).unwrap();
        assert_eq!(m.masked_count(), 4);
    }

    #[test]
    fn apply_mask_cases() {
        let g = grid(3, 30);
        let all = MaskSpec {
            frame_flags: vec![true; 30],
            ratio: 1.0,
            min_span: 10,
        };
        assert!(apply_mask(&g, &all)
            .unwrap()
            .features
            .values
            .iter()
            .all(|&v| v == 0.0));
        let none = MaskSpec {
            frame_flags: vec![false; 30],
            ratio: 0.0,
            min_span: 10,
        };
        let c = apply_mask(&g, &none).unwrap();
        assert_eq!(c.features, g);
        assert!(!c.is_null);

        let flags: Vec<bool> = (0..30).map(|j| (10..20).contains(&j)).collect();
        let span = MaskSpec {
            frame_flags: flags,
            ratio: 1.0 / 3.0,
            min_span: 10,
        };
        let c = apply_mask(&g, &span).unwrap();
        for j in 0..30 {
            for i in 0..3 {
                let expect = if (10..20).contains(&j) {
                    0.0
                } else {
                    g.values[[i, j]]
                };
                assert_eq!(c.features.values[[i, j]].to_bits(), expect.to_bits());
            }
        }
        let short = MaskSpec {
            frame_flags: vec![true; 29],
            ratio: 1.0,
            min_span: 10,
        };
        assert!(apply_mask(&g, &short).is_err());
    }

    #[test]
    fn drop_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = ConditionInput::new(grid(2, 3));
        for _ in 0..100 {
            assert_eq!(maybe_drop_condition(c.clone(), 0.0, &mut rng).unwrap(), c);
            let d = maybe_drop_condition(c.clone(), 1.0, &mut rng).unwrap();
            assert!(d.is_null);
            assert!(d.features.values.iter().all(|&v| v == 0.0));
            assert_eq!(d.features.shape(), (2, 3));
        }
    }

    proptest! {
        #[test]
        fn spans_respect_minimum(seed in any::<u64>(), frames in 1usize..400, ratio in 0.0f64..=1.0, min_span in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = sample_mask(frames, ratio, min_span, &mut rng).unwrap();
            let again = sample_mask(frames, ratio, min_span, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(&m, &again);
            if frames >= min_span {
                for run in m.runs() {
                    prop_assert!(run >= min_span);
                }
            }
            let target = (ratio * frames as f64).round() as usize;
            prop_assert!(m.masked_count() >= target);
            prop_assert!(m.masked_count() <= target + 2 * min_span);
        }
    }
}
