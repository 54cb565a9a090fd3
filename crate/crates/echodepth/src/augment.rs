//! Mixup augmentation: convex blends of ultrasonic and auxiliary
//! lower-frequency spectrograms of the same scene.
//!
//! The two echoes are observed at the same position and orientation, so the
//! ground-truth depth maps are identical and pass through unmixed. Blending
//! happens in log-magnitude feature space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acoustics::DepthMap;
use crate::dsp::{CutoffTag, Spectrogram};
use crate::error::{Error, Result};

/// Largest allowed gap between the ultrasonic and auxiliary cutoffs, Hz.
pub const DEFAULT_MAX_BAND_GAP_HZ: u32 = 1_000;

/// One training example: band-limited echo features plus ground truth.
#[derive(Debug, Clone)]
pub struct EchoSample {
    pub features: Spectrogram,
    pub depth: DepthMap,
    pub scene_id: String,
}

impl EchoSample {
    pub fn cutoff_tag(&self) -> Option<CutoffTag> {
        self.features.cutoff_tag()
    }
}

/// Which two bands may be mixed, and how far apart they may sit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixPolicy {
    pub ultrasonic_cutoff: u32,
    pub auxiliary_cutoff: u32,
    #[serde(default = "default_band_gap")]
    pub max_band_gap: u32,
}

fn default_band_gap() -> u32 {
    DEFAULT_MAX_BAND_GAP_HZ
}

impl MixPolicy {
    pub fn new(ultrasonic_cutoff: u32, auxiliary_cutoff: u32) -> Result<Self> {
        let policy = Self {
            ultrasonic_cutoff,
            auxiliary_cutoff,
            max_band_gap: DEFAULT_MAX_BAND_GAP_HZ,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        if self.auxiliary_cutoff >= self.ultrasonic_cutoff {
            return Err(Error::InvalidConfig(format!(
                "auxiliary cutoff {} must lie below ultrasonic cutoff {}",
                self.auxiliary_cutoff, self.ultrasonic_cutoff
            )));
        }
        if self.ultrasonic_cutoff - self.auxiliary_cutoff > self.max_band_gap {
            return Err(Error::InvalidConfig(format!(
                "band gap {} Hz exceeds the {} Hz limit",
                self.ultrasonic_cutoff - self.auxiliary_cutoff,
                self.max_band_gap
            )));
        }
        Ok(())
    }

    /// Blend two same-scene samples: features become
    /// `alpha·X_u + (1−alpha)·X_l`, the depth map passes through unchanged,
    /// and the result is tagged as mixed.
    pub fn mix(&self, sample_u: &EchoSample, sample_l: &EchoSample, alpha: f64) -> Result<EchoSample> {
        self.validate()?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(format!(
                "mixing ratio must lie in [0, 1], got {alpha}"
            )));
        }
        if sample_u.scene_id != sample_l.scene_id {
            return Err(Error::InvalidConfig(format!(
                "cannot mix scenes {:?} and {:?}",
                sample_u.scene_id, sample_l.scene_id
            )));
        }
        for (sample, expected) in [
            (sample_u, self.ultrasonic_cutoff),
            (sample_l, self.auxiliary_cutoff),
        ] {
            match sample.cutoff_tag() {
                Some(CutoffTag::Band(c)) if c == expected => {}
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "expected a band-{expected} sample, found tag {other:?}"
                    )))
                }
            }
        }
        let (fu, fl) = (&sample_u.features, &sample_l.features);
        let shape_u = (fu.channels(), fu.bins(), fu.frames());
        let shape_l = (fl.channels(), fl.bins(), fl.frames());
        if shape_u != shape_l {
            return Err(Error::ShapeMismatch {
                expected: format!("{shape_u:?}"),
                actual: format!("{shape_l:?}"),
            });
        }
        let data: Vec<f64> = fu
            .data()
            .iter()
            .zip(fl.data())
            .map(|(&u, &l)| alpha * u + (1.0 - alpha) * l)
            .collect();
        let features = Spectrogram::from_parts(
            data,
            fu.channels(),
            fu.bins(),
            fu.frames(),
            fu.window_size(),
            fu.hop(),
            fu.sample_rate(),
            Some(CutoffTag::Mixed {
                ultrasonic: self.ultrasonic_cutoff,
                auxiliary: self.auxiliary_cutoff,
            }),
        )?;
        Ok(EchoSample {
            features,
            depth: sample_u.depth.clone(),
            scene_id: sample_u.scene_id.clone(),
        })
    }
}

/// Draw a mixing ratio uniformly from [0, 1].
pub fn sample_alpha<R: Rng>(rng: &mut R) -> f64 {
    rng.gen_range(0.0..=1.0)
}

/// The auxiliary cutoff paired with each ultrasonic cutoff in the
/// comparison protocol.
pub fn pair_cutoffs(ultrasonic: u32) -> Result<u32> {
    match ultrasonic {
        20_000 => Ok(19_500),
        21_000 => Ok(20_000),
        22_000 => Ok(21_000),
        other => Err(Error::MissingEntry(format!(
            "no auxiliary cutoff paired with {other} Hz"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const WINDOW: usize = 8;
    const BINS: usize = 5;
    const FRAMES: usize = 3;

    fn sample(scene_id: &str, cutoff: u32, data: Vec<f64>) -> EchoSample {
        let features = Spectrogram::from_parts(
            data,
            2,
            BINS,
            FRAMES,
            WINDOW,
            4,
            44_100.0,
            Some(CutoffTag::Band(cutoff)),
        )
        .unwrap();
        let depth = DepthMap::new(vec![1.25; 4], 2, 2, 10.0).unwrap();
        EchoSample {
            features,
            depth,
            scene_id: scene_id.to_string(),
        }
    }

    fn ramp(scale: f64) -> Vec<f64> {
        (0..2 * BINS * FRAMES).map(|i| scale * i as f64).collect()
    }

    #[test]
    fn alpha_one_returns_ultrasonic_exactly() {
        let policy = MixPolicy::new(20_000, 19_500).unwrap();
        let u = sample("s0", 20_000, ramp(1.0));
        let l = sample("s0", 19_500, ramp(3.0));
        let mixed = policy.mix(&u, &l, 1.0).unwrap();
        assert_eq!(mixed.features.data(), u.features.data());
    }

    #[test]
    fn alpha_zero_returns_auxiliary_exactly() {
        let policy = MixPolicy::new(20_000, 19_500).unwrap();
        let u = sample("s0", 20_000, ramp(1.0));
        let l = sample("s0", 19_500, ramp(3.0));
        let mixed = policy.mix(&u, &l, 0.0).unwrap();
        assert_eq!(mixed.features.data(), l.features.data());
    }

    #[test]
    fn midpoint_of_double_is_one_and_a_half() {
        let policy = MixPolicy::new(20_000, 19_500).unwrap();
        let l = sample("s0", 19_500, ramp(1.0));
        let u = sample("s0", 20_000, ramp(2.0));
        let mixed = policy.mix(&u, &l, 0.5).unwrap();
        for (got, want) in mixed.features.data().iter().zip(ramp(1.5)) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn mix_is_affine_in_alpha() {
        let policy = MixPolicy::new(20_000, 19_500).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let du: Vec<f64> = (0..2 * BINS * FRAMES).map(|_| rng.gen_range(0.0..5.0)).collect();
        let dl: Vec<f64> = (0..2 * BINS * FRAMES).map(|_| rng.gen_range(0.0..5.0)).collect();
        let u = sample("s0", 20_000, du.clone());
        let l = sample("s0", 19_500, dl.clone());
        for i in 0..11 {
            let alpha = i as f64 / 10.0;
            let mixed = policy.mix(&u, &l, alpha).unwrap();
            for ((got, &xu), &xl) in mixed.features.data().iter().zip(&du).zip(&dl) {
                let want = alpha * xu + (1.0 - alpha) * xl;
                assert!((got - want).abs() <= 1e-12, "alpha {alpha}");
            }
        }
    }

    #[test]
    fn depth_map_passes_through_bit_exact() {
        let policy = MixPolicy::new(20_000, 19_500).unwrap();
        let u = sample("s0", 20_000, ramp(1.0));
        let l = sample("s0", 19_500, ramp(3.0));
        let mixed = policy.mix(&u, &l, 0.37).unwrap();
        assert_eq!(mixed.depth, u.depth);
    }

    #[test]
    fn mixed_tag_records_both_bands() {
        let policy = MixPolicy::new(20_000, 19_500).unwrap();
        let u = sample("s0", 20_000, ramp(1.0));
        let l = sample("s0", 19_500, ramp(3.0));
        let mixed = policy.mix(&u, &l, 0.5).unwrap();
        assert_eq!(
            mixed.cutoff_tag(),
            Some(CutoffTag::Mixed {
                ultrasonic: 20_000,
                auxiliary: 19_500
            })
        );
    }

    #[test]
    fn mix_rejects_different_scenes() {
        let policy = MixPolicy::new(20_000, 19_500).unwrap();
        let u = sample("s0", 20_000, ramp(1.0));
        let l = sample("s1", 19_500, ramp(1.0));
        assert!(policy.mix(&u, &l, 0.5).is_err());
    }

    #[test]
    fn mix_rejects_wrong_band_tags() {
        let policy = MixPolicy::new(20_000, 19_500).unwrap();
        let u = sample("s0", 21_000, ramp(1.0));
        let l = sample("s0", 19_500, ramp(1.0));
        assert!(policy.mix(&u, &l, 0.5).is_err());
    }

    #[test]
    fn mix_rejects_out_of_range_alpha() {
        let policy = MixPolicy::new(20_000, 19_500).unwrap();
        let u = sample("s0", 20_000, ramp(1.0));
        let l = sample("s0", 19_500, ramp(1.0));
        assert!(policy.mix(&u, &l, 1.5).is_err());
        assert!(policy.mix(&u, &l, -0.1).is_err());
    }

    #[test]
    fn policy_rejects_band_gap_violations() {
        assert!(MixPolicy::new(22_000, 20_000).is_err(), "gap 2000 Hz");
        assert!(MixPolicy::new(19_500, 19_500).is_err(), "no gap at all");
        assert!(MixPolicy::new(19_500, 20_000).is_err(), "inverted bands");
        assert!(MixPolicy::new(22_000, 21_000).is_ok());
    }

    #[test]
    fn alpha_sequence_is_reproducible() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..32).map(|_| sample_alpha(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn alpha_is_uniform_on_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let a = sample_alpha(&mut rng);
            assert!((0.0..=1.0).contains(&a));
            sum += a;
        }
        let mean = sum / n as f64;
        assert!((0.495..=0.505).contains(&mean), "mean {mean}");
    }

    #[test]
    fn standard_cutoff_pairs() {
        assert_eq!(pair_cutoffs(20_000).unwrap(), 19_500);
        assert_eq!(pair_cutoffs(21_000).unwrap(), 20_000);
        assert_eq!(pair_cutoffs(22_000).unwrap(), 21_000);
        assert!(pair_cutoffs(18_000).is_err());
    }

    #[test]
    fn standard_pairs_satisfy_gap_rule() {
        for u in [20_000, 21_000, 22_000] {
            let a = pair_cutoffs(u).unwrap();
            assert!(MixPolicy::new(u, a).is_ok());
        }
    }
}
