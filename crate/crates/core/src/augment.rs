//! Label-preserving image augmentation: flips, right-angle rotations and
//! area-fraction random crops re-resized to the input side.
//!
//! Each call consumes a fixed number of RNG draws regardless of which
//! transforms fire, so batch streams stay aligned across configurations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ImageSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub horizontal_flip_prob: f32,
    pub vertical_flip_prob: f32,
    /// Area fraction range (lo, hi] of the random crop; 1.0 keeps the frame.
    pub crop_scale_range: (f32, f32),
    /// Rotation choices in degrees; multiples of 90 only.
    pub rotation_choices: Vec<u16>,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            horizontal_flip_prob: 0.5,
            vertical_flip_prob: 0.5,
            crop_scale_range: (0.8, 1.0),
            rotation_choices: vec![0, 90, 180, 270],
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("horizontal_flip_prob", self.horizontal_flip_prob),
            ("vertical_flip_prob", self.vertical_flip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop_scale_range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        if self.rotation_choices.is_empty() {
            return Err(Error::Config("rotation_choices must be non-empty".into()));
        }
        if let Some(r) = self.rotation_choices.iter().find(|r| **r % 90 != 0) {
            return Err(Error::Config(format!(
                "rotation {r} is not a multiple of 90 degrees"
            )));
        }
        Ok(())
    }
}

/// Which triplet members the DDIPNet+ variant augments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentScope {
    All,
    AnchorOnly,
    PositiveOnly,
}

impl Default for AugmentScope {
    fn default() -> Self {
        AugmentScope::All
    }
}

fn flip_h(data: &[f32], c: usize, s: usize) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for ch in 0..c {
        let base = ch * s * s;
        for y in 0..s {
            for x in 0..s {
                out[base + y * s + x] = data[base + y * s + (s - 1 - x)];
            }
        }
    }
    out
}

fn flip_v(data: &[f32], c: usize, s: usize) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for ch in 0..c {
        let base = ch * s * s;
        for y in 0..s {
            out[base + y * s..base + y * s + s]
                .copy_from_slice(&data[base + (s - 1 - y) * s..base + (s - 1 - y) * s + s]);
        }
    }
    out
}

fn rotate(data: &[f32], c: usize, s: usize, degrees: u16) -> Vec<f32> {
    let quarter = (degrees / 90) % 4;
    if quarter == 0 {
        return data.to_vec();
    }
    let mut out = vec![0.0; data.len()];
    for ch in 0..c {
        let base = ch * s * s;
        for y in 0..s {
            for x in 0..s {
                let (sy, sx) = match quarter {
                    1 => (s - 1 - x, y),
                    2 => (s - 1 - y, s - 1 - x),
                    _ => (x, s - 1 - y),
                };
                out[base + y * s + x] = data[base + sy * s + sx];
            }
        }
    }
    out
}

/// Bilinear resize of a square CHW image.
pub(crate) fn resize_bilinear(data: &[f32], c: usize, from: usize, to: usize) -> Vec<f32> {
    if from == to {
        return data.to_vec();
    }
    let scale = from as f32 / to as f32;
    let mut out = vec![0.0; c * to * to];
    for ch in 0..c {
        let base_in = ch * from * from;
        let base_out = ch * to * to;
        for y in 0..to {
            let sy = ((y as f32 + 0.5) * scale - 0.5).clamp(0.0, (from - 1) as f32);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(from - 1);
            let fy = sy - y0 as f32;
            for x in 0..to {
                let sx = ((x as f32 + 0.5) * scale - 0.5).clamp(0.0, (from - 1) as f32);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(from - 1);
                let fx = sx - x0 as f32;
                let a = data[base_in + y0 * from + x0];
                let b = data[base_in + y0 * from + x1];
                let d = data[base_in + y1 * from + x0];
                let e = data[base_in + y1 * from + x1];
                out[base_out + y * to + x] =
                    a * (1.0 - fy) * (1.0 - fx) + b * (1.0 - fy) * fx + d * fy * (1.0 - fx)
                        + e * fy * fx;
            }
        }
    }
    out
}

/// Apply the policy. Label and dimensions are preserved; the transform is a
/// pure function of (image, policy, rng draws).
pub fn augment(img: &ImageSample, policy: &AugmentationPolicy, rng: &mut impl Rng) -> ImageSample {
    let c = img.channels();
    let s = img.side();

    // Fixed draw order: flip coins, rotation pick, crop scale, crop offsets.
    let do_h = rng.gen_range(0.0f32..1.0) < policy.horizontal_flip_prob;
    let do_v = rng.gen_range(0.0f32..1.0) < policy.vertical_flip_prob;
    let rot = policy.rotation_choices[rng.gen_range(0..policy.rotation_choices.len())];
    let (lo, hi) = policy.crop_scale_range;
    let area = rng.gen_range(lo..=hi);
    let crop_side = ((area.sqrt() * s as f32).round() as usize).clamp(1, s);
    let max_off = s - crop_side;
    let off_x = rng.gen_range(0..=max_off);
    let off_y = rng.gen_range(0..=max_off);

    let mut data = img.pixels.data().to_vec();
    if do_h {
        data = flip_h(&data, c, s);
    }
    if do_v {
        data = flip_v(&data, c, s);
    }
    data = rotate(&data, c, s, rot);
    if crop_side < s {
        let mut cropped = vec![0.0; c * crop_side * crop_side];
        for ch in 0..c {
            for y in 0..crop_side {
                for x in 0..crop_side {
                    cropped[ch * crop_side * crop_side + y * crop_side + x] =
                        data[ch * s * s + (y + off_y) * s + (x + off_x)];
                }
            }
        }
        data = resize_bilinear(&cropped, c, crop_side, s);
    }

    ImageSample::new(
        Tensor::new(vec![c, s, s], data).expect("augment preserves finiteness"),
        img.label,
    )
    .expect("augment preserves dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probe_image() -> ImageSample {
        let s = 8;
        let data: Vec<f32> = (0..3 * s * s).map(|i| (i % 23) as f32 / 23.0).collect();
        ImageSample::new(Tensor::new(vec![3, s, s], data).unwrap(), 1).unwrap()
    }

    fn neutral() -> AugmentationPolicy {
        AugmentationPolicy {
            horizontal_flip_prob: 0.0,
            vertical_flip_prob: 0.0,
            crop_scale_range: (1.0, 1.0),
            rotation_choices: vec![0],
        }
    }

    #[test]
    fn horizontal_flip_is_an_involution() {
        let img = probe_image();
        let policy = AugmentationPolicy {
            horizontal_flip_prob: 1.0,
            ..neutral()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let once = augment(&img, &policy, &mut rng);
        // Column-reversed pixels.
        let s = img.side();
        assert_eq!(
            once.pixels.data()[0],
            img.pixels.data()[s - 1],
            "first row should be reversed"
        );
        let twice = augment(&once, &policy, &mut rng);
        assert_eq!(twice.pixels.data(), img.pixels.data());
        assert_eq!(twice.label, img.label);
    }

    #[test]
    fn rotation_180_twice_restores_image() {
        let img = probe_image();
        let policy = AugmentationPolicy {
            rotation_choices: vec![180],
            ..neutral()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let once = augment(&img, &policy, &mut rng);
        assert_ne!(once.pixels.data(), img.pixels.data());
        let twice = augment(&once, &policy, &mut rng);
        assert_eq!(twice.pixels.data(), img.pixels.data());
    }

    #[test]
    fn full_crop_without_flips_is_identity() {
        let img = probe_image();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = augment(&img, &neutral(), &mut rng);
        assert_eq!(out.pixels.data(), img.pixels.data());
    }

    #[test]
    fn augment_is_deterministic_in_the_rng() {
        let img = probe_image();
        let policy = AugmentationPolicy::default();
        let a = augment(&img, &policy, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment(&img, &policy, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.pixels.data(), b.pixels.data());
        assert_eq!(a.pixels.shape(), img.pixels.shape());
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentationPolicy::default().validate().is_ok());
        let bad = AugmentationPolicy {
            crop_scale_range: (0.0, 1.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentationPolicy {
            rotation_choices: vec![45],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
