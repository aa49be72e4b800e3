//! Per-patch, per-channel whitening.

use ndarray::Array3;

use super::Patch;
use crate::numeric::Scalar;

/// A whitened patch: per channel, values have mean 0 and standard deviation 1
/// unless the channel's deviation fell below the floor (then flagged and the
/// channel is all zeros for a constant input).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedPatch<T: Scalar> {
    pub values: Array3<T>,
    /// Per-channel mean used for whitening.
    pub mean: [f64; 3],
    /// Per-channel standard deviation before flooring.
    pub std: [f64; 3],
    /// Channels where the sigma floor was applied.
    pub floored: [bool; 3],
}

/// Whitens a patch: output channel i is `(I_i - m_i) / max(sigma_i, floor)`,
/// with the moments computed over that patch's channel. Statistics are
/// accumulated in double precision regardless of the output element type.
pub fn whiten_patch<T: Scalar>(patch: &Patch, sigma_floor: f64) -> NormalizedPatch<T> {
    let (h, w, _) = patch.pixels.dim();
    let count = (h * w) as f64;
    let mut mean = [0.0f64; 3];
    let mut std = [0.0f64; 3];
    let mut floored = [false; 3];

    for c in 0..3 {
        let mut sum = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                sum += patch.pixels[[y, x, c]] as f64;
            }
        }
        let m = sum / count;
        let mut sq = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                let d = patch.pixels[[y, x, c]] as f64 - m;
                sq += d * d;
            }
        }
        mean[c] = m;
        std[c] = (sq / count).sqrt();
        floored[c] = std[c] < sigma_floor;
    }

    let mut values = Array3::zeros((h, w, 3));
    for c in 0..3 {
        let denom = std[c].max(sigma_floor);
        for y in 0..h {
            for x in 0..w {
                let v = (patch.pixels[[y, x, c]] as f64 - mean[c]) / denom;
                values[[y, x, c]] = T::from_f64(v);
            }
        }
    }
    NormalizedPatch {
        values,
        mean,
        std,
        floored,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{StoneClass, ViewKind};
    use crate::seed::rng_for;
    use ndarray::Array3;
    use rand::Rng;

    fn patch_from(pixels: Array3<u8>) -> Patch {
        Patch {
            patch_id: "p".into(),
            pixels,
            label: StoneClass::from("WW"),
            view: ViewKind::Surface,
            source_image_id: "i".into(),
            specimen_id: "s".into(),
            augmented_from: None,
        }
    }

    /// Independent recomputation of the output moments, in f64.
    fn channel_moments<T: Scalar>(values: &Array3<T>, c: usize) -> (f64, f64) {
        let (h, w, _) = values.dim();
        let n = (h * w) as f64;
        let mean = values
            .slice(ndarray::s![.., .., c])
            .iter()
            .map(|v| v.as_f64())
            .sum::<f64>()
            / n;
        let var = values
            .slice(ndarray::s![.., .., c])
            .iter()
            .map(|v| (v.as_f64() - mean).powi(2))
            .sum::<f64>()
            / n;
        (mean, var.sqrt())
    }

    #[test]
    fn constant_channel_is_zeroed_and_flagged() {
        let mut pixels = Array3::zeros((16, 16, 3));
        // Channel 0 constant 40, others varying.
        let mut rng = rng_for(1);
        for y in 0..16 {
            for x in 0..16 {
                pixels[[y, x, 0]] = 40;
                pixels[[y, x, 1]] = rng.random();
                pixels[[y, x, 2]] = rng.random();
            }
        }
        let out: NormalizedPatch<f32> = whiten_patch(&patch_from(pixels), 1e-6);
        assert!(out.floored[0]);
        assert!(!out.floored[1] && !out.floored[2]);
        assert!(out
            .values
            .slice(ndarray::s![.., .., 0])
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_channel_maps_to_plus_minus_one() {
        let mut pixels = Array3::zeros((2, 2, 3));
        // Each channel: {0, 2} equally frequent.
        for c in 0..3 {
            pixels[[0, 0, c]] = 0;
            pixels[[0, 1, c]] = 2;
            pixels[[1, 0, c]] = 0;
            pixels[[1, 1, c]] = 2;
        }
        let out: NormalizedPatch<f64> = whiten_patch(&patch_from(pixels), 1e-6);
        for c in 0..3 {
            assert_eq!(out.values[[0, 0, c]], -1.0);
            assert_eq!(out.values[[0, 1, c]], 1.0);
        }
    }

    #[test]
    fn random_patch_moments_hit_zero_one_within_1e5() {
        let mut rng = rng_for(7);
        let pixels = Array3::from_shape_fn((64, 64, 3), |_| rng.random());
        let out: NormalizedPatch<f32> = whiten_patch(&patch_from(pixels), 1e-6);
        for c in 0..3 {
            let (mean, std) = channel_moments(&out.values, c);
            assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
            assert!((std - 1.0).abs() < 1e-5, "channel {c} std {std}");
        }
    }
}
