//! Geometric patch augmentation: flips, random affine transforms and
//! perspective distortions. No photometric transforms.

use ndarray::Array3;
use rand::Rng;

use super::Patch;
use crate::seed::{derive_seed, rng_for};

/// Parameter ranges for the random transforms. Fixed defaults, recorded in
/// run metadata via the pipeline config snapshot.
const MAX_ROTATION_DEG: f64 = 25.0;
const SCALE_RANGE: (f64, f64) = (0.9, 1.1);
const MAX_TRANSLATION_FRAC: f64 = 0.10;
const MAX_CORNER_JITTER_FRAC: f64 = 0.10;

/// Exact horizontal mirror. Applying it twice recovers the input.
pub fn hflip(pixels: &Array3<u8>) -> Array3<u8> {
    let (h, w, c) = pixels.dim();
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| pixels[[y, w - 1 - x, ch]])
}

/// Exact vertical mirror.
pub fn vflip(pixels: &Array3<u8>) -> Array3<u8> {
    let (h, w, c) = pixels.dim();
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| pixels[[h - 1 - y, x, ch]])
}

/// Inverse-mapped bilinear resampling with clamp-to-edge padding. `map_back`
/// takes output pixel-center coordinates (x, y) and returns the source
/// sampling position.
fn warp(pixels: &Array3<u8>, map_back: impl Fn(f64, f64) -> (f64, f64)) -> Array3<u8> {
    let (h, w, c) = pixels.dim();
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = map_back(x as f64, y as f64);
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            for ch in 0..c {
                let v00 = pixels[[y0, x0, ch]] as f64;
                let v01 = pixels[[y0, x1, ch]] as f64;
                let v10 = pixels[[y1, x0, ch]] as f64;
                let v11 = pixels[[y1, x1, ch]] as f64;
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bottom = v10 * (1.0 - fx) + v11 * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out[[y, x, ch]] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Random affine: rotation, isotropic scale and translation about the patch
/// center, sampled from the fixed ranges above.
fn random_affine(pixels: &Array3<u8>, rng: &mut impl Rng) -> Array3<u8> {
    let (h, w, _) = pixels.dim();
    let theta = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG).to_radians();
    let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
    let tx = rng.random_range(-MAX_TRANSLATION_FRAC..=MAX_TRANSLATION_FRAC) * w as f64;
    let ty = rng.random_range(-MAX_TRANSLATION_FRAC..=MAX_TRANSLATION_FRAC) * h as f64;
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    // Inverse of translate(t) . rotate_scale(theta, s) about the center.
    let (sin, cos) = theta.sin_cos();
    let inv_scale = 1.0 / scale;
    warp(pixels, move |x, y| {
        let dx = x - cx - tx;
        let dy = y - cy - ty;
        let sx = inv_scale * (cos * dx + sin * dy) + cx;
        let sy = inv_scale * (-sin * dx + cos * dy) + cy;
        (sx, sy)
    })
}

/// Random perspective distortion: each source corner jitters independently,
/// and the output square is resampled from the jittered quad.
fn random_perspective(pixels: &Array3<u8>, rng: &mut impl Rng) -> Array3<u8> {
    let (h, w, _) = pixels.dim();
    let jw = MAX_CORNER_JITTER_FRAC * w as f64;
    let jh = MAX_CORNER_JITTER_FRAC * h as f64;
    let corners = [
        (0.0, 0.0),
        (w as f64 - 1.0, 0.0),
        (w as f64 - 1.0, h as f64 - 1.0),
        (0.0, h as f64 - 1.0),
    ];
    let jittered: Vec<(f64, f64)> = corners
        .iter()
        .map(|&(x, y)| {
            (
                x + rng.random_range(-jw..=jw),
                y + rng.random_range(-jh..=jh),
            )
        })
        .collect();
    let homography = homography_from_corners(&corners, &jittered);
    warp(pixels, move |x, y| apply_homography(&homography, x, y))
}

/// Solves the 3x3 projective transform mapping `src[i]` to `dst[i]` with the
/// usual h22 = 1 normalization.
fn homography_from_corners(src: &[(f64, f64); 4], dst: &[(f64, f64)]) -> [f64; 9] {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let (x, y) = src[i];
        let (u, v) = dst[i];
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -x * u, -y * u, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -x * v, -y * v, v];
    }
    let sol = solve8(&mut a);
    [sol[0], sol[1], sol[2], sol[3], sol[4], sol[5], sol[6], sol[7], 1.0]
}

/// Gaussian elimination with partial pivoting on an 8x8 system stored as
/// augmented rows.
fn solve8(a: &mut [[f64; 9]; 8]) -> [f64; 8] {
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        let diag = a[col][col];
        let pivot_row = a[col];
        for row in a.iter_mut().skip(col + 1) {
            let factor = row[col] / diag;
            for (entry, pivot) in row[col..9].iter_mut().zip(&pivot_row[col..9]) {
                *entry -= factor * pivot;
            }
        }
    }
    let mut x = [0.0f64; 8];
    for row in (0..8).rev() {
        let mut acc = a[row][8];
        for k in row + 1..8 {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    x
}

fn apply_homography(h: &[f64; 9], x: f64, y: f64) -> (f64, f64) {
    let denom = h[6] * x + h[7] * y + h[8];
    (
        (h[0] * x + h[1] * y + h[2]) / denom,
        (h[3] * x + h[4] * y + h[5]) / denom,
    )
}

/// Produces exactly `variants` augmented copies of `patch`, each from a
/// randomly parameterized transform. Deterministic given `(seed, patch_id)`.
pub fn augment_patch(patch: &Patch, variants: usize, seed: u64) -> Vec<Patch> {
    let mut rng = rng_for(derive_seed(seed, &format!("augment/{}", patch.patch_id)));
    (0..variants)
        .map(|k| {
            let pixels = match rng.random_range(0..4u8) {
                0 => hflip(&patch.pixels),
                1 => vflip(&patch.pixels),
                2 => random_affine(&patch.pixels, &mut rng),
                _ => random_perspective(&patch.pixels, &mut rng),
            };
            Patch {
                patch_id: format!("{}_a{}", patch.patch_id, k),
                pixels,
                label: patch.label.clone(),
                view: patch.view,
                source_image_id: patch.source_image_id.clone(),
                specimen_id: patch.specimen_id.clone(),
                augmented_from: Some(patch.patch_id.clone()),
            }
        })
        .collect()
}
