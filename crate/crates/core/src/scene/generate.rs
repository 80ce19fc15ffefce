//! Light sampling and blob height-field scenes.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use super::{dir_from_angles, LightSet, ObjectScene};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Draw `count` lights with azimuth uniform in [0, pi], elevation uniform
/// in [-pi/2, pi/2], intensity uniform in [0.2, 2].
pub fn sample_upper_hemisphere(count: usize, rng: &mut ChaCha8Rng) -> Result<LightSet> {
    if count < 1 {
        return Err(Error::invalid("light count must be >= 1"));
    }
    let mut dirs = Vec::with_capacity(count);
    let mut intensities = Vec::with_capacity(count);
    for _ in 0..count {
        let phi: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let theta: f64 = rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
        dirs.push(dir_from_angles(phi, theta));
        intensities.push(rng.random_range(0.2..2.0));
    }
    let set = LightSet { dirs, intensities };
    set.validate()?;
    Ok(set)
}

struct Blob {
    cx: f64,
    cy: f64,
    inv_two_sigma_sq: f64,
    inv_sigma_sq: f64,
    amp: f64,
    albedo: f64,
}

fn draw_blobs(count: usize, rng: &mut ChaCha8Rng) -> Vec<Blob> {
    (0..count)
        .map(|_| {
            let sigma: f64 = rng.random_range(0.3..0.6);
            Blob {
                cx: rng.random_range(-0.5..0.5),
                cy: rng.random_range(-0.5..0.5),
                inv_two_sigma_sq: 1.0 / (2.0 * sigma * sigma),
                inv_sigma_sq: 1.0 / (sigma * sigma),
                amp: rng.random_range(0.3..0.7),
                albedo: rng.random_range(0.3..1.0),
            }
        })
        .collect()
}

const MASK_THRESHOLD_FRAC: f64 = 0.2;
const MIN_MASK_FRAC: f64 = 0.08;
const MAX_RETRIES: u64 = 16;

/// Sum random positive bumps into a height field over [-1,1]^2; normals
/// come from the analytic gradient, the mask from a height threshold, and
/// the albedo is constant per nearest-bump region.
pub fn generate_blob_scene(resolution: usize, blob_count: usize, rng: &mut ChaCha8Rng) -> Result<ObjectScene> {
    if resolution < 8 {
        return Err(Error::invalid(format!("resolution {resolution} < 8")));
    }
    if blob_count < 1 {
        return Err(Error::invalid("blob count must be >= 1"));
    }
    for _ in 0..MAX_RETRIES {
        let blobs = draw_blobs(blob_count, rng);
        if let Some(scene) = try_build(resolution, &blobs) {
            return Ok(scene);
        }
        // degenerate mask: redraw from a sub-seed so the parent stream
        // stays aligned across retries
        let reseed: u64 = rng.random();
        *rng = ChaCha8Rng::seed_from_u64(reseed);
    }
    Err(Error::invalid("could not generate a scene with a usable mask"))
}

fn try_build(resolution: usize, blobs: &[Blob]) -> Option<ObjectScene> {
    let (h, w) = (resolution, resolution);
    let area = h * w;
    let mut height_field = vec![0.0f64; area];
    let mut normals = Tensor::zeros(&[3, h, w]);
    let mut albedo = Tensor::zeros(&[h, w]);
    let mut z_max = 0.0f64;
    for r in 0..h {
        let y = -1.0 + 2.0 * (r as f64 + 0.5) / h as f64;
        for c in 0..w {
            let x = -1.0 + 2.0 * (c as f64 + 0.5) / w as f64;
            let mut z = 0.0;
            let mut zx = 0.0;
            let mut zy = 0.0;
            let mut best = (f64::INFINITY, 0.0f64);
            for b in blobs {
                let dx = x - b.cx;
                let dy = y - b.cy;
                let r2 = dx * dx + dy * dy;
                let g = b.amp * (-r2 * b.inv_two_sigma_sq).exp();
                z += g;
                zx += -dx * b.inv_sigma_sq * g;
                zy += -dy * b.inv_sigma_sq * g;
                if r2 < best.0 {
                    best = (r2, b.albedo);
                }
            }
            let idx = r * w + c;
            height_field[idx] = z;
            z_max = z_max.max(z);
            let n = Vector3::new(-zx, -zy, 1.0).normalize();
            let ns = normals.as_mut_slice();
            ns[idx] = n.x;
            ns[area + idx] = n.y;
            ns[2 * area + idx] = n.z;
            albedo.as_mut_slice()[idx] = best.1;
        }
    }
    let threshold = MASK_THRESHOLD_FRAC * z_max;
    let mask: Vec<bool> = height_field.iter().map(|&z| z > threshold).collect();
    let count = mask.iter().filter(|&&m| m).count();
    if (count as f64) < MIN_MASK_FRAC * area as f64 {
        return None;
    }
    Some(ObjectScene { normals, albedo, mask, height: h, width: w })
}
