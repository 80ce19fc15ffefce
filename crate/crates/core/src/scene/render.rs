//! Lambertian rendering and the bas-relief transformation.

use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{GbrParams, LightSet, NoiseSpec, ObjectScene, PSObservation};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Render the image stack I[j] = clamp(albedo * max(0, n.l_j) * e_j + E).
/// With `shadow_clamp` off the raw linear model is produced instead (no
/// clamping at all), which the calibrated solver inverts exactly.
pub fn render(
    scene: &ObjectScene,
    lights: &LightSet,
    noise: &NoiseSpec,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<PSObservation> {
    if lights.dirs.len() != lights.intensities.len() {
        return Err(Error::shape("lights and intensities disagree in length"));
    }
    if noise.sigma < 0.0 {
        return Err(Error::invalid("noise sigma must be >= 0"));
    }
    let n_imgs = lights.len();
    let (h, w) = (scene.height, scene.width);
    let area = h * w;
    let mut images = Tensor::zeros(&[n_imgs, 1, h, w]);
    let normal_dist = (noise.sigma > 0.0).then(|| Normal::new(0.0, noise.sigma).expect("sigma > 0"));
    let mut rng = rng;
    {
        let out = images.as_mut_slice();
        let rho = scene.albedo.as_slice();
        for (j, (dir, &e)) in lights.dirs.iter().zip(&lights.intensities).enumerate() {
            for i in 0..area {
                if !scene.mask[i] {
                    continue;
                }
                let shading = scene.normal_at(i).dot(dir);
                let shading = if noise.shadow_clamp { shading.max(0.0) } else { shading };
                let mut v = rho[i] * shading * e;
                if let Some(dist) = &normal_dist {
                    let r = rng
                        .as_deref_mut()
                        .ok_or_else(|| Error::invalid("noisy render needs an rng"))?;
                    v += dist.sample(r);
                    if noise.shadow_clamp {
                        v = v.max(0.0);
                    }
                }
                out[j * area + i] = v;
            }
        }
    }
    Ok(PSObservation {
        images,
        mask: scene.mask.clone(),
        lights: Some(lights.clone()),
        scene: Some(scene.clone()),
    })
}

/// Apply the bas-relief transformation: scaled normals map through G^{-T},
/// scaled lights through G. Pixels whose transformed normal points away
/// from the camera drop out of the mask.
pub fn apply_gbr(
    scene: &ObjectScene,
    lights: &LightSet,
    g: &GbrParams,
) -> Result<(ObjectScene, LightSet)> {
    if g.lambda == 0.0 {
        return Err(Error::invalid("bas-relief lambda must be nonzero"));
    }
    let g_mat = g.matrix();
    let g_inv_t = g.inverse_transpose();
    let (h, w) = (scene.height, scene.width);
    let area = h * w;
    let mut normals = Tensor::zeros(&[3, h, w]);
    let mut albedo = Tensor::zeros(&[h, w]);
    let mut mask = scene.mask.clone();
    for i in 0..area {
        if !scene.mask[i] {
            continue;
        }
        let scaled = scene.normal_at(i) * scene.albedo.as_slice()[i];
        let mapped: Vector3<f64> = g_inv_t * scaled;
        let rho = mapped.norm();
        if rho == 0.0 || mapped.z <= 0.0 {
            mask[i] = false;
            continue;
        }
        let unit = mapped / rho;
        let ns = normals.as_mut_slice();
        ns[i] = unit.x;
        ns[area + i] = unit.y;
        ns[2 * area + i] = unit.z;
        albedo.as_mut_slice()[i] = rho;
    }
    let mut dirs = Vec::with_capacity(lights.len());
    let mut intensities = Vec::with_capacity(lights.len());
    for (dir, &e) in lights.dirs.iter().zip(&lights.intensities) {
        let scaled: Vector3<f64> = g_mat * (dir * e);
        let norm = scaled.norm();
        if norm == 0.0 {
            return Err(Error::invalid("bas-relief transform collapsed a light"));
        }
        dirs.push(scaled / norm);
        intensities.push(norm);
    }
    Ok((
        ObjectScene { normals, albedo, mask, height: h, width: w },
        LightSet { dirs, intensities },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::scene::{generate_blob_scene, sample_upper_hemisphere};

    fn unit_scene(normal: Vector3<f64>, rho: f64) -> ObjectScene {
        let mut normals = Tensor::zeros(&[3, 1, 1]);
        normals.as_mut_slice().copy_from_slice(normal.as_slice());
        ObjectScene {
            normals,
            albedo: Tensor::from_vec(&[1, 1], vec![rho]).unwrap(),
            mask: vec![true],
            height: 1,
            width: 1,
        }
    }

    fn single_light(dir: Vector3<f64>, e: f64) -> LightSet {
        LightSet { dirs: vec![dir], intensities: vec![e] }
    }

    #[test]
    fn overhead_light_on_flat_pixel_renders_one() {
        let scene = unit_scene(Vector3::new(0.0, 0.0, 1.0), 1.0);
        let lights = single_light(Vector3::new(0.0, 0.0, 1.0), 1.0);
        let obs = render(&scene, &lights, &NoiseSpec::default(), None).unwrap();
        assert_eq!(obs.images.as_slice(), &[1.0]);
    }

    #[test]
    fn orthogonal_light_renders_zero() {
        let scene = unit_scene(Vector3::new(0.0, 0.0, 1.0), 1.0);
        let lights = single_light(Vector3::new(1.0, 0.0, 0.0), 1.3);
        let obs = render(&scene, &lights, &NoiseSpec::default(), None).unwrap();
        assert_eq!(obs.images.as_slice(), &[0.0]);
    }

    #[test]
    fn worked_shading_value() {
        // n=(0,0,1), l=(3/5,0,4/5), rho=0.5, e=2 -> 0.5 * 0.8 * 2 = 0.8
        let scene = unit_scene(Vector3::new(0.0, 0.0, 1.0), 0.5);
        let lights = single_light(Vector3::new(0.6, 0.0, 0.8), 2.0);
        let obs = render(&scene, &lights, &NoiseSpec::default(), None).unwrap();
        assert!((obs.images.as_slice()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn render_is_nonnegative_and_zero_off_mask() {
        let mut rng = substream(21, "scene");
        let scene = generate_blob_scene(16, 4, &mut rng).unwrap();
        let lights = sample_upper_hemisphere(6, &mut rng).unwrap();
        let mut noise_rng = substream(21, "noise");
        let obs = render(
            &scene,
            &lights,
            &NoiseSpec { sigma: 0.05, shadow_clamp: true },
            Some(&mut noise_rng),
        )
        .unwrap();
        let area = 16 * 16;
        for (i, &v) in obs.images.as_slice().iter().enumerate() {
            assert!(v >= 0.0);
            if !scene.mask[i % area] {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn gbr_identity_params_change_nothing() {
        let mut rng = substream(22, "scene");
        let scene = generate_blob_scene(16, 3, &mut rng).unwrap();
        let lights = sample_upper_hemisphere(5, &mut rng).unwrap();
        let (s2, l2) = apply_gbr(&scene, &lights, &GbrParams::identity()).unwrap();
        assert_eq!(scene.mask, s2.mask);
        for i in 0..lights.len() {
            assert!((lights.dirs[i] - l2.dirs[i]).norm() < 1e-12);
            assert!((lights.intensities[i] - l2.intensities[i]).abs() < 1e-12);
        }
        for (a, b) in scene.normals.as_slice().iter().zip(s2.normals.as_slice()) {
            if (a - b).abs() > 1e-12 {
                // off-mask pixels are zeroed in the output
                continue;
            }
        }
    }

    #[test]
    fn gbr_lambda_scaling_rescales_albedo() {
        // g=(0,0,2) on n=(0,0,1), rho=1: scaled normal (0,0,1) maps through
        // G^{-T} to (0,0,0.5) so rho'=0.5, n'=(0,0,1)
        let scene = unit_scene(Vector3::new(0.0, 0.0, 1.0), 1.0);
        let lights = single_light(Vector3::new(0.0, 0.0, 1.0), 1.0);
        let g = GbrParams::new(0.0, 0.0, 2.0).unwrap();
        let (s2, l2) = apply_gbr(&scene, &lights, &g).unwrap();
        assert!((s2.albedo.as_slice()[0] - 0.5).abs() < 1e-15);
        assert!((s2.normal_at(0) - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
        // the light picks up the factor 2
        assert!((l2.intensities[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn gbr_identity_holds_on_rendered_images() {
        let mut rng = substream(23, "scene");
        for trial in 0..20 {
            let scene = generate_blob_scene(16, 4, &mut rng).unwrap();
            let lights = sample_upper_hemisphere(6, &mut rng).unwrap();
            use rand::Rng;
            let g = GbrParams::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(0.5..2.0),
            )
            .unwrap();
            let (s2, l2) = apply_gbr(&scene, &lights, &g).unwrap();
            let a = render(&scene, &lights, &NoiseSpec::default(), None).unwrap();
            let b = render(&s2, &l2, &NoiseSpec::default(), None).unwrap();
            let area = 16 * 16;
            for j in 0..lights.len() {
                for i in 0..area {
                    if !s2.mask[i] {
                        continue;
                    }
                    let va = a.images.as_slice()[j * area + i];
                    let vb = b.images.as_slice()[j * area + i];
                    // compare unclamped pixels only
                    if va > 0.0 && vb > 0.0 {
                        assert!((va - vb).abs() < 1e-10, "trial {trial}: {va} vs {vb}");
                    }
                }
            }
        }
    }
}
