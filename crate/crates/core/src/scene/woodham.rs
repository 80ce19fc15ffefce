//! Classical calibrated photometric stereo: per-pixel least squares on the
//! linear Lambertian model.

use nalgebra::{DMatrix, Matrix3, Vector3};

use super::{LightSet, PSObservation};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const COND_THRESHOLD: f64 = 1e-8;

/// Recover per-pixel normals and albedo by least squares against the
/// intensity-scaled light matrix. Needs at least 3 lights of full rank.
pub fn woodham_solve(obs: &PSObservation, lights: &LightSet) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let n = lights.len();
    if n < 3 {
        return Err(Error::RankDeficient(format!("{n} lights, need at least 3")));
    }
    let (imgs, _, h, w) = obs.images.dims4()?;
    if imgs != n {
        return Err(Error::shape(format!("{imgs} images for {n} lights")));
    }
    // scaled light matrix S (3 x n), columns e_j * l_j
    let mut s = DMatrix::<f64>::zeros(3, n);
    for (j, (dir, &e)) in lights.dirs.iter().zip(&lights.intensities).enumerate() {
        s.set_column(j, &(dir * e).column(0).into_owned());
    }
    let svd = s.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax == 0.0 || smin / smax < COND_THRESHOLD {
        return Err(Error::RankDeficient(format!(
            "scaled light matrix is ill-conditioned: singular values {:?} (min/max ratio {:.3e}, threshold {:.1e})",
            svd.singular_values.as_slice(),
            if smax > 0.0 { smin / smax } else { 0.0 },
            COND_THRESHOLD,
        )));
    }
    // normal equations: (S S^T) x = S I_i
    let mut sst = Matrix3::<f64>::zeros();
    for j in 0..n {
        let c = s.column(j);
        sst += c * c.transpose();
    }
    let sst_inv = sst
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient("normal equations are singular".into()))?;

    let area = h * w;
    let mut normals = Tensor::zeros(&[3, h, w]);
    let mut albedo = Tensor::zeros(&[h, w]);
    let data = obs.images.as_slice();
    for i in 0..area {
        if !obs.mask[i] {
            continue;
        }
        let mut rhs = Vector3::zeros();
        for j in 0..n {
            rhs += s.column(j) * data[j * area + i];
        }
        let x: Vector3<f64> = sst_inv * rhs;
        let len = x.norm();
        let ns = normals.as_mut_slice();
        if len == 0.0 {
            ns[2 * area + i] = 1.0;
            continue;
        }
        ns[i] = x.x / len;
        ns[area + i] = x.y / len;
        ns[2 * area + i] = x.z / len;
        albedo.as_mut_slice()[i] = len;
    }
    Ok((normals, albedo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::scene::{generate_blob_scene, render, sample_upper_hemisphere, NoiseSpec, ObjectScene};

    #[test]
    fn two_lights_are_rejected() {
        let mut rng = substream(31, "scene");
        let scene = generate_blob_scene(8, 2, &mut rng).unwrap();
        let lights = sample_upper_hemisphere(2, &mut rng).unwrap();
        let obs = render(&scene, &lights, &NoiseSpec::noiseless_linear(), None).unwrap();
        assert!(matches!(
            woodham_solve(&obs, &lights),
            Err(crate::error::Error::RankDeficient(_))
        ));
    }

    #[test]
    fn coplanar_lights_are_rejected_with_conditioning_report() {
        let mut rng = substream(32, "scene");
        let scene = generate_blob_scene(8, 2, &mut rng).unwrap();
        // all lights in the x-z plane: rank 2
        let dirs = vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.6, 0.0, 0.8),
            Vector3::new(-0.6, 0.0, 0.8),
        ];
        let lights = LightSet { dirs, intensities: vec![1.0; 4] };
        let obs = render(&scene, &lights, &NoiseSpec::noiseless_linear(), None).unwrap();
        let err = woodham_solve(&obs, &lights).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("singular values"), "{msg}");
    }

    #[test]
    fn axis_aligned_unit_lights_read_off_the_normal() {
        // rho=1, n=(0,0,1): with unit-intensity axis lights the scaled
        // normal is the measurement vector itself
        let mut normals = Tensor::zeros(&[3, 1, 1]);
        normals.as_mut_slice()[2] = 1.0;
        let scene = ObjectScene {
            normals,
            albedo: Tensor::from_vec(&[1, 1], vec![1.0]).unwrap(),
            mask: vec![true],
            height: 1,
            width: 1,
        };
        let lights = LightSet {
            dirs: vec![
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
                Vector3::new(0.0, 0.0, 1.0),
            ],
            intensities: vec![1.0; 3],
        };
        let obs = render(&scene, &lights, &NoiseSpec::noiseless_linear(), None).unwrap();
        assert_eq!(obs.images.as_slice(), &[0.0, 0.0, 1.0]);
        let (rec_normals, rec_albedo) = woodham_solve(&obs, &lights).unwrap();
        assert!((rec_normals.as_slice()[2] - 1.0).abs() < 1e-12);
        assert!((rec_albedo.as_slice()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn solver_inverts_noiseless_renders() {
        let mut rng = substream(33, "scene");
        for _ in 0..10 {
            let scene = generate_blob_scene(16, 4, &mut rng).unwrap();
            let lights = sample_upper_hemisphere(4, &mut rng).unwrap();
            let obs = render(&scene, &lights, &NoiseSpec::noiseless_linear(), None).unwrap();
            let (rec, _) = woodham_solve(&obs, &lights).unwrap();
            let area = 16 * 16;
            let mut worst = 0.0f64;
            for i in 0..area {
                if !scene.mask[i] {
                    continue;
                }
                let a = scene.normal_at(i);
                let b = Vector3::new(rec.as_slice()[i], rec.as_slice()[area + i], rec.as_slice()[2 * area + i]);
                let angle = a.dot(&b).clamp(-1.0, 1.0).acos().to_degrees();
                worst = worst.max(angle);
            }
            assert!(worst < 1e-3, "worst angular error {worst} deg");
        }
    }
}
