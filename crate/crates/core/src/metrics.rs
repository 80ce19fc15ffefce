//! Evaluation metrics: mean angular errors and the scale-invariant
//! intensity error.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean angle in degrees between paired unit vectors.
pub fn mae_light(pred: &[Vector3<f64>], truth: &[Vector3<f64>]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "mae_light over {} predictions and {} references",
            pred.len(),
            truth.len()
        )));
    }
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(a, b)| a.dot(b).clamp(-1.0, 1.0).acos())
        .sum();
    Ok((sum / pred.len() as f64).to_degrees())
}

/// Mean angle in degrees between per-pixel normals over the mask.
/// Both maps are [3,H,W] (a leading singleton dimension is accepted).
pub fn mae_normal<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>, mask: &[bool]) -> Result<f64> {
    let area = mask.len();
    if pred.len() != 3 * area || truth.len() != 3 * area {
        return Err(Error::shape(format!(
            "normal maps must hold 3*{area} values, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let m = mask.iter().filter(|&&v| v).count();
    if m == 0 {
        return Err(Error::invalid("mae_normal over an empty mask"));
    }
    let p = pred.as_slice();
    let t = truth.as_slice();
    let mut sum = 0.0f64;
    for i in 0..area {
        if !mask[i] {
            continue;
        }
        let dot = p[i].as_f64() * t[i].as_f64()
            + p[area + i].as_f64() * t[area + i].as_f64()
            + p[2 * area + i].as_f64() * t[2 * area + i].as_f64();
        sum += dot.clamp(-1.0, 1.0).acos();
    }
    Ok((sum / m as f64).to_degrees())
}

/// Scale-invariant relative intensity error: the global scale s minimizing
/// sum (s*pred - truth)^2 in closed form, then the mean relative residual.
pub fn intensity_error(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::invalid("intensity_error needs matching nonempty inputs"));
    }
    if truth.iter().any(|&e| e <= 0.0) {
        return Err(Error::invalid("reference intensities must be positive"));
    }
    let denom: f64 = pred.iter().map(|&p| p * p).sum();
    if denom == 0.0 {
        return Err(Error::invalid("predicted intensities are all zero"));
    }
    let s: f64 = pred.iter().zip(truth).map(|(&p, &e)| p * e).sum::<f64>() / denom;
    let err: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&p, &e)| (s * p - e).abs() / e)
        .sum::<f64>()
        / pred.len() as f64;
    Ok(err)
}

/// Per-scene evaluation numbers.
#[derive(Debug, Clone)]
pub struct SceneEval {
    pub id: String,
    pub mae_light_deg: f64,
    pub e_err: f64,
    pub mae_normal_deg: f64,
    pub n_images: usize,
    pub mask_pixels: usize,
}

/// Aggregate report over a test split.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub per_scene: Vec<SceneEval>,
}

impl EvalReport {
    pub fn mean_mae_light(&self) -> f64 {
        mean(self.per_scene.iter().map(|s| s.mae_light_deg))
    }

    pub fn mean_e_err(&self) -> f64 {
        mean(self.per_scene.iter().map(|s| s.e_err))
    }

    pub fn mean_mae_normal(&self) -> f64 {
        mean(self.per_scene.iter().map(|s| s.mae_normal_deg))
    }

    /// Machine-parseable `key = value` lines, one metric per line.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("scenes = {}\n", self.per_scene.len()));
        out.push_str(&format!("mean_mae_light_deg = {}\n", self.mean_mae_light()));
        out.push_str(&format!("mean_e_err = {}\n", self.mean_e_err()));
        out.push_str(&format!("mean_mae_normal_deg = {}\n", self.mean_mae_normal()));
        for s in &self.per_scene {
            out.push_str(&format!("{}/mae_light_deg = {}\n", s.id, s.mae_light_deg));
            out.push_str(&format!("{}/e_err = {}\n", s.id, s.e_err));
            out.push_str(&format!("{}/mae_normal_deg = {}\n", s.id, s.mae_normal_deg));
            out.push_str(&format!("{}/n_images = {}\n", s.id, s.n_images));
            out.push_str(&format!("{}/mask_pixels = {}\n", s.id, s.mask_pixels));
        }
        out
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in it {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_directions_have_zero_error() {
        let v = vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 0.0)];
        assert_eq!(mae_light(&v, &v).unwrap(), 0.0);
    }

    #[test]
    fn orthogonal_directions_are_ninety_degrees() {
        let a = vec![Vector3::new(1.0, 0.0, 0.0)];
        let b = vec![Vector3::new(0.0, 1.0, 0.0)];
        assert!((mae_light(&a, &b).unwrap() - 90.0).abs() < 1e-12);
    }

    #[test]
    fn angles_average_arithmetically() {
        // one pair at 0 degrees, one at 60
        let a = vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 0.0, 1.0)];
        let b = vec![
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.75f64.sqrt(), 0.0, 0.5),
        ];
        assert!((mae_light(&a, &b).unwrap() - 30.0).abs() < 1e-9);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(mae_light(&[], &[]).is_err());
    }

    #[test]
    fn antipodal_normals_read_one_eighty() {
        let mut pred = Tensor::<f64>::zeros(&[3, 2, 2]);
        let mut truth = Tensor::<f64>::zeros(&[3, 2, 2]);
        for i in 0..4 {
            pred.as_mut_slice()[8 + i] = -1.0;
            truth.as_mut_slice()[8 + i] = 1.0;
        }
        let mask = vec![true; 4];
        assert!((mae_normal(&pred, &truth, &mask).unwrap() - 180.0).abs() < 1e-9);
        assert_eq!(mae_normal(&truth, &truth, &mask).unwrap(), 0.0);
    }

    #[test]
    fn mae_normal_is_symmetric() {
        use rand::Rng;
        let mut rng = crate::rng::substream(5, "metrics");
        let mut a = Tensor::<f64>::zeros(&[3, 2, 2]);
        let mut b = Tensor::<f64>::zeros(&[3, 2, 2]);
        for i in 0..4 {
            let va = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)).normalize();
            let vb = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)).normalize();
            for c in 0..3 {
                a.as_mut_slice()[c * 4 + i] = va[c];
                b.as_mut_slice()[c * 4 + i] = vb[c];
            }
        }
        let mask = vec![true; 4];
        let ab = mae_normal(&a, &b, &mask).unwrap();
        let ba = mae_normal(&b, &a, &mask).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn intensity_error_is_scale_invariant() {
        let truth = vec![0.5, 1.0, 1.5, 0.7];
        for c in [0.1, 1.0, 3.7, 250.0] {
            let pred: Vec<f64> = truth.iter().map(|&e| c * e).collect();
            assert!(intensity_error(&pred, &truth).unwrap() < 1e-12);
        }
        // scaling the prediction never changes the metric
        let pred = vec![0.4, 1.2, 1.1, 0.9];
        let base = intensity_error(&pred, &truth).unwrap();
        for c in [0.01, 7.3] {
            let scaled: Vec<f64> = pred.iter().map(|&p| c * p).collect();
            assert!((intensity_error(&scaled, &truth).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn worked_intensity_example() {
        // pred=(1,1), truth=(1,2): s = 3/2, so the residuals are
        // |1.5-1|/1 = 0.5 and |1.5-2|/2 = 0.25, averaging 0.375
        let e = intensity_error(&[1.0, 1.0], &[1.0, 2.0]).unwrap();
        assert!((e - 0.375).abs() < 1e-15, "{e}");
    }

    #[test]
    fn constant_prediction_of_constant_truth_is_exact() {
        assert!(intensity_error(&[0.3, 0.3], &[1.1, 1.1]).unwrap() < 1e-15);
    }

    #[test]
    fn zero_predictions_are_rejected() {
        assert!(intensity_error(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn clamping_is_harmless_for_near_unit_inputs() {
        // vectors within 1e-6 of unit norm, pairs at least 1 degree apart:
        // the clamped angle differs from the exactly-normalized angle by
        // well under 0.01 degrees
        use rand::Rng;
        let mut rng = crate::rng::substream(7, "clamp");
        let mut worst = 0.0f64;
        let mut tested = 0;
        while tested < 10_000 {
            let raw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vector3<f64> {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .normalize()
            };
            let a = raw(&mut rng) * (1.0 + rng.random_range(-1e-6..1e-6));
            let b = raw(&mut rng) * (1.0 + rng.random_range(-1e-6..1e-6));
            let exact = (a.normalize().dot(&b.normalize())).clamp(-1.0, 1.0).acos();
            if exact.to_degrees() < 1.0 {
                continue;
            }
            tested += 1;
            let clamped = a.dot(&b).clamp(-1.0, 1.0).acos();
            worst = worst.max((clamped - exact).abs().to_degrees());
        }
        assert!(worst < 0.01, "worst clamp-induced change {worst} deg");
    }

    #[test]
    fn report_serializes_one_metric_per_line() {
        let r = EvalReport {
            per_scene: vec![SceneEval {
                id: "scene_0000".into(),
                mae_light_deg: 12.5,
                e_err: 0.2,
                mae_normal_deg: 20.0,
                n_images: 96,
                mask_pixels: 300,
            }],
        };
        let text = r.serialize();
        assert!(text.contains("mean_mae_normal_deg = 20"));
        assert!(text.contains("scene_0000/mae_light_deg = 12.5"));
        for line in text.lines() {
            assert!(line.contains('='), "line `{line}`");
        }
    }
}
