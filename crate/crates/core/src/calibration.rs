//! Sensor calibration: IMU offsets at rest and the affine UWB range model
//! `d_raw = a * d + b + noise`, fitted with RANSAC against ground truth.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{UnitQuat, Vec3};
use crate::orientation::{GravityModel, ImuSample};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("rest window too short: {samples} samples over {duration:.3} s (need >= 100 samples and >= 1 s)")]
    WindowTooShort { samples: usize, duration: f64 },
    #[error("motion detected during rest window: {0}")]
    MotionDetected(String),
    #[error("need at least {needed} range pairs, got {got}")]
    TooFewPairs { needed: usize, got: usize },
    #[error("range diversity {span:.3} m is below the required {needed:.3} m")]
    InsufficientSpan { span: f64, needed: f64 },
    #[error("calibration failed: {0}")]
    Failed(String),
    #[error("invalid calibration: {0}")]
    Invalid(String),
    #[error("cannot read calibration file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed calibration file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize calibration: {0}")]
    Serialize(#[from] toml::ser::Error),
}

/// Constant sensor offsets measured at rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuBias {
    pub accel_offset: Vec3,
    pub gyro_offset: Vec3,
}

impl ImuBias {
    pub fn apply(&self, sample: &ImuSample) -> ImuSample {
        ImuSample {
            accel: sample.accel - self.accel_offset,
            gyro: sample.gyro - self.gyro_offset,
            ..*sample
        }
    }
}

pub const MIN_REST_SAMPLES: usize = 100;
pub const MIN_REST_DURATION: f64 = 1.0;
/// Mean angular rate at or above this is treated as rotation, not bias.
pub const MAX_GYRO_OFFSET: f64 = 0.1;
const MAX_GYRO_VARIANCE: f64 = 1e-3;
const MAX_ACCEL_VARIANCE: f64 = 0.05;

/// Offsets from a rest window, assuming the device lies level.
pub fn estimate_imu_bias(samples: &[ImuSample], g: &GravityModel) -> Result<ImuBias, CalibrationError> {
    estimate_imu_bias_with_attitude(samples, g, &UnitQuat::identity())
}

/// Offsets from a rest window with a known static attitude.
pub fn estimate_imu_bias_with_attitude(
    samples: &[ImuSample],
    g: &GravityModel,
    attitude: &UnitQuat,
) -> Result<ImuBias, CalibrationError> {
    let n = samples.len();
    let duration = rest_duration(samples);
    if n < MIN_REST_SAMPLES || duration < MIN_REST_DURATION - 1e-9 {
        return Err(CalibrationError::WindowTooShort { samples: n, duration });
    }
    let (gyro_mean, gyro_var) = mean_var(samples.iter().map(|s| s.gyro));
    let (accel_mean, accel_var) = mean_var(samples.iter().map(|s| s.accel));
    if gyro_var.max() > MAX_GYRO_VARIANCE {
        return Err(CalibrationError::MotionDetected(format!(
            "gyro variance {:.3e} (rad/s)^2",
            gyro_var.max()
        )));
    }
    if accel_var.max() > MAX_ACCEL_VARIANCE {
        return Err(CalibrationError::MotionDetected(format!(
            "accelerometer variance {:.3e} (m/s^2)^2",
            accel_var.max()
        )));
    }
    if gyro_mean.norm() >= MAX_GYRO_OFFSET {
        return Err(CalibrationError::MotionDetected(format!(
            "mean angular rate {:.3} rad/s",
            gyro_mean.norm()
        )));
    }
    Ok(ImuBias {
        accel_offset: accel_mean - g.body_frame(attitude),
        gyro_offset: gyro_mean,
    })
}

fn rest_duration(samples: &[ImuSample]) -> f64 {
    match (samples.first(), samples.last()) {
        (Some(a), Some(b)) if samples.len() > 1 => {
            let span = b.timestamp - a.timestamp;
            // each sample stands for one sampling interval
            span + span / (samples.len() - 1) as f64
        }
        _ => 0.0,
    }
}

fn mean_var(values: impl Iterator<Item = Vec3> + Clone) -> (Vec3, Vec3) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().fold(Vec3::zeros(), |acc, v| acc + v) / n;
    let var = values.fold(Vec3::zeros(), |acc, v| {
        let d = v - mean;
        acc + d.component_mul(&d)
    }) / n;
    (mean, var)
}

/// Affine range model `d_raw = a * d + b`, plus residual spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UwbCalibration {
    pub a: f64,
    pub b: f64,
    pub sigma_d: f64,
}

impl Default for UwbCalibration {
    fn default() -> Self {
        Self {
            a: 1.0,
            b: 0.0,
            sigma_d: 0.116,
        }
    }
}

impl UwbCalibration {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if !(0.8..=1.2).contains(&self.a) {
            return Err(CalibrationError::Invalid(format!("scale a = {} outside [0.8, 1.2]", self.a)));
        }
        if !self.b.is_finite() {
            return Err(CalibrationError::Invalid("offset b is not finite".into()));
        }
        if !(self.sigma_d > 0.0) || !self.sigma_d.is_finite() {
            return Err(CalibrationError::Invalid(format!("sigma_d = {} must be positive", self.sigma_d)));
        }
        Ok(())
    }

    /// Maps a raw range back to the calibrated distance.
    pub fn invert(&self, d_raw: f64) -> f64 {
        (d_raw - self.b) / self.a
    }

    pub fn to_toml(&self) -> Result<String, CalibrationError> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self, CalibrationError> {
        let cal: Self = toml::from_str(text)?;
        cal.validate()?;
        Ok(cal)
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        let text = std::fs::read_to_string(path).map_err(|source| CalibrationError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        std::fs::write(path, self.to_toml()?).map_err(|source| CalibrationError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier threshold in units of the robust residual scale.
    pub threshold_multiplier: f64,
    pub min_inlier_fraction: f64,
    pub min_pairs: usize,
    pub min_span: f64,
    /// Residual quantile the scale is estimated from.
    pub scale_quantile: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            threshold_multiplier: 3.0,
            min_inlier_fraction: 0.5,
            min_pairs: 20,
            min_span: 2.0,
            scale_quantile: 0.25,
            seed: 0x5eed,
        }
    }
}

/// Fit summary alongside the calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct RansacReport {
    pub calibration: UwbCalibration,
    pub inliers: Vec<usize>,
    pub threshold: f64,
}

pub fn ransac_affine_fit(pairs: &[(f64, f64)]) -> Result<UwbCalibration, CalibrationError> {
    ransac_affine_fit_with(pairs, &RansacConfig::default()).map(|r| r.calibration)
}

/// RANSAC over two-point line hypotheses.
///
/// Each hypothesis is scored by the residual at the `scale_quantile` order
/// statistic, normalized to a Gaussian standard deviation; the best-scoring line
/// defines the inlier threshold, and the final model is a least-squares refit on
/// its inliers.
pub fn ransac_affine_fit_with(
    pairs: &[(f64, f64)],
    cfg: &RansacConfig,
) -> Result<RansacReport, CalibrationError> {
    if pairs.len() < cfg.min_pairs {
        return Err(CalibrationError::TooFewPairs {
            needed: cfg.min_pairs,
            got: pairs.len(),
        });
    }
    if pairs.iter().any(|(d, r)| !d.is_finite() || !r.is_finite()) {
        return Err(CalibrationError::Failed("non-finite range pair".into()));
    }
    let (lo, hi) = pairs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(d, _)| (lo.min(d), hi.max(d)));
    if hi - lo < cfg.min_span {
        return Err(CalibrationError::InsufficientSpan {
            span: hi - lo,
            needed: cfg.min_span,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normalizer = gaussian_abs_quantile(cfg.scale_quantile);
    let mut best: Option<(f64, f64, f64)> = None;
    let mut residuals = vec![0.0; pairs.len()];
    for _ in 0..cfg.iterations {
        let idx = sample(&mut rng, pairs.len(), 2);
        let (p, q) = (pairs[idx.index(0)], pairs[idx.index(1)]);
        if (q.0 - p.0).abs() < 1e-9 {
            continue;
        }
        let a = (q.1 - p.1) / (q.0 - p.0);
        let b = p.1 - a * p.0;
        for (r, &(d, raw)) in residuals.iter_mut().zip(pairs) {
            *r = (raw - a * d - b).abs();
        }
        let scale = quantile(&mut residuals, cfg.scale_quantile) / normalizer;
        if best.is_none_or(|(_, _, s)| scale < s) {
            best = Some((a, b, scale));
        }
    }
    let (a0, b0, scale) = best.ok_or_else(|| CalibrationError::Failed("no valid hypothesis".into()))?;
    let threshold = (cfg.threshold_multiplier * scale).max(1e-9);

    let mut inliers = select_inliers(pairs, a0, b0, threshold);
    let mut model = (a0, b0);
    for _ in 0..2 {
        if inliers.len() < 2 {
            break;
        }
        model = least_squares(pairs, &inliers).unwrap_or(model);
        inliers = select_inliers(pairs, model.0, model.1, threshold);
    }
    let fraction = inliers.len() as f64 / pairs.len() as f64;
    if fraction < cfg.min_inlier_fraction {
        return Err(CalibrationError::Failed(format!(
            "only {:.0}% inliers at best consensus",
            100.0 * fraction
        )));
    }
    let (a, b) = model;
    let sigma = residual_std(pairs, &inliers, a, b).max(1e-12);
    let calibration = UwbCalibration { a, b, sigma_d: sigma };
    calibration
        .validate()
        .map_err(|e| CalibrationError::Failed(e.to_string()))?;
    Ok(RansacReport {
        calibration,
        inliers,
        threshold,
    })
}

fn select_inliers(pairs: &[(f64, f64)], a: f64, b: f64, threshold: f64) -> Vec<usize> {
    pairs
        .iter()
        .enumerate()
        .filter(|(_, &(d, raw))| (raw - a * d - b).abs() <= threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Ordinary least squares of raw on true distance over the given indices.
pub fn least_squares(pairs: &[(f64, f64)], idx: &[usize]) -> Option<(f64, f64)> {
    let n = idx.len() as f64;
    if idx.len() < 2 {
        return None;
    }
    let mx = idx.iter().map(|&i| pairs[i].0).sum::<f64>() / n;
    let my = idx.iter().map(|&i| pairs[i].1).sum::<f64>() / n;
    let sxx: f64 = idx.iter().map(|&i| (pairs[i].0 - mx).powi(2)).sum();
    let sxy: f64 = idx.iter().map(|&i| (pairs[i].0 - mx) * (pairs[i].1 - my)).sum();
    if sxx < 1e-12 {
        return None;
    }
    let a = sxy / sxx;
    Some((a, my - a * mx))
}

fn residual_std(pairs: &[(f64, f64)], idx: &[usize], a: f64, b: f64) -> f64 {
    let dof = idx.len().saturating_sub(2).max(1) as f64;
    let ss: f64 = idx.iter().map(|&i| (pairs[i].1 - a * pairs[i].0 - b).powi(2)).sum();
    (ss / dof).sqrt()
}

fn quantile(values: &mut [f64], q: f64) -> f64 {
    let k = ((values.len() - 1) as f64 * q).round() as usize;
    let (_, v, _) = values.select_nth_unstable_by(k, f64::total_cmp);
    *v
}

/// `x` with `P(|Z| <= x) = q` for a standard normal `Z`.
fn gaussian_abs_quantile(q: f64) -> f64 {
    std::f64::consts::SQRT_2 * statrs::function::erf::erf_inv(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn rest_samples(n: usize, gyro_bias: Vec3, noise: f64, seed: u64) -> Vec<ImuSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let mut draw = |s: f64| if noise > 0.0 { s + normal.sample(&mut rng) } else { s };
        (0..n)
            .map(|k| ImuSample {
                timestamp: k as f64 * 0.01,
                accel: Vec3::new(draw(0.0), draw(0.0), draw(9.81)),
                gyro: Vec3::new(draw(gyro_bias.x), draw(gyro_bias.y), draw(gyro_bias.z)),
                mag: Vec3::new(0.2, 0.0, -0.4),
            })
            .collect()
    }

    #[test]
    fn exact_gyro_bias_recovered() {
        let bias = estimate_imu_bias(&rest_samples(100, Vec3::new(0.01, 0.0, 0.0), 0.0, 1), &GravityModel::default())
            .unwrap();
        assert!((bias.gyro_offset - Vec3::new(0.01, 0.0, 0.0)).norm() < 1e-15);
        assert!(bias.accel_offset.norm() < 1e-12);
    }

    #[test]
    fn noisy_bias_within_standard_error() {
        let sigma = 0.01;
        let samples = rest_samples(1000, Vec3::new(0.02, -0.01, 0.005), sigma, 2);
        let bias = estimate_imu_bias(&samples, &GravityModel::default()).unwrap();
        let bound = 3.0 * sigma / (1000f64).sqrt();
        let err = bias.gyro_offset - Vec3::new(0.02, -0.01, 0.005);
        assert!(err.amax() < bound, "gyro error {err}");
        assert!(bias.accel_offset.amax() < bound);
    }

    #[test]
    fn rotation_is_rejected() {
        let samples = rest_samples(200, Vec3::new(0.0, 0.0, 0.5), 0.0, 3);
        let err = estimate_imu_bias(&samples, &GravityModel::default()).unwrap_err();
        assert!(matches!(err, CalibrationError::MotionDetected(_)));
        let mut shaking = rest_samples(200, Vec3::zeros(), 0.0, 4);
        for (k, s) in shaking.iter_mut().enumerate() {
            s.gyro.x = if k % 2 == 0 { 0.3 } else { -0.3 };
        }
        assert!(matches!(
            estimate_imu_bias(&shaking, &GravityModel::default()),
            Err(CalibrationError::MotionDetected(_))
        ));
    }

    #[test]
    fn short_window_is_rejected() {
        let samples = rest_samples(50, Vec3::zeros(), 0.0, 5);
        assert!(matches!(
            estimate_imu_bias(&samples, &GravityModel::default()),
            Err(CalibrationError::WindowTooShort { .. })
        ));
    }

    #[test]
    fn known_attitude_bias() {
        let g = GravityModel::default();
        let q = UnitQuat::from_euler_angles(0.3, -0.2, 1.0);
        let offset = Vec3::new(0.05, -0.02, 0.1);
        let samples: Vec<ImuSample> = (0..150)
            .map(|k| ImuSample {
                timestamp: k as f64 * 0.01,
                accel: g.body_frame(&q) + offset,
                gyro: Vec3::zeros(),
                mag: Vec3::zeros(),
            })
            .collect();
        let bias = estimate_imu_bias_with_attitude(&samples, &g, &q).unwrap();
        assert!((bias.accel_offset - offset).norm() < 1e-12);
    }

    #[test]
    fn identity_data_gives_identity_map() {
        let pairs: Vec<(f64, f64)> = (0..40).map(|k| (0.5 + k as f64 * 0.1, 0.5 + k as f64 * 0.1)).collect();
        let cal = ransac_affine_fit(&pairs).unwrap();
        assert!((cal.a - 1.0).abs() < 1e-9);
        assert!(cal.b.abs() < 1e-9);
        assert!(cal.sigma_d < 1e-6);
    }

    #[test]
    fn uniform_garbage_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pairs: Vec<(f64, f64)> = (0..200)
            .map(|_| (rng.random_range(0.5..6.0), rng.random_range(0.0..8.0)))
            .collect();
        assert!(ransac_affine_fit(&pairs).is_err());
    }

    #[test]
    fn precondition_errors() {
        let few: Vec<(f64, f64)> = (0..10).map(|k| (k as f64, k as f64)).collect();
        assert!(matches!(ransac_affine_fit(&few), Err(CalibrationError::TooFewPairs { .. })));
        let narrow: Vec<(f64, f64)> = (0..30).map(|k| (1.0 + k as f64 * 0.01, 1.0)).collect();
        assert!(matches!(
            ransac_affine_fit(&narrow),
            Err(CalibrationError::InsufficientSpan { .. })
        ));
    }

    #[test]
    fn inverse_map() {
        let cal = UwbCalibration { a: 1.05, b: 0.3, sigma_d: 0.1 };
        assert!((cal.invert(1.05 * 2.0 + 0.3) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn toml_roundtrip_and_validation() {
        let cal = UwbCalibration { a: 1.02, b: -0.1, sigma_d: 0.05 };
        let text = cal.to_toml().unwrap();
        assert_eq!(UwbCalibration::from_toml(&text).unwrap(), cal);
        assert!(UwbCalibration::from_toml("a = 2.0\nb = 0.0\nsigma_d = 0.1\n").is_err());
        assert!(UwbCalibration::from_toml("a = 1.0\nb = 0.0\nsigma_d = 0.0\n").is_err());
    }

    #[test]
    fn gaussian_quantile_matches_known_values() {
        // P(|Z| <= 0.6745) = 0.5, P(|Z| <= 1.96) = 0.95
        assert!((gaussian_abs_quantile(0.5) - 0.674_49).abs() < 1e-4);
        assert!((gaussian_abs_quantile(0.95) - 1.959_96).abs() < 1e-4);
    }
}
