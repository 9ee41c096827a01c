//! Scenario description: nodes, motion, sensors, protocol and pipeline settings.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::calibration::UwbCalibration;
use crate::pipeline::PipelineConfig;
use crate::protocol::ProtocolParams;
use crate::sim::obstacle::{Obstacle, ObstacleConfig};
use crate::sim::sensors::{ImuNoise, UwbConfig};
use crate::sim::trajectory::{BodyConfig, Trajectory, TrajectoryConfig};

const CARS_LOS: &str = include_str!("../../scenarios/cars_los.toml");
const CARS_NLOS: &str = include_str!("../../scenarios/cars_nlos.toml");
const BODY_6: &str = include_str!("../../scenarios/body_6.toml");
const PROTOCOL_FIG6: &str = include_str!("../../scenarios/protocol_fig6.toml");

pub const BUNDLED: [&str; 4] = ["cars_los", "cars_nlos", "body_6", "protocol_fig6"];

/// One problem found while validating a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for FieldIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config not found: {0}")]
    NotFound(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config:\n{}", format_issues(.0))]
    Invalid(Vec<FieldIssue>),
}

fn format_issues(issues: &[FieldIssue]) -> String {
    issues.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorMode {
    /// Local estimates drawn around the true orientation and acceleration.
    #[default]
    Direct,
    /// Raw IMU samples run through the on-node orientation filter.
    Imu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    pub mode: SensorMode,
    /// Local estimate rate, Hz.
    pub rate: f64,
    pub orientation_sigma_deg: f64,
    pub accel_sigma: f64,
    pub imu: ImuNoise,
    pub mag_field: [f64; 3],
    pub gravity: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            mode: SensorMode::Direct,
            rate: 100.0,
            orientation_sigma_deg: 1.0,
            accel_sigma: 0.05,
            imu: ImuNoise::default(),
            mag_field: [0.2, 0.0, -0.4],
            gravity: 9.81,
        }
    }
}

/// Delivery latency from the nodes to the host.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkConfig {
    pub local_latency: f64,
    pub range_latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClockConfig {
    /// Clock offsets are drawn uniformly from `[-offset_range, offset_range]`.
    pub offset_range: f64,
    pub drift_ppm: f64,
    /// Independent per-receiver message loss probability.
    pub drop_probability: f64,
}

impl Default for ClockConfig {
    fn default() -> Self {
        Self {
            offset_range: 1.0,
            drift_ppm: 0.0,
            drop_probability: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Snapshots before this time are excluded from error statistics.
    pub warmup: f64,
    /// Width of the time bins in the error trace.
    pub bin_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub id: u32,
    #[serde(default)]
    pub activate: f64,
    #[serde(default)]
    pub deactivate: Option<f64>,
    pub trajectory: TrajectoryConfig,
}

impl NodeConfig {
    pub fn is_active(&self, t: f64) -> bool {
        t >= self.activate && self.deactivate.is_none_or(|d| t < d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub duration: f64,
    #[serde(default)]
    pub protocol: ProtocolParams,
    #[serde(default)]
    pub clocks: ClockConfig,
    #[serde(default)]
    pub sensors: SensorConfig,
    #[serde(default)]
    pub uwb: UwbConfig,
    #[serde(default)]
    pub link: LinkConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    /// Calibration file replacing `pipeline.calibration`, relative to the config.
    #[serde(default)]
    pub calibration_file: Option<String>,
    #[serde(default)]
    pub body: Option<BodyConfig>,
    pub nodes: Vec<NodeConfig>,
    #[serde(default)]
    pub obstacles: Vec<ObstacleConfig>,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads, resolves the calibration file and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        if !path.exists() {
            return Err(ConfigError::NotFound(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg: Self = toml::from_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        if let Some(file) = &cfg.calibration_file {
            let full = cfg.resolve(file);
            let cal = UwbCalibration::load(&full).map_err(|e| {
                ConfigError::Invalid(vec![FieldIssue {
                    path: "calibration_file".into(),
                    message: e.to_string(),
                }])
            })?;
            cfg.pipeline.calibration = cal;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// A bundled scenario by name.
    pub fn bundled(name: &str) -> Option<Self> {
        let text = match name {
            "cars_los" => CARS_LOS,
            "cars_nlos" => CARS_NLOS,
            "body_6" => BODY_6,
            "protocol_fig6" => PROTOCOL_FIG6,
            _ => return None,
        };
        Some(Self::from_toml_str(text).expect("bundled scenarios are valid"))
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        match &self.base_dir {
            Some(dir) => dir.join(relative),
            None => PathBuf::from(relative),
        }
    }

    /// Short hex digest of the canonical serialized configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn node_ids(&self) -> Vec<u32> {
        self.nodes.iter().map(|n| n.id).collect()
    }

    pub fn build_trajectories(&self) -> Result<Vec<Trajectory>, ConfigError> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(k, n)| {
                Trajectory::from_config(&n.trajectory, self.body.as_ref(), self.base_dir.as_deref()).map_err(|e| {
                    ConfigError::Invalid(vec![FieldIssue {
                        path: format!("nodes[{k}].trajectory"),
                        message: e.to_string(),
                    }])
                })
            })
            .collect()
    }

    pub fn build_obstacles(&self) -> Result<Vec<Obstacle>, ConfigError> {
        self.obstacles
            .iter()
            .enumerate()
            .map(|(k, o)| {
                Obstacle::from_config(o, self.uwb.nlos_bias, self.uwb.sigma_nlos).map_err(|e| {
                    ConfigError::Invalid(vec![FieldIssue {
                        path: format!("obstacles[{k}]"),
                        message: e.to_string(),
                    }])
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        let mut check = |ok: bool, path: &str, message: &str| {
            if !ok {
                issues.push(FieldIssue {
                    path: path.to_string(),
                    message: message.to_string(),
                });
            }
        };
        check(self.duration > 0.0 && self.duration.is_finite(), "duration", "must be positive");
        check(self.protocol.t_msg > 0.0, "protocol.t_msg", "must be positive");
        check(self.protocol.round_overhead >= 0.0, "protocol.round_overhead", "must be non-negative");
        check(self.protocol.watchdog > 0.0, "protocol.watchdog", "must be positive");
        check(self.protocol.expiry_rounds >= 1, "protocol.expiry_rounds", "must be at least 1");
        check(self.clocks.offset_range >= 0.0, "clocks.offset_range", "must be non-negative");
        check(
            (0.0..1.0).contains(&self.clocks.drop_probability),
            "clocks.drop_probability",
            "must be in [0, 1)",
        );
        check(self.sensors.rate > 0.0, "sensors.rate", "must be positive");
        check(self.sensors.orientation_sigma_deg >= 0.0, "sensors.orientation_sigma_deg", "must be non-negative");
        check(self.sensors.accel_sigma >= 0.0, "sensors.accel_sigma", "must be non-negative");
        check(
            (9.7..=9.9).contains(&self.sensors.gravity),
            "sensors.gravity",
            "must be within [9.7, 9.9]",
        );
        check(self.uwb.sigma_los >= 0.0, "uwb.sigma_los", "must be non-negative");
        check(self.uwb.sigma_nlos >= self.uwb.sigma_los, "uwb.sigma_nlos", "must be at least uwb.sigma_los");
        check(self.uwb.scale > 0.0, "uwb.scale", "must be positive");
        check(self.link.local_latency >= 0.0, "link.local_latency", "must be non-negative");
        check(self.link.range_latency >= 0.0, "link.range_latency", "must be non-negative");
        check(self.metrics.warmup >= 0.0, "metrics.warmup", "must be non-negative");
        check(
            self.metrics.bin_width.is_none_or(|w| w > 0.0),
            "metrics.bin_width",
            "must be positive",
        );
        for (path, message) in self.pipeline.issues(self.sensors.rate) {
            check(false, &format!("pipeline.{path}"), &message);
        }
        check(self.nodes.len() >= 2, "nodes", "at least two nodes are required");
        let ids = self.node_ids();
        for (k, node) in self.nodes.iter().enumerate() {
            check(
                ids.iter().filter(|&&id| id == node.id).count() == 1,
                &format!("nodes[{k}].id"),
                "duplicate node id",
            );
            check(node.activate >= 0.0, &format!("nodes[{k}].activate"), "must be non-negative");
            if let Some(d) = node.deactivate {
                check(d > node.activate, &format!("nodes[{k}].deactivate"), "must be after activate");
            }
            if let Err(e) = Trajectory::from_config(&node.trajectory, self.body.as_ref(), self.base_dir.as_deref()) {
                check(false, &format!("nodes[{k}].trajectory"), &e.to_string());
            }
        }
        for (k, pair) in self.uwb.persistent_nlos.iter().enumerate() {
            check(
                pair[0] != pair[1] && ids.contains(&pair[0]) && ids.contains(&pair[1]),
                &format!("uwb.persistent_nlos[{k}]"),
                "must name two distinct configured nodes",
            );
        }
        for (k, pair) in self.pipeline.nlos_pairs.iter().enumerate() {
            check(
                pair[0] != pair[1] && ids.contains(&pair[0]) && ids.contains(&pair[1]),
                &format!("pipeline.nlos_pairs[{k}]"),
                "must name two distinct configured nodes",
            );
        }
        for (k, o) in self.obstacles.iter().enumerate() {
            match Obstacle::from_config(o, self.uwb.nlos_bias, self.uwb.sigma_nlos) {
                Ok(ob) => check(
                    ob.nlos_sigma >= self.uwb.sigma_los,
                    &format!("obstacles[{k}].nlos_sigma"),
                    "must be at least uwb.sigma_los",
                ),
                Err(e) => check(false, &format!("obstacles[{k}]"), &e.to_string()),
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_load() {
        for name in BUNDLED {
            let cfg = ScenarioConfig::bundled(name).unwrap();
            assert_eq!(cfg.name, name);
            cfg.build_trajectories().unwrap();
            cfg.build_obstacles().unwrap();
        }
        assert!(ScenarioConfig::bundled("nope").is_none());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ScenarioConfig::bundled("cars_los").unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn issues_carry_field_paths() {
        let text = r#"
            name = "bad"
            seed = 1
            duration = -1.0
            [protocol]
            t_msg = 0.0
            [[nodes]]
            id = 0
            trajectory = { kind = "static", position = [0.0, 0.0, 0.0] }
            [[nodes]]
            id = 0
            trajectory = { kind = "circle", center = [0.0, 0.0, 0.0], radius = -1.0, speed = 1.0 }
        "#;
        let err = ScenarioConfig::from_toml_str(text).unwrap_err();
        let ConfigError::Invalid(issues) = err else {
            panic!("expected validation failure");
        };
        let paths: Vec<&str> = issues.iter().map(|i| i.path.as_str()).collect();
        assert!(paths.contains(&"duration"));
        assert!(paths.contains(&"protocol.t_msg"));
        assert!(paths.contains(&"nodes[1].id"));
        assert!(paths.contains(&"nodes[1].trajectory"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = r#"
            name = "x"
            seed = 1
            duration = 1.0
            bogus = 3
            nodes = []
        "#;
        assert!(matches!(ScenarioConfig::from_toml_str(text), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn missing_file_is_not_found() {
        assert!(matches!(
            ScenarioConfig::load(Path::new("/definitely/not/here.toml")),
            Err(ConfigError::NotFound(_))
        ));
    }
}
