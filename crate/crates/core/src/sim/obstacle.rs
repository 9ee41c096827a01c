//! Convex obstacles that turn a radio path into non-line-of-sight.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObstacleError {
    #[error("polygon needs at least 3 vertices")]
    TooFewVertices,
    #[error("polygon is not convex")]
    NotConvex,
    #[error("empty extent: {0}")]
    Empty(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObstacleConfig {
    /// Vertical prism over a convex polygon in the xy-plane.
    Prism {
        vertices: Vec<[f64; 2]>,
        z_min: f64,
        z_max: f64,
        #[serde(default)]
        nlos_bias: Option<f64>,
        #[serde(default)]
        nlos_sigma: Option<f64>,
    },
    Box {
        min: [f64; 3],
        max: [f64; 3],
        #[serde(default)]
        nlos_bias: Option<f64>,
        #[serde(default)]
        nlos_sigma: Option<f64>,
    },
}

/// Intersection of half-spaces `n . p <= c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    planes: Vec<(Vec3, f64)>,
    pub nlos_bias: f64,
    pub nlos_sigma: f64,
}

impl Obstacle {
    pub fn from_config(cfg: &ObstacleConfig, default_bias: f64, default_sigma: f64) -> Result<Self, ObstacleError> {
        match cfg {
            ObstacleConfig::Prism {
                vertices,
                z_min,
                z_max,
                nlos_bias,
                nlos_sigma,
            } => Self::prism(
                vertices,
                *z_min,
                *z_max,
                nlos_bias.unwrap_or(default_bias),
                nlos_sigma.unwrap_or(default_sigma),
            ),
            ObstacleConfig::Box {
                min,
                max,
                nlos_bias,
                nlos_sigma,
            } => Self::cuboid(
                Vec3::from(*min),
                Vec3::from(*max),
                nlos_bias.unwrap_or(default_bias),
                nlos_sigma.unwrap_or(default_sigma),
            ),
        }
    }

    pub fn prism(vertices: &[[f64; 2]], z_min: f64, z_max: f64, bias: f64, sigma: f64) -> Result<Self, ObstacleError> {
        if vertices.len() < 3 {
            return Err(ObstacleError::TooFewVertices);
        }
        if !(z_max > z_min) {
            return Err(ObstacleError::Empty("z_max must exceed z_min"));
        }
        let n = vertices.len();
        let area: f64 = (0..n)
            .map(|k| {
                let (a, b) = (vertices[k], vertices[(k + 1) % n]);
                a[0] * b[1] - b[0] * a[1]
            })
            .sum();
        if area.abs() < 1e-12 {
            return Err(ObstacleError::Empty("polygon has zero area"));
        }
        let mut verts = vertices.to_vec();
        if area < 0.0 {
            verts.reverse();
        }
        let mut planes = Vec::with_capacity(n + 2);
        for k in 0..n {
            let (a, b, c) = (verts[k], verts[(k + 1) % n], verts[(k + 2) % n]);
            let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
            let turn = ex * (c[1] - b[1]) - ey * (c[0] - b[0]);
            if turn < -1e-12 {
                return Err(ObstacleError::NotConvex);
            }
            // outward normal of a counter-clockwise edge
            let normal = Vec3::new(ey, -ex, 0.0);
            planes.push((normal, normal.x * a[0] + normal.y * a[1]));
        }
        planes.push((Vec3::z(), z_max));
        planes.push((-Vec3::z(), -z_min));
        Ok(Self {
            planes,
            nlos_bias: bias,
            nlos_sigma: sigma,
        })
    }

    pub fn cuboid(min: Vec3, max: Vec3, bias: f64, sigma: f64) -> Result<Self, ObstacleError> {
        if (0..3).any(|k| !(max[k] > min[k])) {
            return Err(ObstacleError::Empty("max must exceed min on every axis"));
        }
        let mut planes = Vec::with_capacity(6);
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = 1.0;
            planes.push((e, max[k]));
            planes.push((-e, -min[k]));
        }
        Ok(Self {
            planes,
            nlos_bias: bias,
            nlos_sigma: sigma,
        })
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.planes.iter().all(|(n, c)| n.dot(p) <= *c)
    }

    /// Whether the closed segment `a`-`b` touches the obstacle (Cyrus-Beck clipping).
    pub fn intersects_segment(&self, a: &Vec3, b: &Vec3) -> bool {
        let d = b - a;
        let (mut t_in, mut t_out) = (0.0f64, 1.0f64);
        for (n, c) in &self.planes {
            let denom = n.dot(&d);
            let num = c - n.dot(a);
            if denom.abs() < 1e-15 {
                if num < 0.0 {
                    return false;
                }
                continue;
            }
            let t = num / denom;
            if denom > 0.0 {
                t_out = t_out.min(t);
            } else {
                t_in = t_in.max(t);
            }
            if t_in > t_out {
                return false;
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Obstacle {
        Obstacle::prism(&[[2.0, 1.0], [3.0, 1.0], [3.0, 2.0], [2.0, 2.0]], 0.0, 1.0, 0.15, 0.275).unwrap()
    }

    #[test]
    fn crossing_and_missing_segments() {
        let o = square();
        assert!(o.intersects_segment(&Vec3::new(0.0, 1.5, 0.5), &Vec3::new(5.0, 1.5, 0.5)));
        assert!(!o.intersects_segment(&Vec3::new(0.0, 0.5, 0.5), &Vec3::new(5.0, 0.5, 0.5)));
        // passes over the top
        assert!(!o.intersects_segment(&Vec3::new(0.0, 1.5, 1.5), &Vec3::new(5.0, 1.5, 1.5)));
        // stops short
        assert!(!o.intersects_segment(&Vec3::new(0.0, 1.5, 0.5), &Vec3::new(1.9, 1.5, 0.5)));
        // starts inside
        assert!(o.intersects_segment(&Vec3::new(2.5, 1.5, 0.5), &Vec3::new(2.5, 1.5, 0.5)));
    }

    #[test]
    fn clockwise_vertices_are_accepted() {
        let o = Obstacle::prism(&[[2.0, 2.0], [3.0, 2.0], [3.0, 1.0], [2.0, 1.0]], 0.0, 1.0, 0.0, 0.3).unwrap();
        assert!(o.contains(&Vec3::new(2.5, 1.5, 0.5)));
    }

    #[test]
    fn rejects_bad_shapes() {
        let dart = [[0.0, 0.0], [2.0, 1.0], [0.0, 2.0], [0.5, 1.0]];
        assert_eq!(Obstacle::prism(&dart, 0.0, 1.0, 0.0, 0.3), Err(ObstacleError::NotConvex));
        assert!(Obstacle::prism(&[[0.0, 0.0], [1.0, 0.0]], 0.0, 1.0, 0.0, 0.3).is_err());
        assert!(Obstacle::cuboid(Vec3::zeros(), Vec3::new(1.0, 0.0, 1.0), 0.0, 0.3).is_err());
    }
}
