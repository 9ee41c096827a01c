//! Geometric primitives shared by the rest of the crate.
//!
//! Vectors, quaternions and matrices are nalgebra types. Quaternions follow the
//! Hamilton convention with scalar-first storage, and a quaternion maps body-frame
//! vectors into the world frame (`world = q * body`).
//!
//! The symmetric eigensolver is a cyclic Jacobi iteration. Matrices here are
//! tiny (the node count of a constellation), so a deterministic, well-conditioned
//! routine is preferred over a fast one.

use nalgebra::{DMatrix, DVector, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type UnitQuat = UnitQuaternion<f64>;
pub type Matrix = DMatrix<f64>;

/// Absolute tolerance used to decide whether a matrix counts as symmetric.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("matrix is {rows}x{cols}, expected a square matrix")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max |m - m^T| = {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("jacobi iteration did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
}

/// Rotates `v` by `q` (active rotation, `q v q^-1`).
pub fn quat_rotate(q: &UnitQuat, v: &Vec3) -> Vec3 {
    q * v
}

/// Hamilton product `a * b`.
pub fn quat_compose(a: &UnitQuat, b: &UnitQuat) -> UnitQuat {
    renormalize(a * b)
}

pub fn quat_inverse(q: &UnitQuat) -> UnitQuat {
    q.inverse()
}

/// Relative orientation `a^-1 * b`.
pub fn quat_relative(a: &UnitQuat, b: &UnitQuat) -> UnitQuat {
    renormalize(a.inverse() * b)
}

/// Quaternion from a rotation vector (axis times angle, radians).
pub fn quat_from_rotation_vector(v: &Vec3) -> UnitQuat {
    UnitQuat::from_scaled_axis(*v)
}

/// Builds a unit quaternion from scalar-first components, normalizing them.
pub fn quat_from_wxyz(w: f64, x: f64, y: f64, z: f64) -> UnitQuat {
    UnitQuat::from_quaternion(Quaternion::new(w, x, y, z))
}

pub fn quat_to_wxyz(q: &UnitQuat) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

/// Re-projects onto the unit sphere to stop round-off from accumulating.
pub fn renormalize(q: UnitQuat) -> UnitQuat {
    UnitQuat::new_normalize(q.into_inner())
}

/// Chordal mean of a set of orientations, with hemisphere alignment against the
/// first element. Returns identity for an empty slice.
pub fn quat_average(qs: &[UnitQuat]) -> UnitQuat {
    let Some(first) = qs.first() else {
        return UnitQuat::identity();
    };
    let reference = first.into_inner();
    let mut sum = Quaternion::new(0.0, 0.0, 0.0, 0.0);
    for q in qs {
        let q = q.into_inner();
        if q.dot(&reference) < 0.0 {
            sum -= q;
        } else {
            sum += q;
        }
    }
    if sum.norm() < 1e-12 {
        return *first;
    }
    UnitQuat::new_normalize(sum)
}

/// Yaw angle (rotation about world z) of an orientation, radians.
pub fn yaw_of(q: &UnitQuat) -> f64 {
    q.euler_angles().2
}

/// Largest absolute difference between `m` and its transpose.
pub fn asymmetry(m: &Matrix) -> f64 {
    let n = m.nrows().min(m.ncols());
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn is_symmetric(m: &Matrix, tol: f64) -> bool {
    m.is_square() && asymmetry(m) <= tol
}

/// `(m + m^T) / 2`.
pub fn symmetrize<const N: usize>(
    m: &nalgebra::SMatrix<f64, N, N>,
) -> nalgebra::SMatrix<f64, N, N> {
    (m + m.transpose()) * 0.5
}

/// Eigen-decomposition of a real symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Eigenvalues, sorted descending.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, in the same order as `values`.
    pub vectors: Matrix,
}

impl SymmetricEigen {
    /// `E diag(λ) E^T`.
    pub fn reconstruct(&self) -> Matrix {
        let lambda = Matrix::from_diagonal(&DVector::from_column_slice(&self.values));
        &self.vectors * lambda * self.vectors.transpose()
    }
}

const MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigendecomposition. Rejects non-square and non-symmetric input.
pub fn symmetric_eigen(m: &Matrix) -> Result<SymmetricEigen, MathError> {
    if !m.is_square() {
        return Err(MathError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(MathError::NonFinite);
    }
    let scale = m.amax().max(1.0);
    let asym = asymmetry(m);
    if asym > SYMMETRY_TOLERANCE * scale {
        return Err(MathError::NotSymmetric { asymmetry: asym });
    }

    let n = m.nrows();
    let mut a = (m + m.transpose()) * 0.5;
    let mut v = Matrix::identity(n, n);
    let frob = a.norm();
    let target = (f64::EPSILON * frob).powi(2);

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if off_diagonal_sq(&a) <= target {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
    }
    if !converged && off_diagonal_sq(&a) > target.max(1e-24 * frob * frob) {
        return Err(MathError::NoConvergence { sweeps: MAX_SWEEPS });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src).into_owned();
        // Deterministic sign: largest-magnitude component positive.
        let pivot = col.iamax();
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    Ok(SymmetricEigen { values, vectors })
}

fn off_diagonal_sq(a: &Matrix) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s
}

fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.nrows();
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Smallest eigenvalue of a symmetric matrix, `None` if it cannot be decomposed.
pub fn min_eigenvalue(m: &Matrix) -> Option<f64> {
    symmetric_eigen(m).ok().and_then(|e| e.values.last().copied())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_quat(rng: &mut ChaCha8Rng) -> UnitQuat {
        quat_from_wxyz(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
    }

    #[test]
    fn identity_rotation_is_passthrough() {
        let v = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(quat_rotate(&UnitQuat::identity(), &v), v);
    }

    #[test]
    fn quarter_turn_about_z() {
        let q = UnitQuat::from_axis_angle(&Vec3::z_axis(), FRAC_PI_2);
        let r = quat_rotate(&q, &Vec3::x());
        assert!((r - Vec3::y()).norm() < 1e-12);
    }

    #[test]
    fn rotation_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let q = random_quat(&mut rng);
            let v = Vec3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            );
            assert!((quat_rotate(&q, &v).norm() - v.norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let q = random_quat(&mut rng);
            let id = quat_compose(&q, &quat_inverse(&q));
            assert!(id.angle() < 1e-12);
            assert!(quat_compose(&UnitQuat::identity(), &q).angle_to(&q) < 1e-12);
        }
    }

    #[test]
    fn composition_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (a, b, c) = (
                random_quat(&mut rng),
                random_quat(&mut rng),
                random_quat(&mut rng),
            );
            let lhs = quat_compose(&quat_compose(&a, &b), &c);
            let rhs = quat_compose(&a, &quat_compose(&b, &c));
            assert!(lhs.angle_to(&rhs) < 1e-12);
            assert!((lhs.into_inner().norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn two_quarter_turns_make_a_half_turn() {
        let q90 = UnitQuat::from_axis_angle(&Vec3::z_axis(), FRAC_PI_2);
        let q = quat_compose(&q90, &q90);
        // angle-axis oracle: rotations about a common axis add their angles
        let (axis, angle) = q.axis_angle().unwrap();
        assert!((angle - std::f64::consts::PI).abs() < 1e-12);
        assert!((axis.into_inner() - Vec3::z()).norm() < 1e-12 || (axis.into_inner() + Vec3::z()).norm() < 1e-12);
        assert!((quat_rotate(&q, &Vec3::x()) + Vec3::x()).norm() < 1e-12);
    }

    #[test]
    fn average_of_identical_quaternions() {
        let q = UnitQuat::from_euler_angles(0.1, -0.2, 0.7);
        let neg = UnitQuat::new_unchecked(-q.into_inner());
        let avg = quat_average(&[q, neg, q]);
        assert!(avg.angle_to(&q) < 1e-12);
    }

    #[test]
    fn eigen_of_diagonal() {
        let m = Matrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 2.0]));
        let e = symmetric_eigen(&m).unwrap();
        assert_eq!(e.values, vec![3.0, 2.0, 1.0]);
        assert!((e.vectors.column(0) - DVector::from_vec(vec![1.0, 0.0, 0.0])).norm() < 1e-15);
        assert!((e.vectors.column(1) - DVector::from_vec(vec![0.0, 0.0, 1.0])).norm() < 1e-15);
        assert!((e.vectors.column(2) - DVector::from_vec(vec![0.0, 1.0, 0.0])).norm() < 1e-15);
    }

    #[test]
    fn eigen_of_two_point_kernel() {
        // -1/2 J D^2 J for two points at distance d: [[d²/4, -d²/4], [-d²/4, d²/4]]
        let d: f64 = 1.7;
        let k = d * d / 4.0;
        let m = Matrix::from_row_slice(2, 2, &[k, -k, -k, k]);
        let e = symmetric_eigen(&m).unwrap();
        assert!((e.values[0] - d * d / 2.0).abs() < 1e-12);
        assert!(e.values[1].abs() < 1e-12);
    }

    #[test]
    fn rejects_non_symmetric() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(
            symmetric_eigen(&m),
            Err(MathError::NotSymmetric { .. })
        ));
        let m = Matrix::zeros(2, 3);
        assert!(matches!(symmetric_eigen(&m), Err(MathError::NotSquare { .. })));
    }

    #[test]
    fn random_symmetric_reconstruction_and_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 1..=16 {
            for _ in 0..20 {
                let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-5.0..5.0));
                let m = &a + a.transpose();
                let e = symmetric_eigen(&m).unwrap();
                let rel = (e.reconstruct() - &m).norm() / m.norm().max(1e-300);
                assert!(rel < 1e-8, "n={n} rel={rel}");
                let gram = e.vectors.transpose() * &e.vectors;
                assert!((gram - Matrix::identity(n, n)).norm() < 1e-10);
                for (i, &lambda) in e.values.iter().enumerate() {
                    let col = e.vectors.column(i);
                    let resid = (&m * col - col * lambda).norm();
                    assert!(resid < 1e-8 * m.norm().max(1.0));
                }
                assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
            }
        }
    }

    #[test]
    fn jacobi_agrees_with_nalgebra_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a = Matrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
            let m = &a * a.transpose();
            let ours = symmetric_eigen(&m).unwrap().values;
            let mut theirs: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
            theirs.sort_by(|a, b| b.total_cmp(a));
            for (x, y) in ours.iter().zip(&theirs) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
