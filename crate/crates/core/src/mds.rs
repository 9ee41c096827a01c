//! Constellation-wide refinement with classical multidimensional scaling.
//!
//! The distance matrix implied by the pair filters is embedded with classical
//! MDS, aligned onto the filters' own layout with a weighted Procrustes fit, and
//! blended back into every relative position. The same machinery initializes
//! the filters of newly joined nodes from the first rounds of raw ranges.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{Matrix3, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ekf::{Mat6, PairState};
use crate::math::{self, Matrix, UnitQuat, Vec3};
use crate::protocol::NodeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdsError {
    #[error("classical MDS needs at least 3 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("distance matrix is invalid: {0}")]
    InvalidDistances(String),
    #[error("no positive eigenvalue: configuration is degenerate")]
    Degenerate,
    #[error("point sets differ in size: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("weights must be non-negative with a positive sum")]
    InvalidWeights,
    #[error(transparent)]
    Math(#[from] math::MathError),
}

/// Symmetric matrix of pairwise distances with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    d: Matrix,
}

impl DistanceMatrix {
    pub fn new(d: Matrix) -> Result<Self, MdsError> {
        if d.nrows() != d.ncols() {
            return Err(MdsError::InvalidDistances("not square".into()));
        }
        if d.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(MdsError::InvalidDistances("entries must be finite and non-negative".into()));
        }
        if d.diagonal().iter().any(|&v| v != 0.0) {
            return Err(MdsError::InvalidDistances("diagonal must be zero".into()));
        }
        if !math::is_symmetric(&d, math::SYMMETRY_TOLERANCE) {
            return Err(MdsError::InvalidDistances("not symmetric".into()));
        }
        Ok(Self { d })
    }

    pub fn from_positions(points: &[Vec3]) -> Self {
        let n = points.len();
        Self {
            d: Matrix::from_fn(n, n, |i, j| (points[i] - points[j]).norm()),
        }
    }

    pub fn n(&self) -> usize {
        self.d.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[(i, j)]
    }

    pub fn matrix(&self) -> &Matrix {
        &self.d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EmbeddingDim {
    /// Two dimensions when the third eigenvalue is below 1% of the first.
    #[default]
    #[serde(rename = "auto")]
    Auto,
    #[serde(rename = "2d")]
    Two,
    #[serde(rename = "3d")]
    Three,
}

/// Third-to-first eigenvalue ratio below which `Auto` embeds in a plane.
pub const PLANAR_EIGEN_RATIO: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct MdsSolution {
    /// One row per node, centered on the origin.
    pub positions: Vec<Vec3>,
    /// Three largest kernel eigenvalues, descending.
    pub eigenvalues: [f64; 3],
    pub embedding_dim_used: usize,
}

/// `K = -1/2 J D^2 J` with the centering matrix `J = I - ee^T / n`.
pub fn double_center(d: &DistanceMatrix) -> Matrix {
    let n = d.n();
    let sq = d.d.map(|v| v * v);
    let j = Matrix::identity(n, n) - Matrix::from_element(n, n, 1.0 / n as f64);
    let k = &j * sq * &j * -0.5;
    (&k + k.transpose()) * 0.5
}

/// Embeds a kernel from its top eigenpairs: `X = E diag(sqrt(lambda))`.
pub fn embed_kernel(k: &Matrix, dim: EmbeddingDim) -> Result<MdsSolution, MdsError> {
    let eig = math::symmetric_eigen(k)?;
    let mut top = [0.0; 3];
    for (slot, v) in top.iter_mut().zip(&eig.values) {
        *slot = *v;
    }
    if !(top[0] > 0.0) {
        return Err(MdsError::Degenerate);
    }
    let used = match dim {
        EmbeddingDim::Two => 2,
        EmbeddingDim::Three => 3,
        EmbeddingDim::Auto if top[2] / top[0] < PLANAR_EIGEN_RATIO => 2,
        EmbeddingDim::Auto => 3,
    };
    let n = k.nrows();
    let scales: Vec<f64> = (0..used.min(n)).map(|c| top[c].max(0.0).sqrt()).collect();
    let positions = (0..n)
        .map(|r| {
            let mut p = Vec3::zeros();
            for (c, s) in scales.iter().enumerate() {
                p[c] = eig.vectors[(r, c)] * s;
            }
            p
        })
        .collect();
    Ok(MdsSolution {
        positions,
        eigenvalues: top,
        embedding_dim_used: used,
    })
}

pub fn classical_mds(d: &DistanceMatrix, dim: EmbeddingDim) -> Result<MdsSolution, MdsError> {
    if d.n() < 3 {
        return Err(MdsError::TooFewNodes(d.n()));
    }
    embed_kernel(&double_center(d), dim)
}

/// Rigid map `p -> R p + t`; `R` may be a reflection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl AlignmentTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub transform: AlignmentTransform,
    pub aligned: Vec<Vec3>,
    /// Weighted RMS distance between aligned points and the reference.
    pub residual: f64,
    /// Reference too close to collinear for a unique rotation.
    pub low_confidence: bool,
}

/// Weighted orthogonal Procrustes fit of `points` onto `reference`.
pub fn align_to_reference(
    points: &[Vec3],
    reference: &[Vec3],
    weights: &[f64],
    allow_reflection: bool,
) -> Result<Alignment, MdsError> {
    if points.len() != reference.len() {
        return Err(MdsError::SizeMismatch(points.len(), reference.len()));
    }
    if weights.len() != points.len() {
        return Err(MdsError::SizeMismatch(points.len(), weights.len()));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0)) || !(total > 0.0) {
        return Err(MdsError::InvalidWeights);
    }
    let centroid = |set: &[Vec3]| {
        set.iter()
            .zip(weights)
            .fold(Vec3::zeros(), |acc, (p, w)| acc + p * *w)
            / total
    };
    let cx = centroid(points);
    let cr = centroid(reference);
    let mut h = Matrix3::zeros();
    for ((p, r), w) in points.iter().zip(reference).zip(weights) {
        h += (p - cx) * (r - cr).transpose() * *w;
    }
    let svd = SVD::new(h, true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(MdsError::Degenerate);
    };
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s = &svd.singular_values;
    let low_confidence = s[order[0]] <= 1e-12 || s[order[1]] <= 1e-9 * s[order[0]];

    let mut v = v_t.transpose();
    let mut rotation = v * u.transpose();
    if !allow_reflection && rotation.determinant() < 0.0 {
        // flip the axis with the smallest singular value
        let k = order[2];
        for r in 0..3 {
            v[(r, k)] = -v[(r, k)];
        }
        rotation = v * u.transpose();
    }
    let transform = AlignmentTransform {
        rotation,
        translation: cr - rotation * cx,
    };
    let aligned: Vec<Vec3> = points.iter().map(|p| transform.apply(p)).collect();
    let residual = (aligned
        .iter()
        .zip(reference)
        .zip(weights)
        .map(|((a, r), w)| w * (a - r).norm_squared())
        .sum::<f64>()
        / total)
        .sqrt();
    Ok(Alignment {
        transform,
        aligned,
        residual,
        low_confidence,
    })
}

/// Blends every relative position toward the refined layout and re-inflates the
/// position covariance.
pub fn refine_pair_states<'a>(
    filters: impl IntoIterator<Item = (&'a (NodeId, NodeId), &'a mut PairState)>,
    positions: &BTreeMap<NodeId, Vec3>,
    alpha: f64,
    inflation: f64,
) {
    for ((i, j), state) in filters {
        let (Some(pi), Some(pj)) = (positions.get(i), positions.get(j)) else {
            continue;
        };
        state.x = state.x * (1.0 - alpha) + (pj - pi) * alpha;
        for k in 0..3 {
            state.p[(k, k)] += inflation;
        }
    }
}

/// Positions that best explain a set of relative positions, with the smallest
/// ID at the origin. For a complete, consistent pair set this is exact.
pub fn implied_positions(
    nodes: &[NodeId],
    relative: &BTreeMap<(NodeId, NodeId), Vec3>,
) -> BTreeMap<NodeId, Vec3> {
    let n = nodes.len();
    let mut out = BTreeMap::new();
    if n == 0 {
        return out;
    }
    for &i in nodes {
        // centered least squares: p_i = -(1/n) sum_j (p_j - p_i)
        let mut sum = Vec3::zeros();
        for &j in nodes {
            if let Some(x) = relative.get(&(i, j)) {
                sum += x;
            } else if let Some(x) = relative.get(&(j, i)) {
                sum -= x;
            }
        }
        out.insert(i, -sum / n as f64);
    }
    let anchor = out[&nodes[0]];
    for p in out.values_mut() {
        *p -= anchor;
    }
    out
}

/// Filters created for newly joined nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Initialization {
    pub pairs: Vec<((NodeId, NodeId), PairState)>,
    pub positions: BTreeMap<NodeId, Vec3>,
    pub low_confidence: bool,
}

/// Collects the first complete rounds after a join.
#[derive(Debug, Clone, PartialEq)]
pub struct InitWindow {
    members: Vec<NodeId>,
    pending: BTreeSet<NodeId>,
    rounds: VecDeque<(Matrix, Vec<UnitQuat>)>,
    k: usize,
}

impl InitWindow {
    /// `members` are all active nodes; `pending` the subset without filters yet.
    pub fn new(members: &BTreeSet<NodeId>, pending: &BTreeSet<NodeId>, k: usize) -> Self {
        Self {
            members: members.iter().copied().collect(),
            pending: pending.clone(),
            rounds: VecDeque::new(),
            k: k.max(1),
        }
    }

    pub fn members(&self) -> &[NodeId] {
        &self.members
    }

    pub fn pending(&self) -> &BTreeSet<NodeId> {
        &self.pending
    }

    pub fn rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_ready(&self) -> bool {
        self.members.len() >= 3 && self.rounds.len() >= self.k
    }

    /// Adds one round if it covers every member pair. Returns whether it was used.
    pub fn push_round(
        &mut self,
        distances: &BTreeMap<(NodeId, NodeId), f64>,
        orientations: &BTreeMap<NodeId, UnitQuat>,
    ) -> bool {
        let n = self.members.len();
        let mut d = Matrix::zeros(n, n);
        for a in 0..n {
            for b in a + 1..n {
                let Some(&v) = distances.get(&(self.members[a], self.members[b])) else {
                    return false;
                };
                d[(a, b)] = v.max(0.0);
                d[(b, a)] = v.max(0.0);
            }
        }
        let Some(qs) = self
            .members
            .iter()
            .map(|id| orientations.get(id).copied())
            .collect::<Option<Vec<_>>>()
        else {
            return false;
        };
        self.rounds.push_back((d, qs));
        while self.rounds.len() > self.k {
            self.rounds.pop_front();
        }
        true
    }

    /// Builds filters for every pair involving a pending node.
    ///
    /// The averaged distance matrix is embedded with MDS and aligned onto the
    /// existing layout (weight 1 for nodes that already have one, 0 for the new
    /// ones). Without any placed node the MDS frame itself is used.
    pub fn initialize(
        &self,
        existing: &BTreeMap<NodeId, Vec3>,
        dim: EmbeddingDim,
        t: f64,
    ) -> Result<Initialization, MdsError> {
        let n = self.members.len();
        if n < 3 {
            return Err(MdsError::TooFewNodes(n));
        }
        if self.rounds.is_empty() {
            return Err(MdsError::InvalidDistances("no complete rounds".into()));
        }
        let mut mean = Matrix::zeros(n, n);
        for (d, _) in &self.rounds {
            mean += d;
        }
        mean /= self.rounds.len() as f64;
        let solution = classical_mds(&DistanceMatrix::new(mean)?, dim)?;

        let weights: Vec<f64> = self
            .members
            .iter()
            .map(|id| if existing.contains_key(id) && !self.pending.contains(id) { 1.0 } else { 0.0 })
            .collect();
        let (placed, low_confidence) = if weights.iter().any(|&w| w > 0.0) {
            let reference: Vec<Vec3> = self
                .members
                .iter()
                .map(|id| existing.get(id).copied().unwrap_or_else(Vec3::zeros))
                .collect();
            let fit = align_to_reference(&solution.positions, &reference, &weights, true)?;
            let few = weights.iter().filter(|&&w| w > 0.0).count() < 3;
            (fit.aligned, fit.low_confidence || few)
        } else {
            (solution.positions.clone(), false)
        };

        let mut positions: BTreeMap<NodeId, Vec3> = self.members.iter().copied().zip(placed).collect();
        for (id, p) in existing {
            if !self.pending.contains(id) && positions.contains_key(id) {
                positions.insert(*id, *p);
            }
        }
        let mut pairs = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                let (i, j) = (self.members[a], self.members[b]);
                if !self.pending.contains(&i) && !self.pending.contains(&j) {
                    continue;
                }
                let rel: Vec<UnitQuat> = self
                    .rounds
                    .iter()
                    .map(|(_, qs)| math::quat_relative(&qs[a], &qs[b]))
                    .collect();
                let state = PairState::new(
                    positions[&j] - positions[&i],
                    Vec3::zeros(),
                    math::quat_average(&rel),
                    Mat6::identity(),
                    t,
                );
                pairs.push(((i, j), state));
            }
        }
        Ok(Initialization {
            pairs,
            positions,
            low_confidence,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize, planar: bool) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    if planar { 0.0 } else { rng.random_range(-5.0..5.0) },
                )
            })
            .collect()
    }

    fn max_distance_error(a: &[Vec3], d: &DistanceMatrix) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..a.len() {
            for j in 0..a.len() {
                worst = worst.max(((a[i] - a[j]).norm() - d.get(i, j)).abs());
            }
        }
        worst
    }

    #[test]
    fn two_point_kernel() {
        let d = DistanceMatrix::new(Matrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let k = double_center(&d);
        // -1/2 J D^2 J by hand: J = [[.5,-.5],[-.5,.5]], D^2 = [[0,1],[1,0]]
        let expected = Matrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
        assert!((&k - expected).amax() < 1e-15);
        let sol = embed_kernel(&k, EmbeddingDim::Auto).unwrap();
        assert!((sol.eigenvalues[0] - 0.5).abs() < 1e-12);
        assert!(sol.eigenvalues[1].abs() < 1e-12);
        assert!((sol.positions[0].x.abs() - 0.5).abs() < 1e-12);
        assert!((sol.positions[0] + sol.positions[1]).norm() < 1e-12);
    }

    #[test]
    fn equilateral_triangle() {
        let d = Matrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 1.0 });
        let d = DistanceMatrix::new(d).unwrap();
        let sol = classical_mds(&d, EmbeddingDim::Auto).unwrap();
        assert_eq!(sol.embedding_dim_used, 2);
        assert!(max_distance_error(&sol.positions, &d) < 1e-9);
    }

    #[test]
    fn six_points_in_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let pts = random_points(&mut rng, 6, false);
        let d = DistanceMatrix::from_positions(&pts);
        let sol = classical_mds(&d, EmbeddingDim::Auto).unwrap();
        assert_eq!(sol.embedding_dim_used, 3);
        assert!(max_distance_error(&sol.positions, &d) < 1e-8);
        let centroid = sol.positions.iter().sum::<Vec3>() / 6.0;
        assert!(centroid.norm() < 1e-9);
    }

    #[test]
    fn rejects_invalid_input() {
        let d = DistanceMatrix::new(Matrix::from_fn(2, 2, |i, j| if i == j { 0.0 } else { 1.0 })).unwrap();
        assert_eq!(classical_mds(&d, EmbeddingDim::Auto), Err(MdsError::TooFewNodes(2)));
        let asym = Matrix::from_row_slice(3, 3, &[0.0, 1.0, 2.0, 1.5, 0.0, 1.0, 2.0, 1.0, 0.0]);
        assert!(DistanceMatrix::new(asym).is_err());
        let zero = DistanceMatrix::new(Matrix::zeros(3, 3)).unwrap();
        assert_eq!(classical_mds(&zero, EmbeddingDim::Auto), Err(MdsError::Degenerate));
    }

    #[test]
    fn identity_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let pts = random_points(&mut rng, 5, false);
        let fit = align_to_reference(&pts, &pts, &[1.0; 5], true).unwrap();
        assert!((fit.transform.rotation - Matrix3::identity()).amax() < 1e-9);
        assert!(fit.transform.translation.norm() < 1e-9);
    }

    #[test]
    fn recovers_quarter_turn() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let pts = random_points(&mut rng, 5, false);
        let rot = UnitQuat::from_axis_angle(&Vec3::z_axis(), std::f64::consts::FRAC_PI_2);
        let reference: Vec<Vec3> = pts.iter().map(|p| rot * p).collect();
        let fit = align_to_reference(&pts, &reference, &[1.0; 5], true).unwrap();
        assert!((fit.transform.rotation - rot.to_rotation_matrix().into_inner()).amax() < 1e-9);
        assert!(fit.residual < 1e-9);
    }

    #[test]
    fn recovers_mirror() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let pts = random_points(&mut rng, 6, false);
        let mirrored: Vec<Vec3> = pts.iter().map(|p| Vec3::new(p.x, p.y, -p.z)).collect();
        let fit = align_to_reference(&pts, &mirrored, &[1.0; 6], true).unwrap();
        assert!((fit.transform.rotation.determinant() + 1.0).abs() < 1e-9);
        assert!(fit.residual < 1e-9);
        let proper = align_to_reference(&pts, &mirrored, &[1.0; 6], false).unwrap();
        assert!((proper.transform.rotation.determinant() - 1.0).abs() < 1e-9);
        assert!(proper.residual > 1e-3);
    }

    #[test]
    fn collinear_reference_is_flagged() {
        let pts: Vec<Vec3> = (0..4).map(|k| Vec3::new(k as f64, 0.0, 0.0)).collect();
        let fit = align_to_reference(&pts, &pts, &[1.0; 4], true).unwrap();
        assert!(fit.low_confidence);
        assert!(fit.residual < 1e-9);
    }

    #[test]
    fn alignment_rejects_bad_weights() {
        let pts = vec![Vec3::zeros(); 3];
        assert_eq!(align_to_reference(&pts, &pts, &[0.0; 3], true), Err(MdsError::InvalidWeights));
        assert!(align_to_reference(&pts, &pts[..2], &[1.0; 3], true).is_err());
    }

    fn pair_states(positions: &BTreeMap<NodeId, Vec3>, offset: Vec3) -> BTreeMap<(NodeId, NodeId), PairState> {
        let ids: Vec<NodeId> = positions.keys().copied().collect();
        let mut out = BTreeMap::new();
        for (a, &i) in ids.iter().enumerate() {
            for &j in &ids[a + 1..] {
                let x = positions[&j] - positions[&i] + offset * (a as f64 + 1.0);
                out.insert((i, j), PairState::new(x, Vec3::x(), UnitQuat::identity(), Mat6::identity(), 0.0));
            }
        }
        out
    }

    #[test]
    fn refinement_blend_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let positions: BTreeMap<NodeId, Vec3> =
            random_points(&mut rng, 4, false).into_iter().enumerate().map(|(k, p)| (NodeId(k as u32), p)).collect();
        let mut states = pair_states(&positions, Vec3::new(0.3, -0.2, 0.1));
        let before = states.clone();
        refine_pair_states(states.iter_mut(), &positions, 0.0, 0.0);
        assert_eq!(states, before);
        refine_pair_states(states.iter_mut(), &positions, 1.0, 0.01);
        for ((i, j), s) in &states {
            assert_eq!(s.x, positions[j] - positions[i]);
            assert_eq!(s.v, Vec3::x());
            assert!((s.p[(0, 0)] - 1.01).abs() < 1e-15);
            assert_eq!(s.p[(3, 3)], 1.0);
        }
    }

    #[test]
    fn implied_positions_recover_consistent_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let pts = random_points(&mut rng, 5, false);
        let positions: BTreeMap<NodeId, Vec3> =
            pts.iter().enumerate().map(|(k, p)| (NodeId(k as u32 + 3), *p)).collect();
        let rel: BTreeMap<(NodeId, NodeId), Vec3> = pair_states(&positions, Vec3::zeros())
            .into_iter()
            .map(|(k, s)| (k, s.x))
            .collect();
        let ids: Vec<NodeId> = positions.keys().copied().collect();
        let implied = implied_positions(&ids, &rel);
        assert_eq!(implied[&NodeId(3)], Vec3::zeros());
        for id in &ids {
            let expected = positions[id] - positions[&NodeId(3)];
            assert!((implied[id] - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn join_into_static_triangle() {
        // three placed nodes, one newcomer; noisy ranges averaged over k rounds
        let truth = [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(3.0, 0.0, 0.0),
            Vec3::new(1.0, 2.5, 0.0),
            Vec3::new(2.5, 1.8, 0.0),
        ];
        let ids: Vec<NodeId> = (0..4).map(NodeId).collect();
        let existing: BTreeMap<NodeId, Vec3> = ids[..3].iter().zip(&truth).map(|(i, p)| (*i, *p)).collect();
        let members: BTreeSet<NodeId> = ids.iter().copied().collect();
        let pending: BTreeSet<NodeId> = [NodeId(3)].into_iter().collect();
        let k = 10;
        let sigma = 0.116;
        let mut window = InitWindow::new(&members, &pending, k);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let normal = rand_distr::Normal::new(0.0, sigma).unwrap();
        let orientations: BTreeMap<NodeId, UnitQuat> = ids.iter().map(|i| (*i, UnitQuat::identity())).collect();
        for _ in 0..k {
            let mut d = BTreeMap::new();
            for a in 0..4 {
                for b in a + 1..4 {
                    d.insert((ids[a], ids[b]), (truth[b] - truth[a]).norm() + rng.sample(normal));
                }
            }
            assert!(window.push_round(&d, &orientations));
        }
        assert!(window.is_ready());
        let init = window.initialize(&existing, EmbeddingDim::Two, 1.0).unwrap();
        assert_eq!(init.pairs.len(), 3);
        // averaging bound on each range, propagated loosely to the position
        let bound = 3.0 * sigma / (k as f64).sqrt();
        for ((i, j), state) in &init.pairs {
            let expected = truth[j.0 as usize] - truth[i.0 as usize];
            assert!((state.x - expected).norm() < 2.0 * bound, "pair {i}-{j}: {}", (state.x - expected).norm());
            assert_eq!(state.v, Vec3::zeros());
            assert_eq!(state.p, Mat6::identity());
        }
    }

    #[test]
    fn incomplete_round_is_ignored() {
        let members: BTreeSet<NodeId> = (0..3).map(NodeId).collect();
        let mut window = InitWindow::new(&members, &members, 2);
        let mut d = BTreeMap::new();
        d.insert((NodeId(0), NodeId(1)), 1.0);
        let q: BTreeMap<NodeId, UnitQuat> = members.iter().map(|i| (*i, UnitQuat::identity())).collect();
        assert!(!window.push_round(&d, &q));
        assert_eq!(window.rounds(), 0);
    }
}
