//! Rigid-body math, point-cloud containers, exact nearest-neighbor search
//! and normal estimation.
//!
//! Poses store rotation as a unit quaternion that is renormalized after every
//! composition, so long chains do not drift away from the group. The minimal
//! 6-vector parameterization used by the optimizer is the split form
//! `[translation, rotation log]`: translation passes through unchanged and the
//! rotational part is the SO(3) exponential/logarithm.

use nalgebra::{Matrix3, Matrix4, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation angle within 1e-6 of pi; log map is ill-conditioned")]
    AngleNearPi,
    #[error("operation needs at least {needed} points, cloud has {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("operation requires a nonempty point cloud")]
    EmptyCloud,
}

/// Rigid transform in 3D: rotation (unit quaternion) plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Build from parts, renormalizing the quaternion.
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: UnitQuaternion::new_normalize(*rotation.quaternion()),
            translation,
        }
    }

    /// From raw quaternion coefficients `(qx, qy, qz, qw)` and translation.
    pub fn from_coeffs(q: [f64; 4], t: [f64; 3]) -> Self {
        let quat = Quaternion::new(q[3], q[0], q[1], q[2]);
        Pose {
            rotation: UnitQuaternion::new_normalize(quat),
            translation: Vector3::new(t[0], t[1], t[2]),
        }
    }

    pub fn from_yaw(yaw: f64) -> Self {
        Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            Vector3::zeros(),
        )
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Quaternion coefficients in file order `(qx, qy, qz, qw)`.
    pub fn coeffs(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.i, q.j, q.k, q.w]
    }

    /// Apply `self` then... no: returns the transform applying `other` first,
    /// then `self` (standard group product).
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: UnitQuaternion::new_normalize(
                *(self.rotation * other.rotation).quaternion(),
            ),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv_rot = self.rotation.inverse();
        Pose {
            rotation: inv_rot,
            translation: -(inv_rot * self.translation),
        }
    }

    /// Relative transform `self⁻¹ · other`, so `self.compose(&rel) == other`.
    pub fn relative(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotation angle in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation.to_rotation_matrix().into_inner());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Exponential of the split 6-vector `[tx ty tz, wx wy wz]`.
    pub fn exp_map(v: &Vector6<f64>) -> Pose {
        let t = Vector3::new(v[0], v[1], v[2]);
        let w = Vector3::new(v[3], v[4], v[5]);
        Pose {
            rotation: UnitQuaternion::from_scaled_axis(w),
            translation: t,
        }
    }

    /// Split logarithm, inverse of [`Pose::exp_map`].
    ///
    /// Fails with [`GeometryError::AngleNearPi`] when the rotation angle is
    /// within 1e-6 of pi, where the axis becomes ambiguous.
    pub fn log_map(&self) -> Result<Vector6<f64>, GeometryError> {
        if self.rotation_angle() > std::f64::consts::PI - 1e-6 {
            return Err(GeometryError::AngleNearPi);
        }
        Ok(self.log_unchecked())
    }

    /// Split logarithm without the near-pi guard. At exactly pi either sign of
    /// the axis is a valid log; callers that only need a residual use this.
    pub(crate) fn log_unchecked(&self) -> Vector6<f64> {
        let w = self.rotation.scaled_axis();
        let t = self.translation;
        Vector6::new(t[0], t[1], t[2], w[0], w[1], w[2])
    }

    /// Distance of `self` from `other`: translation norm and rotation angle
    /// of the relative transform.
    pub fn distance_to(&self, other: &Pose) -> (f64, f64) {
        let d = self.relative(other);
        (d.translation.norm(), d.rotation_angle())
    }
}

/// Skew-symmetric (cross-product) matrix of `v`.
pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

/// Inverse of the left Jacobian of SO(3) at `phi`.
///
/// Used by the pose-graph residual Jacobians: perturbing `Log(Exp(eps)·R)`
/// gives `Log(R) + Jl⁻¹(Log R)·eps` to first order.
pub(crate) fn left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let hat = skew(phi);
    if theta < 1e-8 {
        // series: I - 1/2 hat + 1/12 hat^2
        return Matrix3::identity() - 0.5 * hat + hat * hat / 12.0;
    }
    let coeff = 1.0 / (theta * theta)
        - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() - 0.5 * hat + coeff * (hat * hat)
}

/// Symmetrize-and-check helper for 6x6 information matrices.
pub fn is_symmetric_positive_definite(m: &Matrix6<f64>) -> bool {
    let sym_err = (m - m.transpose()).norm();
    if sym_err > 1e-9 * (1.0 + m.norm()) {
        return false;
    }
    m.clone_owned().cholesky().is_some()
}

/// Ground-truth class of a simulated point. `object` indexes the primitive
/// within its class so evaluation can tell which low-dynamic box a point
/// belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointLabel {
    Static,
    LowDynamic { object: u16 },
    HighDynamic { object: u16 },
}

impl PointLabel {
    pub fn class_byte(&self) -> u8 {
        match self {
            PointLabel::Static => 0,
            PointLabel::LowDynamic { .. } => 1,
            PointLabel::HighDynamic { .. } => 2,
        }
    }

    pub fn object_id(&self) -> u16 {
        match self {
            PointLabel::Static => 0,
            PointLabel::LowDynamic { object } | PointLabel::HighDynamic { object } => *object,
        }
    }

    pub fn from_parts(class: u8, object: u16) -> Option<PointLabel> {
        match class {
            0 => Some(PointLabel::Static),
            1 => Some(PointLabel::LowDynamic { object }),
            2 => Some(PointLabel::HighDynamic { object }),
            _ => None,
        }
    }
}

/// One sensor sweep: points in the sensor frame. `rings` carries the beam id
/// per point when the sensor provides it; `labels` is simulator ground truth.
#[derive(Debug, Clone)]
pub struct Scan {
    pub id: u64,
    pub points: Vec<Vector3<f64>>,
    pub rings: Option<Vec<u16>>,
    pub labels: Option<Vec<PointLabel>>,
}

impl Scan {
    pub fn new(id: u64, points: Vec<Vector3<f64>>) -> Self {
        Scan {
            id,
            points,
            rings: None,
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Scan with all points rotated about the sensor z-axis. Ring ids and
    /// labels are untouched.
    pub fn yaw_rotated(&self, yaw: f64) -> Scan {
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
        Scan {
            id: self.id,
            points: self.points.iter().map(|p| rot * p).collect(),
            rings: self.rings.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// Point cloud with optional per-point attributes. All attribute vectors,
/// when present, have the same length as `points`. A zero normal marks a
/// point whose neighborhood was too degenerate to orient (treated as absent).
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
    pub origin_index: Option<Vec<u32>>,
    pub live_mask: Vec<bool>,
    pub labels: Option<Vec<PointLabel>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Vector3<f64>>) -> Self {
        let live_mask = vec![true; points.len()];
        PointCloud {
            points,
            normals: None,
            origin_index: None,
            live_mask,
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn live_count(&self) -> usize {
        self.live_mask.iter().filter(|&&l| l).count()
    }

    pub fn live_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.live_mask[i]).collect()
    }

    /// All fields transformed into another frame.
    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            normals: self.normals.as_ref().map(|ns| {
                ns.iter()
                    .map(|n| {
                        if n.norm_squared() == 0.0 {
                            *n
                        } else {
                            pose.rotation() * n
                        }
                    })
                    .collect()
            }),
            origin_index: self.origin_index.clone(),
            live_mask: self.live_mask.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Subset by point index, preserving attribute alignment.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| indices.iter().map(|&i| ns[i]).collect()),
            origin_index: self
                .origin_index
                .as_ref()
                .map(|os| indices.iter().map(|&i| os[i]).collect()),
            live_mask: indices.iter().map(|&i| self.live_mask[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|ls| indices.iter().map(|&i| ls[i]).collect()),
        }
    }

    pub fn validate(&self) -> bool {
        let n = self.len();
        self.live_mask.len() == n
            && self.normals.as_ref().is_none_or(|v| v.len() == n)
            && self.origin_index.as_ref().is_none_or(|v| v.len() == n)
            && self.labels.as_ref().is_none_or(|v| v.len() == n)
    }
}

const KD_LEAF_SIZE: usize = 16;

enum KdNode {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: Box<KdNode>,
        right: Box<KdNode>,
    },
}

/// Exact nearest-neighbor index over a fixed snapshot of the live points of a
/// cloud. Queries return original point indices and match a brute-force
/// linear scan exactly (ties broken toward the lower index).
pub struct SpatialIndex {
    points: Vec<Vector3<f64>>,
    ids: Vec<usize>,
    order: Vec<usize>,
    root: KdNode,
}

impl SpatialIndex {
    /// Index the live points of `cloud`. Errors when no live point exists.
    pub fn build(cloud: &PointCloud) -> Result<SpatialIndex, GeometryError> {
        let ids = cloud.live_indices();
        if ids.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        let points: Vec<Vector3<f64>> = ids.iter().map(|&i| cloud.points[i]).collect();
        Ok(Self::from_indexed(points, ids))
    }

    pub fn from_points(points: &[Vector3<f64>]) -> Result<SpatialIndex, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        Ok(Self::from_indexed(points.to_vec(), (0..points.len()).collect()))
    }

    fn from_indexed(points: Vec<Vector3<f64>>, ids: Vec<usize>) -> SpatialIndex {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = Self::split(&points, &mut order, 0, points.len());
        SpatialIndex {
            points,
            ids,
            order,
            root,
        }
    }

    fn split(points: &[Vector3<f64>], order: &mut [usize], start: usize, end: usize) -> KdNode {
        let n = end - start;
        if n <= KD_LEAF_SIZE {
            return KdNode::Leaf { start, end };
        }
        // widest-extent axis keeps the tree balanced on skewed data
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in &order[start..end] {
            let p = &points[i];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extents = hi - lo;
        let axis = if extents[0] >= extents[1] && extents[0] >= extents[2] {
            0
        } else if extents[1] >= extents[2] {
            1
        } else {
            2
        };
        let mid = start + n / 2;
        order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis]
                .partial_cmp(&points[b][axis])
                .unwrap()
                .then(a.cmp(&b))
        });
        let value = points[order[mid]][axis];
        if extents[axis] == 0.0 {
            // all points coincide on every axis; avoid infinite recursion
            return KdNode::Leaf { start, end };
        }
        let left = Box::new(Self::split(points, order, start, mid));
        let right = Box::new(Self::split(points, order, mid, end));
        KdNode::Split {
            axis,
            value,
            left,
            right,
        }
    }

    /// Exact nearest neighbor: `(original point id, euclidean distance)`.
    pub fn nearest(&self, query: &Vector3<f64>) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(&self.root, query, &mut best);
        let (slot, d2) = best;
        (self.ids[slot], d2.sqrt())
    }

    fn consider(&self, slot: usize, query: &Vector3<f64>, best: &mut (usize, f64)) {
        let d2 = (self.points[slot] - query).norm_squared();
        let better = match best.0 {
            usize::MAX => d2 < best.1,
            held => d2 < best.1 || (d2 == best.1 && self.ids[slot] < self.ids[held]),
        };
        if better {
            *best = (slot, d2);
        }
    }

    fn nearest_rec(&self, node: &KdNode, query: &Vector3<f64>, best: &mut (usize, f64)) {
        match node {
            KdNode::Leaf { start, end } => {
                for &slot in &self.order[*start..*end] {
                    self.consider(slot, query, best);
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[*axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.nearest_rec(near, query, best);
                // <= so ties on the splitting plane still reach the far side
                if diff * diff <= best.1 {
                    self.nearest_rec(far, query, best);
                }
            }
        }
    }

    /// All original ids within `r` of `query` (inclusive), ascending.
    pub fn radius(&self, query: &Vector3<f64>, r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.radius_rec(&self.root, query, r * r, r, &mut out);
        out.sort_unstable();
        out
    }

    fn radius_rec(
        &self,
        node: &KdNode,
        query: &Vector3<f64>,
        r2: f64,
        r: f64,
        out: &mut Vec<usize>,
    ) {
        match node {
            KdNode::Leaf { start, end } => {
                for &slot in &self.order[*start..*end] {
                    if (self.points[slot] - query).norm_squared() <= r2 {
                        out.push(self.ids[slot]);
                    }
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                if query[*axis] - r <= *value {
                    self.radius_rec(left, query, r2, r, out);
                }
                if query[*axis] + r >= *value {
                    self.radius_rec(right, query, r2, r, out);
                }
            }
        }
    }

    /// The `k` nearest neighbors as `(original id, distance)`, closest first.
    /// Ties broken toward lower ids, matching a stable brute-force sort.
    pub fn knn(&self, query: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.knn_rec(&self.root, query, k, &mut heap);
        heap.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        heap.into_iter().map(|(d2, id)| (id, d2.sqrt())).collect()
    }

    fn knn_bound(heap: &[(f64, usize)], k: usize) -> f64 {
        if heap.len() < k {
            f64::INFINITY
        } else {
            heap.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max)
        }
    }

    fn knn_rec(&self, node: &KdNode, query: &Vector3<f64>, k: usize, heap: &mut Vec<(f64, usize)>) {
        match node {
            KdNode::Leaf { start, end } => {
                for &slot in &self.order[*start..*end] {
                    let d2 = (self.points[slot] - query).norm_squared();
                    let id = self.ids[slot];
                    heap.push((d2, id));
                }
                if heap.len() > k {
                    heap.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                    heap.truncate(k);
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[*axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.knn_rec(near, query, k, heap);
                if diff * diff <= Self::knn_bound(heap, k) {
                    self.knn_rec(far, query, k, heap);
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-point unit normals from the smallest principal axis of the `k`
/// nearest live neighbors (the point itself included). When `origin_index`
/// and origins are available the normal is flipped toward the observing
/// sensor origin; otherwise toward a canonical half-space.
///
/// Neighborhoods with covariance condition number above 1e6 produce a zero
/// ("null") normal. Masked-out points keep a zero normal as well.
pub fn estimate_normals(
    cloud: &PointCloud,
    k: usize,
    origins: Option<&[Vector3<f64>]>,
) -> Result<PointCloud, GeometryError> {
    let live = cloud.live_indices();
    if live.len() < k {
        return Err(GeometryError::TooFewPoints {
            needed: k,
            got: live.len(),
        });
    }
    let index = SpatialIndex::build(cloud)?;
    let normals = normals_for(cloud, &index, &live, k, origins);
    let mut out = cloud.clone();
    let mut all = vec![Vector3::zeros(); cloud.len()];
    for (slot, &i) in live.iter().enumerate() {
        all[i] = normals[slot];
    }
    out.normals = Some(all);
    Ok(out)
}

/// Normals for a subset of points against a prebuilt index (used by the
/// submap pipeline to refresh only newly inserted points).
pub(crate) fn normals_for(
    cloud: &PointCloud,
    index: &SpatialIndex,
    targets: &[usize],
    k: usize,
    origins: Option<&[Vector3<f64>]>,
) -> Vec<Vector3<f64>> {
    let jobs: Vec<usize> = targets.to_vec();
    crate::map_ordered(jobs, |i| {
        let p = cloud.points[i];
        let neigh = index.knn(&p, k);
        if neigh.len() < 3 {
            return Vector3::zeros();
        }
        let mut centroid = Vector3::zeros();
        for (id, _) in &neigh {
            centroid += cloud.points[*id];
        }
        centroid /= neigh.len() as f64;
        let mut cov = Matrix3::zeros();
        for (id, _) in &neigh {
            let d = cloud.points[*id] - centroid;
            cov += d * d.transpose();
        }
        let eig = nalgebra::SymmetricEigen::new(cov);
        // smallest eigenvalue -> normal direction
        let mut min_i = 0;
        let mut max_i = 0;
        for a in 1..3 {
            if eig.eigenvalues[a] < eig.eigenvalues[min_i] {
                min_i = a;
            }
            if eig.eigenvalues[a] > eig.eigenvalues[max_i] {
                max_i = a;
            }
        }
        let lmin = eig.eigenvalues[min_i].max(0.0);
        let lmax = eig.eigenvalues[max_i].max(0.0);
        if lmin <= 0.0 || lmax / lmin > 1e6 {
            return Vector3::zeros();
        }
        let mut n = eig.eigenvectors.column(min_i).into_owned();
        let nn = n.norm();
        if nn == 0.0 {
            return Vector3::zeros();
        }
        n /= nn;
        let toward = origins
            .zip(cloud.origin_index.as_ref())
            .map(|(os, oi)| os[oi[i] as usize] - p);
        match toward {
            Some(v) => {
                if n.dot(&v) < 0.0 {
                    n = -n;
                }
            }
            None => {
                // canonical orientation: positive z, then y, then x
                if n[2] < 0.0 || (n[2] == 0.0 && (n[1] < 0.0 || (n[1] == 0.0 && n[0] < 0.0))) {
                    n = -n;
                }
            }
        }
        n
    })
}

/// Angle between two unit normals in radians; `None` when either is null.
pub(crate) fn normal_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> Option<f64> {
    if a.norm_squared() == 0.0 || b.norm_squared() == 0.0 {
        return None;
    }
    Some(a.dot(b).abs().clamp(-1.0, 1.0).acos())
}
