//! Planar and spatial poses, small vector types and the quaternion
//! absolute-orientation fit used to tilt vehicles over terrain.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_pi(angle: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut a = angle - two_pi * ((angle + PI) / two_pi).floor();
    if a <= -PI {
        a += two_pi;
    }
    if a > PI {
        a -= two_pi;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z component of the 3D cross product of `(self, 0)` and `(o, 0)`.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    /// `omega * z_hat` crossed with `self`.
    pub fn cross_scalar(omega: f64, v: Vec2) -> Vec2 {
        Vec2::new(-omega * v.y, omega * v.x)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        Vec2::new(self.x / n, self.y / n)
    }

    /// Left-hand perpendicular (rotated +90 degrees).
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl SubAssign for Vec2 {
    fn sub_assign(&mut self, o: Vec2) {
        self.x -= o.x;
        self.y -= o.y;
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Rotates `v` counter-clockwise by `theta`.
pub fn rotate_z(v: Vec2, theta: f64) -> Vec2 {
    let (s, c) = theta.sin_cos();
    Vec2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    fn component(self, i: usize) -> f64 {
        match i {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Unit quaternion `(w, x, y, z)`, kept in canonical form with `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quat {
    fn default() -> Self {
        Quat::IDENTITY
    }
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Builds a normalized, canonical quaternion from raw components.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }.normalized()
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = axis.norm();
        let (s, c) = (angle / 2.0).sin_cos();
        Quat::new(c, s * axis.x / n, s * axis.y / n, s * axis.z / n)
    }

    /// Z-Y-X intrinsic rotation: `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn from_ypr(yaw: f64, pitch: f64, roll: f64) -> Self {
        let qz = Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), yaw);
        let qy = Quat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), pitch);
        let qx = Quat::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), roll);
        qz.mul(qy).mul(qx)
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        let s = if self.w < 0.0 { -1.0 / n } else { 1.0 / n };
        Quat { w: self.w * s, x: self.x * s, y: self.y * s, z: self.z * s }
    }

    pub fn conjugate(self) -> Self {
        Quat { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Hamilton product, renormalized and canonicalized.
    pub fn mul(self, o: Quat) -> Quat {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(t)
    }

    /// Row-major rotation matrix.
    pub fn to_matrix(self) -> [[f64; 3]; 3] {
        let Quat { w, x, y, z } = self;
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    /// Inverse of [`Quat::from_ypr`]. Pitch is a right-hand rotation about
    /// the body y axis, so a positive pitch lowers the +x (front) end.
    pub fn to_ypr(self) -> (f64, f64, f64) {
        let m = self.to_matrix();
        let yaw = m[1][0].atan2(m[0][0]);
        let pitch = (-m[2][0]).clamp(-1.0, 1.0).asin();
        let roll = m[2][1].atan2(m[2][2]);
        (yaw, pitch, roll)
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn angle(self) -> f64 {
        let v = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * v.atan2(self.w.abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw: wrap_pi(yaw) }
    }

    pub fn translation(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// Maps a point from this pose's local frame to the parent frame.
    pub fn transform_point(&self, p: Vec2) -> Vec2 {
        rotate_z(p, self.yaw) + self.translation()
    }

    pub fn inverse_transform_point(&self, p: Vec2) -> Vec2 {
        rotate_z(p - self.translation(), -self.yaw)
    }

    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let t = self.transform_point(other.translation());
        Pose2::new(t.x, t.y, self.yaw + other.yaw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose3 {
    pub t: Vec3,
    pub q: Quat,
}

impl Pose3 {
    pub const IDENTITY: Pose3 = Pose3 { t: Vec3::ZERO, q: Quat::IDENTITY };

    pub fn new(t: Vec3, q: Quat) -> Self {
        Self { t, q: q.normalized() }
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        self.q.rotate(p) + self.t
    }

    pub fn inverse(&self) -> Pose3 {
        let qi = self.q.conjugate();
        Pose3::new(-qi.rotate(self.t), qi)
    }
}

/// Rigid composition: the result applies `b` first, then `a`.
pub fn compose(a: &Pose3, b: &Pose3) -> Pose3 {
    Pose3::new(a.q.rotate(b.t) + a.t, a.q.mul(b.q))
}

/// Corresponding points in a body frame and in the world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointPairSet {
    pairs: Vec<(Vec3, Vec3)>,
}

impl PointPairSet {
    pub fn new(pairs: Vec<(Vec3, Vec3)>) -> Result<Self, GeometryError> {
        if pairs.len() < 3 {
            return Err(GeometryError::DegenerateGeometry(format!(
                "need at least 3 point pairs, got {}",
                pairs.len()
            )));
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(Vec3, Vec3)] {
        &self.pairs
    }
}

/// Result of [`horn_fit`]: the best rigid transform and its RMS residual in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HornFit {
    pub pose: Pose3,
    pub residual: f64,
}

const EIGEN_TOL: f64 = 1e-12;
const EIGEN_MAX_SWEEPS: usize = 100;
const COLLINEAR_RATIO: f64 = 1e-9;

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
///
/// Returns eigenvalues and the matrix whose *columns* are the matching
/// eigenvectors. Unsorted.
pub fn symmetric_eigen<const N: usize>(mut a: [[f64; N]; N]) -> ([f64; N], [[f64; N]; N]) {
    let mut v = [[0.0; N]; N];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..EIGEN_MAX_SWEEPS {
        let off: f64 = (0..N)
            .flat_map(|i| (0..N).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= EIGEN_TOL * scale || off == 0.0 {
            break;
        }
        for p in 0..N {
            for q in (p + 1)..N {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..N {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..N {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut eig = [0.0; N];
    for (i, e) in eig.iter_mut().enumerate() {
        *e = a[i][i];
    }
    (eig, v)
}

fn centroid(points: impl Iterator<Item = Vec3>) -> Vec3 {
    let mut n = 0usize;
    let mut sum = Vec3::ZERO;
    for p in points {
        sum = sum + p;
        n += 1;
    }
    sum * (1.0 / n as f64)
}

/// Closed-form least-squares rigid alignment (Horn's unit-quaternion method).
///
/// Finds the pose minimizing `sum |world_i - (R local_i + t)|^2`.
pub fn horn_fit(set: &PointPairSet) -> Result<HornFit, GeometryError> {
    let pairs = set.pairs();
    let cl = centroid(pairs.iter().map(|p| p.0));
    let cw = centroid(pairs.iter().map(|p| p.1));

    let mut cov = [[0.0; 3]; 3];
    let mut s = [[0.0; 3]; 3];
    for (l, w) in pairs {
        let l = *l - cl;
        let w = *w - cw;
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += l.component(a) * l.component(b);
                s[a][b] += l.component(a) * w.component(b);
            }
        }
    }

    // Rank test on the centered local points: coplanar is fine, collinear is not.
    let (ev, _) = symmetric_eigen(cov);
    let mut sv = ev.map(|e| e.max(0.0).sqrt());
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] == 0.0 || sv[1] < COLLINEAR_RATIO * sv[0] {
        return Err(GeometryError::DegenerateGeometry(
            "local points are collinear".into(),
        ));
    }

    let [[sxx, sxy, sxz], [syx, syy, syz], [szx, szy, szz]] = s;
    let n = [
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ];
    let (vals, vecs) = symmetric_eigen(n);
    let best = (0..4).max_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    let q = Quat::new(vecs[0][best], vecs[1][best], vecs[2][best], vecs[3][best]);
    let t = cw - q.rotate(cl);
    let pose = Pose3::new(t, q);

    let sq: f64 = pairs
        .iter()
        .map(|(l, w)| {
            let d = *w - pose.transform_point(*l);
            d.dot(d)
        })
        .sum();
    Ok(HornFit { pose, residual: (sq / pairs.len() as f64).sqrt() })
}
