//! Planar rigid-body layer: convex footprints, separating-axis contact
//! detection, sequential-impulse contact resolution and semi-implicit
//! Euler integration.
//!
//! Wheels never enter this layer; their forces arrive through
//! [`apply_force_at`] before every step.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{rotate_z, wrap_pi, Pose2, Vec2, Vec3};

/// Penetration below this depth is not reported as a contact (m).
pub const CONTACT_SLOP: f64 = 1e-4;
/// Fraction of the remaining penetration removed per step.
pub const POSITION_CORRECTION: f64 = 0.2;
pub const SOLVER_ITERATIONS: usize = 8;
/// Coulomb coefficient between colliding bodies.
pub const CONTACT_FRICTION: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<Vec2>,
}

impl ConvexPolygon {
    /// Validates a strictly convex polygon. Clockwise input is reversed.
    pub fn new(mut vertices: Vec<Vec2>) -> Result<Self, PhysicsError> {
        if vertices.len() < 3 {
            return Err(PhysicsError::InvalidPolygon(format!(
                "need at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        if signed_area(&vertices) < 0.0 {
            vertices.reverse();
        }
        let n = vertices.len();
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            if (b - a).cross(c - b) <= 0.0 {
                return Err(PhysicsError::InvalidPolygon(
                    "vertices are not strictly convex".into(),
                ));
            }
        }
        Ok(Self { vertices })
    }

    /// Axis-aligned rectangle centered on the origin.
    pub fn rectangle(length: f64, width: f64) -> Self {
        let (hx, hy) = (length / 2.0, width / 2.0);
        Self {
            vertices: vec![
                Vec2::new(-hx, -hy),
                Vec2::new(hx, -hy),
                Vec2::new(hx, hy),
                Vec2::new(-hx, hy),
            ],
        }
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn centroid(&self) -> Vec2 {
        let n = self.vertices.len();
        let mut c = Vec2::ZERO;
        let mut a2 = 0.0;
        for i in 0..n {
            let p = self.vertices[i];
            let q = self.vertices[(i + 1) % n];
            let cr = p.cross(q);
            a2 += cr;
            c += (p + q) * cr;
        }
        c * (1.0 / (3.0 * a2))
    }

    /// Polar moment of inertia of a uniform lamina of `mass` about `about`.
    pub fn inertia(&self, mass: f64, about: Vec2) -> f64 {
        let n = self.vertices.len();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            let p = self.vertices[i];
            let q = self.vertices[(i + 1) % n];
            let cr = p.cross(q);
            num += cr * (p.dot(p) + p.dot(q) + q.dot(q));
            den += cr;
        }
        let about_origin = mass * num / (6.0 * den);
        let c = self.centroid();
        about_origin - mass * c.norm_sq() + mass * (c - about).norm_sq()
    }

    pub fn world_vertices(&self, pose: &Pose2) -> Vec<Vec2> {
        self.vertices.iter().map(|v| pose.transform_point(*v)).collect()
    }
}

fn signed_area(v: &[Vec2]) -> f64 {
    let n = v.len();
    (0..n).map(|i| v[i].cross(v[(i + 1) % n])).sum::<f64>() / 2.0
}

/// Andrew's monotone chain; collinear points on the hull are dropped.
pub fn convex_hull(points: &[Vec2]) -> Result<ConvexPolygon, PhysicsError> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return Err(PhysicsError::DegenerateGeometry(
            "fewer than 3 distinct points".into(),
        ));
    }
    let mut hull: Vec<Vec2> = Vec::with_capacity(pts.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Vec2>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 {
                let a = hull[hull.len() - 2];
                let b = hull[hull.len() - 1];
                if (b - a).cross(p - b) <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        hull.pop();
    }
    if hull.len() < 3 {
        return Err(PhysicsError::DegenerateGeometry("points are collinear".into()));
    }
    ConvexPolygon::new(hull)
}

/// Planar footprint of a mesh: hull of the (x, y) projection of every vertex
/// whose z lies within `[z_min, z_max]`.
pub fn collision_polygon_from_mesh(
    vertices: &[Vec3],
    z_min: f64,
    z_max: f64,
) -> Result<ConvexPolygon, PhysicsError> {
    let projected: Vec<Vec2> = vertices
        .iter()
        .filter(|v| v.z >= z_min && v.z <= z_max)
        .map(|v| Vec2::new(v.x, v.y))
        .collect();
    convex_hull(&projected)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigidBody2D {
    /// Pose of the body reference frame (not necessarily the COM).
    pub pose: Pose2,
    /// World-frame velocity of the center of mass.
    pub vel: Vec2,
    pub omega: f64,
    pub mass: f64,
    pub izz: f64,
    pub com_local: Vec2,
    pub shape: ConvexPolygon,
    pub force_acc: Vec2,
    pub torque_acc: f64,
    pub is_static: bool,
}

impl RigidBody2D {
    pub fn new_dynamic(shape: ConvexPolygon, pose: Pose2, mass: f64, izz: f64, com_local: Vec2) -> Self {
        assert!(mass > 0.0 && izz > 0.0, "dynamic bodies need positive mass and inertia");
        Self {
            pose,
            vel: Vec2::ZERO,
            omega: 0.0,
            mass,
            izz,
            com_local,
            shape,
            force_acc: Vec2::ZERO,
            torque_acc: 0.0,
            is_static: false,
        }
    }

    pub fn new_static(shape: ConvexPolygon, pose: Pose2) -> Self {
        Self {
            pose,
            vel: Vec2::ZERO,
            omega: 0.0,
            mass: 0.0,
            izz: 0.0,
            com_local: Vec2::ZERO,
            shape,
            force_acc: Vec2::ZERO,
            torque_acc: 0.0,
            is_static: true,
        }
    }

    pub fn com_world(&self) -> Vec2 {
        self.pose.transform_point(self.com_local)
    }

    pub fn inv_mass(&self) -> f64 {
        if self.is_static { 0.0 } else { 1.0 / self.mass }
    }

    pub fn inv_inertia(&self) -> f64 {
        if self.is_static { 0.0 } else { 1.0 / self.izz }
    }

    /// World velocity of a world-frame point rigidly attached to the body.
    pub fn velocity_at(&self, world_point: Vec2) -> Vec2 {
        self.vel + Vec2::cross_scalar(self.omega, world_point - self.com_world())
    }

    /// Sets the velocity of the body reference point (rather than the COM).
    pub fn set_reference_velocity(&mut self, v_ref: Vec2, omega: f64) {
        self.omega = omega;
        let arm = rotate_z(self.com_local, self.pose.yaw);
        self.vel = v_ref + Vec2::cross_scalar(omega, arm);
    }

    pub fn kinetic_energy(&self) -> f64 {
        if self.is_static {
            return 0.0;
        }
        0.5 * self.mass * self.vel.norm_sq() + 0.5 * self.izz * self.omega * self.omega
    }

    fn aabb(&self) -> (Vec2, Vec2) {
        let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in self.shape.vertices() {
            let w = self.pose.transform_point(*v);
            lo = Vec2::new(lo.x.min(w.x), lo.y.min(w.y));
            hi = Vec2::new(hi.x.max(w.x), hi.y.max(w.y));
        }
        (lo, hi)
    }
}

/// Accumulates a body-frame force applied at a body-frame point.
pub fn apply_force_at(body: &mut RigidBody2D, force_local: Vec2, point_local: Vec2) {
    let f = rotate_z(force_local, body.pose.yaw);
    let arm = rotate_z(point_local - body.com_local, body.pose.yaw);
    body.force_acc += f;
    body.torque_acc += arm.cross(f);
}

/// Velocity half of the semi-implicit update; accumulators are cleared.
pub fn integrate_velocities(bodies: &mut [RigidBody2D], dt: f64) {
    for b in bodies.iter_mut() {
        if !b.is_static {
            b.vel += b.force_acc * (dt / b.mass);
            b.omega += b.torque_acc / b.izz * dt;
        }
        b.force_acc = Vec2::ZERO;
        b.torque_acc = 0.0;
    }
}

/// Position half of the semi-implicit update: the COM advances linearly and
/// the body rotates about it.
pub fn integrate_positions(bodies: &mut [RigidBody2D], dt: f64) {
    for b in bodies.iter_mut().filter(|b| !b.is_static) {
        let com = b.com_world() + b.vel * dt;
        let yaw = wrap_pi(b.pose.yaw + b.omega * dt);
        let origin = com - rotate_z(b.com_local, yaw);
        b.pose = Pose2 { x: origin.x, y: origin.y, yaw };
    }
}

/// One semi-implicit Euler step without contacts.
pub fn step(bodies: &mut [RigidBody2D], dt: f64) {
    assert!(dt > 0.0, "dt must be positive");
    integrate_velocities(bodies, dt);
    integrate_positions(bodies, dt);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contact {
    pub body_a: usize,
    pub body_b: usize,
    pub point: Vec2,
    /// Unit normal pointing from `body_a` towards `body_b`.
    pub normal: Vec2,
    pub depth: f64,
}

/// Largest separation of `b` from any face of `a`, with the face index.
fn max_separation(a: &[Vec2], b: &[Vec2]) -> (f64, usize) {
    let n = a.len();
    let mut best = (f64::NEG_INFINITY, 0);
    for i in 0..n {
        let edge = a[(i + 1) % n] - a[i];
        let normal = Vec2::new(edge.y, -edge.x).normalized();
        let sep = b
            .iter()
            .map(|p| (*p - a[i]).dot(normal))
            .fold(f64::INFINITY, f64::min);
        if sep > best.0 {
            best = (sep, i);
        }
    }
    best
}

/// Narrow phase between two world-space convex polygons. The returned normal
/// points from `a` to `b`.
pub fn polygon_contact(a: &[Vec2], b: &[Vec2]) -> Option<(Vec2, Vec2, f64)> {
    let (sep_a, face_a) = max_separation(a, b);
    if sep_a > -CONTACT_SLOP {
        return None;
    }
    let (sep_b, face_b) = max_separation(b, a);
    if sep_b > -CONTACT_SLOP {
        return None;
    }
    // Reference face is whichever polygon separates least badly.
    let (reference, incident, face, flip, sep) = if sep_a >= sep_b {
        (a, b, face_a, false, sep_a)
    } else {
        (b, a, face_b, true, sep_b)
    };
    let depth = -sep;
    let nr = reference.len();
    let r1 = reference[face];
    let r2 = reference[(face + 1) % nr];
    let tangent = (r2 - r1).normalized();
    let ref_normal = Vec2::new(tangent.y, -tangent.x);

    // Incident edge: most anti-parallel to the reference normal.
    let ni = incident.len();
    let inc = (0..ni)
        .min_by(|&i, &j| {
            let ei = incident[(i + 1) % ni] - incident[i];
            let ej = incident[(j + 1) % ni] - incident[j];
            let di = Vec2::new(ei.y, -ei.x).normalized().dot(ref_normal);
            let dj = Vec2::new(ej.y, -ej.x).normalized().dot(ref_normal);
            di.total_cmp(&dj)
        })
        .unwrap_or(0);
    let mut seg = vec![incident[inc], incident[(inc + 1) % ni]];
    seg = clip_segment(&seg, -tangent, -tangent.dot(r1));
    if seg.len() == 2 {
        seg = clip_segment(&seg, tangent, tangent.dot(r2));
    }
    let below: Vec<Vec2> = seg
        .iter()
        .copied()
        .filter(|p| (*p - r1).dot(ref_normal) <= 0.0)
        .collect();
    let point = if below.is_empty() {
        // Vertex-on-vertex corner case: deepest incident vertex.
        incident
            .iter()
            .copied()
            .min_by(|p, q| (*p - r1).dot(ref_normal).total_cmp(&(*q - r1).dot(ref_normal)))
            .unwrap_or(r1)
    } else {
        below.iter().fold(Vec2::ZERO, |acc, p| acc + *p) * (1.0 / below.len() as f64)
    };
    let normal = if flip { -ref_normal } else { ref_normal };
    Some((point, normal, depth))
}

/// Keeps the part of a segment with `n . p <= offset`.
fn clip_segment(seg: &[Vec2], n: Vec2, offset: f64) -> Vec<Vec2> {
    let d0 = n.dot(seg[0]) - offset;
    let d1 = n.dot(seg[1]) - offset;
    let mut out = Vec::with_capacity(2);
    if d0 <= 0.0 {
        out.push(seg[0]);
    }
    if d1 <= 0.0 {
        out.push(seg[1]);
    }
    if d0 * d1 < 0.0 {
        let t = d0 / (d0 - d1);
        out.push(seg[0] + (seg[1] - seg[0]) * t);
    }
    out
}

/// Broad phase: sweep over x-sorted bounding boxes. Returns index pairs
/// `(a, b)` with `a < b`, sorted.
fn candidate_pairs(bodies: &[RigidBody2D]) -> Vec<(usize, usize)> {
    let boxes: Vec<_> = bodies.iter().map(|b| b.aabb()).collect();
    let mut order: Vec<usize> = (0..bodies.len()).collect();
    order.sort_by(|&i, &j| boxes[i].0.x.total_cmp(&boxes[j].0.x).then(i.cmp(&j)));
    let mut active: Vec<usize> = Vec::new();
    let mut pairs = Vec::new();
    for &i in &order {
        let (lo, hi) = boxes[i];
        active.retain(|&j| boxes[j].1.x >= lo.x);
        for &j in &active {
            if bodies[i].is_static && bodies[j].is_static {
                continue;
            }
            let (lo2, hi2) = boxes[j];
            if lo.y <= hi2.y && lo2.y <= hi.y {
                pairs.push((i.min(j), i.max(j)));
            }
        }
        active.push(i);
    }
    pairs.sort_unstable();
    pairs
}

fn narrow(world: &[Vec<Vec2>], (a, b): (usize, usize)) -> Option<Contact> {
    polygon_contact(&world[a], &world[b]).map(|(point, normal, depth)| Contact {
        body_a: a,
        body_b: b,
        point,
        normal,
        depth,
    })
}

/// Overlapping pairs, one contact each, ordered by `(body_a, body_b)`.
pub fn detect(bodies: &[RigidBody2D]) -> Vec<Contact> {
    detect_with(bodies, cfg!(feature = "parallel"))
}

/// As [`detect`], choosing the execution strategy explicitly. The result is
/// identical either way.
pub fn detect_with(bodies: &[RigidBody2D], parallel: bool) -> Vec<Contact> {
    let world: Vec<Vec<Vec2>> = bodies.iter().map(|b| b.shape.world_vertices(&b.pose)).collect();
    let pairs = candidate_pairs(bodies);
    #[cfg(feature = "parallel")]
    if parallel {
        return pairs.par_iter().filter_map(|&p| narrow(&world, p)).collect();
    }
    let _ = parallel;
    pairs.iter().filter_map(|&p| narrow(&world, p)).collect()
}

struct ContactState {
    ra: Vec2,
    rb: Vec2,
    normal_mass: f64,
    tangent_mass: f64,
    acc_n: f64,
    acc_t: f64,
}

fn apply_impulse(bodies: &mut [RigidBody2D], c: &Contact, s: &ContactState, p: Vec2) {
    let (a, b) = (c.body_a, c.body_b);
    let (ima, ia) = (bodies[a].inv_mass(), bodies[a].inv_inertia());
    let (imb, ib) = (bodies[b].inv_mass(), bodies[b].inv_inertia());
    bodies[a].vel -= p * ima;
    bodies[a].omega -= ia * s.ra.cross(p);
    bodies[b].vel += p * imb;
    bodies[b].omega += ib * s.rb.cross(p);
}

fn relative_velocity(bodies: &[RigidBody2D], c: &Contact, s: &ContactState) -> Vec2 {
    let a = &bodies[c.body_a];
    let b = &bodies[c.body_b];
    (b.vel + Vec2::cross_scalar(b.omega, s.rb)) - (a.vel + Vec2::cross_scalar(a.omega, s.ra))
}

/// Sequential-impulse contact resolution (restitution 0, Coulomb friction)
/// followed by a split positional correction that does not touch velocities.
pub fn resolve(contacts: &[Contact], bodies: &mut [RigidBody2D], dt: f64) {
    let _ = dt;
    if contacts.is_empty() {
        return;
    }
    let mut states: Vec<ContactState> = contacts
        .iter()
        .map(|c| {
            let a = &bodies[c.body_a];
            let b = &bodies[c.body_b];
            let ra = c.point - a.com_world();
            let rb = c.point - b.com_world();
            let t = c.normal.perp();
            let k = |dir: Vec2| {
                a.inv_mass()
                    + b.inv_mass()
                    + a.inv_inertia() * ra.cross(dir).powi(2)
                    + b.inv_inertia() * rb.cross(dir).powi(2)
            };
            let (kn, kt) = (k(c.normal), k(t));
            ContactState {
                ra,
                rb,
                normal_mass: if kn > 0.0 { 1.0 / kn } else { 0.0 },
                tangent_mass: if kt > 0.0 { 1.0 / kt } else { 0.0 },
                acc_n: 0.0,
                acc_t: 0.0,
            }
        })
        .collect();

    for _ in 0..SOLVER_ITERATIONS {
        for (c, s) in contacts.iter().zip(states.iter_mut()) {
            let t = c.normal.perp();
            let vt = relative_velocity(bodies, c, s).dot(t);
            let max_t = CONTACT_FRICTION * s.acc_n;
            let new_t = (s.acc_t - vt * s.tangent_mass).clamp(-max_t, max_t);
            let dt_imp = new_t - s.acc_t;
            s.acc_t = new_t;
            apply_impulse(bodies, c, s, t * dt_imp);

            let vn = relative_velocity(bodies, c, s).dot(c.normal);
            let new_n = (s.acc_n - vn * s.normal_mass).max(0.0);
            let dn = new_n - s.acc_n;
            s.acc_n = new_n;
            apply_impulse(bodies, c, s, c.normal * dn);
        }
    }

    for c in contacts {
        let (ima, imb) = (bodies[c.body_a].inv_mass(), bodies[c.body_b].inv_mass());
        let total = ima + imb;
        if total == 0.0 {
            continue;
        }
        let corr = POSITION_CORRECTION * (c.depth - CONTACT_SLOP).max(0.0) / total;
        let shift = c.normal * corr;
        let pa = &mut bodies[c.body_a].pose;
        pa.x -= shift.x * ima;
        pa.y -= shift.y * ima;
        let pb = &mut bodies[c.body_b].pose;
        pb.x += shift.x * imb;
        pb.y += shift.y * imb;
    }
}
