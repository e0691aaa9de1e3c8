//! CPU ray-cast 2D LiDAR and the sim-time sensor scheduler.

use rand_xoshiro::rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::geometry::{rotate_z, Pose2, Vec2};
use crate::physics2d::RigidBody2D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarConfig {
    pub name: String,
    /// Mount on the vehicle chassis.
    pub mount: Pose2,
    pub fov: f64,
    pub n_rays: usize,
    pub max_range: f64,
    pub rate: f64,
    /// Additive Gaussian range noise (m); 0 disables it.
    pub noise_sigma: f64,
    pub topic: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaserScan {
    pub stamp: f64,
    pub pose: Pose2,
    pub angle_min: f64,
    pub angle_max: f64,
    /// `max_range + 1` marks rays that hit nothing.
    pub ranges: Vec<f64>,
}

impl LaserScan {
    pub fn angle_increment(&self) -> f64 {
        if self.ranges.len() < 2 {
            0.0
        } else {
            (self.angle_max - self.angle_min) / (self.ranges.len() - 1) as f64
        }
    }
}

struct Obstacle {
    body: usize,
    vertices: Vec<Vec2>,
    lo: Vec2,
    hi: Vec2,
}

/// World-space collision polygons prepared for ray queries.
pub struct RayScene {
    obstacles: Vec<Obstacle>,
}

impl RayScene {
    pub fn from_bodies(bodies: &[RigidBody2D]) -> Self {
        let obstacles = bodies
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let vertices = b.shape.world_vertices(&b.pose);
                let (mut lo, mut hi) = (vertices[0], vertices[0]);
                for v in &vertices {
                    lo = Vec2::new(lo.x.min(v.x), lo.y.min(v.y));
                    hi = Vec2::new(hi.x.max(v.x), hi.y.max(v.y));
                }
                Obstacle { body: i, vertices, lo, hi }
            })
            .collect();
        Self { obstacles }
    }

    /// Distance to the nearest polygon edge along `dir`, ignoring body
    /// `exclude` (a sensor's own chassis). `None` if nothing lies within
    /// `max_range`.
    pub fn raycast(&self, origin: Vec2, dir: Vec2, max_range: f64, exclude: Option<usize>) -> Option<f64> {
        let mut best = f64::INFINITY;
        for ob in &self.obstacles {
            if Some(ob.body) == exclude || !ray_hits_box(origin, dir, best.min(max_range), ob.lo, ob.hi) {
                continue;
            }
            let n = ob.vertices.len();
            for i in 0..n {
                let a = ob.vertices[i];
                let e = ob.vertices[(i + 1) % n] - a;
                let denom = dir.cross(e);
                if denom == 0.0 {
                    continue;
                }
                let ao = a - origin;
                let t = ao.cross(e) / denom;
                let s = ao.cross(dir) / denom;
                if t > 0.0 && (0.0..=1.0).contains(&s) && t < best {
                    best = t;
                }
            }
        }
        (best <= max_range).then_some(best)
    }
}

/// Slab test against an axis-aligned box, up to distance `t_max`.
fn ray_hits_box(o: Vec2, d: Vec2, t_max: f64, lo: Vec2, hi: Vec2) -> bool {
    let mut t0 = 0.0f64;
    let mut t1 = t_max;
    for (oc, dc, l, h) in [(o.x, d.x, lo.x, hi.x), (o.y, d.y, lo.y, hi.y)] {
        if dc == 0.0 {
            if oc < l || oc > h {
                return false;
            }
        } else {
            let (mut a, mut b) = ((l - oc) / dc, (h - oc) / dc);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

/// Free-function form of [`RayScene::raycast`] over a body list.
pub fn raycast(bodies: &[RigidBody2D], origin: Vec2, dir: Vec2, max_range: f64, exclude: Option<usize>) -> Option<f64> {
    RayScene::from_bodies(bodies).raycast(origin, dir, max_range, exclude)
}

/// xoshiro256** seeded through splitmix64, with Box-Muller normals.
#[derive(Debug, Clone)]
pub struct SensorRng(Xoshiro256StarStar);

impl SensorRng {
    pub fn new(seed: u64) -> Self {
        Self(Xoshiro256StarStar::seed_from_u64(seed))
    }

    /// Seed for a named sensor: world seed xor FNV-1a of the name.
    pub fn for_sensor(world_seed: u64, name: &str) -> Self {
        Self::new(world_seed ^ fnv1a64(name.as_bytes()))
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal; one Box-Muller draw per call (the sine branch is
    /// discarded).
    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn ray_angles(cfg: &LidarConfig) -> (f64, f64) {
    let full_circle = cfg.fov >= 2.0 * std::f64::consts::PI - 1e-9;
    let inc = if full_circle {
        cfg.fov / cfg.n_rays as f64
    } else {
        cfg.fov / (cfg.n_rays - 1) as f64
    };
    (-cfg.fov / 2.0, inc)
}

/// Captures one scan from `sensor_pose` (world frame).
pub fn scan(
    cfg: &LidarConfig,
    scene: &RayScene,
    sensor_pose: &Pose2,
    exclude: Option<usize>,
    rng: &mut SensorRng,
    stamp: f64,
) -> LaserScan {
    let (angle_min, inc) = ray_angles(cfg);
    let origin = sensor_pose.translation();
    let sentinel = cfg.max_range + 1.0;
    let ranges = (0..cfg.n_rays)
        .map(|i| {
            let a = sensor_pose.yaw + angle_min + inc * i as f64;
            let dir = rotate_z(Vec2::new(1.0, 0.0), a);
            match scene.raycast(origin, dir, cfg.max_range, exclude) {
                Some(r) if cfg.noise_sigma > 0.0 => {
                    (r + cfg.noise_sigma * rng.gaussian()).clamp(1e-6, cfg.max_range)
                }
                Some(r) => r,
                None => sentinel,
            }
        })
        .collect();
    LaserScan {
        stamp,
        pose: *sensor_pose,
        angle_min,
        angle_max: angle_min + inc * (cfg.n_rays - 1) as f64,
        ranges,
    }
}

/// Fires at simulated times `k / rate`, independent of wall-clock pacing.
#[derive(Debug, Clone, PartialEq)]
pub struct RateScheduler {
    rate: f64,
    next: u64,
}

impl RateScheduler {
    pub fn new(rate: f64) -> Self {
        Self { rate, next: 0 }
    }

    pub fn due(&mut self, t: f64) -> bool {
        if !(self.rate > 0.0) {
            return false;
        }
        if t + 1e-9 >= self.next as f64 / self.rate {
            // Skip missed slots when the rate exceeds the tick rate.
            self.next = ((t + 1e-9) * self.rate).floor() as u64 + 1;
            true
        } else {
            false
        }
    }
}
