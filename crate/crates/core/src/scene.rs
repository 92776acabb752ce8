//! The simulated workcell and a synthetic overhead depth sensor.
//!
//! The sensor is an idealized surface sampler: it sees every exposed face
//! (tops and sides; bottoms rest on the table) regardless of occlusion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::Position;
use crate::time::SimTime;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("box half extents must be positive and finite, got {0:?}")]
    BadExtents([f64; 3]),
    #[error("box center must be finite, got {0:?}")]
    BadCenter([f64; 3]),
}

/// Axis-aligned box, the obstacle representation shared by every site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub center: Position,
    pub half_extents: [f64; 3],
}

impl Aabb {
    pub fn new(center: Position, half_extents: [f64; 3]) -> Result<Self, SceneError> {
        let b = Aabb { center, half_extents };
        b.validate()?;
        Ok(b)
    }

    pub fn from_min_max(min: Position, max: Position) -> Self {
        let mut center = [0.0; 3];
        let mut half = [0.0; 3];
        for k in 0..3 {
            center[k] = 0.5 * (min[k] + max[k]);
            half[k] = 0.5 * (max[k] - min[k]);
        }
        Aabb {
            center,
            half_extents: half,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(SceneError::BadCenter(self.center));
        }
        if self.half_extents.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(SceneError::BadExtents(self.half_extents));
        }
        Ok(())
    }

    pub fn min(&self) -> Position {
        [0, 1, 2].map(|k| self.center[k] - self.half_extents[k])
    }

    pub fn max(&self) -> Position {
        [0, 1, 2].map(|k| self.center[k] + self.half_extents[k])
    }

    pub fn volume(&self) -> f64 {
        8.0 * self.half_extents.iter().product::<f64>()
    }

    pub fn inflated(&self, margin: f64) -> Aabb {
        Aabb {
            center: self.center,
            half_extents: self.half_extents.map(|h| h + margin),
        }
    }

    /// Closed containment.
    pub fn contains(&self, p: Position) -> bool {
        (0..3).all(|k| (p[k] - self.center[k]).abs() <= self.half_extents[k])
    }

    /// Signed Euclidean distance to the box surface: positive outside,
    /// negative inside, zero on the surface.
    pub fn signed_distance(&self, p: Position) -> f64 {
        let d = [0, 1, 2].map(|k| (p[k] - self.center[k]).abs() - self.half_extents[k]);
        let outside = d.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
        let inside = d[0].max(d[1]).max(d[2]).min(0.0);
        outside + inside
    }

    /// Largest per-coordinate difference of the corner points.
    pub fn max_corner_shift(&self, other: &Aabb) -> f64 {
        let (a0, a1, b0, b1) = (self.min(), self.max(), other.min(), other.max());
        (0..3)
            .map(|k| (a0[k] - b0[k]).abs().max((a1[k] - b1[k]).abs()))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledObstacle {
    #[serde(rename = "box")]
    pub bbox: Aabb,
    #[serde(rename = "spawn_at_ms")]
    pub spawn_at: SimTime,
}

/// Flat rectangular table centered at `center` in the xy plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table {
    pub height: f64,
    pub center: [f64; 2],
    pub half_extents: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub table: Table,
    pub task_object: Aabb,
    #[serde(default)]
    pub obstacles: Vec<ScheduledObstacle>,
}

impl Scene {
    pub fn new(table: Table, task_object: Aabb) -> Self {
        Scene {
            table,
            task_object,
            obstacles: Vec::new(),
        }
    }

    pub fn table_height(&self) -> f64 {
        self.table.height
    }

    pub fn spawned(&self, now: SimTime) -> impl Iterator<Item = &Aabb> {
        self.obstacles.iter().filter(move |o| o.spawn_at <= now).map(|o| &o.bbox)
    }
}

/// Returns a copy of `scene` with one more obstacle appended.
pub fn inject_obstacle(scene: &Scene, bbox: Aabb, at: SimTime) -> Scene {
    let mut next = scene.clone();
    next.obstacles.push(ScheduledObstacle { bbox, spawn_at: at });
    next
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFrame {
    pub seq: u64,
    pub captured_at: SimTime,
    pub points: Vec<Position>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorParams {
    #[serde(rename = "frame_period_ms")]
    pub frame_period: SimTime,
    /// Points per square meter of visible surface.
    pub density: f64,
    pub noise_sigma: f64,
}

struct Face {
    origin: Position,
    u: [f64; 3],
    v: [f64; 3],
}

impl Face {
    fn area(&self) -> f64 {
        norm(self.u) * norm(self.v)
    }

    fn corner(&self, i: usize) -> Position {
        let (a, b) = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)][i];
        self.at(a, b)
    }

    fn at(&self, a: f64, b: f64) -> Position {
        [0, 1, 2].map(|k| self.origin[k] + a * self.u[k] + b * self.v[k])
    }
}

fn norm(v: [f64; 3]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

fn box_faces(b: &Aabb) -> Vec<Face> {
    let lo = b.min();
    let hi = b.max();
    let size = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    vec![
        // top
        Face {
            origin: [lo[0], lo[1], hi[2]],
            u: [size[0], 0.0, 0.0],
            v: [0.0, size[1], 0.0],
        },
        // -x, +x
        Face {
            origin: lo,
            u: [0.0, size[1], 0.0],
            v: [0.0, 0.0, size[2]],
        },
        Face {
            origin: [hi[0], lo[1], lo[2]],
            u: [0.0, size[1], 0.0],
            v: [0.0, 0.0, size[2]],
        },
        // -y, +y
        Face {
            origin: lo,
            u: [size[0], 0.0, 0.0],
            v: [0.0, 0.0, size[2]],
        },
        Face {
            origin: [lo[0], hi[1], lo[2]],
            u: [size[0], 0.0, 0.0],
            v: [0.0, 0.0, size[2]],
        },
    ]
}

fn table_face(t: &Table) -> Face {
    Face {
        origin: [t.center[0] - t.half_extents[0], t.center[1] - t.half_extents[1], t.height],
        u: [2.0 * t.half_extents[0], 0.0, 0.0],
        v: [0.0, 2.0 * t.half_extents[1], 0.0],
    }
}

/// Splits `total` points across faces in proportion to area (largest remainder).
fn allocate(total: usize, areas: &[f64]) -> Vec<usize> {
    let sum: f64 = areas.iter().sum();
    if sum <= 0.0 {
        return vec![0; areas.len()];
    }
    let exact: Vec<f64> = areas.iter().map(|a| total as f64 * a / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..areas.len()).collect();
    order.sort_by(|&i, &j| {
        let (ri, rj) = (exact[i] - exact[i].floor(), exact[j] - exact[j].floor());
        rj.total_cmp(&ri).then(i.cmp(&j))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Samples one surface (a set of faces) with `round(density · area)` points.
/// Each face lists its four corners first, then uniform interior samples.
fn sample_surface(faces: &[Face], density: f64, rng: &mut ChaCha8Rng, out: &mut Vec<Position>) {
    let areas: Vec<f64> = faces.iter().map(Face::area).collect();
    let total = (density * areas.iter().sum::<f64>()).round() as usize;
    for (face, n) in faces.iter().zip(allocate(total, &areas)) {
        for i in 0..n {
            if i < 4 {
                out.push(face.corner(i));
            } else {
                let a: f64 = rng.random();
                let b: f64 = rng.random();
                out.push(face.at(a, b));
            }
        }
    }
}

/// Number of points `render_frame` produces for the surfaces visible at `now`.
pub fn expected_point_count(scene: &Scene, now: SimTime, density: f64) -> usize {
    let mut n = (density * table_face(&scene.table).area()).round() as usize;
    for b in std::iter::once(&scene.task_object).chain(scene.spawned(now)) {
        let area: f64 = box_faces(b).iter().map(Face::area).sum();
        n += (density * area).round() as usize;
    }
    n
}

/// Synthesizes one depth frame. Deterministic for a fixed `rng_seed`.
pub fn render_frame(scene: &Scene, now: SimTime, params: &SensorParams, rng_seed: u64, seq: u64) -> SceneFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut points = Vec::new();
    sample_surface(&[table_face(&scene.table)], params.density, &mut rng, &mut points);
    sample_surface(&box_faces(&scene.task_object), params.density, &mut rng, &mut points);
    for b in scene.spawned(now) {
        sample_surface(&box_faces(b), params.density, &mut rng, &mut points);
    }
    if params.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, params.noise_sigma).expect("sigma validated as finite and positive");
        for p in points.iter_mut() {
            for c in p.iter_mut() {
                *c += normal.sample(&mut rng);
            }
        }
    }
    SceneFrame {
        seq,
        captured_at: now,
        points,
    }
}
