//! Edge-node obstacle detection: height filter, density clustering, box fit
//! and size filter. The edge node forwards only the fitted box.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::Position;
use crate::scene::{Aabb, SceneFrame};
use crate::time::SimTime;

/// Floor applied to fitted half extents so degenerate clusters still form a valid box.
pub const MIN_HALF_EXTENT: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("cannot fit a box to an empty cluster")]
    EmptyCluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorParams {
    /// Points higher than this above the table are foreground.
    pub height_threshold: f64,
    pub cluster_eps: f64,
    pub cluster_min_pts: usize,
    /// Blobs with a smaller (grounded) box volume are ignored.
    pub min_volume: f64,
    /// Fixed processing time charged per frame.
    #[serde(rename = "compute_time_ms")]
    pub compute_time: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleReport {
    #[serde(rename = "box")]
    pub bbox: Aabb,
    pub confidence: f64,
    pub captured_at: SimTime,
    pub report_ready_at: SimTime,
    pub seq: u64,
}

impl ObstacleReport {
    pub fn is_valid(&self) -> bool {
        self.bbox.validate().is_ok()
            && (0.0..=1.0).contains(&self.confidence)
            && self.report_ready_at >= self.captured_at
    }
}

fn dist2(a: &Position, b: &Position) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Uniform grid with cell size `eps`; neighbor queries scan the 27 adjacent cells.
struct Grid<'a> {
    points: &'a [Position],
    eps: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> Grid<'a> {
    fn new(points: &'a [Position], eps: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::cell(p, eps)).or_default().push(i);
        }
        Grid { points, eps, cells }
    }

    fn cell(p: &Position, eps: f64) -> [i64; 3] {
        p.map(|c| (c / eps).floor() as i64)
    }

    /// Indices within `eps` of point `i` (including `i`), ascending.
    fn neighbors(&self, i: usize) -> Vec<usize> {
        let p = &self.points[i];
        let c = Self::cell(p, self.eps);
        let eps2 = self.eps * self.eps;
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        out.extend(bucket.iter().copied().filter(|&j| dist2(p, &self.points[j]) <= eps2));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Density-based clustering.
///
/// A point is core when at least `min_pts` points (itself included) lie
/// within `eps`. Core points within `eps` of each other share a cluster;
/// a non-core point within `eps` of some core point joins the cluster of
/// its nearest core neighbor (ties go to the lexicographically smallest
/// core point, so membership does not depend on input order). Remaining
/// points are noise. Clusters are returned as ascending index lists,
/// largest first, ties by lowest contained index.
pub fn cluster_points(points: &[Position], eps: f64, min_pts: usize) -> Vec<Vec<usize>> {
    if points.is_empty() || !(eps > 0.0) {
        return Vec::new();
    }
    let min_pts = min_pts.max(1);
    let grid = Grid::new(points, eps);
    let neighbors: Vec<Vec<usize>> = (0..points.len()).map(|i| grid.neighbors(i)).collect();
    let core: Vec<bool> = neighbors.iter().map(|n| n.len() >= min_pts).collect();

    // connected components of core points
    let mut label = vec![usize::MAX; points.len()];
    let mut n_labels = 0;
    for start in 0..points.len() {
        if !core[start] || label[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        label[start] = n_labels;
        while let Some(i) = stack.pop() {
            for &j in &neighbors[i] {
                if core[j] && label[j] == usize::MAX {
                    label[j] = n_labels;
                    stack.push(j);
                }
            }
        }
        n_labels += 1;
    }

    // border points
    for i in 0..points.len() {
        if core[i] {
            continue;
        }
        let best = neighbors[i].iter().copied().filter(|&j| core[j]).min_by(|&a, &b| {
            dist2(&points[i], &points[a])
                .total_cmp(&dist2(&points[i], &points[b]))
                .then_with(|| lex_cmp(&points[a], &points[b]))
        });
        if let Some(j) = best {
            label[i] = label[j];
        }
    }

    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); n_labels];
    for (i, &l) in label.iter().enumerate() {
        if l != usize::MAX {
            clusters[l].push(i);
        }
    }
    clusters.retain(|c| c.len() >= min_pts);
    clusters.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    clusters
}

fn lex_cmp(a: &Position, b: &Position) -> std::cmp::Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

/// Tight axis-aligned box around `cluster`.
pub fn fit_aabb(cluster: &[Position]) -> Result<Aabb, DetectError> {
    let first = cluster.first().ok_or(DetectError::EmptyCluster)?;
    let mut lo = *first;
    let mut hi = *first;
    for p in &cluster[1..] {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let mut b = Aabb::from_min_max(lo, hi);
    for h in b.half_extents.iter_mut() {
        *h = h.max(MIN_HALF_EXTENT);
    }
    Ok(b)
}

/// Extends a box whose underside was cut by the height filter down to the
/// table, so an object resting on the table is reported at full height.
fn ground(b: Aabb, table_height: f64, params: &DetectorParams) -> Aabb {
    let (lo, hi) = (b.min(), b.max());
    if lo[2] > table_height && lo[2] <= table_height + params.height_threshold + params.cluster_eps {
        let g = Aabb::from_min_max([lo[0], lo[1], table_height], hi);
        Aabb {
            half_extents: g.half_extents.map(|h| h.max(MIN_HALF_EXTENT)),
            ..g
        }
    } else {
        b
    }
}

/// Runs the detection pipeline on one frame. Returns the largest surviving
/// cluster as a report, or `None` when nothing qualifies.
pub fn detect_obstacle(frame: &SceneFrame, table_height: f64, params: &DetectorParams) -> Option<ObstacleReport> {
    let cutoff = table_height + params.height_threshold;
    let foreground: Vec<Position> = frame.points.iter().copied().filter(|p| p[2] > cutoff).collect();
    if foreground.is_empty() {
        return None;
    }
    let clusters = cluster_points(&foreground, params.cluster_eps, params.cluster_min_pts);
    clusters.iter().find_map(|members| {
        let pts: Vec<Position> = members.iter().map(|&i| foreground[i]).collect();
        let b = ground(fit_aabb(&pts).ok()?, table_height, params);
        (b.volume() >= params.min_volume).then(|| ObstacleReport {
            bbox: b,
            confidence: members.len() as f64 / foreground.len() as f64,
            captured_at: frame.captured_at,
            report_ready_at: frame.captured_at + params.compute_time,
            seq: frame.seq,
        })
    })
}

/// The edge node actor state: it takes a new frame only when idle.
#[derive(Debug, Clone)]
pub struct EdgeNode {
    pub params: DetectorParams,
    busy_until: SimTime,
    frames_seen: u64,
}

impl EdgeNode {
    pub fn new(params: DetectorParams) -> Self {
        EdgeNode {
            params,
            busy_until: SimTime::ZERO,
            frames_seen: 0,
        }
    }

    pub fn is_idle(&self, now: SimTime) -> bool {
        now >= self.busy_until
    }

    pub fn next_seq(&self) -> u64 {
        self.frames_seen
    }

    /// Processes a frame captured at `frame.captured_at`, marking the node
    /// busy for the configured compute time.
    pub fn process(&mut self, frame: &SceneFrame, table_height: f64) -> Option<ObstacleReport> {
        self.frames_seen += 1;
        self.busy_until = frame.captured_at + self.params.compute_time;
        detect_obstacle(frame, table_height, &self.params)
    }
}
