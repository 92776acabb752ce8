use proptest::prelude::*;
use twinloop::detect::{cluster_points, detect_obstacle, fit_aabb, DetectorParams};
use twinloop::kinematics::Position;
use twinloop::scene::{render_frame, Aabb, Scene, ScheduledObstacle, SensorParams, Table};
use twinloop::SimTime;

fn point() -> impl Strategy<Value = Position> {
    [-0.5..0.5f64, -0.5..0.5f64, 0.0..0.3f64]
}

fn canonical(points: &[Position], clusters: &[Vec<usize>]) -> Vec<Vec<[u64; 3]>> {
    let mut out: Vec<Vec<[u64; 3]>> = clusters
        .iter()
        .map(|c| {
            let mut v: Vec<[u64; 3]> = c.iter().map(|&i| points[i].map(f64::to_bits)).collect();
            v.sort();
            v
        })
        .collect();
    out.sort();
    out
}

fn params() -> DetectorParams {
    DetectorParams {
        height_threshold: 0.02,
        cluster_eps: 0.04,
        cluster_min_pts: 5,
        min_volume: 1e-3,
        compute_time: SimTime::from_millis(375),
    }
}

proptest! {
    #[test]
    fn clustering_ignores_input_order(
        points in prop::collection::vec(point(), 1..200),
        shuffle in any::<u64>(),
        eps in 0.02..0.2f64,
        min_pts in 1usize..6,
    ) {
        let mut permuted = points.clone();
        let n = permuted.len();
        let mut s = shuffle;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            permuted.swap(i, (s >> 33) as usize % (i + 1));
        }
        let a = cluster_points(&points, eps, min_pts);
        let b = cluster_points(&permuted, eps, min_pts);
        prop_assert_eq!(canonical(&points, &a), canonical(&permuted, &b));
    }

    #[test]
    fn clusters_are_disjoint_and_large_enough(points in prop::collection::vec(point(), 1..200), min_pts in 1usize..6) {
        let clusters = cluster_points(&points, 0.08, min_pts);
        let mut seen = vec![false; points.len()];
        for c in &clusters {
            prop_assert!(c.len() >= min_pts);
            for &i in c {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
    }

    #[test]
    fn fitted_box_is_tight(points in prop::collection::vec(point(), 1..100)) {
        let b = fit_aabb(&points).unwrap();
        let (lo, hi) = (b.min(), b.max());
        for p in &points {
            for k in 0..3 {
                prop_assert!(p[k] >= lo[k] - 1e-12 && p[k] <= hi[k] + 1e-12);
            }
        }
        for k in 0..3 {
            let min = points.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
            let max = points.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
            if max - min > 1e-5 {
                prop_assert!((lo[k] - min).abs() < 1e-12 && (hi[k] - max).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_resting_box_is_recovered(
        cx in 0.2..0.8f64, cy in -0.4..0.4f64,
        hx in 0.04..0.12f64, hy in 0.04..0.12f64, hz in 0.04..0.12f64,
        seed in any::<u64>(),
    ) {
        let truth = Aabb::new([cx, cy, hz], [hx, hy, hz]).unwrap();
        let scene = Scene {
            table: Table { height: 0.0, center: [0.5, 0.0], half_extents: [0.5, 0.6] },
            task_object: Aabb::new([0.05, 0.55, 0.004], [0.004; 3]).unwrap(),
            obstacles: vec![ScheduledObstacle { bbox: truth, spawn_at: SimTime::ZERO }],
        };
        let sensor = SensorParams { frame_period: SimTime::from_millis(100), density: 3000.0, noise_sigma: 0.0 };
        let frame = render_frame(&scene, SimTime::from_millis(5), &sensor, seed, 3);
        let detector = DetectorParams { min_volume: 1e-4, ..params() };
        let report = detect_obstacle(&frame, 0.0, &detector).unwrap();
        for k in 0..3 {
            prop_assert!((report.bbox.min()[k] - truth.min()[k]).abs() < 1e-9);
            prop_assert!((report.bbox.max()[k] - truth.max()[k]).abs() < 1e-9);
        }
        prop_assert_eq!(report.seq, 3);
        prop_assert_eq!(report.report_ready_at, SimTime::from_millis(380));
    }
}

#[test]
fn noisy_box_stays_close() {
    let truth = Aabb::new([0.55, 0.0, 0.075], [0.075; 3]).unwrap();
    let scene = Scene {
        table: Table { height: 0.0, center: [0.5, 0.0], half_extents: [0.5, 0.6] },
        task_object: Aabb::new([0.45, -0.35, 0.025], [0.025; 3]).unwrap(),
        obstacles: vec![ScheduledObstacle { bbox: truth, spawn_at: SimTime::ZERO }],
    };
    let sensor = SensorParams { frame_period: SimTime::from_millis(100), density: 2000.0, noise_sigma: 0.001 };
    for seed in 0..20 {
        let frame = render_frame(&scene, SimTime::ZERO, &sensor, seed, 0);
        let report = detect_obstacle(&frame, 0.0, &params()).unwrap();
        assert!(report.bbox.max_corner_shift(&truth) < 0.01, "seed {seed}: {:?}", report.bbox);
    }
}
