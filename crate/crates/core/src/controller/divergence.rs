use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::Position;
use crate::time::SimTime;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DivergenceError {
    #[error("{0} trace is empty")]
    EmptyTrace(&'static str),
    #[error("{0} trace goes backwards in time at sample {1}")]
    Unsorted(&'static str, usize),
    #[error("traces do not overlap in time")]
    GridMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSample {
    pub t: SimTime,
    pub physical: Position,
    pub digital: Position,
    /// Per-axis |physical - digital|.
    pub abs_error: [f64; 3],
}

impl DivergenceSample {
    pub fn new(t: SimTime, physical: Position, digital: Position) -> Self {
        DivergenceSample {
            t,
            physical,
            digital,
            abs_error: [0, 1, 2].map(|k| (physical[k] - digital[k]).abs()),
        }
    }
}

fn check(trace: &[(SimTime, Position)], name: &'static str) -> Result<(), DivergenceError> {
    if trace.is_empty() {
        return Err(DivergenceError::EmptyTrace(name));
    }
    match trace.windows(2).position(|w| w[1].0 < w[0].0) {
        Some(i) => Err(DivergenceError::Unsorted(name, i + 1)),
        None => Ok(()),
    }
}

/// Linear interpolation of a time-sorted trace at `t`, holding the end
/// values outside its range. With repeated timestamps the later sample wins.
pub fn resample(trace: &[(SimTime, Position)], t: SimTime) -> Position {
    let idx = trace.partition_point(|(ti, _)| *ti <= t);
    if idx == 0 {
        return trace[0].1;
    }
    if idx == trace.len() {
        return trace[idx - 1].1;
    }
    let (t0, a) = trace[idx - 1];
    let (t1, b) = trace[idx];
    let s = (t - t0).ticks() as f64 / (t1 - t0).ticks() as f64;
    [0, 1, 2].map(|k| a[k] + s * (b[k] - a[k]))
}

/// Compares the mirrored (digital) end-effector trace against the physical
/// one on the physical sample grid.
pub fn mirror_divergence(
    mirror_trace: &[(SimTime, Position)],
    physical_trace: &[(SimTime, Position)],
) -> Result<Vec<DivergenceSample>, DivergenceError> {
    check(mirror_trace, "mirror")?;
    check(physical_trace, "physical")?;
    let lo = mirror_trace[0].0.max(physical_trace[0].0);
    let hi = mirror_trace[mirror_trace.len() - 1].0.min(physical_trace[physical_trace.len() - 1].0);
    if lo > hi {
        return Err(DivergenceError::GridMismatch);
    }
    Ok(physical_trace
        .iter()
        .map(|&(t, p)| DivergenceSample::new(t, p, resample(mirror_trace, t)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ms(v: i64) -> SimTime {
        SimTime::from_millis(v)
    }

    fn line(t0: i64, n: i64, f: impl Fn(f64) -> Position) -> Vec<(SimTime, Position)> {
        (0..n).map(|i| (ms(t0 + 10 * i), f((t0 + 10 * i) as f64))).collect()
    }

    #[test]
    fn identical_traces_are_zero() {
        let tr = line(0, 50, |t| [t.sin(), t * 1e-3, 0.2]);
        for s in mirror_divergence(&tr, &tr).unwrap() {
            assert_eq!(s.abs_error, [0.0; 3]);
        }
    }

    #[test]
    fn constant_offset() {
        let phys = line(0, 50, |t| [0.3 + t * 1e-4, -0.2, 0.4]);
        let dig: Vec<_> = phys.iter().map(|(t, p)| (*t, [p[0] + 0.016, p[1] - 0.03, p[2] + 0.008])).collect();
        for s in mirror_divergence(&dig, &phys).unwrap() {
            for (e, want) in s.abs_error.iter().zip([0.016, 0.03, 0.008]) {
                assert!((e - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn interpolates_and_holds() {
        let mirror = vec![(ms(0), [0.0; 3]), (ms(20), [2.0, 0.0, 0.0])];
        assert_eq!(resample(&mirror, ms(5)), [0.5, 0.0, 0.0]);
        assert_eq!(resample(&mirror, ms(40)), [2.0, 0.0, 0.0]);
    }

    #[test]
    fn disjoint_ranges_are_rejected() {
        let a = line(0, 5, |_| [0.0; 3]);
        let b = line(100, 5, |_| [0.0; 3]);
        assert_eq!(mirror_divergence(&a, &b), Err(DivergenceError::GridMismatch));
        assert_eq!(mirror_divergence(&[], &b), Err(DivergenceError::EmptyTrace("mirror")));
    }
}
