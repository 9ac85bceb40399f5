//! Trajectory segmentation: split at motion breakpoints (pauses and sharp
//! turns), or at an explicitly requested count.

use crate::lift3d::Trajectory3D;

use super::{AllocError, Result, Segment};

#[derive(Debug, Clone)]
pub struct SegmentParams {
    /// Speed below which an interval counts as paused (m/s).
    pub pause_speed: f64,
    /// Minimum consecutive paused intervals to form a pause breakpoint.
    pub pause_steps: usize,
    /// Heading change that counts as a turn (radians).
    pub turn_angle: f64,
    /// Auto-mode cap on segments per stream.
    pub max_segments: usize,
    /// Net displacement above which a slice carries the object (meters).
    pub carry_displacement: f64,
}

impl Default for SegmentParams {
    fn default() -> Self {
        SegmentParams {
            pause_speed: 0.01,
            pause_steps: 3,
            turn_angle: 60.0_f64.to_radians(),
            max_segments: 6,
            carry_displacement: 0.01,
        }
    }
}

pub fn segment_trajectory(
    traj: &Trajectory3D,
    m: Option<usize>,
    params: &SegmentParams,
    id_base: usize,
) -> Result<Vec<Segment>> {
    segment_trajectory_with_cuts(traj, m, params, id_base, &[])
}

/// Split a trajectory into contiguous segments covering every waypoint.
///
/// With `m = Some(k)`, splits at the k-1 largest breakpoint scores (even
/// splits fill in when fewer breakpoints exist). In auto mode the count is
/// `detected breakpoints + 1`, clipped to `[1, max_segments]`. `required`
/// cut indices are always honored (the scheduler needs precedence
/// boundaries separated), on top of the requested count.
pub fn segment_trajectory_with_cuts(
    traj: &Trajectory3D,
    m: Option<usize>,
    params: &SegmentParams,
    id_base: usize,
    required: &[usize],
) -> Result<Vec<Segment>> {
    let p = traj.waypoints.len();
    if p < 2 {
        return Err(AllocError::TooShort);
    }
    if let Some(m) = m {
        if m < 1 || m > p - 1 {
            return Err(AllocError::SegmentCountOutOfRange { m, max: p - 1 });
        }
    }

    // Breakpoint scores at interior waypoints. Pauses dominate turns.
    let mut scores: Vec<(usize, f64)> = Vec::new();
    let pos = |i: usize| traj.waypoints[i].pos;
    let mut speeds = Vec::with_capacity(p - 1);
    for k in 0..p - 1 {
        let dt = (traj.timestamps[k + 1] - traj.timestamps[k]).max(1e-12);
        speeds.push((pos(k + 1) - pos(k)).norm() / dt);
    }
    // Pause runs. Arc-length resampling compresses a dwell into few
    // waypoints with long timestamps, so a run's length is measured in
    // effective steps: its total duration over the median interval.
    let mut dts: Vec<f64> =
        (0..p - 1).map(|k| traj.timestamps[k + 1] - traj.timestamps[k]).collect();
    dts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_dt = dts[dts.len() / 2].max(1e-9);
    let mut k = 0;
    while k < speeds.len() {
        if speeds[k] < params.pause_speed {
            let start = k;
            let mut run_dt = 0.0;
            while k < speeds.len() && speeds[k] < params.pause_speed {
                run_dt += traj.timestamps[k + 1] - traj.timestamps[k];
                k += 1;
            }
            let run = k - start;
            let effective = (run as f64).max(run_dt / median_dt);
            if effective >= params.pause_steps as f64 {
                let center = start + run / 2;
                if center > 0 && center < p - 1 {
                    scores.push((center, 100.0 + effective));
                }
            }
        } else {
            k += 1;
        }
    }
    // Turns: heading change between consecutive intervals with real motion.
    for k in 1..p - 1 {
        let a = pos(k) - pos(k - 1);
        let b = pos(k + 1) - pos(k);
        if a.norm() < 2e-3 || b.norm() < 2e-3 {
            continue;
        }
        let cosang = (a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0);
        let ang = cosang.acos();
        if ang > params.turn_angle {
            scores.push((k, ang));
        }
    }
    scores.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0))
    });
    // Keep at most one breakpoint per waypoint.
    let mut seen = std::collections::BTreeSet::new();
    scores.retain(|(idx, _)| seen.insert(*idx));

    let want = match m {
        Some(m) => m,
        None => (scores.len() + 1).clamp(1, params.max_segments),
    };

    let mut cuts: Vec<usize> = required.iter().copied().filter(|&c| c > 0 && c < p).collect();
    for (i, _) in scores.iter() {
        if cuts.len() >= want - 1 + required.len() {
            break;
        }
        if !cuts.contains(i) {
            cuts.push(*i);
        }
    }
    // Explicit counts beyond the detected breakpoints: fill with even splits.
    let mut j = 1;
    while cuts.len() < want - 1 && j < p {
        let cand = (j as f64 * p as f64 / want as f64).round() as usize;
        if cand > 0 && cand < p && !cuts.contains(&cand) {
            cuts.push(cand);
        }
        j += 1;
    }
    cuts.sort_unstable();
    cuts.dedup();

    let mut bounds = vec![0usize];
    bounds.extend(cuts);
    bounds.push(p);
    bounds.dedup();

    let mut out = Vec::with_capacity(bounds.len() - 1);
    for (index, w) in bounds.windows(2).enumerate() {
        let (start, end) = (w[0], w[1]);
        let duration = traj.timestamps[end - 1] - traj.timestamps[start];
        // Max displacement within the slice: a round trip still carries.
        let disp = traj.waypoints[start..end]
            .iter()
            .map(|w| (w.pos - traj.waypoints[start].pos).norm())
            .fold(0.0f64, f64::max);
        out.push(Segment {
            id: id_base + index,
            stream: traj.stream,
            index,
            start,
            end,
            duration,
            carry: disp > params.carry_displacement,
        });
    }
    Ok(out)
}
