//! Arm assignment and spatial conflict detection between cross-stream
//! segments.

use nalgebra::Vector3;

use crate::dualsim::min_seg_distance;
use crate::lift3d::Trajectory3D;

use super::{AllocError, ConflictGraph, Result, Segment};

#[derive(Debug, Clone)]
pub struct ArmGeometry {
    pub bases: [Vector3<f64>; 2],
    pub reach: f64,
}

impl Default for ArmGeometry {
    fn default() -> Self {
        ArmGeometry {
            bases: [Vector3::new(-0.62, 0.0, 0.35), Vector3::new(0.62, 0.0, 0.35)],
            reach: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArmAssignment {
    /// `stream_to_arm[stream] = arm index`.
    pub stream_to_arm: [usize; 2],
}

impl ArmAssignment {
    pub fn arm_of(&self, segment: &Segment) -> usize {
        self.stream_to_arm[segment.stream as usize]
    }
}

/// Choose the stream-to-arm permutation minimizing the summed distance from
/// each arm base to its trajectory centroid, requiring every waypoint within
/// reach. Ties break toward the identity map.
pub fn assign_arms(
    trajs: (&Trajectory3D, &Trajectory3D),
    arms: &ArmGeometry,
) -> Result<ArmAssignment> {
    let centroid = |t: &Trajectory3D| -> Vector3<f64> {
        t.waypoints.iter().map(|w| w.pos).sum::<Vector3<f64>>() / t.waypoints.len() as f64
    };
    let reachable = |t: &Trajectory3D, base: &Vector3<f64>| {
        t.waypoints.iter().all(|w| (w.pos - base).norm() <= arms.reach)
    };
    let mut best: Option<(f64, [usize; 2])> = None;
    for perm in [[0usize, 1], [1, 0]] {
        let (t0, t1) = (trajs.0, trajs.1);
        if !reachable(t0, &arms.bases[perm[0]]) || !reachable(t1, &arms.bases[perm[1]]) {
            continue;
        }
        let cost = (centroid(t0) - arms.bases[perm[0]]).norm()
            + (centroid(t1) - arms.bases[perm[1]]).norm();
        // Strict improvement only: evaluation order starts at the identity
        // map, so ties keep it.
        if best.map_or(true, |(c, _)| cost < c - 1e-12) {
            best = Some((cost, perm));
        }
    }
    best.map(|(_, perm)| ArmAssignment { stream_to_arm: perm }).ok_or(AllocError::Infeasible)
}

/// Conflict iff the minimum distance between two cross-stream segments'
/// swept sets (waypoint polylines plus each arm's base-to-gripper link
/// corridor) is strictly below `d_safe`. Same-stream pairs never conflict.
pub fn detect_conflicts(
    segments: &[Segment],
    trajs: (&Trajectory3D, &Trajectory3D),
    assignment: &ArmAssignment,
    arms: &ArmGeometry,
    d_safe: f64,
) -> ConflictGraph {
    let mut graph = ConflictGraph::default();
    for a in segments {
        for b in segments {
            if a.id >= b.id || a.stream == b.stream {
                continue;
            }
            let d = segment_pair_distance(a, b, trajs, assignment, arms);
            if d < d_safe {
                graph.insert(a.id, b.id, d);
            }
        }
    }
    graph
}

fn polyline<'a>(seg: &Segment, trajs: (&'a Trajectory3D, &'a Trajectory3D)) -> Vec<Vector3<f64>> {
    let t = if seg.stream == 0 { trajs.0 } else { trajs.1 };
    t.waypoints[seg.start..seg.end].iter().map(|w| w.pos).collect()
}

/// Minimum distance between the swept sets of two segments.
pub fn segment_pair_distance(
    a: &Segment,
    b: &Segment,
    trajs: (&Trajectory3D, &Trajectory3D),
    assignment: &ArmAssignment,
    arms: &ArmGeometry,
) -> f64 {
    let pa = polyline(a, trajs);
    let pb = polyline(b, trajs);
    let base_a = arms.bases[assignment.arm_of(a)];
    let base_b = arms.bases[assignment.arm_of(b)];
    let mut min = f64::INFINITY;
    let edges = |poly: &[Vector3<f64>]| -> Vec<(Vector3<f64>, Vector3<f64>)> {
        if poly.len() == 1 {
            vec![(poly[0], poly[0])]
        } else {
            poly.windows(2).map(|w| (w[0], w[1])).collect()
        }
    };
    let ea = edges(&pa);
    let eb = edges(&pb);
    for (p1, q1) in &ea {
        for (p2, q2) in &eb {
            min = min.min(min_seg_distance(*p1, *q1, *p2, *q2));
        }
    }
    // Arm link corridors: base to each waypoint.
    for w in &pa {
        for (p2, q2) in &eb {
            min = min.min(min_seg_distance(base_a, *w, *p2, *q2));
        }
    }
    for w in &pb {
        for (p1, q1) in &ea {
            min = min.min(min_seg_distance(base_b, *w, *p1, *q1));
        }
    }
    for wa in &pa {
        for wb in &pb {
            min = min.min(min_seg_distance(base_a, *wa, base_b, *wb));
        }
    }
    min
}
