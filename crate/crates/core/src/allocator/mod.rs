//! Spatial-temporal task allocation: trajectory segmentation, arm
//! assignment, conflict detection, collision-free slot scheduling, overlay
//! rendering, and the optional external-VLM client with validation and
//! fallback.

mod conflict;
mod overlay;
mod sched;
mod segment;
mod vlm;

pub use conflict::{assign_arms, detect_conflicts, ArmAssignment, ArmGeometry};
pub use overlay::render_overlay;
pub use sched::{
    greedy_schedule, schedule_bnb, schedule_exhaustive, validate_schedule, Schedule, Slot,
};
pub use segment::{segment_trajectory, segment_trajectory_with_cuts, SegmentParams};
pub use vlm::{vlm_allocate, VlmOutcome, VlmRequest, VlmResponse, VlmSegment};

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::lift3d::Trajectory3D;

#[derive(Debug, Error)]
pub enum AllocError {
    #[error("segment count {m} out of range 1..={max}")]
    SegmentCountOutOfRange { m: usize, max: usize },
    #[error("trajectory too short to segment")]
    TooShort,
    #[error("no arm assignment satisfies the reach constraint")]
    Infeasible,
    #[error("precedence graph has a cycle")]
    CyclicPrecedence,
    #[error("no valid schedule exists")]
    Unschedulable,
    #[error("schedule references unknown segment {0}")]
    UnknownSegment(usize),
}

pub type Result<T> = std::result::Result<T, AllocError>;

/// Contiguous waypoint slice of one stream's trajectory, the atomic
/// scheduling unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub id: usize,
    pub stream: u8,
    /// Index within the stream (execution order inside the stream).
    pub index: usize,
    /// Waypoint slice [start, end).
    pub start: usize,
    pub end: usize,
    pub duration: f64,
    /// Object attached (displaced more than 1 cm) during this slice.
    pub carry: bool,
}

impl Segment {
    pub fn waypoints<'a>(&self, traj: &'a Trajectory3D) -> &'a [crate::lift3d::Waypoint] {
        &traj.waypoints[self.start..self.end]
    }
}

/// Undirected spatial-conflict graph over segment ids, with the measured
/// minimum polyline distance per checked cross-stream pair.
#[derive(Debug, Clone, Default)]
pub struct ConflictGraph {
    edges: BTreeSet<(usize, usize)>,
    pub distances: BTreeMap<(usize, usize), f64>,
}

impl ConflictGraph {
    fn key(a: usize, b: usize) -> (usize, usize) {
        if a < b {
            (a, b)
        } else {
            (b, a)
        }
    }

    pub fn insert(&mut self, a: usize, b: usize, distance: f64) {
        assert_ne!(a, b, "no self-conflicts");
        self.edges.insert(Self::key(a, b));
        self.distances.insert(Self::key(a, b), distance);
    }

    pub fn conflicts(&self, a: usize, b: usize) -> bool {
        a != b && self.edges.contains(&Self::key(a, b))
    }

    pub fn edges(&self) -> impl Iterator<Item = &(usize, usize)> {
        self.edges.iter()
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Directed precedence over segment ids: within-stream chains plus
/// cross-stream task dependencies.
#[derive(Debug, Clone, Default)]
pub struct PrecedenceDag {
    pub edges: BTreeSet<(usize, usize)>,
}

impl PrecedenceDag {
    /// Build from within-stream order plus the episode's cross-stream
    /// constraints (arc fractions mapped onto the segment covering the
    /// fraction's waypoint).
    pub fn build(
        segments: &[Segment],
        precedence: &[crate::scene::PrecedenceSpec],
        trajs: (&Trajectory3D, &Trajectory3D),
    ) -> Result<PrecedenceDag> {
        let mut edges = BTreeSet::new();
        // Within-stream chains.
        for s in segments {
            if let Some(next) = segments
                .iter()
                .find(|o| o.stream == s.stream && o.index == s.index + 1)
            {
                edges.insert((s.id, next.id));
            }
        }
        // Cross-stream dependencies.
        for spec in precedence {
            let before = segment_at_fraction(segments, spec.before.0, spec.before.1, trajs)?;
            let after = segment_at_fraction(segments, spec.after.0, spec.after.1, trajs)?;
            if before != after {
                edges.insert((before, after));
            }
        }
        let dag = PrecedenceDag { edges };
        if dag.has_cycle(segments) {
            return Err(AllocError::CyclicPrecedence);
        }
        Ok(dag)
    }

    pub fn has_cycle(&self, segments: &[Segment]) -> bool {
        // Kahn's algorithm over the segment ids.
        let ids: Vec<usize> = segments.iter().map(|s| s.id).collect();
        let mut indeg: BTreeMap<usize, usize> = ids.iter().map(|&i| (i, 0)).collect();
        for (_, b) in &self.edges {
            if let Some(d) = indeg.get_mut(b) {
                *d += 1;
            }
        }
        let mut queue: Vec<usize> =
            indeg.iter().filter(|(_, &d)| d == 0).map(|(&i, _)| i).collect();
        let mut seen = 0;
        while let Some(i) = queue.pop() {
            seen += 1;
            for (a, b) in &self.edges {
                if *a == i {
                    let d = indeg.get_mut(b).expect("edge endpoint in segment set");
                    *d -= 1;
                    if *d == 0 {
                        queue.push(*b);
                    }
                }
            }
        }
        seen != ids.len()
    }

    pub fn predecessors_done(&self, id: usize, done: &BTreeSet<usize>) -> bool {
        self.edges.iter().filter(|(_, b)| *b == id).all(|(a, _)| done.contains(a))
    }
}

/// Cut indices a stream's segmentation must include so that every
/// before-endpoint can finish strictly before every later after-endpoint on
/// the same stream; without them an interleaved precedence chain (e.g.
/// lid-off / lid-on around an item placement) cannot be scheduled.
pub fn precedence_cuts(
    stream: u8,
    precedence: &[crate::scene::PrecedenceSpec],
    p: usize,
) -> Vec<usize> {
    let wp = |frac: f64| ((frac.clamp(0.0, 1.0)) * (p - 1) as f64).round() as usize;
    let mut cuts = Vec::new();
    for b in precedence.iter().filter(|s| s.before.0 == stream) {
        for a in precedence.iter().filter(|s| s.after.0 == stream) {
            let (wb, wa) = (wp(b.before.1), wp(a.after.1));
            if wb < wa {
                cuts.push(wb + 1);
            }
        }
    }
    cuts.sort_unstable();
    cuts.dedup();
    cuts
}

/// Map an arc fraction of a stream onto the segment containing that
/// waypoint.
fn segment_at_fraction(
    segments: &[Segment],
    stream: u8,
    fraction: f64,
    trajs: (&Trajectory3D, &Trajectory3D),
) -> Result<usize> {
    let traj = if stream == 0 { trajs.0 } else { trajs.1 };
    let p = traj.waypoints.len();
    let wp = ((fraction.clamp(0.0, 1.0)) * (p - 1) as f64).round() as usize;
    segments
        .iter()
        .find(|s| s.stream == stream && wp >= s.start && wp < s.end)
        .map(|s| s.id)
        .ok_or(AllocError::UnknownSegment(wp))
}

#[cfg(test)]
mod tests;
