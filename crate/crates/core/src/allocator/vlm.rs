//! Optional external-VLM scheduling client.
//!
//! Sends the segmented problem (with overlay) as JSON over HTTP POST,
//! validates the returned slot ordering against the schedule invariants,
//! and falls back to the branch-and-bound solver on any transport error or
//! invalid response. Failures never surface to the caller; the fallback
//! reason is recorded in the run report.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::lift3d::Trajectory3D;

use super::{
    schedule_bnb, validate_schedule, ArmAssignment, ConflictGraph, PrecedenceDag, Result,
    Schedule, Segment, Slot,
};

pub const VLM_PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct VlmRequest<'a> {
    pub version: u32,
    pub instruction: &'a str,
    pub overlay_svg: &'a str,
    pub segments: Vec<VlmSegment>,
    pub precedence: Vec<[usize; 2]>,
    pub conflicts: Vec<[usize; 2]>,
}

#[derive(Debug, Serialize)]
pub struct VlmSegment {
    pub id: usize,
    pub stream: u8,
    pub arm: usize,
    pub polyline: Vec<[f64; 3]>,
    pub duration_s: f64,
    pub carry: bool,
}

#[derive(Debug, Deserialize)]
pub struct VlmResponse {
    pub version: u32,
    pub slots: Vec<Vec<usize>>,
}

/// What the client did: the external ordering, or the fallback with the
/// recorded reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VlmOutcome {
    External,
    Fallback(String),
}

/// Ask the endpoint for a slot ordering; validate; fall back on any failure.
pub fn vlm_allocate(
    endpoint: &str,
    timeout_s: f64,
    instruction: &str,
    overlay_svg: &str,
    segments: &[Segment],
    trajs: (&Trajectory3D, &Trajectory3D),
    conflicts: &ConflictGraph,
    dag: &PrecedenceDag,
    assignment: &ArmAssignment,
) -> Result<(Schedule, VlmOutcome)> {
    let request = VlmRequest {
        version: VLM_PROTOCOL_VERSION,
        instruction,
        overlay_svg,
        segments: segments
            .iter()
            .map(|s| VlmSegment {
                id: s.id,
                stream: s.stream,
                arm: assignment.arm_of(s),
                polyline: s
                    .waypoints(if s.stream == 0 { trajs.0 } else { trajs.1 })
                    .iter()
                    .map(|w| [w.pos.x, w.pos.y, w.pos.z])
                    .collect(),
                duration_s: s.duration,
                carry: s.carry,
            })
            .collect(),
        precedence: dag.edges.iter().map(|&(a, b)| [a, b]).collect(),
        conflicts: conflicts.edges().map(|&(a, b)| [a, b]).collect(),
    };

    match request_schedule(endpoint, timeout_s, &request, segments, assignment) {
        Ok(schedule) => {
            let violations = validate_schedule(&schedule, segments, conflicts, dag, assignment);
            if violations.is_empty() {
                Ok((schedule, VlmOutcome::External))
            } else {
                let reason = format!("response rejected: {}", violations.join("; "));
                let fallback = schedule_bnb(segments, conflicts, dag, assignment)?;
                Ok((fallback, VlmOutcome::Fallback(reason)))
            }
        }
        Err(reason) => {
            let fallback = schedule_bnb(segments, conflicts, dag, assignment)?;
            Ok((fallback, VlmOutcome::Fallback(reason)))
        }
    }
}

fn request_schedule(
    endpoint: &str,
    timeout_s: f64,
    request: &VlmRequest,
    segments: &[Segment],
    assignment: &ArmAssignment,
) -> std::result::Result<Schedule, String> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs_f64(timeout_s.max(0.01))))
        .build()
        .into();
    let mut response = agent
        .post(endpoint)
        .send_json(request)
        .map_err(|e| format!("transport error: {e}"))?;
    let parsed: VlmResponse =
        response.body_mut().read_json().map_err(|e| format!("malformed response: {e}"))?;
    if parsed.version != VLM_PROTOCOL_VERSION {
        return Err(format!("unsupported response version {}", parsed.version));
    }
    let mut slots = Vec::with_capacity(parsed.slots.len());
    for ids in &parsed.slots {
        let mut entries = Vec::with_capacity(ids.len());
        for id in ids {
            let seg = segments
                .iter()
                .find(|s| s.id == *id)
                .ok_or_else(|| format!("response references unknown segment {id}"))?;
            entries.push((assignment.arm_of(seg), *id));
        }
        entries.sort_unstable();
        slots.push(Slot { entries });
    }
    Ok(Schedule { slots })
}
