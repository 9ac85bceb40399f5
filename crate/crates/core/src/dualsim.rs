//! Deterministic kinematic dual-arm simulator: schedule execution with
//! point grippers, grasp/attach semantics, proximity collision events, and
//! task-success evaluation over region/ordering predicates.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{ArmAssignment, Schedule, Segment};
use crate::lift3d::Trajectory3D;
use crate::scene::{EpisodeRecord, Pose, TaskTemplate};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("schedule references unknown segment {0}")]
    UnknownSegment(usize),
    #[error("goal template {goal:?} does not match world template {world:?}")]
    TemplateMismatch { goal: TaskTemplate, world: TaskTemplate },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Exact minimum distance between 3D segments [p1,q1] and [p2,q2].
/// Degenerate segments (points) are fine.
pub fn min_seg_distance(
    p1: Vector3<f64>,
    q1: Vector3<f64>,
    p2: Vector3<f64>,
    q2: Vector3<f64>,
) -> f64 {
    // Standard closest-point parametrization, clamped to the unit square.
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let (s, t);
    if a <= 1e-18 && e <= 1e-18 {
        return (p1 - p2).norm();
    }
    if a <= 1e-18 {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= 1e-18 {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s_tmp = if denom.abs() > 1e-18 {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t_tmp = (b * s_tmp + f) / e;
            if t_tmp < 0.0 {
                t_tmp = 0.0;
                s_tmp = (-c / a).clamp(0.0, 1.0);
            } else if t_tmp > 1.0 {
                t_tmp = 1.0;
                s_tmp = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s_tmp;
            t = t_tmp;
        }
    }
    ((p1 + d1 * s) - (p2 + d2 * t)).norm()
}

pub const GRASP_EPSILON: f64 = 0.01;
pub const COLLIDE_DISTANCE: f64 = 0.02;
pub const DEFAULT_DT: f64 = 0.02;
pub const DEFAULT_V_MAX: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct ArmState {
    pub base: Vector3<f64>,
    pub gripper: Vector3<f64>,
    pub closed: bool,
    pub attached: Option<usize>,
    pub v_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperCmd {
    Hold,
    Close,
    Open,
}

#[derive(Debug, Clone, Copy)]
pub struct ArmCommand {
    pub target: Option<Vector3<f64>>,
    pub gripper: GripperCmd,
}

impl ArmCommand {
    pub fn idle() -> Self {
        ArmCommand { target: None, gripper: GripperCmd::Hold }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    Grasp { arm: usize, object: usize },
    Release { arm: usize, object: usize },
    Collision { a: String, b: String, distance: f64 },
    SlotStart { slot: usize },
    SlotEnd { slot: usize },
    SegmentStart { segment: usize, arm: usize },
    SegmentEnd { segment: usize, arm: usize },
    RegionEnter { object: usize, region: String },
    RegionExit { object: usize, region: String },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Event {
    pub tick: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Axis-aligned region used by goal predicates and region events.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    /// Object whose center is watched for enter/exit events.
    pub watch: usize,
}

impl Region {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.lo[i] && p[i] <= self.hi[i])
    }
}

#[derive(Debug, Clone)]
struct SimObject {
    pose: Pose,
    half: Vector3<f64>,
    graspable: bool,
    container: bool,
}

pub struct World {
    objects: Vec<SimObject>,
    pub arms: [ArmState; 2],
    pub tick: u64,
    pub events: Vec<Event>,
    regions: Vec<Region>,
    region_inside: Vec<bool>,
    template: TaskTemplate,
}

impl World {
    /// Build from an episode's initial frame. Arm grippers start above
    /// their bases.
    pub fn from_episode(
        ep: &EpisodeRecord,
        bases: [Vector3<f64>; 2],
        v_max: f64,
        regions: Vec<Region>,
    ) -> World {
        let objects: Vec<SimObject> = ep
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| SimObject {
                pose: *ep.pose(0, i),
                half: o.half(),
                graspable: o.graspable,
                container: o.container,
            })
            .collect();
        let arm = |base: Vector3<f64>| ArmState {
            base,
            gripper: base + Vector3::new(0.0, 0.0, -0.05),
            closed: false,
            attached: None,
            v_max,
        };
        // Seed region occupancy from the initial poses so construction
        // never emits spurious enter events.
        let region_inside = regions
            .iter()
            .map(|r: &Region| r.contains(&objects[r.watch].pose.position()))
            .collect();
        World {
            objects,
            arms: [arm(bases[0]), arm(bases[1])],
            tick: 0,
            events: Vec::new(),
            regions,
            region_inside,
            template: ep.task,
        }
    }

    pub fn object_pose(&self, i: usize) -> &Pose {
        &self.objects[i].pose
    }

    pub fn template(&self) -> TaskTemplate {
        self.template
    }

    fn grasp_point(&self, i: usize) -> Vector3<f64> {
        self.objects[i].pose.position() + Vector3::new(0.0, 0.0, self.objects[i].half.z)
    }

    /// Grasp point of the free graspable object nearest to `near`, within
    /// `radius`. Ties resolve to the lowest object index.
    pub fn nearest_graspable_point(&self, near: &Vector3<f64>, radius: f64) -> Option<Vector3<f64>> {
        let mut best: Option<(f64, Vector3<f64>)> = None;
        for i in 0..self.objects.len() {
            if !self.objects[i].graspable || self.arms.iter().any(|a| a.attached == Some(i)) {
                continue;
            }
            let gp = self.grasp_point(i);
            let d = (gp - near).norm();
            if d <= radius && best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, gp));
            }
        }
        best.map(|(_, gp)| gp)
    }

    fn log(&mut self, kind: EventKind) {
        self.events.push(Event { tick: self.tick, kind });
    }

    /// One kinematic step. Grippers advance toward their targets at most
    /// `v_max * dt`; close attaches the nearest graspable object within
    /// 1 cm of its grasp point; open releases. Collisions are events, not
    /// errors.
    pub fn step(&mut self, commands: [ArmCommand; 2], dt: f64) {
        debug_assert!(dt > 0.0);
        self.tick += 1;
        for (ai, cmd) in commands.iter().enumerate() {
            if let Some(target) = cmd.target {
                let arm = &mut self.arms[ai];
                let delta = target - arm.gripper;
                let dist = delta.norm();
                let max_step = arm.v_max * dt;
                arm.gripper = if dist <= max_step || dist <= 1e-12 {
                    target
                } else {
                    arm.gripper + delta * (max_step / dist)
                };
                // Attached object follows rigidly.
                if let Some(obj) = arm.attached {
                    let offset = Vector3::new(0.0, 0.0, self.objects[obj].half.z);
                    let new_pos = self.arms[ai].gripper - offset;
                    let yaw = self.objects[obj].pose.yaw;
                    self.objects[obj].pose = Pose::new(new_pos, yaw);
                }
            }
            match cmd.gripper {
                GripperCmd::Hold => {}
                GripperCmd::Close => {
                    if !self.arms[ai].closed {
                        self.arms[ai].closed = true;
                        // Nearest graspable object within reach of the jaws.
                        let g = self.arms[ai].gripper;
                        let mut best: Option<(usize, f64)> = None;
                        for i in 0..self.objects.len() {
                            if !self.objects[i].graspable {
                                continue;
                            }
                            if self.is_attached_elsewhere(i, ai) {
                                continue;
                            }
                            let d = (self.grasp_point(i) - g).norm();
                            if d <= GRASP_EPSILON && best.map_or(true, |(_, bd)| d < bd) {
                                best = Some((i, d));
                            }
                        }
                        if let Some((obj, _)) = best {
                            self.arms[ai].attached = Some(obj);
                            self.log(EventKind::Grasp { arm: ai, object: obj });
                        }
                    }
                }
                GripperCmd::Open => {
                    if self.arms[ai].closed {
                        self.arms[ai].closed = false;
                        if let Some(obj) = self.arms[ai].attached.take() {
                            self.log(EventKind::Release { arm: ai, object: obj });
                        }
                    }
                }
            }
        }
        self.check_collisions();
        self.check_regions();
    }

    fn is_attached_elsewhere(&self, obj: usize, arm: usize) -> bool {
        self.arms
            .iter()
            .enumerate()
            .any(|(ai, a)| ai != arm && a.attached == Some(obj))
    }

    fn aabb_of(&self, i: usize) -> (Vector3<f64>, Vector3<f64>) {
        let o = &self.objects[i];
        let (s, c) = (o.pose.yaw.sin().abs(), o.pose.yaw.cos().abs());
        let half = Vector3::new(
            c * o.half.x + s * o.half.y,
            s * o.half.x + c * o.half.y,
            o.half.z,
        );
        let p = o.pose.position();
        (p - half, p + half)
    }

    fn aabb_distance(&self, i: usize, j: usize) -> f64 {
        let (lo_a, hi_a) = self.aabb_of(i);
        let (lo_b, hi_b) = self.aabb_of(j);
        let mut acc = 0.0f64;
        for ax in 0..3 {
            let gap = (lo_a[ax].max(lo_b[ax]) - hi_a[ax].min(hi_b[ax])).max(0.0);
            acc += gap * gap;
        }
        acc.sqrt()
    }

    /// Point-to-AABB distance, conservative stand-in for link vs object.
    fn seg_aabb_distance(&self, p: Vector3<f64>, q: Vector3<f64>, i: usize) -> f64 {
        // Sample the link densely; the proxy geometry is coarse anyway.
        let (lo, hi) = self.aabb_of(i);
        let mut min = f64::INFINITY;
        let steps = 32;
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            let pt = p + (q - p) * t;
            let mut acc = 0.0;
            for ax in 0..3 {
                let gap = (lo[ax] - pt[ax]).max(pt[ax] - hi[ax]).max(0.0);
                acc += gap * gap;
            }
            min = min.min(acc.sqrt());
        }
        min
    }

    /// Pairs checked: the two arm links against each other, each link
    /// against the other arm's carried object, carried objects against each
    /// other, and carried objects against static non-container objects.
    fn check_collisions(&mut self) {
        let link = |a: &ArmState| (a.base, a.gripper);
        let (l0, l1) = (link(&self.arms[0]), link(&self.arms[1]));
        let mut hits: Vec<(String, String, f64)> = Vec::new();
        let d = min_seg_distance(l0.0, l0.1, l1.0, l1.1);
        if d < COLLIDE_DISTANCE {
            hits.push(("arm0_link".into(), "arm1_link".into(), d));
        }
        for (ai, other) in [(0usize, 1usize), (1, 0)] {
            if let Some(obj) = self.arms[other].attached {
                let (p, q) = link(&self.arms[ai]);
                let d = self.seg_aabb_distance(p, q, obj);
                if d < COLLIDE_DISTANCE {
                    hits.push((format!("arm{ai}_link"), format!("obj{obj}"), d));
                }
            }
        }
        if let (Some(a), Some(b)) = (self.arms[0].attached, self.arms[1].attached) {
            if a != b && !self.objects[a].container && !self.objects[b].container {
                let d = self.aabb_distance(a, b);
                if d < COLLIDE_DISTANCE {
                    hits.push((format!("obj{a}"), format!("obj{b}"), d));
                }
            }
        }
        for arm in 0..2 {
            if let Some(carried) = self.arms[arm].attached {
                if self.objects[carried].container {
                    // Receptacles (e.g. a sliding drawer) interpenetrate
                    // their contents by design.
                    continue;
                }
                for i in 0..self.objects.len() {
                    if i == carried
                        || self.objects[i].container
                        || self.arms.iter().any(|a| a.attached == Some(i))
                    {
                        continue;
                    }
                    let d = self.aabb_distance(carried, i);
                    if d < COLLIDE_DISTANCE {
                        hits.push((format!("obj{carried}"), format!("obj{i}"), d));
                    }
                }
            }
        }
        for (a, b, d) in hits {
            self.log(EventKind::Collision { a, b, distance: d });
        }
    }

    fn check_regions(&mut self) {
        for ri in 0..self.regions.len() {
            let inside =
                self.regions[ri].contains(&self.objects[self.regions[ri].watch].pose.position());
            if inside != self.region_inside[ri] {
                self.region_inside[ri] = inside;
                let (object, region) = (self.regions[ri].watch, self.regions[ri].name.clone());
                if inside {
                    self.log(EventKind::RegionEnter { object, region });
                } else {
                    self.log(EventKind::RegionExit { object, region });
                }
            }
        }
    }
}

/// Execute a schedule: slots in order; within a slot each assigned arm
/// transits to its segment's first waypoint, grasps when the segment
/// carries, tracks the waypoints, and releases when the next same-stream
/// segment does not carry. The slot ends when every member finishes.
pub fn execute_schedule(
    world: &mut World,
    schedule: &Schedule,
    segments: &[Segment],
    trajs: (&Trajectory3D, &Trajectory3D),
    assignment: &ArmAssignment,
    dt: f64,
) -> Result<()> {
    let by_id: BTreeMap<usize, &Segment> = segments.iter().map(|s| (s.id, s)).collect();
    let releases = release_map(segments);
    for (slot_idx, slot) in schedule.slots.iter().enumerate() {
        world.log(EventKind::SlotStart { slot: slot_idx });
        let mut runners: Vec<SegmentRunner> = Vec::new();
        for (arm, id) in &slot.entries {
            let seg = *by_id.get(id).ok_or(SimError::UnknownSegment(*id))?;
            debug_assert_eq!(*arm, assignment.arm_of(seg));
            world.log(EventKind::SegmentStart { segment: *id, arm: *arm });
            // Segments track through the next slice's first waypoint, so
            // objects are handed off exactly at a segment's start waypoint.
            let traj = if seg.stream == 0 { trajs.0 } else { trajs.1 };
            let approach = traj.waypoints[seg.start].pos;
            runners.push(SegmentRunner::new(seg, *arm, releases[&seg.id], approach));
        }
        // Step until every runner completes (safety cap well beyond any
        // legitimate execution).
        let mut guard = 0u64;
        while runners.iter().any(|r| !r.done) {
            let mut commands = [ArmCommand::idle(), ArmCommand::idle()];
            for r in runners.iter_mut() {
                if !r.done {
                    commands[r.arm] = r.command(world, trajs, dt);
                }
            }
            world.step(commands, dt);
            for r in runners.iter_mut() {
                r.after_step(world);
            }
            guard += 1;
            if guard > 2_000_000 {
                break;
            }
        }
        for r in &runners {
            world.log(EventKind::SegmentEnd { segment: r.segment.id, arm: r.arm });
        }
        world.log(EventKind::SlotEnd { slot: slot_idx });
    }
    Ok(())
}

/// Whether each segment should release at its end (next same-stream segment
/// does not carry, or it is the stream's last segment).
fn release_map(segments: &[Segment]) -> BTreeMap<usize, bool> {
    let mut out = BTreeMap::new();
    for s in segments {
        let next = segments.iter().find(|o| o.stream == s.stream && o.index == s.index + 1);
        let release = match next {
            Some(n) => !n.carry,
            None => true,
        };
        out.insert(s.id, release && s.carry);
    }
    out
}

struct SegmentRunner {
    segment: Segment,
    arm: usize,
    release_at_end: bool,
    approach: Vector3<f64>,
    phase: RunnerPhase,
    waypoint: usize,
    done: bool,
}

#[derive(PartialEq)]
enum RunnerPhase {
    Transit,
    Grasp,
    Track,
    Finish,
    Retract,
}

impl SegmentRunner {
    fn new(segment: &Segment, arm: usize, release_at_end: bool, approach: Vector3<f64>) -> Self {
        SegmentRunner {
            segment: segment.clone(),
            arm,
            release_at_end,
            approach,
            phase: RunnerPhase::Transit,
            waypoint: 0,
            done: false,
        }
    }

    fn target(&self, trajs: (&Trajectory3D, &Trajectory3D), idx: usize) -> Vector3<f64> {
        let traj = if self.segment.stream == 0 { trajs.0 } else { trajs.1 };
        traj.waypoints[self.segment.start + idx].pos
    }

    /// Waypoints tracked: the slice plus the next slice's first waypoint,
    /// so carried objects arrive where the next segment expects them.
    fn track_len(&self, trajs: (&Trajectory3D, &Trajectory3D)) -> usize {
        let traj = if self.segment.stream == 0 { trajs.0 } else { trajs.1 };
        let n = self.segment.end - self.segment.start;
        if self.segment.end < traj.waypoints.len() {
            n + 1
        } else {
            n
        }
    }

    fn command(
        &mut self,
        world: &World,
        trajs: (&Trajectory3D, &Trajectory3D),
        _dt: f64,
    ) -> ArmCommand {
        let gripper = world.arms[self.arm].gripper;
        match self.phase {
            RunnerPhase::Transit => {
                // Carry segments approach the object itself (it may rest a
                // waypoint short of this slice after a non-carry handoff).
                let goal = if self.segment.carry {
                    world.nearest_graspable_point(&self.approach, 0.05).unwrap_or(self.approach)
                } else {
                    self.approach
                };
                if (gripper - goal).norm() <= 1e-9 {
                    self.phase =
                        if self.segment.carry { RunnerPhase::Grasp } else { RunnerPhase::Track };
                    self.command(world, trajs, _dt)
                } else {
                    ArmCommand { target: Some(goal), gripper: GripperCmd::Hold }
                }
            }
            RunnerPhase::Grasp => {
                self.phase = RunnerPhase::Track;
                ArmCommand { target: None, gripper: GripperCmd::Close }
            }
            RunnerPhase::Track => {
                let n = self.track_len(trajs);
                while self.waypoint < n
                    && (gripper - self.target(trajs, self.waypoint)).norm() <= 1e-9
                {
                    self.waypoint += 1;
                }
                if self.waypoint >= n {
                    self.phase = RunnerPhase::Finish;
                    return self.command(world, trajs, _dt);
                }
                ArmCommand {
                    target: Some(self.target(trajs, self.waypoint)),
                    gripper: GripperCmd::Hold,
                }
            }
            RunnerPhase::Finish => {
                if self.release_at_end && world.arms[self.arm].closed {
                    ArmCommand { target: None, gripper: GripperCmd::Open }
                } else {
                    self.phase = RunnerPhase::Retract;
                    self.command(world, trajs, _dt)
                }
            }
            // Park above the base so an idle link never squats in the other
            // arm's workspace.
            RunnerPhase::Retract => {
                let home = world.arms[self.arm].base + Vector3::new(0.0, 0.0, -0.05);
                if (gripper - home).norm() <= 1e-9 {
                    self.done = true;
                    ArmCommand::idle()
                } else {
                    ArmCommand { target: Some(home), gripper: GripperCmd::Hold }
                }
            }
        }
    }

    fn after_step(&mut self, world: &World) {
        if self.phase == RunnerPhase::Retract {
            let home = world.arms[self.arm].base + Vector3::new(0.0, 0.0, -0.05);
            if (world.arms[self.arm].gripper - home).norm() <= 1e-9 {
                self.done = true;
            }
        }
    }
}

/// Goal predicates over the final world state and event log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskGoal {
    pub template: TaskTemplate,
    pub regions: Vec<Region>,
    pub predicates: Vec<Predicate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predicate {
    /// Object center inside a named region at the end.
    ObjectInRegion { object: usize, region: String },
    /// Object within `tol` meters of a position at the end.
    ObjectNearPosition { object: usize, position: [f64; 3], tol: f64 },
    /// The final entry into `then` must come after the first entry into
    /// `first` (both regions must be reached at all). Using the last entry
    /// of `then` tolerates incidental early crossings, e.g. a lid lifting
    /// through its own return zone.
    RegionOrder { first: String, then: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub success: bool,
    pub reasons: Vec<String>,
    pub collisions: usize,
}

/// Success iff every predicate holds and the log carries zero collisions.
pub fn evaluate_task(world: &World, goal: &TaskGoal) -> Result<TaskOutcome> {
    if goal.template != world.template() {
        return Err(SimError::TemplateMismatch { goal: goal.template, world: world.template() });
    }
    let mut reasons = Vec::new();
    let first_entry = |region: &str| -> Option<u64> {
        world.events.iter().find_map(|e| match &e.kind {
            EventKind::RegionEnter { region: r, .. } if r == region => Some(e.tick),
            _ => None,
        })
    };
    let last_entry = |region: &str| -> Option<u64> {
        world
            .events
            .iter()
            .rev()
            .find_map(|e| match &e.kind {
                EventKind::RegionEnter { region: r, .. } if r == region => Some(e.tick),
                _ => None,
            })
    };
    for p in &goal.predicates {
        match p {
            Predicate::ObjectInRegion { object, region } => {
                let reg = goal.regions.iter().find(|r| &r.name == region);
                match reg {
                    Some(reg) if reg.contains(&world.object_pose(*object).position()) => {}
                    Some(_) => {
                        reasons.push(format!("object {object} not in region {region}"))
                    }
                    None => reasons.push(format!("unknown region {region}")),
                }
            }
            Predicate::ObjectNearPosition { object, position, tol } => {
                let p = world.object_pose(*object).position();
                let want = Vector3::new(position[0], position[1], position[2]);
                let d = (p - want).norm();
                if d > *tol {
                    reasons.push(format!(
                        "object {object} is {d:.3} m from its goal (tol {tol:.3})"
                    ));
                }
            }
            Predicate::RegionOrder { first, then } => {
                match (first_entry(first), last_entry(then)) {
                    (Some(a), Some(b)) if a <= b => {}
                    (Some(a), Some(b)) => reasons.push(format!(
                        "ordering violated: {then} (tick {b}) before {first} (tick {a})"
                    )),
                    (None, Some(_)) => reasons.push(format!(
                        "ordering violated: {then} entered but {first} never did"
                    )),
                    (Some(_), None) => {
                        reasons.push(format!("{then} was never reached"))
                    }
                    (None, None) => {
                        reasons.push(format!("neither {first} nor {then} was reached"))
                    }
                }
            }
        }
    }
    let collisions = world
        .events
        .iter()
        .filter(|e| matches!(e.kind, EventKind::Collision { .. }))
        .count();
    if collisions > 0 {
        reasons.push(format!("{collisions} collision event(s)"));
    }
    Ok(TaskOutcome { success: reasons.is_empty(), reasons, collisions })
}

/// Event log as JSON-lines `{tick, type, ...}`.
pub fn write_event_log(path: &std::path::Path, events: &[Event]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
