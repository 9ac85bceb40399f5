//! Scripted bimanual demonstrations over four task templates.
//!
//! Generation is a pure function of `(template, seed)`. Each template moves
//! two target objects (streams 1 and 2) through phase-structured top-center
//! waypoint paths with small smooth noise; fixtures sit at fixed poses and
//! distractors stay put. Destinations are deterministic functions of the
//! initial scene, so flows are predictable from the first observation.

use nalgebra::{Matrix3, Vector3};

use crate::rng::Rng;

use super::{
    Camera, EpisodeRecord, GripperAction, GripperEvent, Pose, PrecedenceSpec, Result,
    SceneError, SceneObject, TaskTemplate, EPISODE_SCHEMA_VERSION,
};

pub const IMAGE_W: u32 = 64;
pub const IMAGE_H: u32 = 64;
pub const FRAME_DT: f64 = 0.25;
pub const NUM_FRAMES: usize = 20;
pub const LIFT_Z: f64 = 0.25;

const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
const ITEM_LABELS: [&str; 3] = ["cube", "ball", "block"];

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub frames: usize,
    pub frame_dt: f64,
    pub noise_amp: f64,
    pub max_attempts: usize,
    pub distractors: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            frames: NUM_FRAMES,
            frame_dt: FRAME_DT,
            noise_amp: 0.002,
            max_attempts: 1000,
            distractors: 2,
        }
    }
}

/// Fixed fixture geometry per template, shared with task-goal construction.
#[derive(Debug, Clone)]
pub struct TaskLayout {
    pub fixture_xy: (f64, f64),
    /// Pouring only: cup work position and pour hover (top-center).
    pub cup_work: Vector3<f64>,
    pub pour_hover: Vector3<f64>,
    /// Drawer only: slide vector from closed to open.
    pub drawer_open_delta: (f64, f64),
    /// Packing slots (top-center xy).
    pub slots: [(f64, f64); 2],
    /// Put-into-pot: lid parking spot.
    pub lid_park: (f64, f64),
}

pub fn task_layout(template: TaskTemplate) -> TaskLayout {
    let mut l = TaskLayout {
        fixture_xy: (0.0, 0.0),
        cup_work: Vector3::new(0.10, 0.0, 0.07),
        pour_hover: Vector3::new(0.05, 0.0, 0.20),
        drawer_open_delta: (0.0, -0.12),
        slots: [(-0.06, 0.18), (0.06, 0.18)],
        lid_park: (-0.24, 0.15),
    };
    match template {
        TaskTemplate::Packing => l.fixture_xy = (0.0, 0.18),
        TaskTemplate::PutIntoPot => l.fixture_xy = (0.0, 0.15),
        TaskTemplate::Pouring => l.fixture_xy = (0.10, 0.0),
        TaskTemplate::DrawerPlace => l.fixture_xy = (-0.15, 0.18),
    }
    l
}

pub fn default_camera() -> Camera {
    let r = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
    let t = Vector3::new(0.0, 0.0, 1.25);
    Camera::new([64.0, 64.0, 32.0, 32.0], r, t, IMAGE_W, IMAGE_H)
        .expect("default camera is valid")
}

pub fn generate_episode(template: TaskTemplate, seed: u64) -> Result<EpisodeRecord> {
    generate_episode_with(template, seed, &GenConfig::default())
}

/// (role, before: (stream, frame), after: (stream, frame)) -- converted to
/// arc fractions once the paths are rolled out.
type RawPrecedence = (&'static str, (u8, usize), (u8, usize));

pub fn generate_episode_with(
    template: TaskTemplate,
    seed: u64,
    cfg: &GenConfig,
) -> Result<EpisodeRecord> {
    let mut rng = Rng::seed(seed ^ hash_template(template));
    let mut scene = SceneBuilder::new(cfg.max_attempts);
    let layout = task_layout(template);

    let scripts: Vec<Script>;
    let raw_precedence: Vec<RawPrecedence>;
    let events: Vec<GripperEvent>;
    let instruction: String;

    match template {
        TaskTemplate::Packing => {
            let (c1, l1, c2, l2) = pick_two_items(&mut rng);
            let box_half = Vector3::new(0.10, 0.07, 0.010);
            scene.place_fixture("box", "white", layout.fixture_xy, box_half, false)?;
            let o1 = scene.place_item(&l1, &c1, (-0.35, -0.10), (-0.22, 0.05), &mut rng)?;
            let o2 = scene.place_item(&l2, &c2, (0.10, 0.35), (-0.22, 0.05), &mut rng)?;
            let box_top = 2.0 * box_half.z;
            let g1 = top_goal(layout.slots[0], box_top, scene.half(o1).z);
            let g2 = top_goal(layout.slots[1], box_top, scene.half(o2).z);
            let yaw1 = rng.uniform(-0.26, 0.26);
            let yaw2 = rng.uniform(-0.26, 0.26);
            scripts = vec![
                Script::new(o1, vec![Phase::carry(1, 19, g1, LIFT_Z).with_yaw(yaw1)]),
                Script::new(o2, vec![Phase::carry(1, 19, g2, LIFT_Z).with_yaw(yaw2)]),
            ];
            raw_precedence = vec![];
            events = grip_events(&[(0, 1, 19), (1, 1, 19)]);
            instruction = format!("pack the {c1} {l1} and the {c2} {l2} into the box");
        }
        TaskTemplate::PutIntoPot => {
            let (c2, l2) = pick_item(&mut rng, &[]);
            let pot_half = Vector3::new(0.07, 0.07, 0.035);
            let lid_half = Vector3::new(0.075, 0.075, 0.010);
            let pot = scene.place_fixture("pot", "gray", layout.fixture_xy, pot_half, false)?;
            let lid_color = COLORS[rng.below(COLORS.len())];
            let lid = scene.place_on_top("lid", lid_color, pot, lid_half);
            let item = scene.place_item(&l2, &c2, (0.10, 0.30), (-0.12, 0.02), &mut rng)?;
            let pot_top = 2.0 * pot_half.z;
            let lid_park = top_goal(layout.lid_park, 0.0, lid_half.z);
            let item_goal = top_goal(layout.fixture_xy, pot_top, scene.half(item).z);
            let lid_final_top = pot_top + 2.0 * scene.half(item).z + 0.03 + 2.0 * lid_half.z;
            let lid_home = scene.top_center(lid);
            let lid_return = Vector3::new(lid_home.x, lid_home.y, lid_final_top);
            scripts = vec![
                Script::new(lid, vec![
                    Phase::carry(0, 6, lid_park, 0.20),
                    Phase::carry(14, 19, lid_return, 0.20),
                ]),
                Script::new(item, vec![Phase::carry(6, 14, item_goal, LIFT_Z)]),
            ];
            raw_precedence = vec![
                ("lid_off_before_item_in", (0, 6), (1, 6)),
                ("item_in_before_lid_on", (1, 14), (0, 14)),
            ];
            events = grip_events(&[(0, 0, 6), (1, 6, 14), (0, 14, 19)]);
            instruction =
                format!("take the lid off the pot and put the {c2} {l2} into the pot");
        }
        TaskTemplate::Pouring => {
            let can_color = COLORS[rng.below(COLORS.len())];
            let cup_color = loop {
                let c = COLORS[rng.below(COLORS.len())];
                if c != can_color {
                    break c;
                }
            };
            let can_half = Vector3::new(0.020, 0.020, 0.040);
            let cup_half = Vector3::new(0.025, 0.025, 0.035);
            // The can starts near the pour zone, the cup in the far corner:
            // executed simultaneously (no allocation) the can reaches the
            // pour zone well before the cup reaches its work position.
            let can = scene.place_sized(
                "can", can_color, (-0.09, -0.05), (-0.02, 0.02), can_half, true, false, &mut rng,
            )?;
            let cup = scene.place_sized(
                "cup", cup_color, (0.32, 0.36), (-0.27, -0.22), cup_half, true, false, &mut rng,
            )?;
            let cup_work = top_goal((layout.cup_work.x, layout.cup_work.y), 0.0, cup_half.z);
            let staging = Vector3::new(-0.02, 0.0, 0.21);
            let can_home = scene.top_center(can);
            let cup_home = scene.top_center(cup);
            scripts = vec![
                Script::new(can, vec![
                    Phase::carry(1, 6, staging, 0.21),
                    Phase::carry(9, 11, layout.pour_hover, 0.21),
                    Phase::wiggle(11, 13, 0.44),
                    Phase::carry(13, 19, can_home, 0.21),
                ]),
                Script::new(cup, vec![
                    Phase::carry(0, 10, cup_work, 0.25),
                    Phase::carry(13, 19, cup_home, 0.17),
                ]),
            ];
            raw_precedence = vec![
                ("container_placed_before_pour", (1, 10), (0, 9)),
                ("pour_done_before_container_return", (0, 13), (1, 13)),
            ];
            events = grip_events(&[(0, 1, 19), (1, 0, 10), (1, 13, 19)]);
            instruction =
                format!("pour the {can_color} can into the {cup_color} cup and put both back");
        }
        TaskTemplate::DrawerPlace => {
            let (c2, l2) = pick_item(&mut rng, &[]);
            let drawer_half = Vector3::new(0.08, 0.06, 0.015);
            let drawer_color = COLORS[rng.below(COLORS.len())];
            let drawer =
                scene.place_fixture("drawer", drawer_color, layout.fixture_xy, drawer_half, true)?;
            let item = scene.place_item(&l2, &c2, (0.08, 0.25), (-0.15, 0.05), &mut rng)?;
            let closed_top = scene.top_center(drawer);
            let open_top = closed_top
                + Vector3::new(layout.drawer_open_delta.0, layout.drawer_open_delta.1, 0.0);
            let item_goal = top_goal(
                (open_top.x, open_top.y),
                2.0 * drawer_half.z,
                scene.half(item).z,
            );
            scripts = vec![
                Script::new(drawer, vec![
                    Phase::slide(0, 4, open_top),
                    Phase::slide(15, 19, closed_top),
                ]),
                Script::new(item, vec![Phase::carry(5, 14, item_goal, LIFT_Z)]),
            ];
            raw_precedence = vec![
                ("drawer_open_before_item_in", (0, 4), (1, 5)),
                ("item_in_before_drawer_close", (1, 14), (0, 15)),
            ];
            events = grip_events(&[(0, 0, 4), (1, 5, 14), (0, 15, 19)]);
            instruction =
                format!("pull the {drawer_color} drawer open and put the {c2} {l2} inside");
        }
    }

    // Distractors, kept clear of everything by a wide margin.
    let mut used: Vec<(String, String)> =
        scene.objects.iter().map(|o| (o.color.clone(), o.label.clone())).collect();
    for _ in 0..cfg.distractors.max(2) {
        let (c, l) = pick_item(&mut rng, &used);
        scene.place_distractor(&l, &c, &mut rng)?;
        used.push((c, l));
    }

    // Roll out per-frame poses.
    let mut frames: Vec<Vec<Pose>> =
        (0..cfg.frames).map(|_| scene.objects.iter().map(|o| o.pose).collect()).collect();
    let mut stream_paths: Vec<Vec<(Vector3<f64>, f64)>> = Vec::with_capacity(2);
    for script in &scripts {
        let path = script.rollout(&scene, cfg, &mut rng);
        let hz = scene.half(script.object).z;
        for (t, (top, yaw)) in path.iter().enumerate() {
            frames[t][script.object] = Pose::new(Vector3::new(top.x, top.y, top.z - hz), *yaw);
        }
        stream_paths.push(path);
    }

    // Continuity guard: displacement per frame stays under v_max * dt.
    let v_cap = 0.5 * cfg.frame_dt;
    for t in 1..frames.len() {
        for (i, pose) in frames[t].iter().enumerate() {
            let d = (pose.position() - frames[t - 1][i].position()).norm();
            assert!(d <= v_cap + 1e-9, "object {i} jumps {d:.4} m at frame {t}");
        }
    }

    // Precedence frames -> arc fractions (with a small nudge into the
    // respective phase so segment mapping stays unambiguous).
    let precedence = raw_precedence
        .into_iter()
        .map(|(role, (bs, bf), (as_, af))| PrecedenceSpec {
            role: role.to_string(),
            before: (bs, (arc_fraction(&stream_paths[bs as usize], bf) - 0.02).clamp(0.0, 1.0)),
            after: (as_, (arc_fraction(&stream_paths[as_ as usize], af) + 0.02).clamp(0.0, 1.0)),
        })
        .collect();

    Ok(EpisodeRecord {
        version: EPISODE_SCHEMA_VERSION,
        task: template,
        instruction,
        camera: default_camera(),
        objects: scene.objects,
        frames,
        gripper_events: events,
        precedence,
        occlusions: vec![],
    })
}

fn grip_events(spans: &[(u8, usize, usize)]) -> Vec<GripperEvent> {
    let mut out = Vec::new();
    for &(arm, close, open) in spans {
        out.push(GripperEvent { arm, action: GripperAction::Close, frame: close });
        out.push(GripperEvent { arm, action: GripperAction::Open, frame: open });
    }
    out
}

/// Fraction of the stream's total arc length covered by frames `0..=frame`.
fn arc_fraction(path: &[(Vector3<f64>, f64)], frame: usize) -> f64 {
    let mut total = 0.0;
    let mut upto = 0.0;
    for t in 1..path.len() {
        let d = (path[t].0 - path[t - 1].0).norm();
        total += d;
        if t <= frame {
            upto += d;
        }
    }
    if total <= 1e-12 {
        0.0
    } else {
        upto / total
    }
}

fn hash_template(t: TaskTemplate) -> u64 {
    match t {
        TaskTemplate::PutIntoPot => 0x706f74,
        TaskTemplate::Packing => 0x7061636b,
        TaskTemplate::Pouring => 0x706f7572,
        TaskTemplate::DrawerPlace => 0x64726177,
    }
}

/// Top-center goal of an item resting on a surface at height `surface_top`.
fn top_goal(xy: (f64, f64), surface_top: f64, item_hz: f64) -> Vector3<f64> {
    Vector3::new(xy.0, xy.1, surface_top + 2.0 * item_hz)
}

fn pick_item(rng: &mut Rng, used: &[(String, String)]) -> (String, String) {
    loop {
        let c = COLORS[rng.below(COLORS.len())].to_string();
        let l = ITEM_LABELS[rng.below(ITEM_LABELS.len())].to_string();
        if !used.iter().any(|(uc, ul)| *uc == c && *ul == l) {
            return (c, l);
        }
    }
}

fn pick_two_items(rng: &mut Rng) -> (String, String, String, String) {
    let (c1, l1) = pick_item(rng, &[]);
    let (c2, l2) = pick_item(rng, &[(c1.clone(), l1.clone())]);
    (c1, l1, c2, l2)
}

struct SceneBuilder {
    objects: Vec<SceneObject>,
    max_attempts: usize,
}

impl SceneBuilder {
    fn new(max_attempts: usize) -> Self {
        SceneBuilder { objects: Vec::new(), max_attempts }
    }

    fn half(&self, i: usize) -> Vector3<f64> {
        self.objects[i].half()
    }

    fn top_center(&self, i: usize) -> Vector3<f64> {
        let o = &self.objects[i];
        o.pose.position() + Vector3::new(0.0, 0.0, o.half_extents[2])
    }

    fn push(&mut self, obj: SceneObject) -> usize {
        self.objects.push(obj);
        self.objects.len() - 1
    }

    /// True when an AABB at `pos` would come within `margin` (in x and y) of
    /// any existing object. Height is ignored: initial scenes keep objects
    /// laterally separated except for deliberate stacks.
    fn too_close(&self, pos: &Vector3<f64>, half: &Vector3<f64>, margin: f64) -> bool {
        for o in &self.objects {
            let (lo, hi) = o.aabb_at(&o.pose);
            let gap_x = pos.x + half.x + margin < lo.x || pos.x - half.x - margin > hi.x;
            let gap_y = pos.y + half.y + margin < lo.y || pos.y - half.y - margin > hi.y;
            if !(gap_x || gap_y) {
                return true;
            }
        }
        false
    }

    fn place_fixture(
        &mut self,
        label: &str,
        color: &str,
        xy: (f64, f64),
        half: Vector3<f64>,
        graspable: bool,
    ) -> Result<usize> {
        let pose = Pose::new(Vector3::new(xy.0, xy.1, half.z), 0.0);
        Ok(self.push(SceneObject {
            label: label.to_string(),
            color: color.to_string(),
            pose,
            half_extents: [half.x, half.y, half.z],
            graspable,
            container: true,
        }))
    }

    fn place_on_top(&mut self, label: &str, color: &str, below: usize, half: Vector3<f64>) -> usize {
        let top = self.top_center(below);
        let pose = Pose::new(Vector3::new(top.x, top.y, top.z + half.z), 0.0);
        self.push(SceneObject {
            label: label.to_string(),
            color: color.to_string(),
            pose,
            half_extents: [half.x, half.y, half.z],
            graspable: true,
            container: false,
        })
    }

    fn place_item(
        &mut self,
        label: &str,
        color: &str,
        x_range: (f64, f64),
        y_range: (f64, f64),
        rng: &mut Rng,
    ) -> Result<usize> {
        let hx = rng.uniform(0.018, 0.030);
        let hz = rng.uniform(0.018, 0.032);
        let half = Vector3::new(hx, hx, hz);
        self.place_sized(label, color, x_range, y_range, half, true, false, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn place_sized(
        &mut self,
        label: &str,
        color: &str,
        x_range: (f64, f64),
        y_range: (f64, f64),
        half: Vector3<f64>,
        graspable: bool,
        container: bool,
        rng: &mut Rng,
    ) -> Result<usize> {
        for _ in 0..self.max_attempts {
            let pos = Vector3::new(
                rng.uniform(x_range.0, x_range.1),
                rng.uniform(y_range.0, y_range.1),
                half.z,
            );
            if !self.too_close(&pos, &half, 0.03) {
                return Ok(self.push(SceneObject {
                    label: label.to_string(),
                    color: color.to_string(),
                    pose: Pose::new(pos, 0.0),
                    half_extents: [half.x, half.y, half.z],
                    graspable,
                    container,
                }));
            }
        }
        Err(SceneError::PlacementFailed(self.max_attempts))
    }

    /// Distractors keep a wide lateral gap so carried objects never descend
    /// near them.
    fn place_distractor(&mut self, label: &str, color: &str, rng: &mut Rng) -> Result<usize> {
        let hx = rng.uniform(0.015, 0.025);
        let hz = rng.uniform(0.015, 0.030);
        let half = Vector3::new(hx, hx, hz);
        for _ in 0..self.max_attempts {
            let pos =
                Vector3::new(rng.uniform(-0.38, 0.38), rng.uniform(-0.28, -0.18), half.z);
            if !self.too_close(&pos, &half, 0.06) {
                return Ok(self.push(SceneObject {
                    label: label.to_string(),
                    color: color.to_string(),
                    pose: Pose::new(pos, 0.0),
                    half_extents: [half.x, half.y, half.z],
                    graspable: true,
                    container: false,
                }));
            }
        }
        Err(SceneError::PlacementFailed(self.max_attempts))
    }
}

/// Phase-structured top-center motion for one object.
struct Script {
    object: usize,
    phases: Vec<Phase>,
}

struct Phase {
    start: usize,
    end: usize,
    kind: PhaseKind,
}

enum PhaseKind {
    /// Rise-transit-descend to a top-center goal, with optional yaw ramp.
    Carry { to: Vector3<f64>, lift: f64, yaw_to: Option<f64> },
    /// Straight slide on the table (drawers).
    Slide { to: Vector3<f64> },
    /// In-place yaw wiggle, returning to the entry yaw.
    Wiggle { amp: f64 },
}

impl Phase {
    fn carry(start: usize, end: usize, to: Vector3<f64>, lift: f64) -> Self {
        Phase { start, end, kind: PhaseKind::Carry { to, lift, yaw_to: None } }
    }

    fn with_yaw(mut self, yaw: f64) -> Self {
        if let PhaseKind::Carry { yaw_to, .. } = &mut self.kind {
            *yaw_to = Some(yaw);
        }
        self
    }

    fn slide(start: usize, end: usize, to: Vector3<f64>) -> Self {
        Phase { start, end, kind: PhaseKind::Slide { to } }
    }

    fn wiggle(start: usize, end: usize, amp: f64) -> Self {
        Phase { start, end, kind: PhaseKind::Wiggle { amp } }
    }
}

impl Script {
    fn new(object: usize, phases: Vec<Phase>) -> Self {
        Script { object, phases }
    }

    /// Per-frame (top-center, yaw) over all frames.
    fn rollout(&self, scene: &SceneBuilder, cfg: &GenConfig, rng: &mut Rng) -> Vec<(Vector3<f64>, f64)> {
        let mut pos = scene.top_center(self.object);
        let mut yaw = scene.objects[self.object].pose.yaw;
        let mut out = vec![(pos, yaw); cfg.frames];
        for phase in &self.phases {
            let start = phase.start;
            let end = phase.end.min(cfg.frames - 1);
            let n = (end - start).max(1);
            match phase.kind {
                PhaseKind::Carry { to, lift, yaw_to } => {
                    let from = pos;
                    let yaw_from = yaw;
                    let yaw_target = yaw_to.unwrap_or(yaw_from);
                    let legs = [
                        Vector3::new(from.x, from.y, lift.max(from.z)),
                        Vector3::new(to.x, to.y, lift.max(to.z)),
                        to,
                    ];
                    let ph1 = rng.uniform(0.0, 1.0);
                    let ph2 = rng.uniform(0.0, 1.0);
                    for f in start..=end {
                        let tau = (f - start) as f64 / n as f64;
                        let s = motion_ramp(tau);
                        let mut p = polyline_point(&from, &legs, s);
                        let wob = cfg.noise_amp * (std::f64::consts::PI * tau).sin();
                        p.x += wob * (2.0 * std::f64::consts::PI * (tau + ph1)).sin();
                        p.y += wob * (2.0 * std::f64::consts::PI * (2.0 * tau + ph2)).sin();
                        out[f] = (p, yaw_from + (yaw_target - yaw_from) * s);
                    }
                    for slot in out.iter_mut().skip(end) {
                        *slot = (to, yaw_target);
                    }
                    pos = to;
                    yaw = yaw_target;
                }
                PhaseKind::Slide { to } => {
                    let from = pos;
                    for f in start..=end {
                        let tau = (f - start) as f64 / n as f64;
                        let s = motion_ramp(tau);
                        out[f] = (from + (to - from) * s, yaw);
                    }
                    for slot in out.iter_mut().skip(end) {
                        *slot = (to, yaw);
                    }
                    pos = to;
                }
                PhaseKind::Wiggle { amp } => {
                    for f in start..=end {
                        let tau = (f - start) as f64 / n as f64;
                        out[f] = (pos, yaw + amp * (std::f64::consts::PI * tau).sin());
                    }
                    for slot in out.iter_mut().skip(end) {
                        *slot = (pos, yaw);
                    }
                }
            }
        }
        out
    }
}

/// Eased timing with a bounded peak rate (1.25x the mean), so scripted
/// motion never violates the per-frame speed cap.
fn motion_ramp(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    0.5 * t + 0.5 * (t * t * (3.0 - 2.0 * t))
}

/// Point at arc-length fraction `s` along `from -> legs[0] -> legs[1] -> ...`.
fn polyline_point(from: &Vector3<f64>, legs: &[Vector3<f64>], s: f64) -> Vector3<f64> {
    let mut pts = Vec::with_capacity(legs.len() + 1);
    pts.push(*from);
    pts.extend_from_slice(legs);
    let mut lens = Vec::with_capacity(pts.len() - 1);
    let mut total = 0.0;
    for w in pts.windows(2) {
        let l = (w[1] - w[0]).norm();
        lens.push(l);
        total += l;
    }
    if total <= 1e-12 {
        return *from;
    }
    let mut target = s.clamp(0.0, 1.0) * total;
    for (i, l) in lens.iter().enumerate() {
        if target <= *l || i == lens.len() - 1 {
            let t = if *l > 1e-12 { (target / l).min(1.0) } else { 1.0 };
            return pts[i] + (pts[i + 1] - pts[i]) * t;
        }
        target -= l;
    }
    *pts.last().unwrap()
}
