//! Synthetic tabletop worlds: scripted bimanual demonstrations, analytic
//! grounding, ground-truth flow extraction, and depth rendering.
//!
//! Everything here is a pure function of `(template, seed)`; episodes
//! serialize to JSON-lines and flows to the binary "SFDF" container.

mod depth;
mod flow;
mod generate;
mod ground;

pub use depth::{ray_box_intersect, render_depth};
pub use flow::{flow_world_points, read_flow_file, track_flows, write_flow_file, FlowTensor};
pub use generate::{
    default_camera, generate_episode, generate_episode_with, task_layout, GenConfig, TaskLayout,
    FRAME_DT, IMAGE_H, IMAGE_W, LIFT_Z, NUM_FRAMES,
};
pub use ground::{ground_instruction, ground_targets, Grounding};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("placement failed after {0} rejection samples (workspace too crowded)")]
    PlacementFailed(usize),
    #[error("unknown noun: no object in the scene matches \"{0}\"")]
    UnknownNoun(String),
    #[error("ambiguous grounding: \"{0}\" matches more than one object")]
    AmbiguousGrounding(String),
    #[error("instruction does not name two graspable targets")]
    InsufficientTargets,
    #[error("degenerate bounding box (zero area)")]
    DegenerateBbox,
    #[error("pixel ({0}, {1}) outside the image")]
    PixelOutsideImage(f64, f64),
    #[error("flow grid size must be at least 2, got {0}")]
    GridTooSmall(usize),
    #[error("bad flow file: {0}")]
    BadFlowFile(String),
    #[error("bad camera: {0}")]
    BadCamera(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SceneError>;

/// Rigid pose on the table: world position of the object center plus yaw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub pos: [f64; 3],
    pub yaw: f64,
}

impl Pose {
    pub fn new(pos: Vector3<f64>, yaw: f64) -> Self {
        Pose { pos: [pos.x, pos.y, pos.z], yaw }
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.pos[0], self.pos[1], self.pos[2])
    }

    /// Map a point from object-local coordinates to the world.
    pub fn transform(&self, local: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        Vector3::new(
            c * local.x - s * local.y + self.pos[0],
            s * local.x + c * local.y + self.pos[1],
            local.z + self.pos[2],
        )
    }

    /// Inverse of [`Pose::transform`].
    pub fn inverse_transform(&self, world: &Vector3<f64>) -> Vector3<f64> {
        let d = world - self.position();
        let (s, c) = self.yaw.sin_cos();
        Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneObject {
    pub label: String,
    pub color: String,
    pub pose: Pose,
    pub half_extents: [f64; 3],
    pub graspable: bool,
    /// Receptacles (pot, box, drawer) -- excluded from object-object
    /// collision checks, since placing into them is the point.
    pub container: bool,
}

impl SceneObject {
    pub fn half(&self) -> Vector3<f64> {
        Vector3::new(self.half_extents[0], self.half_extents[1], self.half_extents[2])
    }

    /// Axis-aligned bounds at a given pose (yaw-expanded, conservative).
    pub fn aabb_at(&self, pose: &Pose) -> (Vector3<f64>, Vector3<f64>) {
        let h = self.half();
        let (s, c) = (pose.yaw.sin().abs(), pose.yaw.cos().abs());
        let ex = c * h.x + s * h.y;
        let ey = s * h.x + c * h.y;
        let half = Vector3::new(ex, ey, h.z);
        let p = pose.position();
        (p - half, p + half)
    }

    pub fn top_z(&self) -> f64 {
        self.pose.pos[2] + self.half_extents[2]
    }
}

/// Pinhole camera: intrinsics plus camera-from-world extrinsics
/// (`x_cam = R x_world + t`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Camera {
    #[serde(rename = "K")]
    pub k: [f64; 4], // fx, fy, cx, cy
    #[serde(rename = "R")]
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
    pub w: u32,
    pub h: u32,
}

impl Camera {
    pub fn new(k: [f64; 4], r: Matrix3<f64>, t: Vector3<f64>, w: u32, h: u32) -> Result<Self> {
        let cam = Camera {
            k,
            r: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            t: [t.x, t.y, t.z],
            w,
            h,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k[0] <= 0.0 || self.k[1] <= 0.0 {
            return Err(SceneError::BadCamera("focal lengths must be positive".into()));
        }
        let r = self.rotation();
        let gram = r.transpose() * r;
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > 1e-9 {
            return Err(SceneError::BadCamera(format!("R not orthonormal (dev {dev:.2e})")));
        }
        if (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(SceneError::BadCamera("det(R) != 1".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        Matrix3::from_rows(&[self.r[0].into(), self.r[1].into(), self.r[2].into()])
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.t[0], self.t[1], self.t[2])
    }

    pub fn world_to_cam(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Camera center in world coordinates.
    pub fn center_world(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    /// Project a world point; returns (u, v) and camera-frame depth.
    /// `None` when the point is behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.world_to_cam(p);
        if c.z <= 1e-12 {
            return None;
        }
        let u = self.k[0] * c.x / c.z + self.k[2];
        let v = self.k[1] * c.y / c.z + self.k[3];
        Some((u, v, c.z))
    }

    /// World-frame ray through a pixel: (origin, direction with unit
    /// camera-frame depth). A point at camera depth `d` is
    /// `origin + d * dir`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>) {
        let dir_cam =
            Vector3::new((u - self.k[2]) / self.k[0], (v - self.k[3]) / self.k[1], 1.0);
        let rt = self.rotation().transpose();
        (self.center_world(), rt * dir_cam)
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.w as f64 && v < self.h as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTemplate {
    PutIntoPot,
    Packing,
    Pouring,
    DrawerPlace,
}

impl TaskTemplate {
    pub const ALL: [TaskTemplate; 4] = [
        TaskTemplate::PutIntoPot,
        TaskTemplate::Packing,
        TaskTemplate::Pouring,
        TaskTemplate::DrawerPlace,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TaskTemplate::PutIntoPot => "put_into_pot",
            TaskTemplate::Packing => "packing",
            TaskTemplate::Pouring => "pouring",
            TaskTemplate::DrawerPlace => "drawer_place",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperAction {
    Close,
    Open,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GripperEvent {
    /// Demonstrator hand = stream index (0 or 1).
    pub arm: u8,
    pub action: GripperAction,
    pub frame: usize,
}

/// Cross-stream ordering constraint, expressed in arc-length fractions of
/// each stream's trajectory: everything up to `before` must complete before
/// the part of the other stream starting at `after` may run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecedenceSpec {
    pub role: String,
    /// (stream index, arc fraction in [0,1])
    pub before: (u8, f64),
    pub after: (u8, f64),
}

/// Scripted occlusion window: the object's tracked points read as invisible
/// for frames in `[start, end]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OcclusionWindow {
    pub object: usize,
    pub start: usize,
    pub end: usize,
}

pub const EPISODE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub version: u32,
    pub task: TaskTemplate,
    pub instruction: String,
    pub camera: Camera,
    pub objects: Vec<SceneObject>,
    /// `frames[t][i]` = pose of object `i` at frame `t`.
    pub frames: Vec<Vec<Pose>>,
    pub gripper_events: Vec<GripperEvent>,
    pub precedence: Vec<PrecedenceSpec>,
    #[serde(default)]
    pub occlusions: Vec<OcclusionWindow>,
}

impl EpisodeRecord {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn pose(&self, frame: usize, object: usize) -> &Pose {
        &self.frames[frame][object]
    }

    /// Projected pixel AABB of an object at a frame.
    pub fn projected_bbox(&self, frame: usize, object: usize) -> Option<Bbox> {
        let obj = &self.objects[object];
        let pose = self.pose(frame, object);
        let h = obj.half();
        let mut bb = Bbox::empty();
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    let local = Vector3::new(sx * h.x, sy * h.y, sz * h.z);
                    let world = pose.transform(&local);
                    let (u, v, _) = self.camera.project(&world)?;
                    bb.expand(u, v);
                }
            }
        }
        Some(bb)
    }

    pub fn is_occluded_by_script(&self, object: usize, frame: usize) -> bool {
        self.occlusions.iter().any(|w| w.object == object && frame >= w.start && frame <= w.end)
    }

    pub fn save_jsonl(episodes: &[EpisodeRecord], path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for ep in episodes {
            serde_json::to_writer(&mut w, ep)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &std::path::Path) -> Result<Vec<EpisodeRecord>> {
        use std::io::BufRead;
        let r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut out = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line)?);
        }
        Ok(out)
    }
}

/// Pixel-space axis-aligned box `(u_min, v_min, u_max, v_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl Bbox {
    pub fn empty() -> Self {
        Bbox {
            u_min: f64::INFINITY,
            v_min: f64::INFINITY,
            u_max: f64::NEG_INFINITY,
            v_max: f64::NEG_INFINITY,
        }
    }

    pub fn expand(&mut self, u: f64, v: f64) {
        self.u_min = self.u_min.min(u);
        self.v_min = self.v_min.min(v);
        self.u_max = self.u_max.max(u);
        self.v_max = self.v_max.max(v);
    }

    pub fn area(&self) -> f64 {
        (self.u_max - self.u_min).max(0.0) * (self.v_max - self.v_min).max(0.0)
    }

    pub fn iou(&self, other: &Bbox) -> f64 {
        let iw = (self.u_max.min(other.u_max) - self.u_min.max(other.u_min)).max(0.0);
        let ih = (self.v_max.min(other.v_max) - self.v_min.max(other.v_min)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[cfg(test)]
mod tests;
