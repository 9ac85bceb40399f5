//! 2D flow -> 3D world-frame trajectories: unprojection through the camera,
//! per-point temporal smoothing, rigid merging into 6-DOF poses, and
//! arc-length waypoint resampling.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{Camera, EpisodeRecord, FlowTensor};

#[derive(Debug, Error)]
pub enum LiftError {
    #[error("depth must be positive, got {0}")]
    BadDepth(f64),
    #[error("smoothing window must be odd, >= 1 and <= series length")]
    BadWindow,
    #[error("empty series")]
    EmptySeries,
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("depth lookup failed at frame {frame} pixel ({u:.2}, {v:.2})")]
    DepthLookup { frame: usize, u: f64, v: f64 },
    #[error("flow too short: need at least 2 frames")]
    TooFewFrames,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LiftError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub pos: Vector3<f64>,
    /// Intrinsic roll-pitch-yaw (R = Rz(yaw) Ry(pitch) Rx(roll)), wrapped
    /// to (-pi, pi].
    pub rpy: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory3D {
    pub stream: u8,
    pub waypoints: Vec<Waypoint>,
    /// Seconds, strictly increasing.
    pub timestamps: Vec<f64>,
}

impl Trajectory3D {
    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn duration(&self) -> f64 {
        if self.timestamps.len() < 2 {
            0.0
        } else {
            self.timestamps[self.timestamps.len() - 1] - self.timestamps[0]
        }
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let file = TrajectoryFile::from(self);
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut w, &file)?;
        use std::io::Write;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Trajectory3D> {
        let f: TrajectoryFile = serde_json::from_reader(std::fs::File::open(path)?)?;
        Ok(f.into())
    }
}

#[derive(Serialize, Deserialize)]
struct TrajectoryFile {
    version: u32,
    stream: u8,
    #[serde(rename = "P")]
    p: usize,
    waypoints: Vec<[f64; 6]>,
    timestamps: Vec<f64>,
}

impl From<&Trajectory3D> for TrajectoryFile {
    fn from(t: &Trajectory3D) -> Self {
        TrajectoryFile {
            version: 1,
            stream: t.stream,
            p: t.waypoints.len(),
            waypoints: t
                .waypoints
                .iter()
                .map(|w| [w.pos.x, w.pos.y, w.pos.z, w.rpy.x, w.rpy.y, w.rpy.z])
                .collect(),
            timestamps: t.timestamps.clone(),
        }
    }
}

impl From<TrajectoryFile> for Trajectory3D {
    fn from(f: TrajectoryFile) -> Self {
        Trajectory3D {
            stream: f.stream,
            waypoints: f
                .waypoints
                .iter()
                .map(|a| Waypoint {
                    pos: Vector3::new(a[0], a[1], a[2]),
                    rpy: Vector3::new(a[3], a[4], a[5]),
                })
                .collect(),
            timestamps: f.timestamps,
        }
    }
}

/// x_cam = depth * K^-1 (u, v, 1)^T ; world = R^T (x_cam - t).
pub fn unproject(camera: &Camera, pixel: (f64, f64), depth: f64) -> Result<Vector3<f64>> {
    if depth <= 0.0 {
        return Err(LiftError::BadDepth(depth));
    }
    if !(pixel.0.is_finite() && pixel.1.is_finite()) {
        return Err(LiftError::DegenerateGeometry("non-finite pixel"));
    }
    let x_cam = Vector3::new(
        depth * (pixel.0 - camera.k[2]) / camera.k[0],
        depth * (pixel.1 - camera.k[3]) / camera.k[1],
        depth,
    );
    Ok(camera.rotation().transpose() * (x_cam - camera.translation()))
}

/// Centered moving average with window shrinking at the edges; samples with
/// `visible == false` are excluded from every average. A sample whose whole
/// window is invisible keeps its original value.
pub fn smooth(series: &[Vector3<f64>], visible: &[bool], window: usize) -> Result<Vec<Vector3<f64>>> {
    if series.is_empty() {
        return Err(LiftError::EmptySeries);
    }
    if window % 2 == 0 || window < 1 || window > series.len() {
        return Err(LiftError::BadWindow);
    }
    debug_assert_eq!(series.len(), visible.len());
    let n = series.len();
    let half = window / 2;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let r = half.min(i).min(n - 1 - i);
        let mut acc = Vector3::zeros();
        let mut count = 0usize;
        for j in (i - r)..=(i + r) {
            if visible[j] {
                acc += series[j];
                count += 1;
            }
        }
        if count == 0 {
            out.push(series[i]);
        } else {
            out.push(acc / count as f64);
        }
    }
    Ok(out)
}

/// Least-squares rigid fit mapping `reference` onto `current`:
/// `current_i ~= R * reference_i + t`. Rotation via SVD of the
/// cross-covariance with determinant correction.
pub fn rigid_merge(
    current: &[Vector3<f64>],
    reference: &[Vector3<f64>],
) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    if current.len() != reference.len() || current.len() < 3 {
        return Err(LiftError::DegenerateGeometry("need >= 3 correspondences"));
    }
    let n = current.len() as f64;
    let c_cur: Vector3<f64> = current.iter().sum::<Vector3<f64>>() / n;
    let c_ref: Vector3<f64> = reference.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (q, p) in current.iter().zip(reference) {
        h += (p - c_ref) * (q - c_cur).transpose();
    }
    let svd = h.svd(true, true);
    let sv = svd.singular_values;
    if sv[1] <= 1e-12 * sv[0].max(1e-30) {
        return Err(LiftError::DegenerateGeometry("collinear point set"));
    }
    let u = svd.u.ok_or(LiftError::DegenerateGeometry("svd failed"))?;
    let v_t = svd.v_t.ok_or(LiftError::DegenerateGeometry("svd failed"))?;
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
    let r = v * correction * u.transpose();
    let t = c_cur - r * c_ref;
    Ok((r, t))
}

/// Intrinsic roll-pitch-yaw of a rotation matrix (R = Rz Ry Rx), each angle
/// wrapped to (-pi, pi].
pub fn rotation_to_rpy(r: &Matrix3<f64>) -> Vector3<f64> {
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    Vector3::new(wrap_angle(roll), wrap_angle(pitch), wrap_angle(yaw))
}

pub fn rpy_to_rotation(rpy: &Vector3<f64>) -> Matrix3<f64> {
    let (sr, cr) = rpy.x.sin_cos();
    let (sp, cp) = rpy.y.sin_cos();
    let (sy, cy) = rpy.z.sin_cos();
    let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
    rz * ry * rx
}

pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let x = a.rem_euclid(two_pi);
    if x > std::f64::consts::PI {
        x - two_pi
    } else {
        x
    }
}

/// Depth lookup used by [`lift_trajectory`].
pub trait DepthSource {
    fn depth_at(&self, frame: usize, u: f64, v: f64) -> Option<f64>;
}

/// Analytic scene depth, the synthetic stand-in for an RGB-D stream.
pub struct EpisodeDepth<'a> {
    pub episode: &'a EpisodeRecord,
}

impl DepthSource for EpisodeDepth<'_> {
    fn depth_at(&self, frame: usize, u: f64, v: f64) -> Option<f64> {
        crate::scene::render_depth(self.episode, frame, (u, v)).ok()
    }
}

#[derive(Debug, Clone)]
pub struct LiftConfig {
    pub window: usize,
    pub waypoints: usize,
    pub frame_dt: f64,
    pub v_max: f64,
    pub visibility_threshold: f32,
    pub stream: u8,
}

impl Default for LiftConfig {
    fn default() -> Self {
        LiftConfig {
            window: 5,
            waypoints: 32,
            frame_dt: crate::scene::FRAME_DT,
            v_max: 0.5,
            visibility_threshold: 0.5,
            stream: 0,
        }
    }
}

/// Full lifting chain: unproject every visible grid sample per frame (depth
/// held from the last visible frame for occluded samples), smooth per grid
/// point, rigid-merge each frame against frame 0, then arc-length-resample
/// to a fixed waypoint count with per-axis interpolated orientations.
pub fn lift_trajectory(
    flow: &FlowTensor,
    camera: &Camera,
    depth: &dyn DepthSource,
    cfg: &LiftConfig,
) -> Result<Trajectory3D> {
    let t_count = flow.frames();
    if t_count < 2 {
        return Err(LiftError::TooFewFrames);
    }
    let g = flow.grid();
    let n_pts = g * g;
    let (w_img, h_img) = (camera.w as f64, camera.h as f64);

    // World-point series per grid point, with holding for invisible samples.
    let mut points = vec![vec![Vector3::zeros(); t_count]; n_pts];
    let mut vis = vec![vec![false; t_count]; n_pts];
    let mut last_world: Vec<Option<Vector3<f64>>> = vec![None; n_pts];
    for t in 0..t_count {
        for k in 0..n_pts {
            let (gy, gx) = (k / g, k % g);
            let visible = flow.get(2, t, gy, gx) >= cfg.visibility_threshold;
            let u = flow.get(0, t, gy, gx) as f64 * w_img;
            let v = flow.get(1, t, gy, gx) as f64 * h_img;
            if visible {
                let d = depth
                    .depth_at(t, u, v)
                    .ok_or(LiftError::DepthLookup { frame: t, u, v })?;
                let world = unproject(camera, (u, v), d)?;
                points[k][t] = world;
                vis[k][t] = true;
                last_world[k] = Some(world);
            } else {
                // Hold the last visible world point (position and depth).
                match last_world[k] {
                    Some(w) => points[k][t] = w,
                    None => points[k][t] = Vector3::zeros(),
                }
            }
        }
    }

    // Temporal smoothing per grid point.
    let mut smoothed = Vec::with_capacity(n_pts);
    for k in 0..n_pts {
        smoothed.push(smooth(&points[k], &vis[k], cfg.window.min(t_count | 1))?);
    }

    // Rigid merge per frame against the frame-0 reference.
    let reference: Vec<Vector3<f64>> = (0..n_pts).map(|k| smoothed[k][0]).collect();
    let ref_ok: Vec<bool> = (0..n_pts).map(|k| vis[k][0] || last_world[k].is_some()).collect();
    let centroid0: Vector3<f64> = reference.iter().sum::<Vector3<f64>>() / n_pts as f64;
    let mut poses: Vec<(Vector3<f64>, Vector3<f64>)> = Vec::with_capacity(t_count);
    let mut prev: Option<(Vector3<f64>, Vector3<f64>)> = None;
    for t in 0..t_count {
        let mut cur = Vec::new();
        let mut refp = Vec::new();
        for k in 0..n_pts {
            if vis[k][t] && ref_ok[k] {
                cur.push(smoothed[k][t]);
                refp.push(reference[k]);
            }
        }
        let fit = if cur.len() >= 3 { rigid_merge(&cur, &refp).ok() } else { None };
        let pose = match (fit, prev) {
            (Some((r, tr)), _) => {
                let pos = r * centroid0 + tr;
                (pos, rotation_to_rpy(&r))
            }
            // Too few visible correspondences (full occlusion): hold pose.
            (None, Some(p)) => p,
            (None, None) => return Err(LiftError::DegenerateGeometry("first frame occluded")),
        };
        poses.push(pose);
        prev = Some(pose);
    }

    resample(&poses, cfg)
}

fn resample(poses: &[(Vector3<f64>, Vector3<f64>)], cfg: &LiftConfig) -> Result<Trajectory3D> {
    let t_count = poses.len();
    let p_out = cfg.waypoints.max(2);
    let times: Vec<f64> = (0..t_count).map(|t| t as f64 * cfg.frame_dt).collect();

    // Unwrap angles per axis so interpolation never crosses a 2*pi seam.
    let mut angles: Vec<Vector3<f64>> = Vec::with_capacity(t_count);
    let mut prev = poses[0].1;
    angles.push(prev);
    for pose in poses.iter().skip(1) {
        let mut a = pose.1;
        for ax in 0..3 {
            let d = wrap_angle(a[ax] - prev[ax]);
            a[ax] = prev[ax] + d;
        }
        angles.push(a);
        prev = a;
    }

    let mut cum = vec![0.0f64; t_count];
    for t in 1..t_count {
        cum[t] = cum[t - 1] + (poses[t].0 - poses[t - 1].0).norm();
    }
    let total = cum[t_count - 1];

    let mut waypoints = Vec::with_capacity(p_out);
    let mut timestamps = Vec::with_capacity(p_out);
    for i in 0..p_out {
        let frac = i as f64 / (p_out - 1) as f64;
        let (pos, rpy, time) = if total <= 1e-12 {
            // Static trajectory: replicate the pose, spread timestamps.
            let time = times[0] + frac * (times[t_count - 1] - times[0]);
            (poses[0].0, angles[0], time)
        } else if i == 0 {
            (poses[0].0, angles[0], times[0])
        } else if i == p_out - 1 {
            (poses[t_count - 1].0, angles[t_count - 1], times[t_count - 1])
        } else {
            let target = frac * total;
            let j = match cum.iter().position(|&c| c >= target) {
                Some(0) => 1,
                Some(j) => j,
                None => t_count - 1,
            };
            let seg = cum[j] - cum[j - 1];
            let alpha = if seg > 1e-12 { (target - cum[j - 1]) / seg } else { 0.0 };
            let pos = poses[j - 1].0 + (poses[j].0 - poses[j - 1].0) * alpha;
            let rpy = angles[j - 1] + (angles[j] - angles[j - 1]) * alpha;
            let time = times[j - 1] + (times[j] - times[j - 1]) * alpha;
            (pos, rpy, time)
        };
        waypoints.push(Waypoint {
            pos,
            rpy: Vector3::new(wrap_angle(rpy.x), wrap_angle(rpy.y), wrap_angle(rpy.z)),
        });
        timestamps.push(time);
    }

    // Strictly increasing timestamps that respect the speed cap.
    for i in 1..p_out {
        let ds = (waypoints[i].pos - waypoints[i - 1].pos).norm();
        let min_dt = (ds / cfg.v_max).max(1e-9);
        if timestamps[i] < timestamps[i - 1] + min_dt {
            timestamps[i] = timestamps[i - 1] + min_dt;
        }
    }

    Ok(Trajectory3D { stream: cfg.stream, waypoints, timestamps })
}
