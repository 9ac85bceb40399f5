//! Analytic depth rendering along pixel rays.

use nalgebra::Vector3;

use super::{EpisodeRecord, Result, SceneError};

/// Entry/exit parameters of a ray against a yaw-rotated box, or `None` when
/// the ray misses. Parameters are in units of the ray direction (camera
/// depth when the direction has unit camera-frame depth).
pub fn ray_box_intersect(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    pose: &super::Pose,
    half: &Vector3<f64>,
) -> Option<(f64, f64)> {
    // Transform the ray into the box frame (yaw about z at the center).
    let o = pose.inverse_transform(origin);
    let (s, c) = pose.yaw.sin_cos();
    let d = Vector3::new(c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z);
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for axis in 0..3 {
        let (o_a, d_a, h_a) = (o[axis], d[axis], half[axis]);
        if d_a.abs() < 1e-15 {
            if o_a.abs() > h_a {
                return None;
            }
            continue;
        }
        let mut t1 = (-h_a - o_a) / d_a;
        let mut t2 = (h_a - o_a) / d_a;
        if t1 > t2 {
            std::mem::swap(&mut t1, &mut t2);
        }
        t_near = t_near.max(t1);
        t_far = t_far.min(t2);
        if t_near > t_far {
            return None;
        }
    }
    if t_far < 0.0 {
        None
    } else {
        Some((t_near.max(0.0), t_far))
    }
}

/// Camera-frame depth of the nearest surface (objects or the table plane
/// z=0) along the ray through pixel `(u, v)` at `frame`. Rays that miss all
/// objects return the table-plane depth (the background sentinel).
pub fn render_depth(ep: &EpisodeRecord, frame: usize, pixel: (f64, f64)) -> Result<f64> {
    let (u, v) = pixel;
    if !ep.camera.contains_pixel(u, v) {
        return Err(SceneError::PixelOutsideImage(u, v));
    }
    let (origin, dir) = ep.camera.pixel_ray(u, v);
    let mut best = f64::INFINITY;
    for (i, obj) in ep.objects.iter().enumerate() {
        let pose = ep.pose(frame, i);
        if let Some((t_near, _)) = ray_box_intersect(&origin, &dir, pose, &obj.half()) {
            if t_near < best {
                best = t_near;
            }
        }
    }
    // Table plane z = 0.
    if dir.z.abs() > 1e-15 {
        let t_plane = -origin.z / dir.z;
        if t_plane > 0.0 && t_plane < best {
            best = t_plane;
        }
    }
    if best.is_finite() {
        Ok(best)
    } else {
        Err(SceneError::BadCamera(format!("ray through ({u}, {v}) escapes the scene")))
    }
}
