//! Ground-truth object-centric motion flows and the binary "SFDF" container.
//!
//! A flow is a `3 x T x G x G` tensor per stream: channels 0-1 hold
//! normalized image coordinates (u/W, v/H) of a G x G query grid attached
//! rigidly to the object at frame 0, channel 2 holds visibility in {0, 1}.
//! Invisible samples carry the last visible position so tensors stay dense.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::depth::render_depth;
use super::{Bbox, EpisodeRecord, Result, SceneError};

pub const FLOW_MAGIC: &[u8; 4] = b"SFDF";
pub const FLOW_VERSION: u32 = 1;

/// Dense per-stream flow, row-major `[channel][frame][gy][gx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTensor {
    frames: usize,
    grid: usize,
    data: Vec<f32>,
}

impl FlowTensor {
    pub fn zeros(frames: usize, grid: usize) -> Self {
        FlowTensor { frames, grid, data: vec![0.0; 3 * frames * grid * grid] }
    }

    pub fn from_raw(frames: usize, grid: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * frames * grid * grid {
            return Err(SceneError::BadFlowFile(format!(
                "data length {} != 3*{frames}*{grid}^2",
                data.len()
            )));
        }
        Ok(FlowTensor { frames, grid, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    fn idx(&self, c: usize, t: usize, gy: usize, gx: usize) -> usize {
        ((c * self.frames + t) * self.grid + gy) * self.grid + gx
    }

    pub fn get(&self, c: usize, t: usize, gy: usize, gx: usize) -> f32 {
        self.data[self.idx(c, t, gy, gx)]
    }

    pub fn set(&mut self, c: usize, t: usize, gy: usize, gx: usize, v: f32) {
        let i = self.idx(c, t, gy, gx);
        self.data[i] = v;
    }

    /// One frame as a `3 x G x G` row-major slab (the VAE's input layout).
    pub fn frame_slab(&self, t: usize) -> Vec<f32> {
        let g = self.grid;
        let mut out = Vec::with_capacity(3 * g * g);
        for c in 0..3 {
            for gy in 0..g {
                for gx in 0..g {
                    out.push(self.get(c, t, gy, gx));
                }
            }
        }
        out
    }

    pub fn set_frame_slab(&mut self, t: usize, slab: &[f32]) {
        let g = self.grid;
        debug_assert_eq!(slab.len(), 3 * g * g);
        for c in 0..3 {
            for gy in 0..g {
                for gx in 0..g {
                    self.set(c, t, gy, gx, slab[(c * g + gy) * g + gx]);
                }
            }
        }
    }

    /// Mean (u, v) of the grid at a frame, in normalized units.
    pub fn grid_center(&self, t: usize) -> (f64, f64) {
        let g = self.grid;
        let mut su = 0.0f64;
        let mut sv = 0.0f64;
        for gy in 0..g {
            for gx in 0..g {
                su += self.get(0, t, gy, gx) as f64;
                sv += self.get(1, t, gy, gx) as f64;
            }
        }
        let n = (g * g) as f64;
        (su / n, sv / n)
    }
}

/// Extract ground-truth flows for the two grounded boxes.
///
/// The G x G query grid is placed uniformly (cell centers) inside each box
/// at frame 0, attached to the matching object's surface along the pixel
/// ray, then propagated rigidly with the object's pose. Visibility drops to
/// 0 when the projection leaves the image, another object occludes the
/// point, or a scripted occlusion window covers the frame.
pub fn track_flows(
    ep: &EpisodeRecord,
    o1: &Bbox,
    o2: &Bbox,
    grid: usize,
) -> Result<(FlowTensor, FlowTensor)> {
    if grid < 2 {
        return Err(SceneError::GridTooSmall(grid));
    }
    let f1 = track_one(ep, o1, grid)?;
    let f2 = track_one(ep, o2, grid)?;
    Ok((f1, f2))
}

/// Object-local attachment of a pixel ray: intersect the top-face plane at
/// frame 0 and clamp into the face rectangle.
pub(crate) fn attach_top_face(
    ep: &EpisodeRecord,
    object: usize,
    pixel: (f64, f64),
) -> Vector3<f64> {
    let pose0 = ep.pose(0, object);
    let h = ep.objects[object].half();
    let top_z = pose0.pos[2] + h.z;
    let (origin, dir) = ep.camera.pixel_ray(pixel.0, pixel.1);
    let t = (top_z - origin.z) / dir.z;
    let world = origin + dir * t;
    let mut local = pose0.inverse_transform(&world);
    local.x = local.x.clamp(-h.x + 1e-6, h.x - 1e-6);
    local.y = local.y.clamp(-h.y + 1e-6, h.y - 1e-6);
    local.z = h.z;
    local
}

fn track_one(ep: &EpisodeRecord, bbox: &Bbox, grid: usize) -> Result<FlowTensor> {
    if bbox.area() < 1.0 {
        return Err(SceneError::DegenerateBbox);
    }
    let object = match_object(ep, bbox)?;
    let t_count = ep.num_frames();
    let (w, h) = (ep.camera.w as f64, ep.camera.h as f64);

    // Attach grid points to the object's top face at frame 0. Box-margin
    // pixels (whose rays would graze a side face) are pulled onto the
    // nearest top-face point, the way a tracker locks onto the object edge.
    let mut locals = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            let u = bbox.u_min + (gx as f64 + 0.5) / grid as f64 * (bbox.u_max - bbox.u_min);
            let v = bbox.v_min + (gy as f64 + 0.5) / grid as f64 * (bbox.v_max - bbox.v_min);
            locals.push(attach_top_face(ep, object, (u, v)));
        }
    }

    let mut flow = FlowTensor::zeros(t_count, grid);
    let mut held: Vec<Option<(f32, f32)>> = vec![None; grid * grid];
    for t in 0..t_count {
        let pose_t = ep.pose(t, object);
        for (k, local) in locals.iter().enumerate() {
            let (gy, gx) = (k / grid, k % grid);
            let world = pose_t.transform(local);
            let proj = ep.camera.project(&world);
            let mut visible = false;
            let mut uv = None;
            if let Some((u, v, depth)) = proj {
                uv = Some((u, v));
                if ep.camera.contains_pixel(u, v) && !ep.is_occluded_by_script(object, t) {
                    let nearest = render_depth(ep, t, (u, v))?;
                    visible = nearest >= depth - 1e-6;
                }
            }
            let norm = uv.map(|(u, v)| ((u / w) as f32, (v / h) as f32));
            let (cu, cv) = if visible {
                let n = norm.unwrap();
                held[k] = Some(n);
                n
            } else {
                match held[k] {
                    Some(prev) => prev,
                    None => norm.unwrap_or((0.0, 0.0)),
                }
            };
            flow.set(0, t, gy, gx, cu);
            flow.set(1, t, gy, gx, cv);
            flow.set(2, t, gy, gx, if visible { 1.0 } else { 0.0 });
        }
    }
    Ok(flow)
}

/// Find the scene object whose frame-0 projection best matches a box.
fn match_object(ep: &EpisodeRecord, bbox: &Bbox) -> Result<usize> {
    let mut best = None;
    let mut best_iou = 0.0;
    for i in 0..ep.objects.len() {
        if let Some(pb) = ep.projected_bbox(0, i) {
            let iou = pb.iou(bbox);
            if iou > best_iou {
                best_iou = iou;
                best = Some(i);
            }
        }
    }
    match best {
        Some(i) if best_iou > 0.5 => Ok(i),
        _ => Err(SceneError::DegenerateBbox),
    }
}

/// Write the two-stream flow pair: magic `SFDF`, u32 version, u32
/// stream_count=2, u32 T, u32 G, then f32 LE data stream-major.
pub fn write_flow_file(path: &Path, f1: &FlowTensor, f2: &FlowTensor) -> Result<()> {
    if f1.frames != f2.frames || f1.grid != f2.grid {
        return Err(SceneError::BadFlowFile("stream shape mismatch".into()));
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(FLOW_MAGIC)?;
    w.write_all(&FLOW_VERSION.to_le_bytes())?;
    w.write_all(&2u32.to_le_bytes())?;
    w.write_all(&(f1.frames as u32).to_le_bytes())?;
    w.write_all(&(f1.grid as u32).to_le_bytes())?;
    for f in [f1, f2] {
        for v in &f.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_flow_file(path: &Path) -> Result<(FlowTensor, FlowTensor)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FLOW_MAGIC {
        return Err(SceneError::BadFlowFile("bad magic".into()));
    }
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    let version = u32::from_le_bytes(b);
    if version != FLOW_VERSION {
        return Err(SceneError::BadFlowFile(format!("unsupported version {version}")));
    }
    r.read_exact(&mut b)?;
    let streams = u32::from_le_bytes(b);
    if streams != 2 {
        return Err(SceneError::BadFlowFile(format!("expected 2 streams, got {streams}")));
    }
    r.read_exact(&mut b)?;
    let t = u32::from_le_bytes(b) as usize;
    r.read_exact(&mut b)?;
    let g = u32::from_le_bytes(b) as usize;
    let read_stream = |r: &mut dyn Read| -> Result<FlowTensor> {
        let n = 3 * t * g * g;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        FlowTensor::from_raw(t, g, data)
    };
    let f1 = read_stream(&mut r)?;
    let f2 = read_stream(&mut r)?;
    Ok((f1, f2))
}

/// Visibility-weighted world points of a flow grid at a frame, using a
/// depth lookup. Shared by trajectory lifting and tests.
pub fn flow_world_points(
    flow: &FlowTensor,
    camera: &super::Camera,
    t: usize,
    depth_at: &mut dyn FnMut(usize, f64, f64) -> Option<f64>,
) -> Vec<(Vector3<f64>, bool)> {
    let g = flow.grid();
    let (w, h) = (camera.w as f64, camera.h as f64);
    let mut out = Vec::with_capacity(g * g);
    for gy in 0..g {
        for gx in 0..g {
            let u = flow.get(0, t, gy, gx) as f64 * w;
            let v = flow.get(1, t, gy, gx) as f64 * h;
            let visible = flow.get(2, t, gy, gx) > 0.5;
            let p = depth_at(t, u, v).map(|d| {
                let (origin, dir) = camera.pixel_ray(u, v);
                origin + dir * d
            });
            match p {
                Some(world) => out.push((world, visible)),
                None => out.push((Vector3::zeros(), false)),
            }
        }
    }
    out
}
