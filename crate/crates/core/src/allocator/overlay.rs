//! Deterministic SVG overlay: segmented sub-trajectories projected onto the
//! initial frame with distinct colors and numeric labels.

use std::fmt::Write;

use crate::lift3d::Trajectory3D;
use crate::scene::EpisodeRecord;

use super::{ArmAssignment, Segment};

const PALETTE: [&str; 12] = [
    "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#46f0f0", "#f032e6", "#bcf60c",
    "#fabebe", "#008080", "#e6beff", "#9a6324",
];

/// Render segments over the initial frame. Output is byte-identical for
/// identical input: fixed palette, fixed float formatting, no timestamps.
pub fn render_overlay(
    episode: &EpisodeRecord,
    trajs: (&Trajectory3D, &Trajectory3D),
    segments: &[Segment],
    assignment: &ArmAssignment,
) -> String {
    let cam = &episode.camera;
    let (w, h) = (cam.w, cam.h);
    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" width=\"{}\" height=\"{}\">",
        w * 8,
        h * 8
    );
    let _ = write!(svg, "<rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"#202020\"/>");

    // Initial-frame context: projected object boxes.
    for i in 0..episode.objects.len() {
        if let Some(bb) = episode.projected_bbox(0, i) {
            let _ = write!(
                svg,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"#777777\" stroke-width=\"0.3\"/>",
                bb.u_min,
                bb.v_min,
                bb.u_max - bb.u_min,
                bb.v_max - bb.v_min
            );
        }
    }

    for seg in segments {
        let color = PALETTE[seg.id % PALETTE.len()];
        let traj = if seg.stream == 0 { trajs.0 } else { trajs.1 };
        let mut points = String::new();
        let mut mid = None;
        let wps = seg.waypoints(traj);
        for (k, wp) in wps.iter().enumerate() {
            if let Some((u, v, _)) = cam.project(&wp.pos) {
                let _ = write!(points, "{u:.2},{v:.2} ");
                if k == wps.len() / 2 {
                    mid = Some((u, v));
                }
            }
        }
        let _ = write!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"0.6\"/>",
            points.trim_end()
        );
        if let Some((u, v)) = mid {
            let _ = write!(
                svg,
                "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"3\" fill=\"{color}\">{}</text>",
                u + 0.8,
                v - 0.8,
                seg.id
            );
        }
    }

    // Legend: one line per segment with stream and arm.
    for (row, seg) in segments.iter().enumerate() {
        let color = PALETTE[seg.id % PALETTE.len()];
        let _ = write!(
            svg,
            "<text x=\"1\" y=\"{:.2}\" font-size=\"2.2\" fill=\"{color}\">seg {}: stream {} arm {}</text>",
            3.0 + 2.5 * row as f64,
            seg.id,
            seg.stream + 1,
            assignment.stream_to_arm[seg.stream as usize]
        );
    }
    svg.push_str("</svg>");
    svg
}
