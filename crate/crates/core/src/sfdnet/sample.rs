//! Two-stream ancestral sampling: per-stream context from the initial-frame
//! query grid of each grounded box, DDPM reverse diffusion from pure noise,
//! then frame-wise decoding. Streams are processed fully independently with
//! their own noise streams, which makes stream swapping an exact symmetry.

use crate::rng::Rng;
use crate::scene::{Bbox, FlowTensor};
use crate::tensor::Tensor;

use super::text::tokenize;
use super::{reverse_step_clamped, Result, SfdBundle};

/// Denoised-latent clamp (standardized latents sit within a few sigma).
const X0_CLAMP: f32 = 5.0;

/// Synthetic initial flow frame for a box: the G x G query grid (cell
/// centers, normalized coordinates) with visibility 1 -- the observation
/// "inflation" stand-in.
pub fn initial_grid_frame(bbox: &Bbox, grid: usize, img_w: u32, img_h: u32) -> Vec<f32> {
    let mut slab = vec![0.0f32; 3 * grid * grid];
    let (w, h) = (img_w as f64, img_h as f64);
    for gy in 0..grid {
        for gx in 0..grid {
            let u = bbox.u_min + (gx as f64 + 0.5) / grid as f64 * (bbox.u_max - bbox.u_min);
            let v = bbox.v_min + (gy as f64 + 0.5) / grid as f64 * (bbox.v_max - bbox.v_min);
            slab[gy * grid + gx] = (u / w) as f32;
            slab[(grid * grid) + gy * grid + gx] = (v / h) as f32;
            slab[2 * (grid * grid) + gy * grid + gx] = 1.0;
        }
    }
    slab
}

/// Sample both streams from one seed (split into per-stream noise streams).
pub fn sample_flows(
    bundle: &SfdBundle,
    boxes: (&Bbox, &Bbox),
    instruction: &str,
    image: (u32, u32),
    rng: &mut Rng,
) -> Result<(FlowTensor, FlowTensor)> {
    let mut r1 = rng.split();
    let mut r2 = rng.split();
    sample_flows_with_rngs(bundle, boxes, instruction, image, (&mut r1, &mut r2))
}

/// Explicit per-stream noise streams. Swapping `(boxes, rngs)` jointly swaps
/// the two outputs exactly.
pub fn sample_flows_with_rngs(
    bundle: &SfdBundle,
    boxes: (&Bbox, &Bbox),
    instruction: &str,
    image: (u32, u32),
    rngs: (&mut Rng, &mut Rng),
) -> Result<(FlowTensor, FlowTensor)> {
    let f1 = sample_stream(bundle, 0, boxes.0, instruction, image, rngs.0)?;
    let f2 = sample_stream(bundle, 1, boxes.1, instruction, image, rngs.1)?;
    Ok((f1, f2))
}

fn sample_stream(
    bundle: &SfdBundle,
    stream: usize,
    bbox: &Bbox,
    instruction: &str,
    image: (u32, u32),
    rng: &mut Rng,
) -> Result<FlowTensor> {
    let net = bundle.net(stream);
    let cfg = &net.cfg;
    let tokens = tokenize(instruction);
    let slab = initial_grid_frame(bbox, cfg.grid, image.0, image.1);
    let ctx = net.context_latent(&slab);
    let mut z = Tensor::new(
        vec![cfg.frames, cfg.latent_dim],
        rng.normal_vec_f32(cfg.frames * cfg.latent_dim),
    );
    for t in (1..=cfg.t_diff).rev() {
        let eps_hat = net.predict_eval(&z, t, &tokens, &ctx);
        z = reverse_step_clamped(&z, &eps_hat, t, &net.schedule, X0_CLAMP, Some(rng))?;
    }
    net.decode_flow(&z)
}
