//! Shared-weight variational autoencoder over single flow frames.
//!
//! One parameter set serves both streams; the encoder maps a `3 x G x G`
//! frame (flattened) to a diagonal Gaussian over the latent space, the
//! decoder maps latents back with sigmoid-squashed channels.

use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, ParamId, ParamSet, RegisteredParams, Tensor};

use super::{ModelConfig, Result, SfdError};

pub const LOGVAR_CLAMP: f32 = 20.0;

fn lin(params: &mut ParamSet, name: &str, rows: usize, cols: usize, rng: &mut Rng) -> ParamId {
    params.add(name, Tensor::randn(vec![rows, cols], 1.0 / (rows as f32).sqrt(), rng), true)
}

#[derive(Debug, Clone, Copy)]
pub struct VaeIds {
    pub e1_w: ParamId,
    pub e1_b: ParamId,
    pub mu_w: ParamId,
    pub mu_b: ParamId,
    pub lv_w: ParamId,
    pub lv_b: ParamId,
    pub d1_w: ParamId,
    pub d1_b: ParamId,
    pub d2_w: ParamId,
    pub d2_b: ParamId,
}

impl VaeIds {
    pub fn init(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut Rng) -> VaeIds {
        let frame = 3 * cfg.grid * cfg.grid;
        let (h, d) = (cfg.hidden, cfg.latent_dim);
        let e1_w = lin(params, "vae.e1.w", frame, h, rng);
        let e1_b = params.add("vae.e1.b", Tensor::zeros(vec![h]), true);
        let mu_w = lin(params, "vae.mu.w", h, d, rng);
        let mu_b = params.add("vae.mu.b", Tensor::zeros(vec![d]), true);
        let lv_w = lin(params, "vae.lv.w", h, d, rng);
        let lv_b = params.add("vae.lv.b", Tensor::zeros(vec![d]), true);
        let d1_w = lin(params, "vae.d1.w", d, h, rng);
        let d1_b = params.add("vae.d1.b", Tensor::zeros(vec![h]), true);
        let d2_w = lin(params, "vae.d2.w", h, frame, rng);
        let d2_b = params.add("vae.d2.b", Tensor::zeros(vec![frame]), true);
        VaeIds { e1_w, e1_b, mu_w, mu_b, lv_w, lv_b, d1_w, d1_b, d2_w, d2_b }
    }

    pub fn all(&self) -> [ParamId; 10] {
        [
            self.e1_w, self.e1_b, self.mu_w, self.mu_b, self.lv_w, self.lv_b, self.d1_w,
            self.d1_b, self.d2_w, self.d2_b,
        ]
    }

    /// Encoder head: frames (n x 3G^2) -> (mu, logvar), logvar clamped.
    pub fn encode(
        &self,
        g: &mut Graph,
        reg: &RegisteredParams,
        frames: NodeId,
    ) -> (NodeId, NodeId) {
        let h = g.matmul(frames, reg.node(self.e1_w));
        let h = g.add_row(h, reg.node(self.e1_b));
        let h = g.gelu(h);
        let mu = g.matmul(h, reg.node(self.mu_w));
        let mu = g.add_row(mu, reg.node(self.mu_b));
        let lv = g.matmul(h, reg.node(self.lv_w));
        let lv = g.add_row(lv, reg.node(self.lv_b));
        let lv = g.clamp(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP);
        (mu, lv)
    }

    /// Decoder: latents (n x d) -> frames (n x 3G^2), sigmoid-squashed.
    pub fn decode(&self, g: &mut Graph, reg: &RegisteredParams, z: NodeId) -> NodeId {
        let h = g.matmul(z, reg.node(self.d1_w));
        let h = g.add_row(h, reg.node(self.d1_b));
        let h = g.gelu(h);
        let out = g.matmul(h, reg.node(self.d2_w));
        let out = g.add_row(out, reg.node(self.d2_b));
        g.sigmoid(out)
    }
}

/// Reparameterized encode of a single frame: `z = mu + exp(logvar/2) * xi`.
/// Returns (mu, logvar, z).
pub fn vae_encode(
    params: &ParamSet,
    ids: &VaeIds,
    frame: &Tensor,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor, Tensor)> {
    frame.ensure_finite("vae_encode input").map_err(SfdError::Tensor)?;
    let mut g = Graph::new();
    let reg = params.register(&mut g);
    let x = g.constant(Tensor::new(vec![1, frame.numel()], frame.data().to_vec()));
    let (mu_n, lv_n) = ids.encode(&mut g, &reg, x);
    let mu = g.value(mu_n).clone();
    let lv = g.value(lv_n).clone();
    let z_data: Vec<f32> = mu
        .data()
        .iter()
        .zip(lv.data())
        .map(|(m, l)| m + (0.5 * l).exp() * rng.normal_f32())
        .collect();
    let z = Tensor::new(mu.shape().to_vec(), z_data);
    Ok((mu, lv, z))
}

/// Deterministic decode of a single latent back to a `3 x G x G` frame slab.
pub fn vae_decode(params: &ParamSet, ids: &VaeIds, z: &Tensor) -> Result<Tensor> {
    z.ensure_finite("vae_decode input").map_err(SfdError::Tensor)?;
    let mut g = Graph::new();
    let reg = params.register(&mut g);
    let zn = g.constant(Tensor::new(vec![1, z.numel()], z.data().to_vec()));
    let out = ids.decode(&mut g, &reg, zn);
    Ok(g.value(out).clone())
}

/// Deterministic batch encode (means only): frames (n x 3G^2) -> mu (n x d).
pub fn encode_mu_batch(params: &ParamSet, ids: &VaeIds, frames: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let reg = params.register(&mut g);
    let x = g.constant(frames.clone());
    let (mu, _) = ids.encode(&mut g, &reg, x);
    g.value(mu).clone()
}
