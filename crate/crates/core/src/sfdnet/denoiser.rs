//! Shared-weight temporal denoiser: per-frame latents run through
//! self-attention and multi-head cross-attention blocks conditioned on the
//! instruction tokens plus a per-stream initial-frame token. Both streams
//! use one parameter set; each stream is processed independently, so
//! swapping stream inputs swaps outputs bit-for-bit.

use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, ParamId, ParamSet, RegisteredParams, Tensor};

use super::{ModelConfig, Result, SfdError};

fn lin(params: &mut ParamSet, name: &str, rows: usize, cols: usize, rng: &mut Rng) -> ParamId {
    params.add(name, Tensor::randn(vec![rows, cols], 1.0 / (rows as f32).sqrt(), rng), true)
}

#[derive(Debug, Clone, Copy)]
pub struct LoraLinearIds {
    pub base: ParamId,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f32,
}

impl LoraLinearIds {
    /// Base weight is frozen; the low-rank factors train. `b` starts at
    /// zero so the initial map equals the base.
    fn init(
        params: &mut ParamSet,
        name: &str,
        rows: usize,
        cols: usize,
        rank: usize,
        rng: &mut Rng,
    ) -> Self {
        let base = params.add(
            &format!("{name}.base"),
            Tensor::randn(vec![rows, cols], 1.0 / (rows as f32).sqrt(), rng),
            false,
        );
        let a = params.add(
            &format!("{name}.lora_a"),
            Tensor::randn(vec![rows, rank], 1.0 / (rows as f32).sqrt(), rng),
            true,
        );
        let b = params.add(&format!("{name}.lora_b"), Tensor::zeros(vec![rank, cols]), true);
        LoraLinearIds { base, a, b, rank, alpha: rank as f32 }
    }

    /// `x @ (base + (alpha/rank) * A B)`.
    fn apply(&self, g: &mut Graph, reg: &RegisteredParams, x: NodeId) -> NodeId {
        let main = g.matmul(x, reg.node(self.base));
        let xa = g.matmul(x, reg.node(self.a));
        let xab = g.matmul(xa, reg.node(self.b));
        let delta = g.scale(xab, self.alpha / self.rank as f32);
        g.add(main, delta)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionBlockIds {
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub q_w: ParamId,
    pub k_w: ParamId,
    pub v_w: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct CrossBlockIds {
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub q: LoraLinearIds,
    pub k: LoraLinearIds,
    pub v: LoraLinearIds,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct DenoiserIds {
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub time_w: ParamId,
    pub time_b: ParamId,
    pub ctx_w: ParamId,
    pub ctx_b: ParamId,
    pub text_embed: ParamId,
    pub blocks: Vec<(AttentionBlockIds, CrossBlockIds)>,
    pub head_ln_g: ParamId,
    pub head_ln_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl DenoiserIds {
    pub fn init(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut Rng) -> DenoiserIds {
        let (w, d, dt) = (cfg.width, cfg.latent_dim, cfg.text_dim);
        let in_w = lin(params, "den.in.w", d, w, rng);
        let in_b = params.add("den.in.b", Tensor::zeros(vec![w]), true);
        let time_w = lin(params, "den.time.w", w, w, rng);
        let time_b = params.add("den.time.b", Tensor::zeros(vec![w]), true);
        let ctx_w = lin(params, "den.ctx.w", d, dt, rng);
        let ctx_b = params.add("den.ctx.b", Tensor::zeros(vec![dt]), true);
        let text_embed = params.add(
            "den.text.embed",
            Tensor::randn(vec![super::text::vocab_size(), dt], 0.25, rng),
            true,
        );
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let sa = AttentionBlockIds {
                ln_g: params.add(&format!("den.b{i}.sa.ln.g"), Tensor::full(vec![w], 1.0), true),
                ln_b: params.add(&format!("den.b{i}.sa.ln.b"), Tensor::zeros(vec![w]), true),
                q_w: lin(params, &format!("den.b{i}.sa.q.w"), w, w, rng),
                k_w: lin(params, &format!("den.b{i}.sa.k.w"), w, w, rng),
                v_w: lin(params, &format!("den.b{i}.sa.v.w"), w, w, rng),
                out_w: lin(params, &format!("den.b{i}.sa.out.w"), w, w, rng),
                out_b: params.add(&format!("den.b{i}.sa.out.b"), Tensor::zeros(vec![w]), true),
            };
            let ca = CrossBlockIds {
                ln_g: params.add(&format!("den.b{i}.ca.ln.g"), Tensor::full(vec![w], 1.0), true),
                ln_b: params.add(&format!("den.b{i}.ca.ln.b"), Tensor::zeros(vec![w]), true),
                q: LoraLinearIds::init(params, &format!("den.b{i}.ca.q"), w, w, cfg.lora_rank, rng),
                k: LoraLinearIds::init(params, &format!("den.b{i}.ca.k"), dt, w, cfg.lora_rank, rng),
                v: LoraLinearIds::init(params, &format!("den.b{i}.ca.v"), dt, w, cfg.lora_rank, rng),
                out_w: lin(params, &format!("den.b{i}.ca.out.w"), w, w, rng),
                out_b: params.add(&format!("den.b{i}.ca.out.b"), Tensor::zeros(vec![w]), true),
            };
            blocks.push((sa, ca));
        }
        let head_ln_g = params.add("den.head.ln.g", Tensor::full(vec![w], 1.0), true);
        let head_ln_b = params.add("den.head.ln.b", Tensor::zeros(vec![w]), true);
        // Bias starts at zero (zeroed head weights predict zero noise);
        // the weight starts small but nonzero so gradients reach the
        // blocks from the first step.
        let head_w = lin(params, "den.head.w", w, d, rng);
        let head_b = params.add("den.head.b", Tensor::zeros(vec![d]), true);
        DenoiserIds {
            in_w,
            in_b,
            time_w,
            time_b,
            ctx_w,
            ctx_b,
            text_embed,
            blocks,
            head_ln_g,
            head_ln_b,
            head_w,
            head_b,
        }
    }

    /// Conditioning matrix: instruction token embeddings followed by the
    /// per-stream context token (projected initial-frame latent).
    pub fn conditioning(
        &self,
        g: &mut Graph,
        reg: &RegisteredParams,
        token_ids: &[usize],
        ctx_latent: &Tensor,
    ) -> NodeId {
        let table = reg.node(self.text_embed);
        let mut rows = Vec::with_capacity(token_ids.len() + 1);
        for &id in token_ids {
            rows.push(g.slice(table, 0, id, 1));
        }
        let ctx_in = g.constant(Tensor::new(vec![1, ctx_latent.numel()], ctx_latent.data().to_vec()));
        let ctx = g.matmul(ctx_in, reg.node(self.ctx_w));
        let ctx = g.add_row(ctx, reg.node(self.ctx_b));
        rows.push(ctx);
        g.concat(0, &rows)
    }

    /// One stream through the denoiser: noisy latents (T x d), diffusion
    /// step t, conditioning tokens Y -> predicted noise (T x d).
    pub fn predict(
        &self,
        g: &mut Graph,
        reg: &RegisteredParams,
        cfg: &ModelConfig,
        z_t: NodeId,
        t: usize,
        cond: NodeId,
    ) -> NodeId {
        let frames = g.value(z_t).rows();
        let w = cfg.width;
        let x = g.matmul(z_t, reg.node(self.in_w));
        let x = g.add_row(x, reg.node(self.in_b));
        let pos = g.constant(positional_embedding(frames, w));
        let x = g.add(x, pos);
        let temb_in = g.constant(sinusoidal(t as f64, w));
        let temb = g.matmul(temb_in, reg.node(self.time_w));
        let temb = g.add_row(temb, reg.node(self.time_b));
        let temb_row = g.reshape(temb, vec![w]);
        let mut x = g.add_row(x, temb_row);
        for (sa, ca) in &self.blocks {
            let h = layernorm_affine(g, reg, x, sa.ln_g, sa.ln_b);
            let q = g.matmul(h, reg.node(sa.q_w));
            let k = g.matmul(h, reg.node(sa.k_w));
            let v = g.matmul(h, reg.node(sa.v_w));
            let att = multi_head_attention(g, q, k, v, cfg.heads);
            let att = g.matmul(att, reg.node(sa.out_w));
            let att = g.add_row(att, reg.node(sa.out_b));
            x = g.add(x, att);

            let h2 = layernorm_affine(g, reg, x, ca.ln_g, ca.ln_b);
            let q2 = ca.q.apply(g, reg, h2);
            let k2 = ca.k.apply(g, reg, cond);
            let v2 = ca.v.apply(g, reg, cond);
            let att2 = multi_head_attention(g, q2, k2, v2, cfg.heads);
            let att2 = g.matmul(att2, reg.node(ca.out_w));
            let att2 = g.add_row(att2, reg.node(ca.out_b));
            x = g.add(x, att2);
        }
        let hf = layernorm_affine(g, reg, x, self.head_ln_g, self.head_ln_b);
        let out = g.matmul(hf, reg.node(self.head_w));
        g.add_row(out, reg.node(self.head_b))
    }
}

fn layernorm_affine(
    g: &mut Graph,
    reg: &RegisteredParams,
    x: NodeId,
    gain: ParamId,
    bias: ParamId,
) -> NodeId {
    let n = g.layernorm_rows(x, 1e-5);
    let n = g.mul_row(n, reg.node(gain));
    g.add_row(n, reg.node(bias))
}

/// Scaled-dot-product attention with row softmax over the context, heads
/// sliced from the feature dimension and re-concatenated.
pub fn multi_head_attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
) -> NodeId {
    let width = g.value(q).cols();
    assert_eq!(width % heads, 0, "heads {heads} must divide width {width}");
    assert_eq!(g.value(k).cols(), width, "K width mismatch");
    assert_eq!(g.value(v).cols(), width, "V width mismatch");
    let dh = width / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = g.slice(q, 1, hd * dh, dh);
        let kh = g.slice(k, 1, hd * dh, dh);
        let vh = g.slice(v, 1, hd * dh, dh);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, scale);
        let p = g.softmax_rows(scores);
        outs.push(g.matmul(p, vh));
    }
    g.concat(1, &outs)
}

/// Spec-shaped MHCA with explicit projection weights:
/// `sigma(f_Q(X) f_K(Y)^T) f_V(Y)` per head (scaled dot product), heads
/// concatenated, then output-projected.
#[allow(clippy::too_many_arguments)]
pub fn mhca(
    g: &mut Graph,
    x: NodeId,
    y: NodeId,
    w_q: NodeId,
    w_k: NodeId,
    w_v: NodeId,
    w_out: NodeId,
    heads: usize,
) -> Result<NodeId> {
    let width = g.value(w_q).cols();
    if width % heads != 0 {
        return Err(SfdError::BadShape(format!("heads {heads} must divide width {width}")));
    }
    if g.value(x).cols() != g.value(w_q).rows() || g.value(y).cols() != g.value(w_k).rows() {
        return Err(SfdError::BadShape("projection input dims inconsistent".into()));
    }
    let q = g.matmul(x, w_q);
    let k = g.matmul(y, w_k);
    let v = g.matmul(y, w_v);
    let att = multi_head_attention(g, q, k, v, heads);
    Ok(g.matmul(att, w_out))
}

/// Sinusoidal embedding of a scalar position, shape (1 x dim).
pub fn sinusoidal(pos: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (10_000.0_f64).powf(-(i as f64) / half as f64);
        data[2 * i] = (pos * freq).sin() as f32;
        data[2 * i + 1] = (pos * freq).cos() as f32;
    }
    Tensor::new(vec![1, dim], data)
}

fn positional_embedding(frames: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(frames * dim);
    for p in 0..frames {
        data.extend_from_slice(sinusoidal(p as f64, dim).data());
    }
    Tensor::new(vec![frames, dim], data)
}
