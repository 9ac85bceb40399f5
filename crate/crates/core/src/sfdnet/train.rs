//! Two-stage training: the shared VAE first, then the denoiser over frozen
//! VAE latents with the standard denoising objective.

use std::io::Write;
use std::path::Path;

use crate::optim::{AdamWConfig, Optimizer};
use crate::rng::Rng;
use crate::scene::FlowTensor;
use crate::tensor::{Graph, Tensor};

use super::text::tokenize;
use super::{diffuse_forward, ModelConfig, Result, SfdBundle, SfdError, SfdNet};

#[derive(Debug, Clone)]
pub struct TrainItem {
    pub flows: (FlowTensor, FlowTensor),
    pub instruction: String,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub vae_epochs: usize,
    /// Denoiser (stage 2) epochs over the training set.
    pub epochs: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub vae_batch: usize,
    pub beta_kl: f32,
    pub seed: u64,
    /// Shared weights across streams (the Siamese arrangement). False
    /// trains two independent parameter sets.
    pub siamese: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            vae_epochs: 150,
            epochs: 300,
            lr: 1e-4,
            weight_decay: 0.01,
            vae_batch: 32,
            beta_kl: 1e-3,
            seed: 0,
            siamese: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub stage: u8,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// CSV loss log: `step,stage,train_loss,val_loss`.
pub fn write_loss_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,stage,train_loss,val_loss")?;
    for r in rows {
        writeln!(w, "{},{},{:.6},{:.6}", r.step, r.stage, r.train_loss, r.val_loss)?;
    }
    w.flush()?;
    Ok(())
}

pub fn train(
    items: &[TrainItem],
    val_items: &[TrainItem],
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<(SfdBundle, Vec<LogRow>)> {
    if items.is_empty() {
        return Err(SfdError::EmptyDataset);
    }
    for item in items.iter().chain(val_items) {
        for f in [&item.flows.0, &item.flows.1] {
            if f.grid() != cfg.grid {
                return Err(SfdError::GridMismatch { got: f.grid(), want: cfg.grid });
            }
        }
    }
    let mut rng = Rng::seed(tcfg.seed ^ 0x5fd);
    let mut log = Vec::new();
    if tcfg.siamese {
        let mut net = SfdNet::new(cfg, rng.next_u64());
        train_one(&mut net, items, val_items, tcfg, StreamSel::Both, &mut rng, &mut log)?;
        Ok((SfdBundle::siamese(net), log))
    } else {
        // Two unshared parameter sets, one per stream; identical recipe.
        let mut net1 = SfdNet::new(cfg, rng.next_u64());
        let mut net2 = SfdNet::new(cfg, rng.next_u64());
        let mut log2 = Vec::new();
        train_one(&mut net1, items, val_items, tcfg, StreamSel::One(0), &mut rng, &mut log)?;
        train_one(&mut net2, items, val_items, tcfg, StreamSel::One(1), &mut rng, &mut log2)?;
        for (a, b) in log.iter_mut().zip(&log2) {
            a.train_loss += b.train_loss;
            a.val_loss += b.val_loss;
        }
        Ok((SfdBundle::independent(net1, net2), log))
    }
}

#[derive(Clone, Copy)]
enum StreamSel {
    Both,
    One(usize),
}

impl StreamSel {
    fn streams(&self) -> Vec<usize> {
        match self {
            StreamSel::Both => vec![0, 1],
            StreamSel::One(i) => vec![*i],
        }
    }
}

fn flow_of(item: &TrainItem, stream: usize) -> &FlowTensor {
    if stream == 0 {
        &item.flows.0
    } else {
        &item.flows.1
    }
}

fn train_one(
    net: &mut SfdNet,
    items: &[TrainItem],
    val_items: &[TrainItem],
    tcfg: &TrainConfig,
    sel: StreamSel,
    rng: &mut Rng,
    log: &mut Vec<LogRow>,
) -> Result<()> {
    let fdim = 3 * net.cfg.grid * net.cfg.grid;

    // ---- Stage 1: VAE on individual frames -------------------------------
    let mut frames: Vec<Vec<f32>> = Vec::new();
    for item in items {
        for &s in &sel.streams() {
            let f = flow_of(item, s);
            for t in 0..f.frames() {
                frames.push(f.frame_slab(t));
            }
        }
    }
    let mut val_frames: Vec<Vec<f32>> = Vec::new();
    for item in val_items {
        for &s in &sel.streams() {
            let f = flow_of(item, s);
            for t in 0..f.frames() {
                val_frames.push(f.frame_slab(t));
            }
        }
    }
    val_frames.truncate(64);
    let val_mat = stack(&val_frames, fdim);

    let adamw = AdamWConfig {
        lr: tcfg.lr,
        weight_decay: tcfg.weight_decay,
        ..Default::default()
    };
    net.params.freeze_all();
    for id in net.vae.all() {
        net.params.set_trainable(id, true);
    }
    let mut opt = Optimizer::new(adamw, &net.params);
    let mut step = 0usize;
    let batch = tcfg.vae_batch.max(1);
    for _epoch in 0..tcfg.vae_epochs {
        let order = shuffled(frames.len(), rng);
        for chunk in order.chunks(batch) {
            step += 1;
            let rows: Vec<Vec<f32>> = chunk.iter().map(|&i| frames[i].clone()).collect();
            let x = stack(&rows, fdim);
            let b = rows.len();
            let xi = Tensor::new(
                vec![b, net.cfg.latent_dim],
                rng.normal_vec_f32(b * net.cfg.latent_dim),
            );
            let mut g = Graph::new();
            let reg = net.params.register(&mut g);
            let xn = g.constant(x);
            let (mu, lv) = net.vae.encode(&mut g, &reg, xn);
            let half_lv = g.scale(lv, 0.5);
            let std = g.exp(half_lv);
            let noise = g.constant(xi);
            let zn = g.mul(std, noise);
            let z = g.add(mu, zn);
            let recon = net.vae.decode(&mut g, &reg, z);
            let mse = g.mse(recon, xn);
            // KL(q || N(0, I)) summed over dims, averaged over the batch.
            let mu2 = g.mul(mu, mu);
            let elv = g.exp(lv);
            let sum_terms = g.add(mu2, elv);
            let kl_core = g.sub(sum_terms, lv);
            let kl_sum = g.sum(kl_core);
            let kl_shift = g.add_scalar(kl_sum, -((b * net.cfg.latent_dim) as f32));
            let kl = g.scale(kl_shift, 0.5 / b as f32);
            let kl_w = g.scale(kl, tcfg.beta_kl);
            let loss = g.add(mse, kl_w);
            let loss_val = g.value(loss).item() as f64;
            if !loss_val.is_finite() {
                return Err(SfdError::NonFiniteLoss { stage: 1, step });
            }
            let grads = g.backward(loss)?;
            opt.step(&mut net.params, &reg, &grads)?;

            let val_loss = vae_val_loss(net, &val_mat);
            log.push(LogRow { step, stage: 1, train_loss: loss_val, val_loss });
        }
    }

    // Latent statistics over the training frames (frozen after stage 1).
    let all = stack(&frames, fdim);
    let mu = super::encode_mu_batch(&net.params, &net.vae, &all);
    let d = net.cfg.latent_dim;
    let n = mu.rows();
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += mu.data()[i * d + j] as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0f64; d];
    for i in 0..n {
        for j in 0..d {
            let dev = mu.data()[i * d + j] as f64 - mean[j];
            var[j] += dev * dev;
        }
    }
    net.latent_mean = Tensor::new(vec![d], mean.iter().map(|&m| m as f32).collect());
    net.latent_std = Tensor::new(
        vec![d],
        var.iter().map(|&v| ((v / n as f64).sqrt() as f32).max(1e-4)).collect(),
    );

    // ---- Stage 2: denoiser over frozen VAE latents ------------------------
    net.params.freeze_all();
    let mut den_params = vec![
        net.den.in_w,
        net.den.in_b,
        net.den.time_w,
        net.den.time_b,
        net.den.ctx_w,
        net.den.ctx_b,
        net.den.text_embed,
        net.den.head_ln_g,
        net.den.head_ln_b,
        net.den.head_w,
        net.den.head_b,
    ];
    for (sa, ca) in &net.den.blocks {
        den_params.extend([sa.ln_g, sa.ln_b, sa.q_w, sa.k_w, sa.v_w, sa.out_w, sa.out_b]);
        den_params.extend([ca.ln_g, ca.ln_b, ca.out_w, ca.out_b]);
        // Cross-attention projections adapt through low-rank factors only.
        den_params.extend([ca.q.a, ca.q.b, ca.k.a, ca.k.b, ca.v.a, ca.v.b]);
    }
    for id in &den_params {
        net.params.set_trainable(*id, true);
    }
    let mut opt = Optimizer::new(adamw, &net.params);

    // Cache standardized latents and conditioning for every item.
    let cache = |items: &[TrainItem], net: &SfdNet| -> Result<Vec<Cached>> {
        items
            .iter()
            .map(|item| {
                let streams = sel.streams();
                let mut z0 = Vec::new();
                let mut ctx = Vec::new();
                for &s in &streams {
                    let f = flow_of(item, s);
                    z0.push(net.encode_flow(f)?);
                    ctx.push(net.context_latent(&f.frame_slab(0)));
                }
                Ok(Cached { z0, ctx, tokens: tokenize(&item.instruction) })
            })
            .collect()
    };
    let train_cache = cache(items, net)?;
    let val_cache = cache(val_items, net)?;

    // Fixed validation draws: one (t, eps) pair per val stream.
    let mut val_rng = Rng::seed(tcfg.seed ^ 0x7a11);
    let val_draws: Vec<Vec<(usize, Tensor)>> = val_cache
        .iter()
        .map(|c| {
            c.z0.iter()
                .map(|z| {
                    let t = 1 + val_rng.below(net.cfg.t_diff);
                    let eps =
                        Tensor::new(z.shape().to_vec(), val_rng.normal_vec_f32(z.numel()));
                    (t, eps)
                })
                .collect()
        })
        .collect();

    let mut step2 = 0usize;
    for _epoch in 0..tcfg.epochs {
        let order = shuffled(train_cache.len(), rng);
        for &idx in &order {
            step2 += 1;
            let item = &train_cache[idx];
            let mut g = Graph::new();
            let reg = net.params.register(&mut g);
            let mut loss_node = None;
            for (z0, ctx) in item.z0.iter().zip(&item.ctx) {
                let t = 1 + rng.below(net.cfg.t_diff);
                let (z_t, eps) = diffuse_forward(z0, t, &net.schedule, rng)?;
                let zn = g.constant(z_t);
                let cond = net.den.conditioning(&mut g, &reg, &item.tokens, ctx);
                let pred = net.den.predict(&mut g, &reg, &net.cfg, zn, t, cond);
                let target = g.constant(eps);
                let m = g.mse(pred, target);
                loss_node = Some(match loss_node {
                    None => m,
                    Some(prev) => g.add(prev, m),
                });
            }
            let loss = loss_node.expect("at least one stream");
            let loss_val = g.value(loss).item() as f64;
            if !loss_val.is_finite() {
                return Err(SfdError::NonFiniteLoss { stage: 2, step: step2 });
            }
            let grads = g.backward(loss)?;
            opt.step(&mut net.params, &reg, &grads)?;

            let val_loss = denoiser_val_loss(net, &val_cache, &val_draws);
            log.push(LogRow { step: step2, stage: 2, train_loss: loss_val, val_loss });
        }
    }
    Ok(())
}

fn vae_val_loss(net: &SfdNet, val: &Tensor) -> f64 {
    if val.numel() == 0 {
        return 0.0;
    }
    let mut g = Graph::new();
    let reg = net.params.register(&mut g);
    let x = g.constant(val.clone());
    let (mu, _) = net.vae.encode(&mut g, &reg, x);
    let recon = net.vae.decode(&mut g, &reg, mu);
    let mse = g.mse(recon, x);
    g.value(mse).item() as f64
}

struct Cached {
    z0: Vec<Tensor>,
    ctx: Vec<Tensor>,
    tokens: Vec<usize>,
}

fn denoiser_val_loss(net: &SfdNet, val_cache: &[Cached], val_draws: &[Vec<(usize, Tensor)>]) -> f64 {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (c, draws) in val_cache.iter().zip(val_draws) {
        for ((z0, ctx), (t, eps)) in c.z0.iter().zip(&c.ctx).zip(draws) {
            let ab = net.schedule.alpha_bar(*t);
            let (s0, s1) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            let zt_data: Vec<f32> = z0
                .data()
                .iter()
                .zip(eps.data())
                .map(|(z, e)| s0 * z + s1 * e)
                .collect();
            let z_t = Tensor::new(z0.shape().to_vec(), zt_data);
            let pred = net.predict_eval(&z_t, *t, &c.tokens, ctx);
            let mut acc = 0.0f64;
            for (a, b) in eps.data().iter().zip(pred.data()) {
                let d = (*a - *b) as f64;
                acc += d * d;
            }
            total += acc / eps.numel() as f64;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn stack(rows: &[Vec<f32>], cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        debug_assert_eq!(r.len(), cols);
        data.extend_from_slice(r);
    }
    Tensor::new(vec![rows.len(), cols], data)
}

fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        order.swap(i, j);
    }
    order
}
