//! AdamW with decoupled weight decay, plus low-rank (LoRA-style) adapters.

use crate::rng::Rng;
use crate::tensor::{
    GradMap, Graph, NodeId, ParamSet, RegisteredParams, Result, Tensor, TensorError,
};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        // lr and weight decay follow the training recipe; betas/eps are the
        // usual Adam defaults.
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Per-parameter Adam moments plus the shared step counter.
pub struct AdamWState {
    pub cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamWState {
    pub fn new(cfg: AdamWConfig, shapes: &[&[usize]]) -> Self {
        let m = shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect();
        let v = shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect();
        AdamWState { cfg, m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over aligned parameter/gradient slices.
    ///
    /// Decoupled decay is applied first (`p -= lr*wd*p`), then the
    /// bias-corrected Adam step. `wd == 0, g == 0` leaves parameters
    /// bit-for-bit unchanged.
    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                detail: format!(
                    "{} params, {} grads, {} state slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw_step",
                    detail: format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
            g.ensure_finite("adamw_step gradient")?;
        }
        self.step += 1;
        let k = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(k);
        let bc2 = 1.0 - c.beta2.powi(k);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads.iter()).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for j in 0..pd.len() {
                if c.weight_decay != 0.0 {
                    pd[j] -= c.lr * c.weight_decay * pd[j];
                }
                md[j] = c.beta1 * md[j] + (1.0 - c.beta1) * gd[j];
                vd[j] = c.beta2 * vd[j] + (1.0 - c.beta2) * gd[j] * gd[j];
                let m_hat = md[j] / bc1;
                let v_hat = vd[j] / bc2;
                let update = c.lr * m_hat / (v_hat.sqrt() + c.eps);
                if update != 0.0 {
                    pd[j] -= update;
                }
            }
        }
        Ok(())
    }
}

/// One AdamW step on two tensors. Convenience wrapper over [`AdamWState::apply`].
pub fn adamw_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamWState) -> Result<()> {
    let mut prefs: Vec<&mut Tensor> = params.iter_mut().collect();
    let grefs: Vec<&Tensor> = grads.iter().collect();
    state.apply(&mut prefs, &grefs)
}

/// Optimizer bound to the trainable subset of a [`ParamSet`].
pub struct Optimizer {
    state: AdamWState,
    ids: Vec<crate::tensor::ParamId>,
}

impl Optimizer {
    pub fn new(cfg: AdamWConfig, params: &ParamSet) -> Self {
        let ids = params.trainable_ids();
        let shapes: Vec<&[usize]> = ids.iter().map(|&id| params.get(id).shape()).collect();
        Optimizer { state: AdamWState::new(cfg, &shapes), ids }
    }

    pub fn step(
        &mut self,
        params: &mut ParamSet,
        reg: &RegisteredParams,
        grads: &GradMap,
    ) -> Result<()> {
        let grad_tensors: Vec<Tensor> =
            self.ids.iter().map(|&id| grads.dense(reg.node(id))).collect();
        let grefs: Vec<&Tensor> = grad_tensors.iter().collect();
        // Split borrows: collect raw pointers is avoided by indexing twice.
        let mut owned: Vec<Tensor> = self.ids.iter().map(|&id| params.get(id).clone()).collect();
        {
            let mut prefs: Vec<&mut Tensor> = owned.iter_mut().collect();
            self.state.apply(&mut prefs, &grefs)?;
        }
        for (id, t) in self.ids.iter().zip(owned) {
            *params.get_mut(*id) = t;
        }
        Ok(())
    }
}

/// Low-rank adapter over a frozen base weight: effective weight
/// `W + (alpha/r) * B * A` with `W: m x n`, `A: r x n`, `B: m x r`,
/// `B` zero-initialized so the adapter starts as an exact identity.
pub struct LoraAdapter {
    pub base: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f32,
}

impl LoraAdapter {
    pub fn new(base: Tensor, rank: usize, alpha: f32, rng: &mut Rng) -> Result<Self> {
        assert_eq!(base.shape().len(), 2, "LoRA base must be 2-D");
        let (m, n) = (base.shape()[0], base.shape()[1]);
        let max_rank = m.min(n);
        if rank == 0 || rank > max_rank {
            return Err(TensorError::LoraRank(rank, max_rank));
        }
        let a = Tensor::randn(vec![rank, n], 1.0 / (n as f32).sqrt(), rng);
        let b = Tensor::zeros(vec![m, rank]);
        Ok(LoraAdapter { base, a, b, rank, alpha })
    }

    /// Dense effective weight, for tests and export.
    pub fn effective_weight(&self) -> Tensor {
        let (m, n) = (self.base.shape()[0], self.base.shape()[1]);
        let s = self.alpha / self.rank as f32;
        let ba = crate::tensor::matmul_ref(self.b.data(), self.a.data(), m, self.rank, n);
        let data = self.base.data().iter().zip(&ba).map(|(w, d)| w + s * d).collect();
        Tensor::new(vec![m, n], data)
    }
}

/// Graph form of the adapter product `(W + (alpha/r) B A) x`.
///
/// `w` should be registered frozen (`requires_grad = false`); gradients then
/// flow only into `a` and `b`.
pub fn lora_forward(
    g: &mut Graph,
    w: NodeId,
    a: NodeId,
    b: NodeId,
    rank: usize,
    alpha: f32,
    x: NodeId,
) -> NodeId {
    let ba = g.matmul(b, a);
    let scaled = g.scale(ba, alpha / rank as f32);
    let eff = g.add(w, scaled);
    g.matmul(eff, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn decay_only_step() {
        // theta=1, g=0, lr=1e-4, wd=0.01 -> theta' = 1 - 1e-6.
        let mut params = vec![Tensor::scalar(1.0)];
        let grads = vec![Tensor::scalar(0.0)];
        let cfg = AdamWConfig { lr: 1e-4, weight_decay: 0.01, ..Default::default() };
        let mut state = AdamWState::new(cfg, &[&[1]]);
        adamw_step(&mut params, &grads, &mut state).unwrap();
        assert!((params[0].item() - 0.999_999).abs() < 1e-12);
    }

    #[test]
    fn first_step_magnitude_near_lr() {
        let cfg = AdamWConfig { lr: 1e-4, weight_decay: 0.0, ..Default::default() };
        for &g0 in &[0.3f32, -2.0, 1e-3] {
            let mut params = vec![Tensor::scalar(5.0)];
            let grads = vec![Tensor::scalar(g0)];
            let mut state = AdamWState::new(cfg, &[&[1]]);
            adamw_step(&mut params, &grads, &mut state).unwrap();
            let delta = (params[0].item() - 5.0).abs();
            // Bounds hold mathematically; allow one ulp of f32 slack at 5.0.
            assert!(
                delta >= 0.9 * cfg.lr && delta <= 1.0 * cfg.lr + 1e-6,
                "delta {delta} for g {g0}"
            );
        }
    }

    #[test]
    fn zero_grad_zero_decay_is_bitwise_noop() {
        let vals = [1.25f32, -0.875, 3.0e-7, -0.0];
        let mut params = vec![Tensor::new(vec![4], vals.to_vec())];
        let grads = vec![Tensor::zeros(vec![4])];
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut state = AdamWState::new(cfg, &[&[4]]);
        adamw_step(&mut params, &grads, &mut state).unwrap();
        for (a, b) in params[0].data().iter().zip(&vals) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        // Reference behaviour: minimizing 0.5*theta^2 must approach 0.
        let cfg = AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() };
        let mut params = vec![Tensor::scalar(1.0)];
        let mut state = AdamWState::new(cfg, &[&[1]]);
        for _ in 0..100 {
            let g = params[0].item(); // d/dtheta 0.5 theta^2 = theta
            adamw_step(&mut params, std::slice::from_ref(&Tensor::scalar(g)), &mut state).unwrap();
        }
        assert!(params[0].item().abs() < 0.1, "theta {}", params[0].item());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = vec![Tensor::zeros(vec![2])];
        let grads = vec![Tensor::zeros(vec![3])];
        let mut state = AdamWState::new(AdamWConfig::default(), &[&[2]]);
        assert!(adamw_step(&mut params, &grads, &mut state).is_err());
    }

    #[test]
    fn non_finite_grad_rejected() {
        let mut params = vec![Tensor::scalar(0.0)];
        let grads = vec![Tensor::scalar(f32::NAN)];
        let mut state = AdamWState::new(AdamWConfig::default(), &[&[1]]);
        assert!(adamw_step(&mut params, &grads, &mut state).is_err());
    }

    #[test]
    fn lora_zero_b_is_identity() {
        let mut rng = Rng::seed(11);
        let base = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let adapter = LoraAdapter::new(base.clone(), 2, 2.0, &mut rng).unwrap();
        let mut g = Graph::new();
        let w = g.constant(adapter.base.clone());
        let a = g.input(adapter.a.clone(), true);
        let b = g.input(adapter.b.clone(), true);
        let x = g.constant(Tensor::randn(vec![4, 2], 1.0, &mut rng));
        let y = lora_forward(&mut g, w, a, b, adapter.rank, adapter.alpha, x);
        let direct = g.matmul(w, x);
        for (u, v) in g.value(y).data().iter().zip(g.value(direct).data()) {
            assert_eq!(u, v);
        }
    }

    #[test]
    fn lora_zero_base_full_rank_is_ba() {
        let mut rng = Rng::seed(13);
        let m = 3;
        let n = 3;
        let r = 3;
        let mut adapter =
            LoraAdapter::new(Tensor::zeros(vec![m, n]), r, r as f32, &mut rng).unwrap();
        adapter.b = Tensor::randn(vec![m, r], 1.0, &mut rng);
        let x = Tensor::randn(vec![n, 1], 1.0, &mut rng);
        let mut g = Graph::new();
        let w = g.constant(adapter.base.clone());
        let a = g.constant(adapter.a.clone());
        let b = g.constant(adapter.b.clone());
        let xn = g.constant(x);
        let y = lora_forward(&mut g, w, a, b, r, r as f32, xn);
        let ba = g.matmul(b, a);
        let want = g.matmul(ba, xn);
        for (u, v) in g.value(y).data().iter().zip(g.value(want).data()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn lora_matches_dense_oracle() {
        let mut rng = Rng::seed(17);
        let base = Tensor::randn(vec![3, 3], 1.0, &mut rng);
        let mut adapter = LoraAdapter::new(base, 2, 2.0, &mut rng).unwrap();
        adapter.b = Tensor::randn(vec![3, 2], 0.5, &mut rng);
        let x = Tensor::randn(vec![3, 3], 1.0, &mut rng);
        let mut g = Graph::new();
        let w = g.constant(adapter.base.clone());
        let a = g.constant(adapter.a.clone());
        let b = g.constant(adapter.b.clone());
        let xn = g.constant(x.clone());
        let y = lora_forward(&mut g, w, a, b, adapter.rank, adapter.alpha, xn);
        // Dense oracle: explicit effective weight times x.
        let eff = adapter.effective_weight();
        let want = crate::tensor::matmul_ref(eff.data(), x.data(), 3, 3, 3);
        for (u, v) in g.value(y).data().iter().zip(&want) {
            assert!((u - v).abs() < 1e-5);
        }
    }

    #[test]
    fn lora_grads_only_in_a_and_b() {
        let mut rng = Rng::seed(19);
        let base = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let adapter = LoraAdapter::new(base, 2, 2.0, &mut rng).unwrap();
        let mut g = Graph::new();
        let w = g.input(adapter.base.clone(), false);
        let a = g.input(adapter.a.clone(), true);
        let b = g.input(adapter.b.clone(), true);
        let x = g.constant(Tensor::randn(vec![4, 2], 1.0, &mut rng));
        let y = lora_forward(&mut g, w, a, b, adapter.rank, adapter.alpha, x);
        let sq = g.mul(y, y);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(w).is_none());
        assert!(grads.get(a).is_some());
        assert!(grads.get(b).is_some());
    }

    #[test]
    fn lora_rank_zero_rejected() {
        let mut rng = Rng::seed(23);
        assert!(matches!(
            LoraAdapter::new(Tensor::zeros(vec![3, 4]), 0, 1.0, &mut rng),
            Err(TensorError::LoraRank(0, 3))
        ));
    }
}
