//! Forward diffusion and the reverse (ancestral) update rule.

use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{Result, SfdError};

/// Linear-beta schedule. `alpha_bar(0)` is 1 by convention; diffusion steps
/// run 1..=t_diff.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_diff: usize, beta_min: f64, beta_max: f64) -> Self {
        assert!(t_diff >= 1);
        let mut betas = Vec::with_capacity(t_diff);
        for i in 0..t_diff {
            let f = if t_diff == 1 { 0.0 } else { i as f64 / (t_diff - 1) as f64 };
            betas.push(beta_min + f * (beta_max - beta_min));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_diff);
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        NoiseSchedule { betas, alphas, alpha_bars }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// beta_t for t in 1..=len.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev = 1.0;
        for t in 1..=self.len() {
            let b = self.beta(t);
            if !(0.0 < b && b < 1.0) {
                return Err(SfdError::BadSchedule(format!("beta_{t} = {b} out of (0,1)")));
            }
            let ab = self.alpha_bar(t);
            if ab >= prev {
                return Err(SfdError::BadSchedule(format!("alpha_bar not decreasing at {t}")));
            }
            prev = ab;
        }
        Ok(())
    }
}

/// Forward diffusion: `z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps`.
/// Returns both the perturbed latents and the drawn noise.
pub fn diffuse_forward(
    z0: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    if t < 1 || t > schedule.len() {
        return Err(SfdError::StepOutOfRange { t, t_diff: schedule.len() });
    }
    let ab = schedule.alpha_bar(t);
    let (s0, s1) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let eps = Tensor::new(z0.shape().to_vec(), rng.normal_vec_f32(z0.numel()));
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(z, e)| s0 * z + s1 * e)
        .collect();
    Ok((Tensor::new(z0.shape().to_vec(), data), eps))
}

/// One reverse (ancestral) step:
/// `z_{t-1} = (z_t - ((1-a_t)/sqrt(1-abar_t)) eps_hat) / sqrt(a_t) + sigma_t xi`
/// with `sigma_t^2 = beta_t (1-abar_{t-1}) / (1-abar_t)`, and `sigma_1 = 0`.
/// Pass `None` for xi to take the deterministic part only.
pub fn reverse_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    xi: Option<&mut Rng>,
) -> Result<Tensor> {
    if t < 1 || t > schedule.len() {
        return Err(SfdError::StepOutOfRange { t, t_diff: schedule.len() });
    }
    let a = schedule.alpha(t);
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let coef = ((1.0 - a) / (1.0 - ab).sqrt()) as f32;
    let inv_sqrt_a = (1.0 / a.sqrt()) as f32;
    let sigma = if t == 1 {
        0.0
    } else {
        (schedule.beta(t) * (1.0 - ab_prev) / (1.0 - ab)).sqrt() as f32
    };
    let mut data: Vec<f32> = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(z, e)| inv_sqrt_a * (z - coef * e))
        .collect();
    if sigma > 0.0 {
        if let Some(rng) = xi {
            for v in data.iter_mut() {
                *v += sigma * rng.normal_f32();
            }
        }
    }
    Ok(Tensor::new(z_t.shape().to_vec(), data))
}

/// Reverse step with the denoised-estimate clamp used during sampling: the
/// implied `x0_hat = (z_t - sqrt(1-abar) eps_hat) / sqrt(abar)` is clamped
/// elementwise before the standard update. A scale-invariant denoiser
/// cannot scale eps_hat with a drifting z_t, so an unclamped chain can run
/// away from the data manifold; the clamp bounds it exactly the way
/// pixel-space DDPM implementations clip denoised samples.
pub fn reverse_step_clamped(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    clamp: f32,
    xi: Option<&mut Rng>,
) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t);
    let (s_ab, s_1ab) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let eps_eff: Vec<f32> = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(z, e)| {
            let x0 = ((z - s_1ab * e) / s_ab).clamp(-clamp, clamp);
            (z - s_ab * x0) / s_1ab
        })
        .collect();
    let eps_eff = Tensor::new(z_t.shape().to_vec(), eps_eff);
    reverse_step(z_t, &eps_eff, t, schedule, xi)
}

/// Posterior mean `q(z_{t-1} | z_t, z0)` -- the independent oracle used to
/// check the reverse step against the forward process.
pub fn posterior_mean(z0: &Tensor, z_t: &Tensor, t: usize, schedule: &NoiseSchedule) -> Tensor {
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let beta = schedule.beta(t);
    let alpha = schedule.alpha(t);
    let c0 = (ab_prev.sqrt() * beta / (1.0 - ab)) as f32;
    let c1 = (alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab)) as f32;
    let data = z0
        .data()
        .iter()
        .zip(z_t.data())
        .map(|(z0, zt)| c0 * z0 + c1 * zt)
        .collect();
    Tensor::new(z0.shape().to_vec(), data)
}
