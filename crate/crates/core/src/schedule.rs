//! Noise schedule, closed-form forward noising and the deterministic DDIM
//! reverse update.

use crate::error::{Error, Result};
use crate::latent::LatentGrid;

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;
pub const DEFAULT_INFERENCE_STEPS: usize = 50;

/// One reverse transition `t → t_prev` of the sampling trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepPair {
    pub t: usize,
    pub t_prev: usize,
}

/// Linear-β training schedule with its cumulative products and the
/// selected inference trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    // alpha_bars[0] = 1, alpha_bars[t] = prod_{s<=t} (1 - beta_s)
    alpha_bars: Vec<f64>,
    timesteps: Vec<usize>,
}

impl NoiseSchedule {
    /// Builds `train_steps` linearly spaced betas and `inference_steps`
    /// uniformly strided timesteps from `train_steps` down.
    pub fn linear(
        train_steps: usize,
        beta_start: f64,
        beta_end: f64,
        inference_steps: usize,
    ) -> Result<Self> {
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        if train_steps == 0 || inference_steps == 0 || inference_steps > train_steps {
            return Err(Error::Config(format!(
                "need 1 <= inference steps ({inference_steps}) <= train steps ({train_steps})"
            )));
        }
        let betas: Vec<f64> = (0..train_steps)
            .map(|i| {
                if train_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (train_steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(train_steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alpha_bars,
            timesteps: strided_timesteps(train_steps, inference_steps),
        })
    }

    pub fn default_linear(inference_steps: usize) -> Result<Self> {
        Self::linear(
            DEFAULT_TRAIN_STEPS,
            DEFAULT_BETA_START,
            DEFAULT_BETA_END,
            inference_steps,
        )
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn inference_steps(&self) -> usize {
        self.timesteps.len()
    }

    /// `β_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t` for `0 <= t <= T`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Selected timesteps, strictly decreasing.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// The trajectory as consecutive pairs, ending at `t_prev = 0`.
    pub fn pairs(&self) -> Vec<StepPair> {
        self.timesteps
            .iter()
            .enumerate()
            .map(|(i, &t)| StepPair {
                t,
                t_prev: self.timesteps.get(i + 1).copied().unwrap_or(0),
            })
            .collect()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.train_steps() {
            return Err(Error::Config(format!(
                "timestep {t} outside schedule of length {}",
                self.train_steps()
            )));
        }
        Ok(())
    }
}

/// `t_k = round(T·(N−k)/N)` for `k = 0..N`, ties rounded up.
fn strided_timesteps(train_steps: usize, inference_steps: usize) -> Vec<usize> {
    let (t, n) = (train_steps as u128, inference_steps as u128);
    (0..n)
        .map(|k| ((2 * t * (n - k) + n) / (2 * n)) as usize)
        .collect()
}

/// `√ᾱ_t·z0 + √(1−ᾱ_t)·ε`. Accepts `t = 0`, which returns `z0`.
pub fn add_noise(
    z0: &LatentGrid,
    eps: &LatentGrid,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, "add_noise", |z, e| signal * z + noise * e)
}

/// One Markov step of the forward chain, `q(z_t | z_{t−1})`:
/// `√(1−β_t)·z + √β_t·ε`.
pub fn forward_chain_step(
    z_prev: &LatentGrid,
    eps: &LatentGrid,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    if t == 0 {
        return Err(Error::Config("forward chain step needs t >= 1".into()));
    }
    sched.check_t(t)?;
    let beta = sched.beta(t);
    let (keep, noise) = ((1.0 - beta).sqrt(), beta.sqrt());
    z_prev.zip_map(eps, "forward_chain_step", |z, e| keep * z + noise * e)
}

/// Clean-sample estimate implied by a noise prediction,
/// `ẑ_0 = (z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
pub fn predict_original(
    z_t: &LatentGrid,
    eps_hat: &LatentGrid,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    if ab <= 0.0 {
        return Err(Error::Singularity {
            t,
            reason: "cumulative alpha is zero",
        });
    }
    let (inv_signal, noise) = (1.0 / ab.sqrt(), (1.0 - ab).sqrt());
    z_t.zip_map(eps_hat, "predict_original", |z, e| {
        (z - noise * e) * inv_signal
    })
}

/// Deterministic (η = 0) DDIM update from `pair.t` to `pair.t_prev`.
pub fn ddim_step(
    z_t: &LatentGrid,
    eps_hat: &LatentGrid,
    pair: StepPair,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    if pair.t <= pair.t_prev {
        return Err(Error::Config(format!(
            "step pair must decrease, got {} -> {}",
            pair.t, pair.t_prev
        )));
    }
    sched.check_t(pair.t)?;
    let x0 = predict_original(z_t, eps_hat, pair.t, sched)?;
    if pair.t_prev == 0 {
        return Ok(x0);
    }
    let ab_prev = sched.alpha_bar(pair.t_prev);
    let (signal, noise) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    x0.zip_map(eps_hat, "ddim_step", |x, e| signal * x + noise * e)
}
