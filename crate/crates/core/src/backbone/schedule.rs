use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training-time beta ramp of the v1.x latent diffusion checkpoints.
pub const SCALED_LINEAR_BETA_START: f64 = 0.00085;
pub const SCALED_LINEAR_BETA_END: f64 = 0.012;
pub const DEFAULT_TRAIN_STEPS: usize = 1000;

/// Cumulative products `alpha_bar[t] = prod_{s<=t} (1 - beta_s)` for the
/// "scaled linear" beta ramp (linear in `sqrt(beta)`).
pub fn scaled_linear_alpha_bar(train_steps: usize) -> Vec<f64> {
    let (lo, hi) = (
        SCALED_LINEAR_BETA_START.sqrt(),
        SCALED_LINEAR_BETA_END.sqrt(),
    );
    let mut acc = 1.0;
    (0..train_steps)
        .map(|i| {
            let frac = if train_steps > 1 {
                i as f64 / (train_steps - 1) as f64
            } else {
                0.0
            };
            let b = lo + (hi - lo) * frac;
            acc *= 1.0 - b * b;
            acc
        })
        .collect()
}

/// A noise level addressed by the sampler: either a training timestep or the
/// clean end of the chain (below the smallest scheduled timestep).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseLevel {
    Clean,
    Step(usize),
}

/// Discretized DDIM timesteps with their cumulative signal coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    num_inference_steps: usize,
    train_steps: usize,
    /// Descending.
    timesteps: Vec<usize>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Leading spacing with a +1 offset: `t_i = i * (train_steps / n) + 1`,
    /// clamped into range, in descending order.
    pub fn new(num_inference_steps: usize, training_alpha_bar: &[f64]) -> Result<Self> {
        let train_steps = training_alpha_bar.len();
        if num_inference_steps == 0 || train_steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if num_inference_steps > train_steps {
            return Err(Error::invalid(format!(
                "num_inference_steps {num_inference_steps} exceeds train_steps {train_steps}"
            )));
        }
        let stride = train_steps / num_inference_steps;
        // With stride 1 the offset would push the top step out of range.
        let offset = if stride > 1 { 1 } else { 0 };
        let timesteps: Vec<usize> = (0..num_inference_steps)
            .rev()
            .map(|i| i * stride + offset)
            .collect();
        for w in training_alpha_bar.windows(2) {
            if !(w[1] < w[0]) {
                return Err(Error::invalid("alpha_bar must be strictly decreasing"));
            }
        }
        if training_alpha_bar
            .iter()
            .any(|&a| !(a > 0.0 && a <= 1.0))
        {
            return Err(Error::invalid("alpha_bar values must lie in (0, 1]"));
        }
        Ok(Self {
            num_inference_steps,
            train_steps,
            timesteps,
            alpha_bar: training_alpha_bar.to_vec(),
        })
    }

    pub fn num_inference_steps(&self) -> usize {
        self.num_inference_steps
    }

    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    /// Descending timesteps used for denoising.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn stride(&self) -> usize {
        self.train_steps / self.num_inference_steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// The clean end reuses `alpha_bar[0]` (no forced `alpha = 1`), matching v1.x DDIM.
    pub fn alpha_bar_at(&self, level: NoiseLevel) -> f64 {
        match level {
            NoiseLevel::Clean => self.alpha_bar[0],
            NoiseLevel::Step(t) => self.alpha_bar[t],
        }
    }

    /// Source and destination levels for denoising step `i` (0 = noisiest).
    pub fn denoise_levels(&self, i: usize) -> (usize, NoiseLevel) {
        let t = self.timesteps[i];
        let next = self
            .timesteps
            .get(i + 1)
            .map_or(NoiseLevel::Clean, |&n| NoiseLevel::Step(n));
        (t, next)
    }

    /// Source level, destination timestep for inversion step `i` (0 = cleanest).
    /// Inversion step `i` is the exact reverse of denoising step `n - 1 - i`.
    pub fn inversion_levels(&self, i: usize) -> (NoiseLevel, usize) {
        let n = self.num_inference_steps;
        let (t, from) = self.denoise_levels(n - 1 - i);
        (from, t)
    }
}

/// Builds a schedule over the v1.x scaled-linear training coefficients.
pub fn make_schedule(num_inference_steps: usize, train_steps: usize) -> Result<NoiseSchedule> {
    if train_steps == 0 {
        return Err(Error::invalid("train_steps must be positive"));
    }
    NoiseSchedule::new(num_inference_steps, &scaled_linear_alpha_bar(train_steps))
}
