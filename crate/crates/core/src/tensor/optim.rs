use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub base_lr: f64,
    pub final_lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            base_lr: 5e-4,
            final_lr: 1e-6,
            weight_decay: 0.1,
            clip_norm: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Cosine decay from `base` at fraction 0 to `final_lr` at fraction 1.
pub fn cosine_lr(base: f64, final_lr: f64, fraction: f64) -> f64 {
    final_lr + 0.5 * (base - final_lr) * (1.0 + (std::f64::consts::PI * fraction).cos())
}

/// Rescales `grads` so their global l2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    pub grad_norm: f64,
}

/// AdamW with decoupled weight decay, global-norm clipping and a cosine
/// learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        AdamW {
            config,
            step_count: 0,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
        }
    }

    pub fn lr_at(&self, epoch_fraction: f64) -> f64 {
        cosine_lr(self.config.base_lr, self.config.final_lr, epoch_fraction)
    }

    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        epoch_fraction: f64,
    ) -> Result<StepStats> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::contract(format!(
                "adamw: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        if !(0.0..=1.0).contains(&epoch_fraction) {
            return Err(Error::contract(format!(
                "epoch fraction {epoch_fraction} outside [0, 1]"
            )));
        }
        let mut clipped = grads.to_vec();
        let grad_norm = clip_global_norm(&mut clipped, self.config.clip_norm);

        self.step_count += 1;
        let c = &self.config;
        let lr = self.lr_at(epoch_fraction);
        let bc1 = 1.0 - c.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step_count as i32);
        for i in 0..params.len() {
            let g = clipped[i];
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            params[i] *= 1.0 - lr * c.weight_decay;
            params[i] -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
        }
        Ok(StepStats { lr, grad_norm })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let opt = AdamW::new(AdamWConfig::default(), 1);
        assert_eq!(opt.lr_at(0.0), opt.config.base_lr);
        assert!((opt.lr_at(1.0) - 1e-6).abs() < 1e-18);
        let mid = opt.lr_at(0.5);
        assert!((mid - 0.5 * (5e-4 + 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn clipping_scales_to_norm() {
        // norm 10 -> scaled by 0.01
        let mut g = vec![6.0, 8.0];
        let n = clip_global_norm(&mut g, 0.1);
        assert_eq!(n, 10.0);
        assert!((g[0] - 0.06).abs() < 1e-15 && (g[1] - 0.08).abs() < 1e-15);
        let mut small = vec![0.01, 0.02];
        clip_global_norm(&mut small, 0.1);
        assert_eq!(small, vec![0.01, 0.02]);
    }

    #[test]
    fn moments_see_clipped_gradient() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, 2);
        let mut p = vec![0.0, 0.0];
        opt.step(&mut p, &[6.0, 8.0], 0.0).unwrap();
        assert!((opt.first_moment[0] - 0.1 * 0.06).abs() < 1e-15);
        assert!((opt.first_moment[1] - 0.1 * 0.08).abs() < 1e-15);
        assert_eq!(opt.step_count, 1);
        // first Adam step moves each coordinate by ~lr against the gradient sign
        assert!((p[0] + 5e-4).abs() < 1e-9);
    }

    #[test]
    fn decoupled_weight_decay() {
        let mut opt = AdamW::new(AdamWConfig::default(), 1);
        let mut p = vec![2.0];
        opt.step(&mut p, &[0.0], 0.0).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 5e-4 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn rejects_mismatched_lengths() {
        let mut opt = AdamW::new(AdamWConfig::default(), 2);
        let mut p = vec![0.0; 2];
        assert!(opt.step(&mut p, &[1.0], 0.0).is_err());
        assert!(opt.step(&mut p, &[1.0, 1.0], 1.5).is_err());
    }

    #[test]
    fn step_count_increments() {
        let mut opt = AdamW::new(AdamWConfig::default(), 1);
        let mut p = vec![0.0];
        for i in 1..=5 {
            opt.step(&mut p, &[1.0], 0.0).unwrap();
            assert_eq!(opt.step_count, i);
        }
    }
}
