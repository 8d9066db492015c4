//! Adam with decoupled weight decay and the cosine-warmup learning-rate
//! schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

/// Adam hyperparameters. Weight decay is decoupled: applied directly to the
/// parameter before the moment update, not folded into the gradient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr_base: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr_base: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.2 }
    }
}

/// Per-parameter first/second moment buffers plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor<f32>>,
    pub second_moment: BTreeMap<String, Tensor<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first_moment: BTreeMap::new(), second_moment: BTreeMap::new() }
    }

    /// One optimizer step over named parameters at learning rate `lr`.
    ///
    /// Parameters without a gradient this step are left untouched (their
    /// moments also stay put). Weight decay is skipped for names ending in
    /// `.b`, `.beta`, `.gamma`, or scalar loss parameters — biases and norms
    /// are conventionally exempt.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<f32>>,
        grads: &BTreeMap<String, Tensor<f32>>,
        lr: f32,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.config.clone();
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            assert_eq!(g.shape(), p.shape(), "gradient shape mismatch for {name}");
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            let decay = if decay_exempt(name) { 0.0 } else { c.weight_decay };

            let mut out = Vec::with_capacity(p.numel());
            let mut m_new = Vec::with_capacity(p.numel());
            let mut v_new = Vec::with_capacity(p.numel());
            for i in 0..p.numel() {
                let gi = g.data()[i];
                let mut pi = p.data()[i];
                pi -= lr * decay * pi;
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                pi -= lr * m_hat / (v_hat.sqrt() + c.eps);
                out.push(pi);
                m_new.push(mi);
                v_new.push(vi);
            }
            *p = Tensor::new(p.rows(), p.cols(), out);
            *m = Tensor::new(p.rows(), p.cols(), m_new);
            *v = Tensor::new(p.rows(), p.cols(), v_new);
        }
    }
}

fn decay_exempt(name: &str) -> bool {
    name.ends_with(".b")
        || name.ends_with(".beta")
        || name.ends_with(".gamma")
        || name.starts_with("loss.")
}

/// Linear warmup to `base_lr`, then cosine annealing to zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub base_lr: f32,
}

impl LrSchedule {
    pub fn new(warmup_steps: u64, total_steps: u64, base_lr: f32) -> Self {
        assert!(
            warmup_steps > 0 && warmup_steps <= total_steps,
            "schedule requires 0 < warmup ({warmup_steps}) <= total ({total_steps})"
        );
        Self { warmup_steps, total_steps, base_lr }
    }

    /// Learning rate at `step` (0-based; valid through `total_steps`).
    pub fn lr_at(&self, step: u64) -> f32 {
        assert!(step <= self.total_steps, "step {step} beyond schedule end {}", self.total_steps);
        if step < self.warmup_steps {
            return self.base_lr * step as f32 / self.warmup_steps as f32;
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return self.base_lr;
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        self.base_lr * (0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32
    }
}

/// Alias matching the operation vocabulary used elsewhere in the crate.
pub fn cosine_warmup_lr(step: u64, schedule: &LrSchedule) -> f32 {
    schedule.lr_at(step)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: &[f32]) -> BTreeMap<String, Tensor<f32>> {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::row(value));
        m
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let mut params = single_param(&[1.0, -2.0, 3.0]);
        let grads = single_param(&[0.0, 0.0, 0.0]);
        let mut state = AdamState::new(AdamConfig { weight_decay: 0.0, ..Default::default() });
        state.step(&mut params, &grads, 1e-3);
        assert_eq!(params["w"].data(), &[1.0, -2.0, 3.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_matches_hand_evaluated_recurrence() {
        // At t=1 the bias-corrected moments are exactly g and g^2, so the
        // update is p - lr * g / (|g| + eps).
        let lr = 0.01f32;
        let g = [0.5f32, -0.25, 2.0];
        let p0 = [1.0f32, 1.0, 1.0];
        let mut params = single_param(&p0);
        let grads = single_param(&g);
        let mut state = AdamState::new(AdamConfig { weight_decay: 0.0, ..Default::default() });
        state.step(&mut params, &grads, lr);
        for i in 0..3 {
            let want = p0[i] - lr * g[i] / (g[i].abs() + 1e-8);
            let got = params["w"].data()[i];
            assert!((got - want).abs() < 1e-6, "coord {i}: {got} vs {want}");
        }
    }

    #[test]
    fn identical_calls_from_identical_state_agree() {
        let run = || {
            let mut params = single_param(&[0.3, -0.7]);
            let grads = single_param(&[0.11, 0.23]);
            let mut state = AdamState::new(AdamConfig::default());
            state.step(&mut params, &grads, 1e-3);
            state.step(&mut params, &grads, 1e-3);
            params["w"].data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn decay_is_decoupled_and_applied_before_update() {
        // With zero gradient the update term vanishes; only decay acts.
        let mut params = single_param(&[2.0]);
        let grads = single_param(&[0.0]);
        let mut state = AdamState::new(AdamConfig { weight_decay: 0.2, ..Default::default() });
        state.step(&mut params, &grads, 0.1);
        let got = params["w"].data()[0];
        assert!((got - 2.0 * (1.0 - 0.1 * 0.2)).abs() < 1e-7, "got {got}");
    }

    #[test]
    fn schedule_endpoints_and_continuity() {
        let s = LrSchedule::new(100, 1000, 5e-5);
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(100), 5e-5);
        assert!(s.lr_at(1000).abs() < 1e-12);
        // continuity at the warmup boundary
        let before = s.lr_at(99);
        let at = s.lr_at(100);
        assert!((at - before) < 5e-5 * 0.011, "ramp is linear in 1/warmup steps");
        // halfway through the cosine phase: base/2
        let mid = s.lr_at(100 + 450);
        assert!((mid - 2.5e-5).abs() < 1e-9);
    }

    #[test]
    #[should_panic(expected = "beyond schedule end")]
    fn step_out_of_range_panics() {
        let s = LrSchedule::new(10, 20, 1e-3);
        let _ = s.lr_at(21);
    }

    #[test]
    #[should_panic(expected = "schedule requires")]
    fn zero_warmup_rejected() {
        let _ = LrSchedule::new(0, 10, 1e-3);
    }
}
