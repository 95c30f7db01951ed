//! AdamW with decoupled weight decay, global-norm clipping and a cosine
//! learning-rate schedule.

use crate::error::{Error, NumericStage, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter tensor plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        OptimizerState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// Moment lengths must mirror the parameter tensors.
    pub fn matches(&self, params: &[Tensor]) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.len() == p.numel() && v.len() == p.numel())
    }
}

/// Global L2 norm over every gradient entry.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm observed before clipping.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> Result<f64> {
    if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite {
            op: "clip_gradients",
            tensor: i,
            stage: NumericStage::Gradient,
        });
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    Ok(norm)
}

/// One bias-corrected AdamW update:
/// `p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p`.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() || !state.matches(params) {
        return Err(Error::usage("optimizer state, gradients and parameters are misaligned"));
    }
    if let Some(i) = params.iter().zip(grads).position(|(p, g)| p.numel() != g.len()) {
        return Err(Error::usage(format!("gradient {i} does not match its parameter shape")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x -= lr * (m_hat / (v_hat.sqrt() + cfg.eps)) + lr * cfg.weight_decay * *x;
        }
    }
    Ok(())
}

/// `base · ½(1 + cos(π·step/total))`, floored at zero; `step` saturates at `total`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    (base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clipping_examples() {
        let mut g = vec![vec![1.2, 1.6]];
        let n = clip_gradients(&mut g, 1.0).unwrap();
        assert!((n - 2.0).abs() < 1e-15);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[0][1] - 0.8).abs() < 1e-15);

        let mut g = vec![vec![0.3], vec![]];
        clip_gradients(&mut g, 1.0).unwrap();
        assert_eq!(g[0], vec![0.3]);

        let mut g = vec![vec![1.0, f64::NAN]];
        assert_eq!(clip_gradients(&mut g, 1.0).unwrap_err().kind(), "numeric");
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut p = vec![Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut s = OptimizerState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        for _ in 0..5 {
            adamw_step(&mut p, &[vec![0.0; 3]], &mut s, 1e-3, &cfg).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = OptimizerState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(&mut p, &[vec![1.0]], &mut s, 1e-3, &cfg).unwrap();
        // m̂ = 1, v̂ = 1 → update lr / (1 + eps)
        let want = -1e-3 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn decay_alone_shrinks_multiplicatively() {
        let mut p = vec![Tensor::new(&[2], vec![2.0, -4.0]).unwrap()];
        let mut s = OptimizerState::new(&p);
        let cfg = AdamWConfig::default();
        adamw_step(&mut p, &[vec![0.0; 2]], &mut s, 0.1, &cfg).unwrap();
        let f = 1.0 - 0.1 * 0.01;
        assert!((p[0].data()[0] - 2.0 * f).abs() < 1e-15);
        assert!((p[0].data()[1] + 4.0 * f).abs() < 1e-15);
    }

    #[test]
    fn misaligned_shapes_are_usage_errors() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut s = OptimizerState::new(&p);
        let err = adamw_step(&mut p, &[vec![0.0; 3]], &mut s, 0.1, &AdamWConfig::default()).unwrap_err();
        assert_eq!(err.kind(), "usage");
        let err = adamw_step(&mut p, &[], &mut s, 0.1, &AdamWConfig::default()).unwrap_err();
        assert_eq!(err.kind(), "usage");
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(cosine_lr(0, 100, 1e-4), 1e-4);
        assert!(cosine_lr(100, 100, 1e-4).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-4) - 5e-5).abs() < 1e-18);
    }

    proptest! {
        #[test]
        fn post_clip_norm_is_min_of_norm_and_limit(
            grads in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 0..20), 1..6),
            max_norm in 0.1f64..5.0,
        ) {
            let mut g = grads.clone();
            let before = clip_gradients(&mut g, max_norm).unwrap();
            // independent norm recomputation
            let mut sq = 0.0;
            for row in &grads { for v in row { sq += v * v; } }
            prop_assert!((before - sq.sqrt()).abs() <= 1e-12 * sq.sqrt().max(1.0));
            let after = global_norm(&g);
            prop_assert!((after - before.min(max_norm)).abs() < 1e-12);
            prop_assert!(after <= max_norm + 1e-9);
        }

        #[test]
        fn schedule_is_non_increasing(total in 1u64..5000, base in 1e-6f64..1.0) {
            let mut prev = f64::INFINITY;
            for step in (0..=total).step_by((total as usize / 50).max(1)) {
                let lr = cosine_lr(step, total, base);
                prop_assert!(lr <= prev && lr >= 0.0);
                prev = lr;
            }
        }
    }
}
