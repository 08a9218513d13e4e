//! AdamW with decoupled weight decay and a linear warmup/decay schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{decays, Model};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub bias_correction: bool,
    /// Global gradient-norm clip; off unless set.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            bias_correction: true,
            max_grad_norm: None,
        }
    }
}

/// First and second moments of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimState {
    pub moments: BTreeMap<String, Moments>,
    pub step: u64,
}

/// One AdamW update of a flat parameter slice.
///
/// `step` is the 1-based step count used for bias correction. Decay multiplies
/// θ by `1 − lr·wd` before the adaptive update, so it never passes through the
/// moment estimates.
pub fn adamw_update(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut Moments,
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || moments.m.len() != params.len() || moments.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "adamw update with {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            moments.m.len()
        )));
    }
    let (c1, c2) = if cfg.bias_correction {
        (
            1.0 - cfg.beta1.powi(step as i32),
            1.0 - cfg.beta2.powi(step as i32),
        )
    } else {
        (1.0, 1.0)
    };
    let shrink = 1.0 - lr * weight_decay;
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(moments.m.iter_mut())
        .zip(moments.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        if weight_decay != 0.0 {
            *p *= shrink;
        }
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimState,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            state: OptimState::default(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.state.step
    }

    /// Applies one update to every weight with a gradient, then clears the
    /// gradients.
    pub fn step(&mut self, model: &mut Model, lr: f64) -> Result<()> {
        self.state.step += 1;
        let t = self.state.step;
        let clip = match self.config.max_grad_norm {
            Some(max) => {
                let norm = model
                    .weights()
                    .values()
                    .filter_map(|w| w.grad())
                    .flat_map(|g| g.iter())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / (norm + 1e-6)
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (name, w) in model.weights_mut().iter_mut() {
            let Some(grad) = w.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let grad = if clip != 1.0 {
                grad.into_iter().map(|g| g * clip).collect()
            } else {
                grad
            };
            let n = w.numel();
            let moments = self.state.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let wd = if decays(name) { self.config.weight_decay } else { 0.0 };
            adamw_update(w.data_mut(), &grad, moments, t, lr, &self.config, wd)?;
            w.zero_grad();
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `base_lr` over `warmup_steps`, then linear decay to 0
/// at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {warmup_steps} exceeds total_steps {total_steps}"
            )));
        }
        Ok(Schedule {
            base_lr,
            warmup_steps,
            total_steps,
        })
    }

    /// Learning rate for optimizer step `step` (0-based); 0 past the horizon.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let decay_span = (self.total_steps - self.warmup_steps) as f64;
        self.base_lr * (self.total_steps - step) as f64 / decay_span
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper(wd: f64) -> AdamWConfig {
        AdamWConfig {
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn single_step_hand_recurrence() {
        // m = 0.05, v = 0.00025; m̂ = 0.5, v̂ = 0.25;
        // θ = 1·(1 − 2e-5·0.01) − 2e-5·0.5/(0.5 + 1e-8)
        let expected = (1.0 - 2e-5 * 0.01) - 2e-5 * (0.5 / (0.5 + 1e-8));
        let mut p = [1.0];
        let mut mo = Moments { m: vec![0.0], v: vec![0.0] };
        adamw_update(&mut p, &[0.5], &mut mo, 1, 2e-5, &hyper(0.01), 0.01).unwrap();
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] - 0.999_979_800_000_4).abs() < 1e-12);
        assert!((mo.m[0] - 0.05).abs() < 1e-15 && (mo.v[0] - 0.00025).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = [0.3, -2.0];
        let mut mo = Moments { m: vec![0.0; 2], v: vec![0.0; 2] };
        for t in 1..=5 {
            adamw_update(&mut p, &[0.0, 0.0], &mut mo, t, 1e-3, &hyper(0.0), 0.0).unwrap();
        }
        assert_eq!(p, [0.3, -2.0]);
    }

    #[test]
    fn pure_decay_is_exact_product_for_any_betas() {
        let sched = Schedule::new(0.1, 0, 20).unwrap();
        for (b1, b2, eps) in [(0.9, 0.999, 1e-8), (0.5, 0.9, 1e-3), (0.0, 0.0, 1.0)] {
            let cfg = AdamWConfig {
                beta1: b1,
                beta2: b2,
                eps,
                weight_decay: 0.5,
                ..AdamWConfig::default()
            };
            let mut p = [2.0];
            let mut expect = 2.0;
            let mut mo = Moments { m: vec![0.0], v: vec![0.0] };
            for t in 0..20 {
                let lr = sched.lr_at(t);
                adamw_update(&mut p, &[0.0], &mut mo, t as u64 + 1, lr, &cfg, 0.5).unwrap();
                expect *= 1.0 - lr * 0.5;
                assert_eq!(p[0], expect);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut p = [1.0, 2.0];
        let mut mo = Moments { m: vec![0.0; 2], v: vec![0.0; 2] };
        assert!(matches!(
            adamw_update(&mut p, &[1.0], &mut mo, 1, 0.1, &hyper(0.0), 0.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn schedule_examples() {
        let s = Schedule::new(2e-5, 0, 1284).unwrap();
        assert_eq!(s.lr_at(0), 2e-5);
        assert_eq!(s.lr_at(1284), 0.0);
        assert_eq!(s.lr_at(5000), 0.0);
        assert!((s.lr_at(642) - 1e-5).abs() < 1e-20);
        let w = Schedule::new(1.0, 10, 20).unwrap();
        assert_eq!(w.lr_at(0), 0.0);
        assert_eq!(w.lr_at(5), 0.5);
        assert_eq!(w.lr_at(10), 1.0);
        assert_eq!(w.lr_at(15), 0.5);
        assert!(Schedule::new(1.0, 30, 20).is_err());
    }

    #[test]
    fn quadratic_descends_monotonically_after_warm_start() {
        // f(x, y) = 2x² + 0.5y² + xy
        let loss = |p: &[f64]| 2.0 * p[0] * p[0] + 0.5 * p[1] * p[1] + p[0] * p[1];
        let grad = |p: &[f64]| vec![4.0 * p[0] + p[1], p[1] + p[0]];
        let cfg = hyper(0.0);
        let sched = Schedule::new(0.01, 0, 200).unwrap();
        let mut p = vec![1.5, -2.0];
        let start = loss(&p);
        let mut mo = Moments { m: vec![0.0; 2], v: vec![0.0; 2] };
        let mut prev = loss(&p);
        for t in 0..200 {
            let g = grad(&p);
            adamw_update(&mut p, &g, &mut mo, t as u64 + 1, sched.lr_at(t), &cfg, 0.0).unwrap();
            let now = loss(&p);
            if t >= 10 {
                assert!(now <= prev + 1e-9, "step {t}: {prev} -> {now}");
            }
            prev = now;
        }
        assert!(prev < 0.25 * start);
    }

    #[test]
    fn optimizer_skips_decay_for_bias_and_norm() {
        use crate::encoder::ModelConfig;
        let cfg = ModelConfig {
            num_layers: 1,
            hidden_size: 4,
            num_heads: 2,
            ff_size: 4,
            vocab_size: 8,
            max_positions: 4,
            type_vocab_size: 2,
            num_labels: 2,
            layer_norm_eps: 1e-12,
            dropout: 0.0,
        };
        let mut model = Model::init(cfg, 1).unwrap();
        model.weights_mut().get_mut("pooler.bias").unwrap().data_mut().fill(1.0);
        let before = model.clone();
        for w in model.weights_mut().values_mut() {
            let n = w.numel();
            w.accumulate_grad(&vec![0.0; n]).unwrap();
        }
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.5,
            ..AdamWConfig::default()
        });
        opt.step(&mut model, 0.1).unwrap();
        assert_eq!(opt.steps(), 1);
        assert_eq!(model.weight("pooler.bias"), before.weight("pooler.bias"));
        let w0 = before.weight("pooler.weight").unwrap().data();
        let w1 = model.weight("pooler.weight").unwrap().data();
        for (a, b) in w0.iter().zip(w1) {
            assert_eq!(*b, a * (1.0 - 0.05));
        }
        assert!(model.weights().values().all(|w| w.grad().is_none()));
    }
}
