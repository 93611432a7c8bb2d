//! AdamW with decoupled weight decay, keyed by tensor name.

use std::collections::BTreeMap;

use ndarray::Array2;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..Default::default()
        }
    }
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Advance the step counter; call once per optimization step before
    /// applying the per-tensor updates of that step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Override the learning rate (for schedules).
    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn update(&mut self, name: &str, param: &mut Array2<f64>, grad: &Array2<f64>) {
        debug_assert!(self.step > 0, "begin_step before update");
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Array2::zeros(param.raw_dim()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Array2::zeros(param.raw_dim()));
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let lr = self.cfg.lr;
        let wd = self.cfg.weight_decay;
        ndarray::Zip::from(param)
            .and(m)
            .and(v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + wd * *p);
            });
    }
}

/// Cosine decay from `lr` to `floor_frac * lr` across `total` steps.
pub fn cosine_lr(lr: f64, step: u64, total: u64, floor_frac: f64) -> f64 {
    if total == 0 {
        return lr;
    }
    let progress = step as f64 / total as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    lr * (floor_frac + (1.0 - floor_frac) * cos)
}
