use super::PretrainConfig;
use crate::error::{Error, Result};
use crate::nn::{ExtraTensor, ModelParameters};

/// Linear warm-up from 0 to the peak over `warmup_steps`, then linear decay
/// to 0 at `total_steps`. Steps past the end clamp to 0.
pub fn lr_schedule(step: usize, config: &PretrainConfig) -> f64 {
    let peak = config.learning_rate_peak;
    let (w, t) = (config.warmup_steps, config.total_steps);
    if step >= t {
        return if w == t && step == t { peak } else { 0.0 };
    }
    if step < w {
        peak * (step as f64 / w as f64)
    } else {
        peak * ((t - step) as f64 / (t - w) as f64)
    }
}

/// Adam moments plus the update counter used for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParameters,
    pub v: ModelParameters,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(params: &ModelParameters) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState {
                m: params.zeros_like(),
                v: params.zeros_like(),
                t: 0,
            },
        }
    }

    /// One update. Tensors whose gradient is identically zero are left
    /// untouched, moments included.
    pub fn step(&mut self, params: &mut ModelParameters, grads: &ModelParameters, lr: f64) -> Result<()> {
        if !params.same_shape(grads) || !params.same_shape(&self.state.m) {
            return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
        }
        self.state.t += 1;
        let t = self.state.t as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let m_all = self.state.m.tensors_mut();
        let v_all = self.state.v.tensors_mut();
        for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(m_all).zip(v_all) {
            if g.is_zero() {
                continue;
            }
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((p, &g), (m, v)) in it {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moments and counter as checkpoint extras.
    pub fn to_extras(&self) -> Vec<ExtraTensor> {
        let mut out = vec![ExtraTensor {
            name: "adam.t".into(),
            dims: vec![1],
            values: vec![self.state.t as f64],
        }];
        for (prefix, set) in [("adam.m.", &self.state.m), ("adam.v.", &self.state.v)] {
            for (name, mat) in set.named() {
                out.push(ExtraTensor {
                    name: format!("{prefix}{name}"),
                    dims: vec![mat.rows(), mat.cols()],
                    values: mat.data().to_vec(),
                });
            }
        }
        out
    }

    /// Restores state written by [`Adam::to_extras`]; missing entries leave
    /// a fresh optimizer.
    pub fn from_extras(params: &ModelParameters, extras: &[ExtraTensor]) -> Result<Self> {
        let mut adam = Self::new(params);
        let find = |n: &str| extras.iter().find(|e| e.name == n);
        let Some(t) = find("adam.t") else {
            return Ok(adam);
        };
        adam.state.t = t.values.first().copied().unwrap_or(0.0) as u64;
        let AdamState { m, v, .. } = &mut adam.state;
        for (prefix, set) in [("adam.m.", m), ("adam.v.", v)] {
            for (name, mat) in set.named_mut() {
                let e = find(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::format("checkpoint", format!("missing {prefix}{name}")))?;
                if e.values.len() != mat.len() {
                    return Err(Error::format("checkpoint", format!("{prefix}{name} has wrong size")));
                }
                mat.data_mut().copy_from_slice(&e.values);
            }
        }
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;

    fn sched(w: usize, t: usize) -> PretrainConfig {
        PretrainConfig {
            warmup_steps: w,
            total_steps: t,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = sched(10, 100);
        assert_eq!(lr_schedule(0, &c), 0.0);
        assert_eq!(lr_schedule(10, &c), 5e-5);
        assert_eq!(lr_schedule(100, &c), 0.0);
        assert!((lr_schedule(5, &c) - 2.5e-5).abs() < 1e-20);
        assert!((lr_schedule(55, &c) - 2.5e-5).abs() < 1e-20);
        let flat = sched(0, 4);
        assert_eq!(lr_schedule(0, &flat), 5e-5);
    }

    #[test]
    fn schedule_is_monotone_on_each_leg() {
        let c = sched(7, 50);
        for s in 0..7 {
            assert!(lr_schedule(s + 1, &c) > lr_schedule(s, &c));
        }
        for s in 7..50 {
            assert!(lr_schedule(s + 1, &c) < lr_schedule(s, &c));
        }
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            hidden_size: 4,
            num_heads: 1,
            ffn_size: 8,
            vocab_size: 8,
            max_freq_features: 2,
            max_time_features: 2,
            max_antenna_features: 2,
            max_seq_len: 8,
            dropout_rate: 0.0,
            tie_mlm_weights: false,
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = tiny();
        let mut p = ModelParameters::init(&cfg, 1);
        let before = p.clone();
        let mut g = p.zeros_like();
        g.pooler_b.data_mut()[0] = 3.0;
        g.pooler_b.data_mut()[1] = -0.5;
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &g, 0.01).unwrap();
        // bias-corrected first step is lr * g / (|g| + eps)
        assert!((p.pooler_b.data()[0] - (before.pooler_b.data()[0] - 0.01)).abs() < 1e-9);
        assert!((p.pooler_b.data()[1] - (before.pooler_b.data()[1] + 0.01)).abs() < 1e-9);
        assert_eq!(p.pooler_b.data()[2], before.pooler_b.data()[2]);
        // every other tensor had zero gradient and is untouched
        for ((n, a), (_, b)) in p.named().into_iter().zip(before.named()) {
            if n != "pooler.bias" {
                assert_eq!(a, b, "{n} moved");
            }
        }
        assert!(adam.state.m.token_embedding.is_zero());
    }

    #[test]
    fn extras_round_trip() {
        let cfg = tiny();
        let mut p = ModelParameters::init(&cfg, 2);
        let mut g = p.clone();
        g.scale(0.1);
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &g, 1e-3).unwrap();
        adam.step(&mut p, &g, 1e-3).unwrap();
        let back = Adam::from_extras(&p, &adam.to_extras()).unwrap();
        assert_eq!(back, adam);
        assert_eq!(Adam::from_extras(&p, &[]).unwrap(), Adam::new(&p));
    }
}
