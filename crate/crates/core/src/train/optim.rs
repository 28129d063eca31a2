use crate::error::{Error, Result};
use crate::model::Parameter;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied to matrices only.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

/// Adam with bias correction and decoupled weight decay. Moments are kept
/// per parameter, aligned with the model's parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    steps: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    /// Positions that must stay exactly zero (pruned weights).
    frozen: Vec<Option<Vec<bool>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Parameter<T>], config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            m: params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect(),
            frozen: vec![None; params.len()],
        }
    }

    /// Restores optimizer state, e.g. from a checkpoint.
    pub fn from_state(config: AdamConfig, steps: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::ModelMismatch(
                "first and second moments disagree in shape".into(),
            ));
        }
        let n = m.len();
        Ok(Self {
            config,
            steps,
            m,
            v,
            frozen: vec![None; n],
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// Marks positions (`true`) that receive no update; their values are
    /// held at zero.
    pub fn set_frozen(&mut self, frozen: Vec<Option<Vec<bool>>>) -> Result<()> {
        if frozen.len() != self.m.len() {
            return Err(Error::ModelMismatch(format!(
                "{} masks for {} parameters",
                frozen.len(),
                self.m.len()
            )));
        }
        for (f, m) in frozen.iter().zip(&self.m) {
            if f.as_ref().is_some_and(|f| f.len() != m.len()) {
                return Err(Error::ModelMismatch("mask length differs from parameter size".into()));
            }
        }
        self.frozen = frozen;
        Ok(())
    }

    /// Applies one update with learning rate `lr` using each parameter's
    /// accumulated `grad`. Parameters without a gradient are skipped.
    pub fn step(&mut self, params: &mut [Parameter<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::ModelMismatch(format!(
                "optimizer has {} slots, model has {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        for p in params.iter() {
            if let Some(g) = p.tensor.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let eps = T::of(c.eps);
        let lr_t = T::of(lr);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.tensor.requires_grad() {
                continue;
            }
            let decay = if p.tensor.rank() >= 2 {
                T::of(lr * c.weight_decay)
            } else {
                T::zero()
            };
            let Some(g) = p.tensor.grad().map(<[T]>::to_vec) else {
                continue;
            };
            let frozen = self.frozen[i].as_deref();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = p.tensor.data_mut();
            for j in 0..w.len() {
                if frozen.is_some_and(|f| f[j]) {
                    w[j] = T::zero();
                    continue;
                }
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w[j] = w[j] - lr_t * (m_hat / (v_hat.sqrt() + eps)) - decay * w[j];
            }
        }
        Ok(())
    }
}

/// Scales all gradients so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut [Parameter<T>], max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for p in params.iter_mut() {
            if let Some(g) = p.tensor.grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}
