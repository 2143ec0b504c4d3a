use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A trainable tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParam<T = f32> {
    pub name: String,
    pub weights: Tensor<T>,
    pub gradient: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
}

impl<T: Scalar> LayerParam<T> {
    pub fn new(name: impl Into<String>, weights: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(weights.shape());
        Self {
            name: name.into(),
            gradient: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            weights,
        }
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered parameter collection; order defines checkpoint layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<LayerParam<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, weights: Tensor<T>) -> ParamId {
        self.params.push(LayerParam::new(name, weights));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &LayerParam<T> {
        &self.params[id.0]
    }

    pub fn weights(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].weights
    }

    pub fn params(&self) -> &[LayerParam<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParam<T>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.weights.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.gradient.fill(T::zero());
        }
    }

    /// Adds per-parameter gradients (in store order) into the accumulators.
    pub fn accumulate(&mut self, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.gradient.add_assign(g)?;
        }
        Ok(())
    }

    /// Replaces all weights; shapes must match one to one.
    pub fn load_weights(&mut self, weights: Vec<Tensor<T>>) -> Result<()> {
        if weights.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} weight tensors for {} parameters",
                weights.len(),
                self.params.len()
            )));
        }
        for (p, w) in self.params.iter().zip(&weights) {
            if p.weights.shape() != w.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} expects {:?}, got {:?}",
                    p.name,
                    p.weights.shape(),
                    w.shape()
                )));
            }
        }
        for (p, w) in self.params.iter_mut().zip(weights) {
            p.weights = w;
        }
        Ok(())
    }
}

/// Fan-in scaled uniform initialisation `U(-sqrt(gain / fan_in), sqrt(gain / fan_in))`.
///
/// Draws happen in `f64` so `f32` and `f64` models built from one seed agree.
pub fn uniform_init<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    let limit = (gain / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-limit..=limit)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Updates applied so far.
    pub step: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid Adam configuration {self:?}")))
        }
    }
}

/// One bias-corrected Adam update using the accumulated gradients.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, cfg: &mut AdamConfig) -> Result<()> {
    cfg.validate()?;
    cfg.step += 1;
    let t = cfg.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    for p in params.params_mut() {
        let LayerParam {
            weights,
            gradient,
            adam_m,
            adam_v,
            ..
        } = p;
        for (((w, &g), m), v) in weights
            .data_mut()
            .iter_mut()
            .zip(gradient.data())
            .zip(adam_m.data_mut())
            .zip(adam_v.data_mut())
        {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = m.as_f64() / bias1;
            let v_hat = v.as_f64() / bias2;
            *w = *w - T::from_f64_lossy(cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon));
        }
    }
    Ok(())
}
