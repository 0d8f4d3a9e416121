use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
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
            weight_decay: 1e-2,
        }
    }
}

/// Adam with decoupled weight decay.
///
/// Per step `t`: `m = b1 m + (1-b1) g`, `v = b2 v + (1-b2) g^2`,
/// `p = p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)` with bias-corrected
/// moments. Writing the decay as a factor keeps `g = 0` updates an exact
/// geometric shrink.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        for p in params.iter() {
            match &p.grad {
                None => return Err(Error::MissingGradient(p.name().to_string())),
                Some(g) if !g.is_finite() => return Err(Error::NonFinite { op: "adamw_step" }),
                Some(_) => {}
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| p.value.zeros_like()).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let lr = T::of(c.lr);
        let decay = T::one() - lr * T::of(c.weight_decay);
        let eps = T::of(c.eps);

        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.as_ref().expect("checked above");
            m.expect_shape(p.value.shape(), "adamw_step")?;
            let ms = m.data_mut();
            let vs = v.data_mut();
            for (i, (w, &g)) in p.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                ms[i] = b1 * ms[i] + one_b1 * g;
                vs[i] = b2 * vs[i] + one_b2 * g * g;
                let m_hat = ms[i] / bc1;
                let v_hat = vs[i] / bc2;
                *w = *w * decay - lr * (m_hat / (v_hat.sqrt() + eps));
            }
            if !p.value.is_finite() {
                return Err(Error::NonFinite { op: "adamw_step" });
            }
        }
        Ok(())
    }
}
