//! Rectified Adam wrapped in Lookahead.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RAdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl RAdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// Variance-rectified Adam over one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RAdam {
    pub config: RAdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl RAdam {
    pub fn new(config: RAdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Length of the approximated simple moving average at step t.
    pub fn rho(beta2: f64, t: u64) -> f64 {
        let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
        let b = beta2.powi(t as i32);
        rho_inf - 2.0 * t as f64 * b / (1.0 - b)
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        if theta.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::shape(
                "optimizer state and parameters disagree in length",
            ));
        }
        let RAdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.t += 1;
        let t = self.t;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
        let rho = Self::rho(beta2, t);
        let rect = (rho > 4.0).then(|| {
            (((rho - 4.0) * (rho - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho))
                .sqrt()
        });
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            theta[i] -= match rect {
                Some(r) => lr * r * m_hat / (self.v[i].sqrt() / bc2.sqrt() + eps),
                None => lr * m_hat,
            };
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LookaheadConfig {
    pub k: usize,
    pub alpha: f64,
}

impl Default for LookaheadConfig {
    fn default() -> Self {
        Self { k: 5, alpha: 0.5 }
    }
}

/// Slow weights pulled toward the fast weights every k inner steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Lookahead {
    pub config: LookaheadConfig,
    slow: Vec<f64>,
    count: usize,
}

impl Lookahead {
    pub fn new(config: LookaheadConfig, initial: &[f64]) -> Result<Self> {
        if config.k == 0 || !(0.0..=1.0).contains(&config.alpha) {
            return Err(Error::Config(format!(
                "invalid lookahead settings {config:?}"
            )));
        }
        Ok(Self {
            config,
            slow: initial.to_vec(),
            count: 0,
        })
    }

    /// Call after every inner step; returns true when a sync happened.
    pub fn after_step(&mut self, fast: &mut [f64]) -> bool {
        self.count += 1;
        if !self.count.is_multiple_of(self.config.k) {
            return false;
        }
        let a = self.config.alpha;
        for (s, f) in self.slow.iter_mut().zip(fast.iter_mut()) {
            *s = (1.0 - a) * *s + a * *f;
            *f = *s;
        }
        true
    }
}

/// RAdam inside Lookahead, applied to the trainable parameters of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    inner: RAdam,
    outer: Lookahead,
}

fn flatten(store: &ParamStore) -> (Vec<f64>, Vec<f64>) {
    let mut v = Vec::new();
    let mut g = Vec::new();
    for (_, p) in store.iter().filter(|(_, p)| p.trainable) {
        v.extend_from_slice(p.value.data());
        g.extend_from_slice(p.grad.data());
    }
    (v, g)
}

fn scatter(store: &mut ParamStore, flat: &[f64]) {
    let mut at = 0;
    for p in store.iter_mut().filter(|p| p.trainable) {
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
}

impl Optimizer {
    pub fn new(radam: RAdamConfig, lookahead: LookaheadConfig, store: &ParamStore) -> Result<Self> {
        radam.validate()?;
        let (v, _) = flatten(store);
        Ok(Self {
            inner: RAdam::new(radam, v.len()),
            outer: Lookahead::new(lookahead, &v)?,
        })
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let (mut v, g) = flatten(store);
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain("non-finite gradient"));
        }
        self.inner.step(&mut v, &g)?;
        self.outer.after_step(&mut v);
        scatter(store, &v);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rho_crosses_four_at_step_five() {
        let r: Vec<bool> = (1..=7).map(|t| RAdam::rho(0.999, t) > 4.0).collect();
        assert_eq!(r, [false, false, false, false, true, true, true]);
    }

    /// Scalar reference run written out independently of the vectorized step.
    fn reference(grads: &[f64], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let (mut m, mut v, mut th) = (0.0, 0.0, 1.0);
        let mut out = Vec::new();
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powf(t));
            let rho = rho_inf - 2.0 * t * b2.powf(t) / (1.0 - b2.powf(t));
            if rho > 4.0 {
                let vh = (v / (1.0 - b2.powf(t))).sqrt();
                let r = ((rho - 4.0) * (rho - 2.0) * rho_inf
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho))
                    .sqrt();
                th -= lr * r * mh / (vh + eps);
            } else {
                th -= lr * mh;
            }
            out.push(th);
        }
        out
    }

    #[test]
    fn radam_matches_scalar_reference() {
        let grads: Vec<f64> = (0..40).map(|i| ((i as f64) * 0.7).sin() + 0.3).collect();
        let want = reference(&grads, 0.01);
        let mut opt = RAdam::new(
            RAdamConfig {
                lr: 0.01,
                ..Default::default()
            },
            1,
        );
        let mut th = [1.0];
        for (g, w) in grads.iter().zip(&want) {
            opt.step(&mut th, &[*g]).unwrap();
            assert!((th[0] - w).abs() < 1e-12, "{} vs {}", th[0], w);
        }
    }

    #[test]
    fn early_steps_are_sgd_with_momentum() {
        let mut opt = RAdam::new(
            RAdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            1,
        );
        let mut th = [0.0];
        opt.step(&mut th, &[2.0]).unwrap();
        // m̂ equals the first gradient exactly.
        assert!((th[0] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn lookahead_hand_trace() {
        let mut la = Lookahead::new(LookaheadConfig { k: 2, alpha: 0.5 }, &[0.0]).unwrap();
        let mut fast = [1.0];
        assert!(!la.after_step(&mut fast));
        fast[0] = 4.0;
        assert!(la.after_step(&mut fast));
        assert_eq!(fast, [2.0]);
        fast[0] = 3.0;
        la.after_step(&mut fast);
        fast[0] = 6.0;
        la.after_step(&mut fast);
        assert_eq!(fast, [4.0]);
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(Lookahead::new(LookaheadConfig { k: 0, alpha: 0.5 }, &[]).is_err());
        assert!(RAdamConfig {
            lr: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn optimizer_leaves_buffers_alone() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", crate::autodiff::Tensor::full(&[2], 1.0))
            .unwrap();
        let b = store
            .add_buffer("running", crate::autodiff::Tensor::full(&[2], 5.0))
            .unwrap();
        store
            .get_mut(w)
            .grad
            .data_mut()
            .copy_from_slice(&[1.0, -1.0]);
        store
            .get_mut(b)
            .grad
            .data_mut()
            .copy_from_slice(&[1.0, 1.0]);
        let mut opt = Optimizer::new(
            RAdamConfig {
                lr: 0.5,
                ..Default::default()
            },
            LookaheadConfig::default(),
            &store,
        )
        .unwrap();
        opt.step(&mut store).unwrap();
        assert_eq!(store.value(w).data(), &[0.5, 1.5]);
        assert_eq!(store.value(b).data(), &[5.0, 5.0]);
    }
}
