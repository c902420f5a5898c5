use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer over a fixed, named set of variables. The
/// moment estimates are exposed so they can be checkpointed.
#[derive(Debug)]
pub struct Adam {
    config: AdamConfig,
    vars: Vec<(String, Var)>,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", config.lr)));
        }
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, var) in &vars {
            first.insert(name.clone(), var.zeros_like()?);
            second.insert(name.clone(), var.zeros_like()?);
        }
        Ok(Self {
            config,
            vars,
            first,
            second,
            steps: 0,
        })
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// Replaces the learning rate used by subsequent steps.
    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from `grads`; variables without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.steps as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for (name, var) in &self.vars {
            let Some(g) = grads.get(var) else { continue };
            // Gradients carry their graph; detaching keeps moments from
            // chaining every step's graph together.
            let g = g.detach();
            let m = self.first.get_mut(name).expect("moment registered");
            *m = ((&*m * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = self.second.get_mut(name).expect("moment registered");
            *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&*m / bias1)?;
            let v_hat = (&*v / bias2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
        }
        Ok(())
    }

    /// Moment tensors keyed `m/<name>` and `v/<name>`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.first {
            out.insert(format!("m/{k}"), t.clone());
        }
        for (k, t) in &self.second {
            out.insert(format!("v/{k}"), t.clone());
        }
        out
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>, steps: u64) -> Result<()> {
        for (prefix, moments) in [("m", &mut self.first), ("v", &mut self.second)] {
            for (name, t) in moments.iter_mut() {
                let key = format!("{prefix}/{name}");
                let loaded = state
                    .get(&key)
                    .ok_or_else(|| Error::ShapeMismatch(format!("optimizer state missing {key}")))?;
                if loaded.dims() != t.dims() {
                    return Err(Error::ShapeMismatch(format!("optimizer state {key} has wrong shape")));
                }
                *t = loaded.clone();
            }
        }
        self.steps = steps;
        Ok(())
    }
}
