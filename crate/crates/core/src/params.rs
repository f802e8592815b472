//! Named parameter tensors and the Adam optimizer that updates them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{GradTape, Gradients, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Dropout scales are clamped non-negative after every update; weights are
/// unconstrained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Sigma,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    /// Entries where the mask is zero are never updated and stay zero.
    pub mask: Option<Tensor<S>>,
    pub role: ParamRole,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<S = f32> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.push(Param { name: name.into(), value, mask: None, role: ParamRole::Weight, trainable: true })
    }

    pub fn push(&mut self, param: Param<S>) -> ParamId {
        debug_assert!(self.find(&param.name).is_none(), "duplicate parameter {}", param.name);
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Replace a value, checking the shape and re-applying the mask.
    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        let p = &mut self.params[id.0];
        p.value.expect_same_shape(&value, "ParamStore::set")?;
        p.value = value;
        if let Some(mask) = &p.mask {
            p.value = p.value.mul(mask)?;
        }
        Ok(())
    }

    /// Total number of scalar entries that the optimizer may change.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| match &p.mask {
                Some(m) => m.data().iter().filter(|&&k| k != S::zero()).count(),
                None => p.value.len(),
            })
            .sum()
    }

    /// Register every parameter as a tape leaf. Frozen parameters become
    /// constants so no gradient is computed for them.
    pub fn bind<'a>(&'a self, tape: &mut GradTape<'a, S>) -> Vec<Var> {
        self.params.iter().map(|p| if p.trainable { tape.param(&p.value) } else { tape.constant_ref(&p.value) }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam moment estimates for every parameter of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, store: &ParamStore<S>) -> Self {
        let zeros = || store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> (&Tensor<S>, &Tensor<S>) {
        (&self.m[id.0], &self.v[id.0])
    }

    /// Restore optimizer state (from a checkpoint).
    pub fn restore(&mut self, step: u64, m: Vec<Tensor<S>>, v: Vec<Tensor<S>>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Format("optimizer state does not match parameter count".into()));
        }
        for (old, new) in self.m.iter().zip(&m).chain(self.v.iter().zip(&v)) {
            old.expect_same_shape(new, "Adam::restore")?;
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update from the gradients of the tape leaves returned by
    /// [`ParamStore::bind`]. Parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore<S>, vars: &[Var], grads: &Gradients<S>) -> Result<()> {
        if vars.len() != store.len() {
            return Err(Error::invalid("bound variables do not match the parameter store"));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let lr = S::lit(c.learning_rate * bc2.sqrt() / bc1);
        let eps = S::lit(c.epsilon * bc2.sqrt());
        for (i, p) in store.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.get(vars[i]) else { continue };
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let mask = p.mask.as_ref().map(|k| k.data());
            for (j, (w, &gj)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                if mask.is_some_and(|k| k[j] == S::zero()) {
                    continue;
                }
                m[j] = b1 * m[j] + (S::one() - b1) * gj;
                v[j] = b2 * v[j] + (S::one() - b2) * gj * gj;
                *w = *w - lr * m[j] / (v[j].sqrt() + eps);
                if p.role == ParamRole::Sigma && *w < S::zero() {
                    *w = S::zero();
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic_and_respects_mask() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.0]).unwrap());
        store.param_mut(id).mask = Some(Tensor::new(vec![3], vec![1.0, 1.0, 0.0]).unwrap());
        let mut adam = Adam::new(AdamConfig { learning_rate: 0.05, ..Default::default() }, &store);
        for _ in 0..2000 {
            let grads;
            let vars;
            {
                let mut tape = GradTape::new();
                vars = store.bind(&mut tape);
                let target = tape.constant(Tensor::full(&[3], 3.0));
                let d = tape.sub(vars[0], target).unwrap();
                let sq = tape.square(d);
                let loss = tape.sum(sq);
                grads = tape.backward(loss).unwrap();
            }
            adam.step(&mut store, &vars, &grads).unwrap();
        }
        let w = store.get(id).data();
        assert!((w[0] - 3.0).abs() < 1e-3 && (w[1] - 3.0).abs() < 1e-3, "{w:?}");
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn sigma_is_clamped() {
        let mut store = ParamStore::<f32>::new();
        let id =
            store.push(Param { name: "s".into(), value: Tensor::full(&[1], 1e-4), mask: None, role: ParamRole::Sigma, trainable: true });
        let mut adam = Adam::new(AdamConfig { learning_rate: 0.1, ..Default::default() }, &store);
        let grads;
        let vars;
        {
            let mut tape = GradTape::new();
            vars = store.bind(&mut tape);
            let loss = tape.sum(vars[0]);
            grads = tape.backward(loss).unwrap();
        }
        adam.step(&mut store, &vars, &grads).unwrap();
        assert_eq!(store.get(id).data(), &[0.0]);
    }
}
