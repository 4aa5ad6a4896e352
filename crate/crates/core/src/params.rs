//! Named trainable tensors and the momentum SGD update.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    value: Tensor,
    grad: Option<Tensor>,
    velocity: Option<Tensor>,
}

/// Trainable parameters keyed by unique name. Iteration order is the
/// lexicographic name order, which keeps checkpoints and updates stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    slots: BTreeMap<String, Slot>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(Error::invalid("params", format!("duplicate parameter `{name}`")));
        }
        self.slots.insert(
            name,
            Slot {
                value,
                grad: None,
                velocity: None,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.slots
            .get(name)
            .map(|s| &s.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.slots
            .get_mut(name)
            .map(|s| &mut s.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).and_then(|s| s.grad.as_ref())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn scalar_count(&self) -> usize {
        self.slots.values().map(|s| s.value.shape().len()).sum()
    }

    /// Places a parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        Ok(tape.param(name, self.get(name)?.clone()))
    }

    /// Accumulates gradients of every parameter leaf on `tape`.
    pub fn collect_grads(&mut self, tape: &Tape) -> Result<()> {
        for (name, grad) in tape.param_grads() {
            let Some(grad) = grad else { continue };
            let slot = self
                .slots
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            match &mut slot.grad {
                Some(acc) => acc.add_assign(grad)?,
                none => *none = Some(grad.clone()),
            }
        }
        Ok(())
    }

    /// Adds `decay * value` to the gradient of each parameter selected by `filter`.
    pub fn apply_weight_decay(&mut self, decay: f64, filter: impl Fn(&str) -> bool) {
        if decay == 0.0 {
            return;
        }
        for (name, slot) in self.slots.iter_mut() {
            if !filter(name) {
                continue;
            }
            if let Some(g) = &mut slot.grad {
                for (gv, pv) in g.data_mut().iter_mut().zip(slot.value.data()) {
                    *gv += decay * pv;
                }
            }
        }
    }

    /// Gives a zero gradient to every parameter the last pass did not reach.
    pub fn zero_fill_missing_grads(&mut self) {
        for slot in self.slots.values_mut() {
            if slot.grad.is_none() {
                slot.grad = Some(Tensor::zeros(slot.value.shape()));
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad = None;
        }
    }

    /// `v <- momentum * v - lr * grad; p <- p + v`, then clears gradients.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid("sgd_step", format!("learning rate {lr} must be >= 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("sgd_step", format!("momentum {momentum} outside [0, 1)")));
        }
        if let Some((name, _)) = self.slots.iter().find(|(_, s)| s.grad.is_none()) {
            return Err(Error::MissingGrad(name.clone()));
        }
        for slot in self.slots.values_mut() {
            let grad = slot.grad.take().expect("checked above");
            if lr == 0.0 {
                continue;
            }
            let velocity = slot
                .velocity
                .get_or_insert_with(|| Tensor::zeros(slot.value.shape()));
            for ((p, v), g) in slot
                .value
                .data_mut()
                .iter_mut()
                .zip(velocity.data_mut())
                .zip(grad.data())
            {
                *v = momentum * *v - lr * g;
                *p += *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn single(v: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("p", Tensor::scalar(v)).unwrap();
        p
    }

    fn set_grad(params: &mut ModelParams, g: f64) {
        params.slots.get_mut("p").unwrap().grad = Some(Tensor::scalar(g));
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut p = single(1.25);
        set_grad(&mut p, 123.0);
        p.sgd_step(0.0, 0.9).unwrap();
        assert_eq!(p.get("p").unwrap().item().to_bits(), 1.25f64.to_bits());
        assert!(p.grad("p").is_none());
    }

    #[test]
    fn plain_step_arithmetic() {
        let mut p = single(1.0);
        set_grad(&mut p, 2.0);
        p.sgd_step(0.1, 0.0).unwrap();
        assert!((p.get("p").unwrap().item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut p = single(1.0);
        p.insert("other", Tensor::scalar(0.0)).unwrap();
        set_grad(&mut p, 1.0);
        match p.sgd_step(0.1, 0.9) {
            Err(Error::MissingGrad(name)) => assert_eq!(name, "other"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let mut p = single(1.0);
        set_grad(&mut p, 1.0);
        assert!(p.sgd_step(-0.1, 0.0).is_err());
        assert!(p.sgd_step(0.1, 1.0).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = single(1.0);
        assert!(p.insert("p", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn quadratic_bowl_descends_monotonically() {
        let shape = Shape::new(1, 1, 1, 4);
        let mut params = ModelParams::new();
        params
            .insert("w", Tensor::from_vec(shape, vec![3.0, -2.0, 0.5, 4.0]).unwrap())
            .unwrap();
        let curvature = [1.0, 2.0, 0.5, 1.5];
        let loss_of = |w: &Tensor| -> f64 {
            w.data().iter().zip(curvature).map(|(x, a)| 0.5 * a * x * x).sum()
        };
        let mut prev = loss_of(params.get("w").unwrap());
        for _ in 0..100 {
            let mut tape = Tape::new();
            let w = params.bind(&mut tape, "w").unwrap();
            let a = tape.constant(Tensor::from_vec(shape, curvature.to_vec()).unwrap());
            let aw = tape.mul(a, w).unwrap();
            let sq = tape.mul(aw, w).unwrap();
            let s = tape.sum(sq);
            let loss = tape.scale(s, 0.5);
            tape.backward(loss).unwrap();
            params.collect_grads(&tape).unwrap();
            params.sgd_step(0.1, 0.0).unwrap();
            let cur = loss_of(params.get("w").unwrap());
            assert!(cur < prev, "loss rose from {prev} to {cur}");
            prev = cur;
        }
    }
}
