//! Named trainable parameters and the optimizers that update them.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};

/// One trainable tensor plus its optimizer state.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub shape: Vec<usize>,
    pub values: Arc<Vec<f64>>,
    pub grad: Option<Vec<f64>>,
    /// First/second moment buffers (Adam) or the running square average
    /// (RMSProp); allocated on first use.
    momentum: Vec<f64>,
    second_moment: Vec<f64>,
}

impl Parameter {
    fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        Parameter {
            shape,
            values: Arc::new(values),
            grad: None,
            momentum: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Mutable view of the values. Clones the buffer only if a tape still
    /// holds a reference from an earlier forward pass.
    pub fn values_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.values)
    }
}

/// Named map of trainable tensors. Iteration order is the lexicographic
/// name order, which keeps every update and serialization deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    params: BTreeMap<String, Parameter>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet::default()
    }

    /// Insert a parameter. Names are unique; shapes never change later.
    pub fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        if values.len() != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch {
                op: "parameter",
                left: shape.to_vec(),
                right: vec![values.len()],
            });
        }
        self.params
            .insert(name.to_string(), Parameter::new(shape.to_vec(), values));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.len()).sum()
    }

    /// Register a parameter on a tape as a differentiable shared leaf.
    pub fn bind(&self, tape: &mut Tape, name: &str, trainable: bool) -> Result<TensorId> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        tape.shared_leaf(Arc::clone(&p.values), &p.shape, trainable)
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        if grad.len() != p.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                left: p.shape.clone(),
                right: vec![grad.len()],
            });
        }
        match &mut p.grad {
            Some(g) => {
                for (gv, &dv) in g.iter_mut().zip(grad) {
                    *gv += dv;
                }
            }
            None => p.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Concatenated values in name order; used for fingerprints and tests.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for p in self.params.values() {
            out.extend_from_slice(&p.values);
        }
        out
    }
}

/// Update rule configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum OptimizerRule {
    Sgd { lr: f64 },
    Adam { lr: f64 },
    RmsProp { lr: f64 },
}

impl OptimizerRule {
    /// Adam with the default learning rate used for the conv models.
    pub fn adam_default() -> Self {
        OptimizerRule::Adam { lr: 0.003 }
    }

    /// RMSProp with the default learning rate used for the recurrent models.
    pub fn rmsprop_default() -> Self {
        OptimizerRule::RmsProp { lr: 0.002 }
    }

    pub fn lr(&self) -> f64 {
        match self {
            OptimizerRule::Sgd { lr } | OptimizerRule::Adam { lr } | OptimizerRule::RmsProp { lr } => *lr,
        }
    }

    pub fn with_lr(&self, lr: f64) -> Self {
        match self {
            OptimizerRule::Sgd { .. } => OptimizerRule::Sgd { lr },
            OptimizerRule::Adam { .. } => OptimizerRule::Adam { lr },
            OptimizerRule::RmsProp { .. } => OptimizerRule::RmsProp { lr },
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const RMSPROP_ALPHA: f64 = 0.99;
const RMSPROP_EPS: f64 = 1e-8;

/// Stateful optimizer; owns the global step counter for bias correction.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub rule: OptimizerRule,
    step_count: u64,
}

impl Optimizer {
    pub fn new(rule: OptimizerRule) -> Self {
        Optimizer { rule, step_count: 0 }
    }

    /// Apply one update to every parameter, then zero the gradients.
    /// A parameter without a gradient is a contract error: the caller
    /// forgot to run backward or dropped a binding.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        for (name, p) in params.iter_mut() {
            let grad = p
                .grad
                .take()
                .ok_or_else(|| Error::contract(format!("parameter `{name}` has no gradient")))?;
            match self.rule {
                OptimizerRule::Sgd { lr } => {
                    let values = Arc::make_mut(&mut p.values);
                    for (v, g) in values.iter_mut().zip(&grad) {
                        *v -= lr * g;
                    }
                }
                OptimizerRule::Adam { lr } => {
                    if p.momentum.is_empty() {
                        p.momentum = vec![0.0; grad.len()];
                        p.second_moment = vec![0.0; grad.len()];
                    }
                    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
                    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
                    let values = Arc::make_mut(&mut p.values);
                    for i in 0..grad.len() {
                        let g = grad[i];
                        p.momentum[i] = ADAM_BETA1 * p.momentum[i] + (1.0 - ADAM_BETA1) * g;
                        p.second_moment[i] =
                            ADAM_BETA2 * p.second_moment[i] + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = p.momentum[i] / bc1;
                        let v_hat = p.second_moment[i] / bc2;
                        values[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
                OptimizerRule::RmsProp { lr } => {
                    if p.second_moment.is_empty() {
                        p.second_moment = vec![0.0; grad.len()];
                    }
                    let values = Arc::make_mut(&mut p.values);
                    for i in 0..grad.len() {
                        let g = grad[i];
                        p.second_moment[i] =
                            RMSPROP_ALPHA * p.second_moment[i] + (1.0 - RMSPROP_ALPHA) * g * g;
                        values[i] -= lr * g / (p.second_moment[i].sqrt() + RMSPROP_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.insert("w", &[1], vec![value]).unwrap();
        ps
    }

    #[test]
    fn sgd_hand_example() {
        // lr=0.1, w=1, grad=2 -> w=0.8
        let mut ps = single_param(1.0);
        ps.accumulate_grad("w", &[2.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerRule::Sgd { lr: 0.1 });
        opt.step(&mut ps).unwrap();
        assert!((ps.get("w").unwrap().values[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_leaves_parameter_unchanged() {
        let mut ps = single_param(1.5);
        ps.accumulate_grad("w", &[0.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerRule::Sgd { lr: 0.1 });
        opt.step(&mut ps).unwrap();
        assert_eq!(ps.get("w").unwrap().values[0], 1.5);
    }

    #[test]
    fn adam_first_step_hand_computation() {
        // After one step: m = (1-b1) g, v = (1-b2) g^2, with bias correction
        // m_hat = g, v_hat = g^2, so the update is -lr * g / (|g| + eps).
        let g = 0.37;
        let lr = 0.003;
        let mut ps = single_param(2.0);
        ps.accumulate_grad("w", &[g]).unwrap();
        let mut opt = Optimizer::new(OptimizerRule::Adam { lr });
        opt.step(&mut ps).unwrap();
        let expected = 2.0 - lr * g / (g.abs() + ADAM_EPS);
        assert!((ps.get("w").unwrap().values[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn rmsprop_first_step_hand_computation() {
        let g = -1.2;
        let lr = 0.002;
        let mut ps = single_param(0.5);
        ps.accumulate_grad("w", &[g]).unwrap();
        let mut opt = Optimizer::new(OptimizerRule::RmsProp { lr });
        opt.step(&mut ps).unwrap();
        let v = (1.0 - RMSPROP_ALPHA) * g * g;
        let expected = 0.5 - lr * g / (v.sqrt() + RMSPROP_EPS);
        assert!((ps.get("w").unwrap().values[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut ps = single_param(1.0);
        let mut opt = Optimizer::new(OptimizerRule::Sgd { lr: 0.1 });
        assert!(opt.step(&mut ps).is_err());
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut ps = ParameterSet::new();
        ps.insert("w", &[1], vec![0.0]).unwrap();
        assert!(ps.insert("w", &[1], vec![0.0]).is_err());
    }

    #[test]
    fn grads_cleared_after_step() {
        let mut ps = single_param(1.0);
        ps.accumulate_grad("w", &[1.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerRule::Sgd { lr: 0.1 });
        opt.step(&mut ps).unwrap();
        assert!(ps.get("w").unwrap().grad.is_none());
    }
}
