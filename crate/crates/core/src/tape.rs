//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value, its input
//! handles and (when recording) a [`Backward`] rule. [`Tape::backward`]
//! walks the nodes in reverse recording order, so each rule runs exactly
//! once per pass.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
pub trait Backward: Send + Sync {
    /// Returns the gradient with respect to each input given the upstream
    /// gradient of the output. Entries whose `needs` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

struct Node {
    op: &'static str,
    value: Tensor,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward>>,
    requires_grad: bool,
    param: Option<String>,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    recording: bool,
    check_finite: bool,
    backward_done: bool,
    fault: Option<&'static str>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A recording tape. Finite-value checks run after each op in debug builds.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
            check_finite: cfg!(debug_assertions),
            backward_done: false,
            fault: None,
        }
    }

    /// A tape that keeps values but records no backward rules.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node("constant", value, Vec::new(), None, false, None)
    }

    /// Registers a trainable leaf under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let requires = self.recording;
        self.push_node("param", value, Vec::new(), None, requires, Some(name.into()))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradients of every trainable leaf, in registration order.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, Option<&Tensor>)> {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| {
            n.param
                .as_deref()
                .map(|name| (name, self.grads.get(i).and_then(|g| g.as_ref())))
        })
    }

    /// First non-finite op seen since construction, if finite checks are on.
    pub fn check(&self) -> Result<()> {
        match self.fault {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    /// Appends an op output. `rule` is dropped when the tape is not recording
    /// or no input requires a gradient.
    pub fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: Vec<Var>,
        rule: Box<dyn Backward>,
    ) -> Var {
        let requires = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let rule = requires.then_some(rule);
        self.push_node(op, value, inputs, rule, requires, None)
    }

    fn push_node(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: Vec<Var>,
        rule: Option<Box<dyn Backward>>,
        requires_grad: bool,
        param: Option<String>,
    ) -> Var {
        if self.check_finite && self.fault.is_none() && !value.is_finite() {
            log::error!("non-finite output from `{op}`");
            self.fault = Some(op);
        }
        self.nodes.push(Node {
            op,
            value,
            inputs,
            rule,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Populates gradients of `loss` with respect to every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.shape(loss);
        if shape != Shape::scalar() {
            return Err(Error::NonScalarLoss(shape));
        }
        self.check()?;
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(rule) = node.rule.as_ref() else {
                continue;
            };
            let Some(upstream) = self.grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = rule.backward(&inputs, &node.value, &upstream, &needs)?;
            if self.check_finite && !input_grads.iter().flatten().all(Tensor::is_finite) {
                return Err(Error::NonFinite { op: node.op });
            }
            let targets: Vec<Var> = node.inputs.clone();
            self.grads[idx] = Some(upstream);
            for (var, g) in targets.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut self.grads[var.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "elementwise_add",
                left: sa,
                right: sb,
            });
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        Ok(self.push("elementwise_add", out, vec![a, b], Box::new(AddRule)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "elementwise_mul",
                left: sa,
                right: sb,
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(sa, data)?;
        Ok(self.push("elementwise_mul", out, vec![a, b], Box::new(MulRule)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push("scale", out, vec![a], Box::new(ScaleRule(factor)))
    }

    /// Sum of all elements as a (1, 1, 1, 1) tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, vec![a], Box::new(SumRule))
    }

    /// Weighted sum of scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let scaled = self.scale(v, w);
            acc = Some(match acc {
                Some(a) => self.add(a, scaled)?,
                None => scaled,
            });
        }
        acc.ok_or_else(|| Error::invalid("weighted_sum", "no terms"))
    }
}

struct AddRule;

impl Backward for AddRule {
    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(needs.iter().map(|&n| n.then(|| grad.clone())).collect())
    }
}

struct MulRule;

impl Backward for MulRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let prod = |other: &Tensor| {
            let data = other.data().iter().zip(grad.data()).map(|(o, g)| o * g).collect();
            Tensor::from_vec(grad.shape(), data)
        };
        Ok(vec![
            needs[0].then(|| prod(inputs[1])).transpose()?,
            needs[1].then(|| prod(inputs[0])).transpose()?,
        ])
    }
}

struct ScaleRule(f64);

impl Backward for ScaleRule {
    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.map(|g| g * self.0))])
    }
}

struct SumRule;

impl Backward for SumRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::full(inputs[0].shape(), grad.item()))])
    }
}
