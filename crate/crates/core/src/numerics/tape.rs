//! Reverse-mode gradient tape.
//!
//! Every op appends a node holding its forward value and, when any input
//! requires a gradient, a backward closure. `backward` walks the nodes in
//! exact reverse recording order and may run only once per tape.

use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) type Backward = Box<dyn FnOnce(&[f64], &mut GradSink)>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    backward: Option<Backward>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradient accumulation buffers handed to backward closures.
pub struct GradSink {
    bufs: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    lens: Vec<usize>,
}

impl GradSink {
    pub fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Zero-initialised (on first use) accumulation buffer for `v`.
    pub fn buf(&mut self, v: Var) -> &mut [f64] {
        let len = self.lens[v.0];
        self.bufs[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    pub fn add(&mut self, v: Var, g: &[f64]) {
        if !self.wants(v) {
            return;
        }
        for (a, b) in self.buf(v).iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// Result of one backward pass.
pub struct Gradients {
    bufs: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not
    /// require a gradient or the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.bufs[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("shape recorded at push"))
    }

    /// Gradient data, or zeros shaped like `v` when no gradient reached it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take_data(&mut self, v: Var) -> Option<Vec<f64>> {
        self.bufs[v.0].take()
    }

    /// Node indices whose backward closure ran, in the order they ran.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Rc::new(value), requires_grad, backward: None });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Shares an existing value without copying it.
    pub fn constant_rc(&mut self, value: Rc<Tensor>) -> Var {
        self.nodes.push(Node { value, requires_grad: false, backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_rc(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op result. The closure is only kept when some input
    /// requires a gradient.
    pub(crate) fn push(
        &mut self,
        value: Tensor,
        inputs: &[Var],
        backward: impl FnOnce(&[f64], &mut GradSink) + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from the scalar `loss`. A tape can be differentiated
    /// once; a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut sink = GradSink {
            bufs: vec![None; n],
            requires: self.nodes.iter().map(|nd| nd.requires_grad).collect(),
            lens: self.nodes.iter().map(|nd| nd.value.len()).collect(),
        };
        let mut visited = Vec::new();
        if self.nodes[loss.0].requires_grad {
            sink.bufs[loss.0] = Some(vec![1.0]);
            for i in (0..=loss.0).rev() {
                let Some(bw) = self.nodes[i].backward.take() else {
                    continue;
                };
                let Some(g) = sink.bufs[i].take() else {
                    continue;
                };
                visited.push(i);
                bw(&g, &mut sink);
                sink.bufs[i] = Some(g);
            }
        }
        // Closures of nodes past the loss are dropped too: the tape is spent.
        for node in &mut self.nodes {
            node.backward = None;
        }
        Ok(Gradients {
            bufs: sink.bufs.into_iter().zip(&sink.requires).map(|(b, &r)| if r { b } else { None }).collect(),
            shapes: self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect(),
            visited,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let s = tape.sum(x);
        assert!(tape.backward(s).is_ok());
        assert!(matches!(tape.backward(s), Err(Error::Tape(_))));
    }

    #[test]
    fn visits_in_reverse_recording_order() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let y = tape.scale(x, 2.0);
        let z = tape.mul(y, x).unwrap();
        let w = tape.add(z, y).unwrap();
        let s = tape.sum(w);
        let g = tape.backward(s).unwrap();
        let order = g.visit_order();
        assert_eq!(order, &[s.0, w.0, z.0, y.0]);
        assert!(order.windows(2).all(|p| p[0] > p[1]));
        // d/dx (2x·x + 2x) = 4x + 2
        assert_eq!(g.get(x).unwrap().data(), &[6.0, -6.0, 4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2], 3.0));
        let x = tape.param(Tensor::full(&[2], 1.0));
        let y = tape.mul(c, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[2], 1.0));
        assert!(tape.backward(x).is_err());
    }
}
