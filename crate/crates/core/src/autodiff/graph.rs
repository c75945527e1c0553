use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded op.
///
/// `wants[i]` tells whether input `i` needs a gradient; entries for
/// unwanted inputs may be `None`.
pub trait Backward<T: Real> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;

    /// Appends a discrete description of which smooth piece of the op the
    /// inputs fall in (activation signs, sampling cells). Two evaluations
    /// with equal patterns lie on the same differentiable piece.
    fn kinks(&self, _inputs: &[&Tensor<T>], _out: &mut Vec<i64>) {}
}

/// Integer cell of every value; crossing a grid line changes it.
pub fn push_cells<T: Real>(t: &Tensor<T>, out: &mut Vec<i64>) {
    out.extend(t.as_slice().iter().map(|v| v.f64().floor() as i64));
}

struct Node<T: Real> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum State {
    Recording,
    Consumed,
}

/// Tape of ops recorded during one forward pass.
///
/// Every op keeps its inputs alive on the tape; `backward` walks the
/// nodes in exact reverse creation order and then releases them.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, usize>,
    state: State,
    visited: Vec<&'static str>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of leaf nodes produced by [`Graph::backward`].
pub struct Grads<T: Real> {
    leaves: HashMap<usize, Tensor<T>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.leaves.get(&node).map(|g| (id, g)))
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (id, g) in self.params() {
            store.accumulate_grad(id, g)?;
        }
        Ok(())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            state: State::Recording,
            visited: Vec::new(),
        }
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    fn check_recording(&self) -> Result<()> {
        if self.state == State::Consumed {
            return Err(Error::contract(
                "graph already consumed by backward; record a new forward pass",
            ));
        }
        Ok(())
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad: false,
        })
    }

    /// Differentiable leaf whose gradient is reported in [`Grads`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad: true,
        })
    }

    /// Leaf bound to a stored parameter. Repeated calls with the same id
    /// return the same variable, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&node) = self.param_vars.get(&id) {
            return Var(node);
        }
        let v = self.push(Node {
            value: store.value(id).clone(),
            inputs: Vec::new(),
            op: None,
            requires_grad: true,
        });
        self.param_vars.insert(id, v.0);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records the result of an op. The output is checked for non-finite
    /// values before it enters the tape.
    pub fn record(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        op: impl Backward<T> + 'static,
    ) -> Result<Var> {
        self.check_recording()?;
        value.check_finite(op.name())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            op: Some(Box::new(op)),
            requires_grad,
        }))
    }

    /// Names of recorded ops in creation order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .filter_map(|n| n.op.as_ref().map(|o| o.name()))
            .collect()
    }

    /// Concatenated [`Backward::kinks`] patterns of every recorded op.
    pub fn kink_pattern(&self) -> Vec<i64> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Some(op) = &n.op {
                let inputs: Vec<&Tensor<T>> = n.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                op.kinks(&inputs, &mut out);
            }
        }
        out
    }

    /// Op names in the order the last backward pass visited them.
    pub fn visit_log(&self) -> &[&'static str] {
        &self.visited
    }

    /// Reverse pass from a scalar `loss` seeded with `loss_grad`.
    pub fn backward_with(&mut self, loss: Var, loss_grad: T) -> Result<Grads<T>> {
        self.check_recording()?;
        let shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(shape, loss_grad));
        let mut leaves = HashMap::new();
        self.visited.clear();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = node.op.as_ref() else {
                leaves.insert(i, g);
                continue;
            };
            self.visited.push(op.name());
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let wants: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| self.nodes[j].requires_grad)
                .collect();
            let input_grads = op.backward(&inputs, &node.value, &g, &wants)?;
            for (&j, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[j].requires_grad {
                    continue;
                }
                ig.check_finite(op.name()).map_err(|_| Error::NonFinite {
                    op: format!("{} (backward)", op.name()),
                    index: j,
                })?;
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&ig)?,
                    slot => *slot = Some(ig),
                }
            }
        }

        let params = self.param_vars.iter().map(|(&id, &node)| (id, node)).collect();
        self.state = State::Consumed;
        for node in &mut self.nodes {
            node.value = Tensor::zeros([0, 0, 0, 0]);
        }
        Ok(Grads { leaves, params })
    }

    pub fn backward(&mut self, loss: Var) -> Result<Grads<T>> {
        self.backward_with(loss, T::one())
    }

    /// Backward pass that adds parameter gradients into `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<Grads<T>> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(store)?;
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn_ops;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_vec([1, 1, 1, 3], vec![1.0, -2.0, 3.0]).unwrap());
        let s = nn_ops::sum(&mut g, w).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let sq = nn_ops::mul(&mut g, w, w).unwrap();
        let s = nn_ops::sum(&mut g, sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn second_backward_is_a_contract_error() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::ones([1, 1, 1, 2]));
        let s = nn_ops::sum(&mut g, w).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
        assert!(nn_ops::sum(&mut g, w).is_err());
    }

    #[test]
    fn backward_visits_in_reverse_order() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::ones([1, 1, 1, 2]));
        let a = nn_ops::sigmoid(&mut g, w).unwrap();
        let b = nn_ops::leaky_relu(&mut g, a, 0.1).unwrap();
        let s = nn_ops::sum(&mut g, b).unwrap();
        let forward = g.op_names();
        g.backward(s).unwrap();
        let mut rev = forward.clone();
        rev.reverse();
        assert_eq!(g.visit_log(), rev.as_slice());
    }

    #[test]
    fn fan_out_sums_upstream_gradients() {
        // y = w + w + w consumed by three ops
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_vec([1, 1, 1, 1], vec![0.3]).unwrap());
        let a = nn_ops::scale(&mut g, w, 2.0).unwrap();
        let b = nn_ops::scale(&mut g, w, 3.0).unwrap();
        let c = nn_ops::add(&mut g, a, b).unwrap();
        let d = nn_ops::add(&mut g, c, w).unwrap();
        let s = nn_ops::sum(&mut g, d).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().as_slice(), &[6.0]);
    }

    #[test]
    fn shared_param_gets_one_accumulated_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec([1, 1, 1, 1], vec![2.0]).unwrap());
        let mut g = Graph::new();
        let w1 = g.param(&store, id);
        let w2 = g.param(&store, id);
        assert_eq!(w1, w2);
        let p = nn_ops::mul(&mut g, w1, w2).unwrap();
        let s = nn_ops::sum(&mut g, p).unwrap();
        g.backward_into(s, &mut store).unwrap();
        assert_eq!(store.grad(id).as_slice(), &[4.0]);
    }

    #[test]
    fn accumulation_matches_joint_backward() {
        let build = |g: &mut Graph<f64>, store: &ParamStore<f64>, which: u8| {
            let w = g.param(store, ParamId(0));
            let a = nn_ops::sigmoid(g, w).unwrap();
            let b = nn_ops::mul(g, w, w).unwrap();
            let la = nn_ops::sum(g, a).unwrap();
            let lb = nn_ops::sum(g, b).unwrap();
            match which {
                1 => la,
                2 => lb,
                _ => nn_ops::add(g, la, lb).unwrap(),
            }
        };
        let mut rng = crate::tensor::Rng::new(5);
        let mut joint = ParamStore::<f64>::new();
        joint.add("w", rng.uniform_tensor([1, 2, 3, 3], -1.0, 1.0));
        let mut split = joint.clone();

        let mut g = Graph::new();
        let l = build(&mut g, &joint, 0);
        g.backward_into(l, &mut joint).unwrap();

        for which in [1, 2] {
            let mut g = Graph::new();
            let l = build(&mut g, &split, which);
            g.backward_into(l, &mut split).unwrap();
        }
        assert_eq!(joint.grad(ParamId(0)), split.grad(ParamId(0)));
    }
}
