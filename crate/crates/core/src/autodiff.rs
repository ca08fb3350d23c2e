//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: nodes are appended in creation order, and
//! [`Graph::backward`] walks them in strict reverse order. A fresh graph is
//! built for every forward pass. Gradients accumulate additively into each
//! node and must be cleared with [`Graph::zero_grad`] before a second
//! backward pass on the same graph.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: usize,
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

/// What a backward rule sees: the upstream gradient, the forward inputs and
/// output, and which inputs actually need a gradient.
pub struct BackwardCtx<'a, T> {
    pub grad: &'a Tensor<T>,
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    pub needs: &'a [bool],
}

/// Returns one gradient per input; `None` for inputs that need none.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar = f64> {
    id: usize,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        self.grads.push(None);
        Var { graph: self.id, id: self.nodes.len() - 1 }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id {
            return Err(Error::CrossGraph { expected: self.id, found: v.graph });
        }
        Ok(())
    }

    /// A differentiable input (parameter or data whose gradient is wanted).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Node { op: "leaf", value, parents: Vec::new(), backward: None, requires_grad: true })
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Node { op: "const", value, parents: Vec::new(), backward: None, requires_grad: false })
    }

    /// Appends an operation node with its forward value and backward rule.
    pub fn record(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.id].requires_grad);
        Ok(self.push(Node {
            op,
            value,
            parents: inputs.iter().map(|v| v.id).collect(),
            backward: Some(Box::new(backward)),
            requires_grad,
        }))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        debug_assert_eq!(v.graph, self.id);
        &self.nodes[v.id].value
    }

    /// Checked access to a node's value.
    pub fn val(&self, v: Var) -> Result<&Tensor<T>> {
        self.check(v)?;
        Ok(&self.nodes[v.id].value)
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.id].op
    }

    /// Gradient accumulated at `v`; zeros when `v` was unreachable from the loss.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        debug_assert_eq!(v.graph, self.id);
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.id].value.shape().clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Seeds `d loss / d loss = 1` and propagates to every reachable node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let value = &self.nodes[loss.id].value;
        if value.numel() != 1 {
            return Err(Error::NonScalarLoss(value.dims().to_vec()));
        }
        if self.grads.iter().any(Option::is_some) {
            return Err(Error::GradientsNotReset);
        }
        self.grads[loss.id] = Some(Tensor::ones(value.shape().clone()));

        for id in (0..=loss.id).rev() {
            let Some(grad) = self.grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(rule) = &node.backward {
                if node.requires_grad {
                    let inputs: Vec<&Tensor<T>> =
                        node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                    let needs: Vec<bool> =
                        node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
                    let ctx = BackwardCtx { grad: &grad, inputs: &inputs, output: &node.value, needs: &needs };
                    let parent_grads = rule(&ctx)?;
                    let parents = node.parents.clone();
                    for (p, g) in parents.into_iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        if !self.nodes[p].requires_grad {
                            continue;
                        }
                        if g.shape() != self.nodes[p].value.shape() {
                            return shape_err(format!(
                                "backward of {} produced gradient {:?} for input {:?}",
                                self.nodes[id].op,
                                g.shape(),
                                self.nodes[p].value.shape()
                            ));
                        }
                        match &mut self.grads[p] {
                            Some(acc) => acc.accumulate(&g)?,
                            slot => *slot = Some(g),
                        }
                    }
                }
            }
            self.grads[id] = Some(grad);
        }
        Ok(())
    }

    // Elementary differentiable operations.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a)?.add(self.val(b)?)?;
        self.record("add", &[a, b], v, |c| Ok(vec![Some(c.grad.clone()), Some(c.grad.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a)?.sub(self.val(b)?)?;
        self.record("sub", &[a, b], v, |c| {
            Ok(vec![Some(c.grad.clone()), Some(c.grad.scale(-T::one()))])
        })
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.val(a)?.scale(s);
        self.record("scale", &[a], v, move |c| Ok(vec![Some(c.grad.scale(s))]))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a)?.hadamard(self.val(b)?)?;
        self.record("hadamard", &[a, b], v, |c| {
            let da = if c.needs[0] { Some(c.grad.hadamard(c.inputs[1])?) } else { None };
            let db = if c.needs[1] { Some(c.grad.hadamard(c.inputs[0])?) } else { None };
            Ok(vec![da, db])
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a)?.matmul(self.val(b)?)?;
        self.record("matmul", &[a, b], v, |c| {
            let da = if c.needs[0] { Some(c.grad.matmul(&c.inputs[1].transpose()?)?) } else { None };
            let db = if c.needs[1] { Some(c.inputs[0].transpose()?.matmul(c.grad)?) } else { None };
            Ok(vec![da, db])
        })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.val(a)?.transpose()?;
        self.record("transpose", &[a], v, |c| Ok(vec![Some(c.grad.transpose()?)]))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let v = self.val(a)?.reshape(dims)?;
        self.record("reshape", &[a], v, |c| Ok(vec![Some(c.grad.reshape(c.inputs[0].shape().clone())?)]))
    }

    /// Elementwise max(x, 0); the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.val(a)?.map(|x| if x > T::zero() { x } else { T::zero() });
        self.record("relu", &[a], v, |c| {
            let mask = c.inputs[0].map(|x| if x > T::zero() { T::one() } else { T::zero() });
            Ok(vec![Some(c.grad.hadamard(&mask)?)])
        })
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.val(a)?.sum());
        self.record("sum", &[a], v, |c| {
            let g = c.grad.item()?;
            Ok(vec![Some(Tensor::full(c.inputs[0].shape().clone(), g))])
        })
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::EmptyInput("add_n of zero tensors".into()));
        };
        let mut acc = self.val(first)?.clone();
        for &x in &xs[1..] {
            self.check(x)?;
            acc.accumulate(self.val(x)?)?;
        }
        let n = xs.len();
        self.record("add_n", xs, acc, move |c| Ok(vec![Some(c.grad.clone()); n]))
    }

    /// Concatenates vectors (or flattens and concatenates any tensors) in order.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::EmptyInput("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        for &x in xs {
            self.check(x)?;
            data.extend_from_slice(self.val(x)?.data());
        }
        self.record("concat", xs, Tensor::vector(data), |c| {
            let mut off = 0;
            let mut out = Vec::with_capacity(c.inputs.len());
            for inp in c.inputs {
                let n = inp.numel();
                let slice = c.grad.data()[off..off + n].to_vec();
                out.push(Some(Tensor::new(inp.shape().clone(), slice)?));
                off += n;
            }
            Ok(out)
        })
    }

    /// Mean over rows of an `N × D` matrix, giving a length-`D` vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let m = mean_rows(self.val(x)?)?;
        self.record("mean_rows", &[x], m, |c| {
            let (n, d) = (c.inputs[0].rows(), c.inputs[0].cols());
            let inv = T::one() / T::of(n as f64);
            let g = c.grad.data();
            Ok(vec![Some(Tensor::from_fn([n, d], |i| g[i % d] * inv))])
        })
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.val(x)?;
        let (n, d) = (t.rows(), t.cols());
        if t.dims().len() != 2 || start >= end || end > d {
            return shape_err(format!("slice_cols [{start}, {end}) of {:?}", t.shape()));
        }
        let w = end - start;
        let v = Tensor::from_fn([n, w], |i| t.data()[(i / w) * d + start + i % w]);
        self.record("slice_cols", &[x], v, move |c| {
            let mut g = Tensor::zeros([n, d]);
            for r in 0..n {
                for k in 0..w {
                    g.set(r, start + k, c.grad.at(r, k));
                }
            }
            Ok(vec![Some(g)])
        })
    }
}

pub(crate) fn mean_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.dims().len() != 2 {
        return shape_err(format!("mean_rows expects a matrix, got {:?}", x.shape()));
    }
    let (n, d) = (x.rows(), x.cols());
    if n == 0 {
        return Err(Error::EmptyInput("mean of zero rows".into()));
    }
    let mut m = vec![T::zero(); d];
    for r in 0..n {
        for (acc, &v) in m.iter_mut().zip(&x.data()[r * d..(r + 1) * d]) {
            *acc += v;
        }
    }
    let inv = T::one() / T::of(n as f64);
    Ok(Tensor::vector(m.into_iter().map(|v| v * inv).collect()))
}

/// Default central-difference step at 64-bit precision.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Compares the analytic gradient of `f` at `x` against central differences.
///
/// Returns `max_i |analytic_i - central_i| / max(1, |central_i|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(x), h)
}

/// [`finite_diff_check`] over several inputs at once; the worst error is returned.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    fd_check(f, xs, h, |_, n| (0..n).collect())
}

/// Like [`finite_diff_check_many`], but probes at most `per_tensor`
/// coordinates of each input, chosen by `seed`.
pub fn finite_diff_check_sampled<F>(f: F, xs: &[Tensor<f64>], h: f64, per_tensor: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    use rand::seq::index::sample;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    fd_check(f, xs, h, |_, n| {
        if n <= per_tensor {
            (0..n).collect()
        } else {
            let mut idx = sample(&mut rng, n, per_tensor).into_vec();
            idx.sort_unstable();
            idx
        }
    })
}

fn fd_check<F, S>(f: F, xs: &[Tensor<f64>], h: f64, mut select: S) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    S: FnMut(usize, usize) -> Vec<usize>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v)).collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for (which, x) in xs.iter().enumerate() {
        for i in select(which, x.numel()) {
            let orig = x.data()[i];
            probe[which].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[which].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let central = (plus - minus) / (2.0 * h);
            let err = (analytic[which].data()[i] - central).abs() / central.abs().max(1.0);
            if !err.is_finite() {
                return Err(Error::NonFinite("finite_diff_check"));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn add_passes_gradient_to_both_leaves() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[&[1.0, 2.0]]));
        let b = g.leaf(t(&[&[3.0, 4.0]]));
        let c = g.add(a, b).unwrap();
        let w = g.constant(t(&[&[5.0, -1.0]]));
        let p = g.hadamard(c, w).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).data(), &[5.0, -1.0]);
        assert_eq!(g.grad(b).data(), &[5.0, -1.0]);
    }

    #[test]
    fn matmul_backward_matches_identity() {
        let a_val = t(&[&[1.0, 2.0], &[3.0, 4.0], &[0.5, -1.0]]);
        let b_val = t(&[&[2.0, 0.0, 1.0], &[-1.0, 3.0, 0.5]]);
        let dy = t(&[&[1.0, 2.0, 3.0], &[0.0, -1.0, 1.0], &[2.0, 2.0, -2.0]]);
        let mut g = Graph::new();
        let a = g.leaf(a_val.clone());
        let b = g.leaf(b_val.clone());
        let y = g.matmul(a, b).unwrap();
        let w = g.constant(dy.clone());
        let p = g.hadamard(y, w).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a), dy.matmul(&b_val.transpose().unwrap()).unwrap());
        assert_eq!(g.grad(b), a_val.transpose().unwrap().matmul(&dy).unwrap());
        let err = finite_diff_check_many(
            |g, xs| {
                let y = g.matmul(xs[0], xs[1])?;
                let w = g.constant(dy.clone());
                let p = g.hadamard(y, w)?;
                g.sum(p)
            },
            &[a_val, b_val],
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn scale_backward() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[&[1.0, -3.0]]));
        let s = g.scale(a, 2.0).unwrap();
        let loss = g.sum(s).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).data(), &[2.0, 2.0]);
    }

    #[test]
    fn sum_gives_ones_and_square_gives_twice() {
        let x = t(&[&[1.0, -2.0], &[0.5, 3.0]]);
        let mut g = Graph::new();
        let a = g.leaf(x.clone());
        let s = g.sum(a).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a), Tensor::ones([2, 2]));

        // x used twice: contributions from both references add up.
        let mut g = Graph::new();
        let a = g.leaf(x.clone());
        let sq = g.hadamard(a, a).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a), x.scale(2.0));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[&[1.0]]));
        let b = g.leaf(t(&[&[1.0, 2.0]]));
        let s = g.sum(a).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b), Tensor::zeros([1, 2]));
    }

    #[test]
    fn non_scalar_loss_errors() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[&[1.0, 2.0]]));
        assert!(matches!(g.backward(a), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn second_backward_requires_reset() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[&[1.0, 2.0]]));
        let s = g.sum(a).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::GradientsNotReset)));
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).data(), &[1.0, 1.0]);
    }

    #[test]
    fn cross_graph_input_errors() {
        let mut g1: Graph = Graph::new();
        let mut g2: Graph = Graph::new();
        let a = g1.leaf(Tensor::ones([1]));
        let b = g2.leaf(Tensor::ones([1]));
        assert!(matches!(g2.add(a, b), Err(Error::CrossGraph { .. })));
    }

    #[test]
    fn node_ids_increase() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::ones([2]));
        let b = g.scale(a, 3.0).unwrap();
        let c = g.sum(b).unwrap();
        assert!(a.id() < b.id() && b.id() < c.id());
    }

    #[test]
    fn finite_diff_examples() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let sq = |g: &mut Graph, x: Var| {
            let s = g.hadamard(x, x)?;
            g.sum(s)
        };
        assert!(finite_diff_check(sq, &x, DEFAULT_FD_STEP).unwrap() < 1e-9);
        let constant = |g: &mut Graph, _x: Var| Ok(g.constant(Tensor::scalar(4.0)));
        assert_eq!(finite_diff_check(constant, &x, DEFAULT_FD_STEP).unwrap(), 0.0);
    }

    #[test]
    fn elementary_ops_pass_gradcheck() {
        let x = t(&[&[0.3, -1.2, 2.0], &[1.5, 0.7, -0.4]]);
        let r = t(&[&[1.0, 2.0], &[-1.0, 0.5], &[0.3, 0.9]]);
        let err = finite_diff_check(
            |g, x| {
                let xt = g.transpose(x)?;
                let rl = g.relu(xt)?;
                let w = g.constant(r.clone());
                let p = g.hadamard(rl, w)?;
                let m = g.mean_rows(p)?;
                let s = g.slice_cols(x, 1, 3)?;
                let s = g.reshape(s, &[4])?;
                let cat = g.concat(&[m, s])?;
                let sc = g.scale(cat, 1.5)?;
                let sq = g.hadamard(sc, cat)?;
                g.sum(sq)
            },
            &x,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
