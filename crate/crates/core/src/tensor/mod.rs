//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted buffer plus an optional
//! record of the operation that produced it. Calling [`Tensor::backward`] on a
//! scalar walks that record in reverse topological order, accumulating
//! gradients into every reachable tensor. The graph is released as it is
//! consumed, so a second backward through the same graph is not possible.
//!
//! Storage is row-major `f32`. Reductions and normalization statistics are
//! accumulated in `f64`.

mod elementwise;
mod layout;
mod linalg;
mod nn;
pub(crate) mod shape;

pub use elementwise::gelu_scalar;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static FINITE_CHECKS: Cell<bool> = const { Cell::new(true) };
    static MULTIPLIES: Cell<u64> = const { Cell::new(0) };
}

/// Computes parent gradients from the gradient of the output.
type BackwardFn = Box<dyn Fn(&[f32]) -> Vec<Option<Vec<f32>>> + Send + Sync>;

struct Node {
    op: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f32>>>,
    node: Mutex<Option<Node>>,
}

/// Reference-counted handle to an immutable n-dimensional array.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.0.node.lock().unwrap().as_ref().map(|n| n.op);
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &op)
            .finish()
    }
}

/// Runs `f` without recording any autograd graph on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Enables or disables the debug-build finiteness assertion on this thread.
/// Returns the previous setting. Release builds never check.
pub fn set_finite_checks(enabled: bool) -> bool {
    FINITE_CHECKS.with(|c| c.replace(enabled))
}

/// Multiply count of every forward matrix product run on this thread since the
/// last [`reset_multiply_count`]. Used as a FLOP proxy.
pub fn multiply_count() -> u64 {
    MULTIPLIES.with(|c| c.get())
}

pub fn reset_multiply_count() {
    MULTIPLIES.with(|c| c.set(0));
}

pub(crate) fn count_multiplies(n: u64) {
    MULTIPLIES.with(|c| c.set(c.get() + n));
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(data: Vec<f32>, shape: Vec<usize>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node: Mutex::new(node),
        }))
    }

    /// Creates a constant (non-trainable) tensor.
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(contract(format!(
                "shape {shape:?} holds {} elements but {} were supplied",
                numel(shape),
                data.len()
            )));
        }
        if shape.contains(&0) {
            return Err(contract(format!("zero extent in shape {shape:?}")));
        }
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Creates a trainable leaf.
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(Self::build(t.to_vec(), shape.to_vec(), true, None))
    }

    pub fn scalar(v: f32) -> Self {
        Self::build(vec![v], vec![], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(vec![0.0; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        Self::build(vec![v; numel(shape)], shape.to_vec(), false, None)
    }

    /// Standard-normal draws scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| rng.sample::<f32, _>(StandardNormal) * std)
            .collect();
        Self::build(data, shape.to_vec(), false, None)
    }

    /// Output of an operation. A graph node is recorded only when gradients are
    /// enabled and some parent requires them.
    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<f32>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f32]) -> Vec<Option<Vec<f32>>> + Send + Sync + 'static,
    ) -> Self {
        #[cfg(debug_assertions)]
        if FINITE_CHECKS.with(|c| c.get()) {
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                panic!("{op} produced a non-finite value at flat index {i}");
            }
        }
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then(|| Node {
            op,
            parents,
            backward: Box::new(backward),
        });
        Self::build(data, shape, requires_grad, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.clone()
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(contract(format!("item() on tensor of shape {:?}", self.shape())));
        }
        Ok(self.0.data[0])
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().unwrap() = None;
    }

    /// Same data, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.to_vec(), self.shape().to_vec(), false, None)
    }

    /// Name of the producing operation, if a graph node is still attached.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.lock().unwrap().as_ref().map(|n| n.op)
    }

    fn accumulate_grad(&self, g: &[f32]) {
        let mut slot = self.0.grad.lock().unwrap();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    fn parents(&self) -> Vec<Tensor> {
        self.0
            .node
            .lock()
            .unwrap()
            .as_ref()
            .map(|n| n.parents.clone())
            .unwrap_or_default()
    }

    /// Back-propagates from this scalar, populating `grad()` on every tensor
    /// that requires gradients and is reachable from it. The graph is freed.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Iterative post-order DFS; `order` ends with `self`.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.parents() {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p, false));
                }
            }
        }

        let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            let node = t.0.node.lock().unwrap().take();
            if let Some(node) = node {
                let parent_grads = (node.backward)(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel(), "{} gradient shape", node.op);
                    match grads.get_mut(&p.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(p.id(), pg);
                        }
                    }
                }
            }
            t.accumulate_grad(&g);
        }
        Ok(())
    }
}

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

#[cfg(test)]
pub(crate) mod testing {
    //! Central finite-difference checks for single operations.
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Checks d/dx sum(w ⊙ f(x)) for a fixed random weighting `w`.
    /// The loss is accumulated in f64 from the f32 forward outputs.
    pub fn check_grad(inputs: &[Tensor], f: impl Fn(&[Tensor]) -> Tensor, h: f64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        inputs.iter().for_each(Tensor::zero_grad);
        let out = f(inputs);
        let w: Vec<f64> = (0..out.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wt = Tensor::from_vec(w.iter().map(|&v| v as f32).collect(), out.shape()).unwrap();
        let loss = out.mul(&wt).unwrap().sum_all();
        loss.backward().unwrap();

        let eval = |xs: &[Tensor]| -> f64 {
            let o = no_grad(|| f(xs));
            o.data().iter().zip(&w).map(|(&a, &b)| a as f64 * b).sum()
        };
        let mut worst = 0.0f64;
        for (k, x) in inputs.iter().enumerate() {
            if !x.requires_grad() {
                continue;
            }
            let analytic = x.grad().expect("gradient populated");
            for i in 0..x.numel() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                let mut dp = x.to_vec();
                dp[i] += h as f32;
                let mut dm = x.to_vec();
                dm[i] -= h as f32;
                let hp = (dp[i] as f64 - x.data()[i] as f64).abs();
                let hm = (x.data()[i] as f64 - dm[i] as f64).abs();
                plus[k] = Tensor::from_vec(dp, x.shape()).unwrap();
                minus[k] = Tensor::from_vec(dm, x.shape()).unwrap();
                let numeric = (eval(&plus) - eval(&minus)) / (hp + hm);
                let a = analytic[i] as f64;
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
        worst
    }

    pub fn rand_param(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::randn(shape, 1.0, &mut rng);
        Tensor::param(t.to_vec(), shape).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::param(vec![1.0, -2.0, 3.0, 0.5, 2.0, 7.0], &[2, 3]).unwrap();
        x.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn square_sum_gradient() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        x.mul(&x).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn shared_use_accumulates() {
        let x = Tensor::param(vec![2.0], &[1]).unwrap();
        let y = x.add(&x).unwrap().add(&x.mul_scalar(3.0)).unwrap();
        y.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0]);
    }

    #[test]
    fn intermediate_grads_populated() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.mul_scalar(2.0);
        let loss = y.sum_all();
        loss.backward().unwrap();
        assert_eq!(y.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(loss.grad().unwrap(), vec![1.0]);
        assert!(y.op_name().is_none(), "graph freed after backward");
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let err = x.mul_scalar(2.0).backward().unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::param(vec![1.0], &[1]).unwrap();
        let y = no_grad(|| x.exp());
        assert!(!y.requires_grad());
        assert!(grad_enabled());
    }

    #[test]
    fn inputs_are_not_mutated() {
        let a = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::param(vec![0.5, -1.0, 2.0, 1.5], &[2, 2]).unwrap();
        let before = (a.to_vec(), b.to_vec());
        let c = a.matmul(&b).unwrap().add(&a).unwrap().softmax().layer_norm(1e-5);
        c.sum_all().backward().unwrap();
        assert_eq!(before, (a.to_vec(), b.to_vec()));
    }

    #[test]
    fn bad_shape_is_rejected() {
        assert!(Tensor::from_vec(vec![1.0; 5], &[2, 3]).is_err());
    }
}
