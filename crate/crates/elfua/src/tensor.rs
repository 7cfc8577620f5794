//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every operation's backward pass is itself written against the same op
//! set, so gradients are ordinary graph tensors. Calling [`backward`] with
//! `create_graph = true` therefore yields gradients that can be
//! differentiated again, which is what the bi-level meta update needs when
//! second-order mode is enabled.
//!
//! The engine is eager: each op computes its value immediately and records
//! parents plus a backward closure. Tensors are cheap `Rc` handles; graphs
//! are dropped as soon as the last handle goes away.

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type GradFn = Box<dyn Fn(&Tensor, &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    parents: Vec<Tensor>,
    grad_fn: Option<GradFn>,
    requires_grad: bool,
}

/// Handle to one value in the computation graph.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

fn new_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl Tensor {
    fn from_node(node: Node) -> Tensor {
        Tensor { node: Rc::new(node) }
    }

    /// A constant: participates in computation but never receives gradients.
    pub fn constant(data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length must match shape"
        );
        Tensor::from_node(Node {
            id: new_id(),
            shape: shape.to_vec(),
            data,
            parents: Vec::new(),
            grad_fn: None,
            requires_grad: false,
        })
    }

    /// A leaf variable that gradients flow into.
    pub fn leaf(data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor::from_node(Node {
            id: new_id(),
            shape: shape.to_vec(),
            data,
            parents: Vec::new(),
            grad_fn: None,
            requires_grad: true,
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(vec![v], &[1])
    }

    fn op(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, grad_fn: GradFn) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Tensor::from_node(Node {
                id: new_id(),
                shape,
                data,
                parents,
                grad_fn: Some(grad_fn),
                requires_grad: true,
            })
        } else {
            // No gradient can flow here; drop the graph edges.
            Tensor::from_node(Node {
                id: new_id(),
                shape,
                data,
                parents: Vec::new(),
                grad_fn: None,
                requires_grad: false,
            })
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn len(&self) -> usize {
        self.node.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Value of a one-element tensor.
    pub fn value(&self) -> f64 {
        assert_eq!(self.len(), 1, "value() requires a scalar tensor");
        self.node.data[0]
    }

    /// Copy of this tensor's data cut loose from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.node.data.clone(), &self.node.shape)
    }

    fn parent(&self, i: usize) -> &Tensor {
        &self.node.parents[i]
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|_out, g| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|_out, g| vec![Some(g.clone()), Some(g.neg())]),
        )
    }

    pub fn neg(&self) -> Tensor {
        let data = self.data().iter().map(|a| -a).collect();
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|_out, g| vec![Some(g.neg())]),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|out, g| {
                let a = out.parent(0);
                let b = out.parent(1);
                vec![Some(g.mul(b)), Some(g.mul(a))]
            }),
        )
    }

    pub fn scale(&self, k: f64) -> Tensor {
        let data = self.data().iter().map(|a| a * k).collect();
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_out, g| vec![Some(g.scale(k))]),
        )
    }

    pub fn add_scalar(&self, k: f64) -> Tensor {
        let data = self.data().iter().map(|a| a + k).collect();
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|_out, g| vec![Some(g.clone())]),
        )
    }

    pub fn relu(&self) -> Tensor {
        let mask: Vec<f64> = self
            .data()
            .iter()
            .map(|&a| if a > 0.0 { 1.0 } else { 0.0 })
            .collect();
        let data = self.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let mask_t = Tensor::constant(mask, self.shape());
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_out, g| vec![Some(g.mul(&mask_t))]),
        )
    }

    pub fn abs(&self) -> Tensor {
        let sign: Vec<f64> = self
            .data()
            .iter()
            .map(|&a| if a >= 0.0 { 1.0 } else { -1.0 })
            .collect();
        let data = self.data().iter().map(|a| a.abs()).collect();
        let sign_t = Tensor::constant(sign, self.shape());
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_out, g| vec![Some(g.mul(&sign_t))]),
        )
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.exp()).collect();
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|out, g| vec![Some(g.mul(out))]),
        )
    }

    pub fn ln(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.ln()).collect();
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|out, g| {
                let x = out.parent(0);
                vec![Some(g.mul(&x.recip()))]
            }),
        )
    }

    pub fn recip(&self) -> Tensor {
        let data = self.data().iter().map(|a| 1.0 / a).collect();
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|out, g| vec![Some(g.mul(out).mul(out).neg())]),
        )
    }

    // ---- linear algebra ----

    /// Matrix product of `[r,k] x [k,c]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (r, k) = as_2d(self.shape());
        let (k2, c) = as_2d(other.shape());
        assert_eq!(k, k2, "matmul: inner dimensions differ");
        let mut out = vec![0.0; r * c];
        {
            let a = ArrayView2::from_shape((r, k), self.data()).unwrap();
            let b = ArrayView2::from_shape((k, c), other.data()).unwrap();
            let mut cv = ArrayViewMut2::from_shape((r, c), &mut out[..]).unwrap();
            general_mat_mul(1.0, &a, &b, 0.0, &mut cv);
        }
        Tensor::op(
            vec![r, c],
            out,
            vec![self.clone(), other.clone()],
            Box::new(|out, g| {
                let a = out.parent(0);
                let b = out.parent(1);
                vec![Some(g.matmul(&b.t())), Some(a.t().matmul(g))]
            }),
        )
    }

    /// Transpose of a 2-d tensor.
    pub fn t(&self) -> Tensor {
        let (r, c) = as_2d(self.shape());
        let src = self.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Tensor::op(
            vec![c, r],
            data,
            vec![self.clone()],
            Box::new(|_out, g| vec![Some(g.t())]),
        )
    }

    /// Row-major `[r,c]` plus a `[c]` bias broadcast over rows.
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        let (_r, c) = as_2d(self.shape());
        assert_eq!(bias.shape(), &[c], "add_bias: bias length mismatch");
        let b = bias.data();
        let mut data = self.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (x, bv) in row.iter_mut().zip(b) {
                *x += bv;
            }
        }
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(|_out, g| vec![Some(g.clone()), Some(g.sum_axis0())]),
        )
    }

    // ---- reductions and broadcasts ----

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let shape = self.shape().to_vec();
        Tensor::op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |_out, g| vec![Some(g.bcast_scalar(&shape))]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Broadcast a scalar tensor to an arbitrary shape.
    pub fn bcast_scalar(&self, shape: &[usize]) -> Tensor {
        assert_eq!(self.len(), 1, "bcast_scalar needs a scalar");
        let n: usize = shape.iter().product();
        let data = vec![self.value(); n];
        Tensor::op(
            shape.to_vec(),
            data,
            vec![self.clone()],
            Box::new(|_out, g| vec![Some(g.sum_all())]),
        )
    }

    /// Column sums of `[r,c]`, yielding `[c]`.
    pub fn sum_axis0(&self) -> Tensor {
        let (r, c) = as_2d(self.shape());
        let mut data = vec![0.0; c];
        for row in self.data().chunks_exact(c) {
            for (acc, x) in data.iter_mut().zip(row) {
                *acc += x;
            }
        }
        Tensor::op(
            vec![c],
            data,
            vec![self.clone()],
            Box::new(move |_out, g| vec![Some(g.bcast_axis0(r))]),
        )
    }

    /// Row sums of `[r,c]`, yielding `[r]`.
    pub fn sum_axis1(&self) -> Tensor {
        let (r, c) = as_2d(self.shape());
        let mut data = vec![0.0; r];
        for (acc, row) in data.iter_mut().zip(self.data().chunks_exact(c)) {
            *acc = row.iter().sum();
        }
        Tensor::op(
            vec![r],
            data,
            vec![self.clone()],
            Box::new(move |_out, g| vec![Some(g.bcast_axis1(c))]),
        )
    }

    /// Replicate a `[c]` vector over `rows`, yielding `[rows,c]`.
    pub fn bcast_axis0(&self, rows: usize) -> Tensor {
        assert_eq!(self.shape().len(), 1, "bcast_axis0 needs a vector");
        let c = self.len();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(self.data());
        }
        Tensor::op(
            vec![rows, c],
            data,
            vec![self.clone()],
            Box::new(|_out, g| vec![Some(g.sum_axis0())]),
        )
    }

    /// Replicate a `[r]` vector over `cols`, yielding `[r,cols]`.
    pub fn bcast_axis1(&self, cols: usize) -> Tensor {
        assert_eq!(self.shape().len(), 1, "bcast_axis1 needs a vector");
        let r = self.len();
        let mut data = Vec::with_capacity(r * cols);
        for &v in self.data() {
            data.extend(std::iter::repeat(v).take(cols));
        }
        Tensor::op(
            vec![r, cols],
            data,
            vec![self.clone()],
            Box::new(|_out, g| vec![Some(g.sum_axis1())]),
        )
    }

    /// Sum over the middle axis of `[a,p,c]`, yielding `[a,c]`.
    pub fn sum_mid(&self) -> Tensor {
        let (a, p, c) = as_3d(self.shape());
        let mut data = vec![0.0; a * c];
        let src = self.data();
        for i in 0..a {
            let out_row = &mut data[i * c..(i + 1) * c];
            for j in 0..p {
                let row = &src[(i * p + j) * c..(i * p + j + 1) * c];
                for (acc, x) in out_row.iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        Tensor::op(
            vec![a, c],
            data,
            vec![self.clone()],
            Box::new(move |_out, g| vec![Some(g.bcast_mid(p))]),
        )
    }

    /// Replicate `[a,c]` over a new middle axis of size `p`, yielding `[a,p,c]`.
    pub fn bcast_mid(&self, p: usize) -> Tensor {
        let (a, c) = as_2d(self.shape());
        let mut data = Vec::with_capacity(a * p * c);
        for i in 0..a {
            let row = &self.data()[i * c..(i + 1) * c];
            for _ in 0..p {
                data.extend_from_slice(row);
            }
        }
        Tensor::op(
            vec![a, p, c],
            data,
            vec![self.clone()],
            Box::new(|_out, g| vec![Some(g.sum_mid())]),
        )
    }

    // ---- indexing ----

    /// Gather flat elements: `out[i] = self[idx[i]]`, with `-1` meaning 0.
    ///
    /// The index map is shared with the backward scatter, so the pair is
    /// exactly adjoint.
    pub fn gather(&self, idx: Rc<Vec<i64>>, out_shape: &[usize]) -> Tensor {
        let n: usize = out_shape.iter().product();
        assert_eq!(idx.len(), n, "gather: index length must match out shape");
        let src = self.data();
        let data: Vec<f64> = idx
            .iter()
            .map(|&i| if i < 0 { 0.0 } else { src[i as usize] })
            .collect();
        let in_shape = self.shape().to_vec();
        Tensor::op(
            out_shape.to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_out, g| vec![Some(g.scatter(idx.clone(), &in_shape))]),
        )
    }

    /// Adjoint of [`Tensor::gather`]: `out[idx[i]] += self[i]`.
    pub fn scatter(&self, idx: Rc<Vec<i64>>, out_shape: &[usize]) -> Tensor {
        assert_eq!(idx.len(), self.len(), "scatter: index length mismatch");
        let n: usize = out_shape.iter().product();
        let mut data = vec![0.0; n];
        for (&i, &v) in idx.iter().zip(self.data()) {
            if i >= 0 {
                data[i as usize] += v;
            }
        }
        let self_shape = self.shape().to_vec();
        Tensor::op(
            out_shape.to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_out, g| vec![Some(g.gather(idx.clone(), &self_shape))]),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            self.len(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let old = self.shape().to_vec();
        Tensor::op(
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(move |_out, g| vec![Some(g.reshape(&old))]),
        )
    }
}

fn as_2d(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected 2-d tensor, got {shape:?}");
    (shape[0], shape[1])
}

fn as_3d(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected 3-d tensor, got {shape:?}");
    (shape[0], shape[1], shape[2])
}

/// Gradients of one backward pass, keyed by tensor id.
pub struct Gradients {
    map: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.map.get(&t.id())
    }

    pub fn get_by_id(&self, id: u64) -> Option<&Tensor> {
        self.map.get(&id)
    }
}

/// Reverse-mode gradient of a scalar `loss` with respect to every tensor
/// that requires grad in its graph.
///
/// With `create_graph = true` the returned gradients remain connected to
/// the graph and can be differentiated again; otherwise they are detached
/// constants.
pub fn backward(loss: &Tensor, create_graph: bool) -> Gradients {
    assert_eq!(loss.len(), 1, "backward requires a scalar loss");

    // Iterative topological order over the requires-grad subgraph.
    let mut order: Vec<Tensor> = Vec::new();
    let mut state: HashMap<u64, u8> = HashMap::new(); // 1 = visiting, 2 = done
    let mut stack: Vec<(Tensor, usize)> = vec![(loss.clone(), 0)];
    while let Some((node, pi)) = stack.pop() {
        if pi == 0 {
            match state.get(&node.id()) {
                Some(2) => continue,
                _ => {
                    state.insert(node.id(), 1);
                }
            }
        }
        let parents = &node.node.parents;
        if pi < parents.len() {
            let child = parents[pi].clone();
            stack.push((node, pi + 1));
            if child.requires_grad() && state.get(&child.id()) != Some(&2) {
                stack.push((child, 0));
            }
        } else {
            state.insert(node.id(), 2);
            order.push(node);
        }
    }

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    grads.insert(loss.id(), Tensor::constant(vec![1.0], &[1]));

    for node in order.iter().rev() {
        let g = match grads.get(&node.id()) {
            Some(g) => g.clone(),
            None => continue,
        };
        let grad_fn = match &node.node.grad_fn {
            Some(f) => f,
            None => continue,
        };
        let contribs = grad_fn(node, &g);
        debug_assert_eq!(contribs.len(), node.node.parents.len());
        for (parent, contrib) in node.node.parents.iter().zip(contribs) {
            if !parent.requires_grad() {
                continue;
            }
            let Some(c) = contrib else { continue };
            let c = if create_graph { c } else { c.detach() };
            match grads.remove(&parent.id()) {
                Some(prev) => {
                    let sum = prev.add(&c);
                    let sum = if create_graph { sum } else { sum.detach() };
                    grads.insert(parent.id(), sum);
                }
                None => {
                    grads.insert(parent.id(), c);
                }
            }
        }
    }

    Gradients { map: grads }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let denom = x.abs().max(y.abs()).max(1e-8);
            assert!(
                (x - y).abs() / denom < tol,
                "index {i}: {x} vs {y} (rel tol {tol})"
            );
        }
    }

    #[test]
    fn matmul_matches_naive() {
        let a = Tensor::constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = Tensor::constant(vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0], &[3, 2]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        let x0 = vec![0.7, -1.3, 2.1, 0.4, -0.6, 1.9];
        let f = |x: &[f64]| -> f64 {
            let t = Tensor::leaf(x.to_vec(), &[6]);
            t.exp()
                .mul(&t.abs().add_scalar(0.5).ln())
                .add(&t.relu().scale(0.3))
                .sum_all()
                .value()
        };
        let t = Tensor::leaf(x0.clone(), &[6]);
        let y = t
            .exp()
            .mul(&t.abs().add_scalar(0.5).ln())
            .add(&t.relu().scale(0.3))
            .sum_all();
        let grads = backward(&y, false);
        let fd = finite_diff(f, &x0, 1e-6);
        assert_close(grads.get(&t).unwrap().data(), &fd, 1e-6);
    }

    #[test]
    fn matmul_and_reduction_grads_match_finite_differences() {
        let a0 = vec![0.3, -0.8, 1.2, 0.5, 0.9, -0.1];
        let b0 = vec![1.1, -0.4, 0.2, 0.6, -1.5, 0.8];
        let run = |a: &[f64], b: &[f64]| -> (Tensor, Tensor, Tensor) {
            let ta = Tensor::leaf(a.to_vec(), &[2, 3]);
            let tb = Tensor::leaf(b.to_vec(), &[3, 2]);
            let c = ta.matmul(&tb);
            let bias = Tensor::leaf(vec![0.1, -0.2], &[2]);
            let y = c.add_bias(&bias).relu().sum_axis1().mul(&c.sum_axis1());
            (ta, tb, y.sum_all())
        };
        let (ta, tb, loss) = run(&a0, &b0);
        let grads = backward(&loss, false);
        let fd_a = finite_diff(|a| run(a, &b0).2.value(), &a0, 1e-6);
        let fd_b = finite_diff(|b| run(&a0, b).2.value(), &b0, 1e-6);
        assert_close(grads.get(&ta).unwrap().data(), &fd_a, 1e-5);
        assert_close(grads.get(&tb).unwrap().data(), &fd_b, 1e-5);
    }

    #[test]
    fn gather_scatter_roundtrip_grads() {
        let x0 = vec![1.0, 2.0, 3.0, 4.0];
        let idx = Rc::new(vec![3i64, -1, 0, 0, 2]);
        let t = Tensor::leaf(x0, &[4]);
        let y = t
            .gather(idx.clone(), &[5])
            .mul(&t.gather(idx, &[5]))
            .sum_all();
        let grads = backward(&y, false);
        // d/dx of the gathered-square sum: x0 appears twice, x2 and x3 once.
        assert_eq!(grads.get(&t).unwrap().data(), &[4.0, 0.0, 6.0, 8.0]);
    }

    #[test]
    fn second_order_cubic() {
        // f(x) = sum x^3; f' = 3x^2, f'' = 6x.
        let x0 = vec![0.5, -1.2, 2.0];
        let t = Tensor::leaf(x0.clone(), &[3]);
        let y = t.mul(&t).mul(&t).sum_all();
        let g1 = backward(&y, true);
        let gx = g1.get(&t).unwrap().clone();
        let expected_g1: Vec<f64> = x0.iter().map(|x| 3.0 * x * x).collect();
        assert_close(gx.data(), &expected_g1, 1e-12);
        let g2 = backward(&gx.sum_all(), false);
        let expected_g2: Vec<f64> = x0.iter().map(|x| 6.0 * x).collect();
        assert_close(g2.get(&t).unwrap().data(), &expected_g2, 1e-12);
    }

    #[test]
    fn second_order_through_gradient_step_matches_hand_derivation() {
        // Inner loss 0.5*a*w^2, outer loss 0.5*b*w'^2 with w' = w - alpha*a*w.
        // Full derivative: b*(1-alpha*a)^2*w. First-order: b*(1-alpha*a)*w.
        let (a, b, alpha, w0) = (0.7, 1.3, 0.1, 0.9);
        let w = Tensor::leaf(vec![w0], &[1]);
        let inner = w.mul(&w).scale(0.5 * a).sum_all();

        let gi = backward(&inner, true);
        let w_adapted = w.sub(&gi.get(&w).unwrap().scale(alpha));
        let outer = w_adapted.mul(&w_adapted).scale(0.5 * b).sum_all();
        let go = backward(&outer, false);
        let full = go.get(&w).unwrap().value();
        let expected_full = b * (1.0 - alpha * a) * (1.0 - alpha * a) * w0;
        assert!((full - expected_full).abs() < 1e-12);

        let gi = backward(&inner, false);
        let w_adapted = w.sub(&gi.get(&w).unwrap().scale(alpha));
        let outer = w_adapted.mul(&w_adapted).scale(0.5 * b).sum_all();
        let go = backward(&outer, false);
        let first = go.get(&w).unwrap().value();
        let expected_first = b * (1.0 - alpha * a) * w0;
        assert!((first - expected_first).abs() < 1e-12);
    }

    #[test]
    fn grad_accumulates_over_shared_subexpression() {
        let t = Tensor::leaf(vec![2.0], &[1]);
        let y = t.mul(&t).add(&t.scale(3.0)).sum_all(); // x^2 + 3x
        let grads = backward(&y, false);
        assert_eq!(grads.get(&t).unwrap().value(), 7.0);
    }

    #[test]
    fn sum_mid_and_bcast_mid_are_adjoint() {
        let x0: Vec<f64> = (0..12).map(|i| i as f64 * 0.25 - 1.0).collect();
        let f = |x: &[f64]| {
            let t = Tensor::leaf(x.to_vec(), &[2, 3, 2]);
            t.sum_mid().mul(&t.sum_mid()).sum_all().value()
        };
        let t = Tensor::leaf(x0.clone(), &[2, 3, 2]);
        let y = t.sum_mid().mul(&t.sum_mid()).sum_all();
        let grads = backward(&y, false);
        let fd = finite_diff(f, &x0, 1e-6);
        assert_close(grads.get(&t).unwrap().data(), &fd, 1e-6);
    }

    #[test]
    fn constants_do_not_collect_graph() {
        let a = Tensor::constant(vec![1.0, 2.0], &[2]);
        let b = Tensor::constant(vec![3.0, 4.0], &[2]);
        let c = a.mul(&b);
        assert!(!c.requires_grad());
        assert!(c.node.parents.is_empty());
    }
}
