//! Reverse-mode differentiation over a dynamic tape of matrix-valued nodes.
//!
//! Every node holds a `batch × features` matrix. Parameters enter the tape as
//! views of a [`ParamStore`] segment and their adjoints are accumulated back
//! into the store's gradient buffer by [`Tape::backward`].

mod checkpoint;
mod mlp;
mod optim;
mod params;

use std::collections::HashMap;

pub use checkpoint::{Checkpoint, NetworkEntry, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use mlp::{Activation, Mlp, MlpSpec, LEAKY_SLOPE};
pub use optim::{cosine_lr, Adam};
pub use params::{ParamStore, Segment};

use crate::dynamics::{wrap_angle, Dynamics};
use crate::error::{Error, Result};
use crate::numkit::Mat;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param { offset: usize },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Tanh(Var),
    SquareNormWeighted(Var, Mat),
    StopGradient,
    WrapAngles(Var),
    Dynamics {
        x: Var,
        u: Var,
        jx: Vec<Mat>,
        ju: Vec<Mat>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Mat,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<(usize, usize, usize), Var>,
}

/// Adjoints of every node with respect to one scalar root.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Mat>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &Mat {
        &self.adjoints[v.0]
    }
}

fn shape_err(op: &'static str, lhs: &Mat, rhs: &Mat) -> Error {
    Error::Shape {
        op,
        lhs: lhs.shape(),
        rhs: rhs.shape(),
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let m = self.value(v);
        if m.shape() != (1, 1) {
            return Err(Error::Dimension(format!("expected a scalar node, got {:?}", m.shape())));
        }
        Ok(m[(0, 0)])
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Constant, value)
    }

    /// A `rows × cols` row-major view of `store.flat[offset..]`. Repeated
    /// requests for the same view return the same node.
    pub fn param(&mut self, store: &ParamStore, offset: usize, rows: usize, cols: usize) -> Result<Var> {
        if let Some(&v) = self.params.get(&(offset, rows, cols)) {
            return Ok(v);
        }
        let end = offset + rows * cols;
        if end > store.len() {
            return Err(Error::Dimension(format!(
                "parameter view {offset}..{end} exceeds store of length {}",
                store.len()
            )));
        }
        let value = Mat::from_vec(rows, cols, store.flat()[offset..end].to_vec());
        let v = self.push(Op::Param { offset }, value);
        self.params.insert((offset, rows, cols), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", va, vb));
        }
        let value = va.matmul(vb);
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va, vb));
        }
        let value = va + vb;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("sub", va, vb));
        }
        let value = va - vb;
        Ok(self.push(Op::Sub(a, b), value))
    }

    /// Adds the `1 × c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(shape_err("add_row", va, vb));
        }
        let mut value = va.clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        Ok(self.push(Op::AddRow(a, bias), value))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(Op::Scale(a, c), value)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    /// `Σ_i x_i W x_iᵀ` over the rows `x_i` of `a`, as a `1 × 1` node.
    pub fn square_norm_weighted(&mut self, a: Var, w: &Mat) -> Result<Var> {
        let va = self.value(a);
        if !w.is_square() || w.rows() != va.cols() {
            return Err(shape_err("square_norm_weighted", va, w));
        }
        let xw = va.matmul(w);
        let total: f64 = xw.data().iter().zip(va.data()).map(|(p, q)| p * q).sum();
        Ok(self.push(Op::SquareNormWeighted(a, w.clone()), Mat::filled(1, 1, total)))
    }

    /// Forwards the value and blocks the adjoint.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(Op::StopGradient, value)
    }

    /// Wraps the masked columns to `(-π, π]`. The adjoint passes through
    /// unchanged, which is exact away from the wrap seam.
    pub fn wrap_angles(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let va = self.value(a);
        if mask.len() != va.cols() {
            return Err(Error::Dimension(format!(
                "wrap_angles: mask of length {} for {} columns",
                mask.len(),
                va.cols()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Ok(a);
        }
        let mut value = va.clone();
        for i in 0..value.rows() {
            for (x, &m) in value.row_mut(i).iter_mut().zip(mask) {
                if m {
                    *x = wrap_angle(*x);
                }
            }
        }
        Ok(self.push(Op::WrapAngles(a), value))
    }

    /// Applies `f` row by row; the adjoint uses the analytic Jacobians.
    pub fn dynamics(&mut self, f: &dyn Dynamics, x: Var, u: Var) -> Result<Var> {
        let (vx, vu) = (self.value(x), self.value(u));
        if vx.rows() != vu.rows() || vx.cols() != f.state_dim() || vu.cols() != f.input_dim() {
            return Err(shape_err("dynamics", vx, vu));
        }
        let mut value = Mat::zeros(vx.rows(), f.state_dim());
        let mut jx = Vec::with_capacity(vx.rows());
        let mut ju = Vec::with_capacity(vx.rows());
        for i in 0..vx.rows() {
            value.row_mut(i).copy_from_slice(&f.step(vx.row(i), vu.row(i)));
            let (a, b) = f.jacobians(vx.row(i), vu.row(i));
            jx.push(a);
            ju.push(b);
        }
        Ok(self.push(Op::Dynamics { x, u, jx, ju }, value))
    }

    /// Adjoints of every node with respect to the scalar `root`.
    pub fn gradients(&self, root: Var) -> Result<Gradients> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::Dimension(format!(
                "backward needs a scalar root, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut adj: Vec<Mat> = self
            .nodes
            .iter()
            .map(|n| Mat::zeros(n.value.rows(), n.value.cols()))
            .collect();
        adj[root.0] = Mat::filled(1, 1, 1.0);
        for idx in (0..=root.0).rev() {
            let g = std::mem::replace(&mut adj[idx], Mat::zeros(0, 0));
            if g.data().iter().all(|&x| x == 0.0) {
                adj[idx] = g;
                continue;
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant | Op::Param { .. } | Op::StopGradient => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&g);
                    adj[a.0].add_scaled(&da, 1.0);
                    adj[b.0].add_scaled(&db, 1.0);
                }
                Op::Add(a, b) => {
                    adj[a.0].add_scaled(&g, 1.0);
                    adj[b.0].add_scaled(&g, 1.0);
                }
                Op::Sub(a, b) => {
                    adj[a.0].add_scaled(&g, 1.0);
                    adj[b.0].add_scaled(&g, -1.0);
                }
                Op::AddRow(a, bias) => {
                    adj[a.0].add_scaled(&g, 1.0);
                    let db = adj[bias.0].data_mut();
                    for i in 0..g.rows() {
                        for (d, x) in db.iter_mut().zip(g.row(i)) {
                            *d += x;
                        }
                    }
                }
                Op::Scale(a, c) => adj[a.0].add_scaled(&g, *c),
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let da = adj[a.0].data_mut();
                    for ((d, &gi), &xi) in da.iter_mut().zip(g.data()).zip(x.data()) {
                        *d += if xi > 0.0 { gi } else { slope * gi };
                    }
                }
                Op::Tanh(a) => {
                    let da = adj[a.0].data_mut();
                    for ((d, &gi), &yi) in da.iter_mut().zip(g.data()).zip(node.value.data()) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
                Op::SquareNormWeighted(a, w) => {
                    let sym = w + &w.transpose();
                    let da = self.value(*a).matmul(&sym);
                    adj[a.0].add_scaled(&da, g[(0, 0)]);
                }
                Op::WrapAngles(a) => adj[a.0].add_scaled(&g, 1.0),
                Op::Dynamics { x, u, jx, ju } => {
                    for i in 0..g.rows() {
                        let gi = g.row(i);
                        let dx = jx[i].t_matmul(&Mat::col_vector(gi));
                        let du = ju[i].t_matmul(&Mat::col_vector(gi));
                        for (d, v) in adj[x.0].row_mut(i).iter_mut().zip(dx.data()) {
                            *d += v;
                        }
                        for (d, v) in adj[u.0].row_mut(i).iter_mut().zip(du.data()) {
                            *d += v;
                        }
                    }
                }
            }
            adj[idx] = g;
        }
        Ok(Gradients { adjoints: adj })
    }

    /// Runs the reverse pass from `root` and adds every parameter adjoint
    /// into `store`'s gradient buffer.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(root)?;
        let buf = store.grad_mut();
        for (node, adj) in self.nodes.iter().zip(&grads.adjoints) {
            if let Op::Param { offset } = node.op {
                for (g, a) in buf[offset..offset + adj.data().len()].iter_mut().zip(adj.data()) {
                    *g += a;
                }
            }
        }
        Ok(grads)
    }
}
