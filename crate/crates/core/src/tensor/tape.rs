use std::sync::Arc;

use super::conv::{col2im_add, ConvGeom};
use super::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Cell-to-source lookup used by [`Tape::gather_cells`]: for every output
/// cell, the source index and flat spatial offset inside that source.
pub type GatherIndex = Arc<[Option<(usize, usize)>]>;

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Scale(Var, T),
    Add(Var, Var),
    Sub(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SelectRow {
        x: Var,
        row: usize,
    },
    Concat(Vec<Var>),
    Upsample2x(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelNormalize {
        x: Var,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Gather {
        sources: Vec<Var>,
        fallback: Var,
        index: GatherIndex,
    },
    Mse(Var, Var),
    /// Losses whose gradient w.r.t. the single differentiable input is
    /// computed during the forward pass.
    Local {
        x: Var,
        dx: Vec<T>,
    },
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub requires_grad: bool,
    pub op: Op<T>,
}

/// Wengert list of recorded operations. Nodes are appended in evaluation
/// order, so reverse iteration is a valid topological order for backward.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records parameter `i`; frozen sets enter the tape without gradients.
    pub fn param(&mut self, params: &ParamSet<T>, i: usize) -> Var {
        self.leaf(params.get(i).clone(), !params.is_frozen())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode accumulation from a scalar loss. Gradients from multiple
    /// consumers of a value are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            backward_node(&self.nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

/// Gradient buffer for `v`, allocated on first use; `None` if `v` does not
/// require a gradient.
fn acc<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]))
}

fn backward_node<T: Real>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, k, bias, geom, cols } => {
            let cout = node.value.shape()[0];
            let p = geom.positions();
            let patch = geom.patch();
            if let Some(dk) = acc(nodes, grads, *k) {
                T::gemm(cout, p, patch, T::one(), g, false, cols, true, T::one(), dk);
            }
            if let Some(b) = bias {
                if let Some(db) = acc(nodes, grads, *b) {
                    for (c, d) in db.iter_mut().enumerate() {
                        *d += g[c * p..(c + 1) * p].iter().copied().sum::<T>();
                    }
                }
            }
            if nodes[x.0].requires_grad {
                let kmat = nodes[k.0].value.data();
                let mut dcols = vec![T::zero(); patch * p];
                T::gemm(patch, cout, p, T::one(), kmat, true, g, false, T::zero(), &mut dcols);
                let dx = acc(nodes, grads, *x).expect("requires grad");
                col2im_add(geom, &dcols, dx);
            }
        }
        Op::Relu(x) => {
            if let Some(dx) = acc(nodes, grads, *x) {
                for ((d, &gi), &o) in dx.iter_mut().zip(g).zip(out) {
                    if o > T::zero() {
                        *d += gi;
                    }
                }
            }
        }
        Op::LeakyRelu(x, slope) => {
            let xv = nodes[x.0].value.data();
            if let Some(dx) = acc(nodes, grads, *x) {
                for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                    *d += if xi > T::zero() { gi } else { gi * *slope };
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(dx) = acc(nodes, grads, *x) {
                for ((d, &gi), &o) in dx.iter_mut().zip(g).zip(out) {
                    *d += gi * (T::one() - o * o);
                }
            }
        }
        Op::Scale(x, s) => {
            if let Some(dx) = acc(nodes, grads, *x) {
                for (d, &gi) in dx.iter_mut().zip(g) {
                    *d += gi * *s;
                }
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(d) = acc(nodes, grads, *v) {
                    for (di, &gi) in d.iter_mut().zip(g) {
                        *di += gi;
                    }
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = acc(nodes, grads, *a) {
                for (di, &gi) in d.iter_mut().zip(g) {
                    *di += gi;
                }
            }
            if let Some(d) = acc(nodes, grads, *b) {
                for (di, &gi) in d.iter_mut().zip(g) {
                    *di -= gi;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = acc(nodes, grads, *x) {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean(x) => {
            let n = T::of(nodes[x.0].value.len() as f64);
            if let Some(dx) = acc(nodes, grads, *x) {
                for d in dx.iter_mut() {
                    *d += g[0] / n;
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(dx) = acc(nodes, grads, *x) {
                for (d, &gi) in dx.iter_mut().zip(g) {
                    *d += gi;
                }
            }
        }
        Op::SelectRow { x, row } => {
            let n = g.len();
            if let Some(dx) = acc(nodes, grads, *x) {
                for (d, &gi) in dx[row * n..(row + 1) * n].iter_mut().zip(g) {
                    *d += gi;
                }
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = nodes[p.0].value.len();
                if let Some(d) = acc(nodes, grads, *p) {
                    for (di, &gi) in d.iter_mut().zip(&g[offset..offset + n]) {
                        *di += gi;
                    }
                }
                offset += n;
            }
        }
        Op::Upsample2x(x) => {
            let s = nodes[x.0].value.shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            if let Some(dx) = acc(nodes, grads, *x) {
                let w2 = 2 * w;
                for ci in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..w2 {
                            dx[(ci * h + y / 2) * w + xx / 2] += g[(ci * 2 * h + y) * w2 + xx];
                        }
                    }
                }
            }
        }
        Op::MaxPool2 { x, argmax } => {
            if let Some(dx) = acc(nodes, grads, *x) {
                for (&src, &gi) in argmax.iter().zip(g) {
                    dx[src] += gi;
                }
            }
        }
        Op::ChannelNormalize { x, inv_std } => {
            let s = nodes[x.0].value.shape();
            let hw = s[1] * s[2];
            let n = T::of(hw as f64);
            if let Some(dx) = acc(nodes, grads, *x) {
                for (c, &is) in inv_std.iter().enumerate() {
                    let gs = &g[c * hw..(c + 1) * hw];
                    let ys = &out[c * hw..(c + 1) * hw];
                    let mean_g = gs.iter().copied().sum::<T>() / n;
                    let mean_gy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for ((d, &gi), &yi) in dx[c * hw..(c + 1) * hw].iter_mut().zip(gs).zip(ys) {
                        *d += is * (gi - mean_g - yi * mean_gy);
                    }
                }
            }
        }
        Op::ChannelAffine { x, gamma, beta } => {
            let xv = nodes[x.0].value.data();
            let gv = nodes[gamma.0].value.data();
            let c = gv.len();
            let hw = xv.len() / c;
            if let Some(dx) = acc(nodes, grads, *x) {
                for ci in 0..c {
                    for j in ci * hw..(ci + 1) * hw {
                        dx[j] += g[j] * gv[ci];
                    }
                }
            }
            if let Some(dg) = acc(nodes, grads, *gamma) {
                for ci in 0..c {
                    dg[ci] += (ci * hw..(ci + 1) * hw).map(|j| g[j] * xv[j]).sum::<T>();
                }
            }
            if let Some(db) = acc(nodes, grads, *beta) {
                for ci in 0..c {
                    db[ci] += g[ci * hw..(ci + 1) * hw].iter().copied().sum::<T>();
                }
            }
        }
        Op::Linear { x, w, b } => {
            let xv = nodes[x.0].value.data();
            let nin = xv.len();
            let nout = g.len();
            if let Some(dw) = acc(nodes, grads, *w) {
                for (o, &gi) in g.iter().enumerate() {
                    for (d, &xi) in dw[o * nin..(o + 1) * nin].iter_mut().zip(xv) {
                        *d += gi * xi;
                    }
                }
            }
            if let Some(b) = b {
                if let Some(db) = acc(nodes, grads, *b) {
                    for (d, &gi) in db.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            if nodes[x.0].requires_grad {
                let wv = nodes[w.0].value.data();
                let dx = acc(nodes, grads, *x).expect("requires grad");
                T::gemm(1, nout, nin, T::one(), g, false, wv, false, T::one(), dx);
            }
        }
        Op::Gather {
            sources,
            fallback,
            index,
        } => {
            let c = node.value.shape()[0];
            let cells = index.len();
            for (cell, entry) in index.iter().enumerate() {
                match entry {
                    Some((src, offset)) => {
                        let v = sources[*src];
                        let sp = {
                            let s = nodes[v.0].value.shape();
                            s[1] * s[2]
                        };
                        if let Some(d) = acc(nodes, grads, v) {
                            for ci in 0..c {
                                d[ci * sp + offset] += g[ci * cells + cell];
                            }
                        }
                    }
                    None => {
                        if let Some(d) = acc(nodes, grads, *fallback) {
                            for ci in 0..c {
                                d[ci] += g[ci * cells + cell];
                            }
                        }
                    }
                }
            }
        }
        Op::Mse(a, b) => {
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            let scale = T::of(2.0) * g[0] / T::of(av.len() as f64);
            if let Some(da) = acc(nodes, grads, *a) {
                for ((d, &x), &y) in da.iter_mut().zip(av).zip(bv) {
                    *d += scale * (x - y);
                }
            }
            if let Some(db) = acc(nodes, grads, *b) {
                for ((d, &x), &y) in db.iter_mut().zip(av).zip(bv) {
                    *d += scale * (y - x);
                }
            }
        }
        Op::Local { x, dx: local } => {
            if let Some(dx) = acc(nodes, grads, *x) {
                for (d, &l) in dx.iter_mut().zip(local) {
                    *d += g[0] * l;
                }
            }
        }
    }
}
