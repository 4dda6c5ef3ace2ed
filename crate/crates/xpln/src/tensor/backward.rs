use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

use super::conv::{self, Geom};
use super::{Op, Tensor};

/// Gradients of a scalar with respect to every leaf in its graph, keyed by
/// tensor identity.
pub struct Gradients<S: Scalar> {
    map: HashMap<u64, Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, t: &Tensor<S>) -> Option<&[S]> {
        self.map.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn take(&mut self, t: &Tensor<S>) -> Option<Vec<S>> {
        self.map.remove(&t.id())
    }
}

impl<S: Scalar> Tensor<S> {
    /// Reverse-mode differentiation of a scalar-valued graph.
    ///
    /// Walks nodes in reverse topological order, so by the time a node is
    /// processed every consumer has already deposited its contribution; fan-out
    /// therefore accumulates by summation in a fixed order.
    pub fn backward(&self) -> Result<Gradients<S>> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        let order = topo_order(self);
        let mut grads: HashMap<u64, Vec<S>> = HashMap::with_capacity(order.len());
        grads.insert(self.id(), vec![S::one()]);
        for node in order.iter().rev() {
            if node.is_leaf() {
                continue;
            }
            // Consumers of `node` are all behind us, so its gradient is final;
            // interior gradients are dropped once propagated.
            let g = match grads.remove(&node.id()) {
                Some(g) => g,
                None => continue,
            };
            propagate(node, &g, &mut grads);
        }
        Ok(Gradients { map: grads })
    }
}

fn topo_order<S: Scalar>(root: &Tensor<S>) -> Vec<Tensor<S>> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack: Vec<(Tensor<S>, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !seen.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        for inp in t.op().inputs() {
            if !seen.contains(&inp.id()) {
                stack.push((inp.clone(), false));
            }
        }
    }
    order
}

fn accum<'a, S: Scalar>(
    grads: &'a mut HashMap<u64, Vec<S>>,
    t: &Tensor<S>,
) -> &'a mut [S] {
    grads
        .entry(t.id())
        .or_insert_with(|| vec![S::zero(); t.numel()])
        .as_mut_slice()
}

fn propagate<S: Scalar>(node: &Tensor<S>, g: &[S], grads: &mut HashMap<u64, Vec<S>>) {
    match node.op() {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for (d, &gv) in accum(grads, a).iter_mut().zip(g) {
                *d = *d + gv;
            }
            for (d, &gv) in accum(grads, b).iter_mut().zip(g) {
                *d = *d + gv;
            }
        }
        Op::Mul(a, b) => {
            {
                let da = accum(grads, a);
                for i in 0..g.len() {
                    da[i] = da[i] + g[i] * b.data()[i];
                }
            }
            let db = accum(grads, b);
            for i in 0..g.len() {
                db[i] = db[i] + g[i] * a.data()[i];
            }
        }
        Op::Affine { x, mul } => {
            let m = *mul;
            for (d, &gv) in accum(grads, x).iter_mut().zip(g) {
                *d = *d + m * gv;
            }
        }
        Op::Square(x) => {
            let two = c::<S>(2.0);
            let xd = x.data();
            let dx = accum(grads, x);
            for i in 0..g.len() {
                dx[i] = dx[i] + two * xd[i] * g[i];
            }
        }
        Op::Sigmoid(x) => {
            let y = node.data();
            let dx = accum(grads, x);
            for i in 0..g.len() {
                dx[i] = dx[i] + y[i] * (S::one() - y[i]) * g[i];
            }
        }
        Op::LeakyRelu { x, slope } => {
            let s = *slope;
            let xd = x.data();
            let dx = accum(grads, x);
            for i in 0..g.len() {
                let f = if xd[i] > S::zero() { S::one() } else { s };
                dx[i] = dx[i] + f * g[i];
            }
        }
        Op::LnClipped { x, floor } => {
            let f = *floor;
            let xd = x.data();
            let dx = accum(grads, x);
            for i in 0..g.len() {
                if xd[i] > f {
                    dx[i] = dx[i] + g[i] / xd[i];
                }
            }
        }
        Op::SoftmaxChannels(x) => {
            let [m, h, w] = [node.shape()[0], node.shape()[1], node.shape()[2]];
            let hw = h * w;
            let y = node.data();
            let dx = accum(grads, x);
            for p in 0..hw {
                let mut dot = S::zero();
                for ch in 0..m {
                    dot = dot + g[ch * hw + p] * y[ch * hw + p];
                }
                for ch in 0..m {
                    let i = ch * hw + p;
                    dx[i] = dx[i] + y[i] * (g[i] - dot);
                }
            }
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let xs = x.shape();
            let ws = w.shape();
            let geom = Geom {
                cin: xs[0],
                h: xs[1],
                w: xs[2],
                cout: ws[0],
                k: ws[2],
                stride: *stride,
                pad: *pad,
                ho: node.shape()[1],
                wo: node.shape()[2],
            };
            let dxv = conv::backward_input(g, w.data(), geom);
            for (d, &v) in accum(grads, x).iter_mut().zip(&dxv) {
                *d = *d + v;
            }
            let dwv = conv::backward_kernel(g, x.data(), geom);
            for (d, &v) in accum(grads, w).iter_mut().zip(&dwv) {
                *d = *d + v;
            }
            let dbv = conv::backward_bias(g, geom);
            for (d, &v) in accum(grads, b).iter_mut().zip(&dbv) {
                *d = *d + v;
            }
        }
        Op::Dense { x, w, b } => {
            let n_in = x.numel();
            let wd = w.data();
            let xd = x.data();
            {
                let dx = accum(grads, x);
                for o in 0..g.len() {
                    let row = &wd[o * n_in..(o + 1) * n_in];
                    for i in 0..n_in {
                        dx[i] = dx[i] + g[o] * row[i];
                    }
                }
            }
            {
                let dw = accum(grads, w);
                for o in 0..g.len() {
                    let row = &mut dw[o * n_in..(o + 1) * n_in];
                    for i in 0..n_in {
                        row[i] = row[i] + g[o] * xd[i];
                    }
                }
            }
            let db = accum(grads, b);
            for (d, &gv) in db.iter_mut().zip(g) {
                *d = *d + gv;
            }
        }
        Op::GlobalMaxPool { x, argmax } => {
            let hw: usize = x.shape()[1] * x.shape()[2];
            let dx = accum(grads, x);
            for (ch, &i) in argmax.iter().enumerate() {
                dx[ch * hw + i] = dx[ch * hw + i] + g[ch];
            }
        }
        Op::GlobalAvgPool(x) => {
            let hw: usize = x.shape()[1] * x.shape()[2];
            let inv = c::<S>(1.0 / hw as f64);
            let dx = accum(grads, x);
            for ch in 0..g.len() {
                let gv = g[ch] * inv;
                for d in &mut dx[ch * hw..(ch + 1) * hw] {
                    *d = *d + gv;
                }
            }
        }
        Op::UpsampleNearest { x, factor } => {
            let f = *factor;
            let (ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (ho, wo) = (h * f, w * f);
            let dx = accum(grads, x);
            for cc in 0..ch {
                for yo in 0..ho {
                    let grow = &g[cc * ho * wo + yo * wo..][..wo];
                    let drow = &mut dx[cc * h * w + (yo / f) * w..][..w];
                    for (xo, &gv) in grow.iter().enumerate() {
                        drow[xo / f] = drow[xo / f] + gv;
                    }
                }
            }
        }
        Op::Concat0(parts) => {
            let mut off = 0;
            for p in parts {
                let n = p.numel();
                let dp = accum(grads, p);
                for (d, &gv) in dp.iter_mut().zip(&g[off..off + n]) {
                    *d = *d + gv;
                }
                off += n;
            }
        }
        Op::Narrow0 { x, start, len } => {
            let inner: usize = x.shape()[1..].iter().product();
            debug_assert_eq!(g.len(), len * inner);
            let off = start * inner;
            let dx = accum(grads, x);
            for (i, &gv) in g.iter().enumerate() {
                dx[off + i] = dx[off + i] + gv;
            }
        }
        Op::Reshape(x) => {
            for (d, &gv) in accum(grads, x).iter_mut().zip(g) {
                *d = *d + gv;
            }
        }
        Op::MulChannelBroadcast { x, map } => {
            let hw: usize = x.shape()[1] * x.shape()[2];
            let ch = x.shape()[0];
            let mp = map.data();
            let xd = x.data();
            {
                let dx = accum(grads, x);
                for cc in 0..ch {
                    for i in 0..hw {
                        let j = cc * hw + i;
                        dx[j] = dx[j] + g[j] * mp[i];
                    }
                }
            }
            let dm = accum(grads, map);
            for cc in 0..ch {
                for i in 0..hw {
                    let j = cc * hw + i;
                    dm[i] = dm[i] + g[j] * xd[j];
                }
            }
        }
        Op::SumAll(x) => {
            let gv = g[0];
            for d in accum(grads, x) {
                *d = *d + gv;
            }
        }
        Op::MeanAll(x) => {
            let gv = g[0] * c::<S>(1.0 / x.numel() as f64);
            for d in accum(grads, x) {
                *d = *d + gv;
            }
        }
    }
}
