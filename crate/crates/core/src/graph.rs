//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the list in reverse and returns the
//! gradient of that scalar with respect to every node that depends on a
//! parameter. Graphs built with gradients disabled only evaluate values.

use crate::gaussian::{
    kl_diag_elem, kl_diag_grad, kl_standard_elem, kl_standard_grad, log_normal_elem,
    log_normal_grad, relative_kl_elem, relative_kl_grad,
};
use crate::kernels::{self, ConvGeom};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Linear(Vec<(Var, T)>),
    Silu(Var),
    Sigmoid(Var),
    Broadcast(Var),
    RepeatItems(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    UpNearest { x: Var, f: usize },
    UpBilinear { x: Var, f: usize },
    SliceChannels { x: Var, start: usize },
    Sum(Var),
    Reparam { mean: Var, log_std: Var, noise: Tensor<T> },
    KlStandard { mean: Var, log_std: Var },
    KlDiag { mq: Var, lq: Var, mp: Var, lp: Var },
    RelativeKl { prior_ls: Var, dm: Var, dls: Var },
    LogNormal { z: Var, mean: Var, log_std: Var },
    Mixture { z: Var, means: Var, log_stds: Var },
    SegLoss { logits: Var, target: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid<T: Real>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that evaluates values only; `param` leaves are constants.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        va.zip_map(vb, f).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.nodes[a.0].value.map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// `sum_i c_i * v_i` over same-shaped inputs.
    pub fn linear(&mut self, terms: &[(Var, T)]) -> Var {
        assert!(!terms.is_empty(), "linear combination of zero terms");
        let mut acc = Tensor::zeros(self.shape(terms[0].0));
        for &(v, c) in terms {
            let src = &self.nodes[v.0].value;
            assert_eq!(src.shape(), acc.shape(), "linear: shape mismatch");
            for (a, &s) in acc.data_mut().iter_mut().zip(src.data()) {
                *a += c * s;
            }
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(acc, Op::Linear(terms.to_vec()), &inputs)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// Broadcasts a one-element node to `shape`.
    pub fn broadcast(&mut self, s: Var, shape: &[usize]) -> Var {
        assert_eq!(self.nodes[s.0].value.len(), 1, "broadcast source must be a scalar");
        let v = Tensor::full(shape, self.scalar(s));
        self.push(v, Op::Broadcast(s), &[s])
    }

    /// Same-padded convolution. `w` has shape `[k, k, cin, cout]`, `b` `[cout]`.
    /// Tiles a single-item tensor `[1, ...]` to `[n, ...]`.
    pub fn repeat_items(&mut self, x: Var, n: usize) -> Var {
        let t = &self.nodes[x.0].value;
        assert_eq!(t.batch(), 1, "repeat_items expects a single item");
        let mut shape = t.shape().to_vec();
        shape[0] = n;
        let data = t.data().repeat(n);
        let v = Tensor::from_vec(&shape, data).unwrap();
        self.push(v, Op::RepeatItems(x), &[x])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NHWC");
        assert_eq!(ws.len(), 4, "conv2d weight must be [k, k, cin, cout]");
        assert_eq!(xs[3], ws[2], "conv2d channel mismatch");
        let geom = ConvGeom {
            n: xs[0],
            h: xs[1],
            w: xs[2],
            cin: ws[2],
            cout: ws[3],
            k: ws[0],
            stride,
            pad: (ws[0] - 1) / 2,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            self.nodes[b.0].value.data(),
        );
        let (ho, wo) = geom.out_hw();
        let v = Tensor::from_vec(&[geom.n, ho, wo, geom.cout], out).unwrap();
        self.push(v, Op::Conv2d { x, w, b, geom }, &[x, w, b])
    }

    pub fn upsample_nearest(&mut self, x: Var, f: usize) -> Var {
        let s = self.shape(x).to_vec();
        let out = kernels::upsample_nearest(self.nodes[x.0].value.data(), s[0], s[1], s[2], s[3], f);
        let v = Tensor::from_vec(&[s[0], s[1] * f, s[2] * f, s[3]], out).unwrap();
        self.push(v, Op::UpNearest { x, f }, &[x])
    }

    pub fn upsample_bilinear(&mut self, x: Var, f: usize) -> Var {
        let s = self.shape(x).to_vec();
        let out = kernels::upsample_bilinear(self.nodes[x.0].value.data(), s[0], s[1], s[2], s[3], f);
        let v = Tensor::from_vec(&[s[0], s[1] * f, s[2] * f, s[3]], out).unwrap();
        self.push(v, Op::UpBilinear { x, f }, &[x])
    }

    /// Channels `start..start + len` of an NHWC tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        let c = s[3];
        assert!(start + len <= c, "slice_channels out of range");
        let src = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(src.len() / c * len);
        for px in src.chunks_exact(c) {
            out.extend_from_slice(&px[start..start + len]);
        }
        let v = Tensor::from_vec(&[s[0], s[1], s[2], len], out).unwrap();
        self.push(v, Op::SliceChannels { x, start }, &[x])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.nodes[a.0].value.sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// `mean + exp(log_std) * noise` with fixed noise.
    pub fn reparam(&mut self, mean: Var, log_std: Var, noise: Tensor<T>) -> Var {
        let m = &self.nodes[mean.0].value;
        let l = &self.nodes[log_std.0].value;
        assert_eq!(m.shape(), noise.shape(), "reparam noise shape");
        let data = m
            .data()
            .iter()
            .zip(l.data())
            .zip(noise.data())
            .map(|((&m, &l), &e)| m + l.exp() * e)
            .collect();
        let v = Tensor::from_vec(m.shape(), data).unwrap();
        self.push(v, Op::Reparam { mean, log_std, noise }, &[mean, log_std])
    }

    pub fn kl_standard(&mut self, mean: Var, log_std: Var) -> Var {
        let v = self.binary(mean, log_std, kl_standard_elem);
        self.push(v, Op::KlStandard { mean, log_std }, &[mean, log_std])
    }

    pub fn kl_diag(&mut self, mq: Var, lq: Var, mp: Var, lp: Var) -> Var {
        let [a, b, c, d] = [mq, lq, mp, lp].map(|v| self.nodes[v.0].value.data());
        let data = (0..a.len()).map(|i| kl_diag_elem(a[i], b[i], c[i], d[i])).collect();
        let v = Tensor::from_vec(self.shape(mq), data).unwrap();
        self.push(v, Op::KlDiag { mq, lq, mp, lp }, &[mq, lq, mp, lp])
    }

    pub fn relative_kl(&mut self, prior_ls: Var, dm: Var, dls: Var) -> Var {
        let [a, b, c] = [prior_ls, dm, dls].map(|v| self.nodes[v.0].value.data());
        let data = (0..a.len()).map(|i| relative_kl_elem(a[i], b[i], c[i])).collect();
        let v = Tensor::from_vec(self.shape(dm), data).unwrap();
        self.push(v, Op::RelativeKl { prior_ls, dm, dls }, &[prior_ls, dm, dls])
    }

    pub fn log_normal(&mut self, z: Var, mean: Var, log_std: Var) -> Var {
        let [a, b, c] = [z, mean, log_std].map(|v| self.nodes[v.0].value.data());
        assert!(a.len() == b.len() && b.len() == c.len(), "log_normal shape");
        let data = (0..a.len()).map(|i| log_normal_elem(a[i], b[i], c[i])).collect();
        let v = Tensor::from_vec(self.shape(z), data).unwrap();
        self.push(v, Op::LogNormal { z, mean, log_std }, &[z, mean, log_std])
    }

    /// Per-element log density of `z` (shape `[N, ...]`) under the uniform
    /// mixture whose `K` components are stacked along the leading axis of
    /// `means` / `log_stds` (shape `[K, ...]`).
    pub fn mixture_log_density(&mut self, z: Var, means: Var, log_stds: Var) -> Var {
        let zt = &self.nodes[z.0].value;
        let mt = &self.nodes[means.0].value;
        let lt = &self.nodes[log_stds.0].value;
        let d = zt.per_item();
        assert_eq!(mt.per_item(), d, "mixture component shape");
        assert_eq!(mt.shape(), lt.shape(), "mixture mean/log_std shape");
        let k = mt.batch();
        let ln_k = T::from_usize(k).unwrap().ln();
        let mut out = vec![T::zero(); zt.len()];
        let mut terms = vec![T::zero(); k];
        for (n, row) in out.chunks_exact_mut(d).enumerate() {
            for (i, o) in row.iter_mut().enumerate() {
                let zi = zt.data()[n * d + i];
                let mut mx = T::neg_infinity();
                for (kk, t) in terms.iter_mut().enumerate() {
                    *t = log_normal_elem(zi, mt.data()[kk * d + i], lt.data()[kk * d + i]);
                    mx = mx.max(*t);
                }
                let s: T = terms.iter().map(|&t| (t - mx).exp()).sum();
                *o = mx + s.ln() - ln_k;
            }
        }
        let v = Tensor::from_vec(zt.shape(), out).unwrap();
        self.push(v, Op::Mixture { z, means, log_stds }, &[z, means, log_stds])
    }

    /// Batch mean of `BCE(sigmoid(logits), target) + 1 - softDice`, where the
    /// BCE is summed over pixels (a per-image log-likelihood, on the scale of
    /// the reconstruction term) and the soft Dice uses +1 smoothing.
    pub fn seg_loss(&mut self, logits: Var, target: Tensor<T>) -> Var {
        let a = &self.nodes[logits.0].value;
        assert_eq!(a.shape(), target.shape(), "seg_loss target shape");
        let n = a.batch();
        let mut total = T::zero();
        for b in 0..n {
            let (av, yv) = (a.item(b), target.item(b));
            let mut bce = T::zero();
            let (mut spy, mut sp, mut sy) = (T::zero(), T::zero(), T::zero());
            for (&ai, &yi) in av.iter().zip(yv) {
                bce += ai.max(T::zero()) - ai * yi + (-ai.abs()).exp().ln_1p();
                let pi = sigmoid(ai);
                spy += pi * yi;
                sp += pi;
                sy += yi;
            }
            let dice = (T::lit(2.0) * spy + T::one()) / (sp + sy + T::one());
            total += bce + T::one() - dice;
        }
        let v = Tensor::scalar(total / T::from_usize(n).unwrap());
        self.push(v, Op::SegLoss { logits, target }, &[logits])
    }

    /// Gradients of the scalar `root` with respect to every node that
    /// depends on a parameter.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert!(self.grad_enabled, "backward on an inference graph");
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, gd));
                acc(*b, &mut |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, gd));
                acc(*b, &mut |d| {
                    for (o, &x) in d.iter_mut().zip(gd) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * vb[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * va[i];
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| {
                for (o, &x) in d.iter_mut().zip(gd) {
                    *o += *s * x;
                }
            }),
            Op::Linear(terms) => {
                for &(v, c) in terms {
                    acc(v, &mut |d| {
                        for (o, &x) in d.iter_mut().zip(gd) {
                            *o += c * x;
                        }
                    });
                }
            }
            Op::Silu(a) => {
                let va = val(*a).data();
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        let s = sigmoid(va[i]);
                        d[i] += gd[i] * s * (T::one() + va[i] * (T::one() - s));
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Broadcast(s) => {
                let total: T = gd.iter().copied().sum();
                acc(*s, &mut |d| d[0] += total);
            }
            Op::RepeatItems(x) => acc(*x, &mut |d| {
                for chunk in gd.chunks_exact(d.len()) {
                    add_into(d, chunk);
                }
            }),
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (val(*x).data(), val(*w).data());
                // Split borrows: take each gradient slot out while the kernel writes.
                let mut take = |v: Var| -> Option<Tensor<T>> {
                    if self.wants(v) {
                        Some(grads[v.0].take().unwrap_or_else(|| Tensor::zeros(val(v).shape())))
                    } else {
                        None
                    }
                };
                let (mut dx, mut dw, mut db) = (take(*x), take(*w), take(*b));
                kernels::conv2d_backward(
                    geom,
                    xv,
                    wv,
                    gd,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                for (v, t) in [(*x, dx), (*w, dw), (*b, db)] {
                    if t.is_some() {
                        grads[v.0] = t;
                    }
                }
            }
            Op::UpNearest { x, f } => {
                let s = val(*x).shape().to_vec();
                acc(*x, &mut |d| kernels::upsample_nearest_backward(gd, d, s[0], s[1], s[2], s[3], *f));
            }
            Op::UpBilinear { x, f } => {
                let s = val(*x).shape().to_vec();
                acc(*x, &mut |d| kernels::upsample_bilinear_backward(gd, d, s[0], s[1], s[2], s[3], *f));
            }
            Op::SliceChannels { x, start } => {
                let c = val(*x).shape()[3];
                let len = node.value.shape()[3];
                acc(*x, &mut |d| {
                    for (px, gp) in d.chunks_exact_mut(c).zip(gd.chunks_exact(len)) {
                        add_into(&mut px[*start..*start + len], gp);
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                acc(*a, &mut |d| {
                    for o in d.iter_mut() {
                        *o += g0;
                    }
                });
            }
            Op::Reparam { mean, log_std, noise } => {
                let lv = val(*log_std).data();
                let nd = noise.data();
                acc(*mean, &mut |d| add_into(d, gd));
                acc(*log_std, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * lv[i].exp() * nd[i];
                    }
                });
            }
            Op::KlStandard { mean, log_std } => {
                let (m, l) = (val(*mean).data(), val(*log_std).data());
                acc(*mean, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * kl_standard_grad(m[i], l[i]).0;
                    }
                });
                acc(*log_std, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * kl_standard_grad(m[i], l[i]).1;
                    }
                });
            }
            Op::KlDiag { mq, lq, mp, lp } => {
                let ins = [*mq, *lq, *mp, *lp];
                let [a, b, c, e] = ins.map(|v| val(v).data());
                for (slot, &v) in ins.iter().enumerate() {
                    acc(v, &mut |d| {
                        for i in 0..d.len() {
                            d[i] += gd[i] * kl_diag_grad(a[i], b[i], c[i], e[i])[slot];
                        }
                    });
                }
            }
            Op::RelativeKl { prior_ls, dm, dls } => {
                let ins = [*prior_ls, *dm, *dls];
                let [a, b, c] = ins.map(|v| val(v).data());
                for (slot, &v) in ins.iter().enumerate() {
                    acc(v, &mut |d| {
                        for i in 0..d.len() {
                            d[i] += gd[i] * relative_kl_grad(a[i], b[i], c[i])[slot];
                        }
                    });
                }
            }
            Op::LogNormal { z, mean, log_std } => {
                let ins = [*z, *mean, *log_std];
                let [a, b, c] = ins.map(|v| val(v).data());
                for (slot, &v) in ins.iter().enumerate() {
                    acc(v, &mut |d| {
                        for i in 0..d.len() {
                            d[i] += gd[i] * log_normal_grad(a[i], b[i], c[i])[slot];
                        }
                    });
                }
            }
            Op::Mixture { z, means, log_stds } => {
                let (zt, mt, lt) = (val(*z), val(*means), val(*log_stds));
                let d = zt.per_item();
                let k = mt.batch();
                let out = node.value.data();
                let ln_k = T::from_usize(k).unwrap().ln();
                let mut dz = vec![T::zero(); zt.len()];
                let mut dm = vec![T::zero(); mt.len()];
                let mut dl = vec![T::zero(); lt.len()];
                for n in 0..zt.batch() {
                    for i in 0..d {
                        let idx = n * d + i;
                        let zi = zt.data()[idx];
                        let lse = out[idx] + ln_k;
                        for kk in 0..k {
                            let (mu, ls) = (mt.data()[kk * d + i], lt.data()[kk * d + i]);
                            let w = (log_normal_elem(zi, mu, ls) - lse).exp() * gd[idx];
                            let [gz, gm, gl] = log_normal_grad(zi, mu, ls);
                            dz[idx] += w * gz;
                            dm[kk * d + i] += w * gm;
                            dl[kk * d + i] += w * gl;
                        }
                    }
                }
                acc(*z, &mut |o| add_into(o, &dz));
                acc(*means, &mut |o| add_into(o, &dm));
                acc(*log_stds, &mut |o| add_into(o, &dl));
            }
            Op::SegLoss { logits, target } => {
                let a = val(*logits);
                let (n, p) = (a.batch(), a.per_item());
                let g0 = gd[0] / T::from_usize(n).unwrap();
                let two = T::lit(2.0);
                acc(*logits, &mut |d| {
                    for b in 0..n {
                        let (av, yv) = (a.item(b), target.item(b));
                        let (mut spy, mut sp, mut sy) = (T::zero(), T::zero(), T::zero());
                        for (&ai, &yi) in av.iter().zip(yv) {
                            let pi = sigmoid(ai);
                            spy += pi * yi;
                            sp += pi;
                            sy += yi;
                        }
                        let num = two * spy + T::one();
                        let den = sp + sy + T::one();
                        for i in 0..p {
                            let pi = sigmoid(av[i]);
                            let ddice = (two * yv[i] * den - num) / (den * den);
                            d[b * p + i] += g0 * ((pi - yv[i]) - ddice * pi * (T::one() - pi));
                        }
                    }
                });
            }
        }
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], s: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i as f64 + 1.0) * s).sin()).collect()).unwrap()
    }

    /// Central-difference check of d(sum(w * f(params)))/d(params).
    fn check(build: impl Fn(&mut Graph<f64>, &[Var]) -> Var, params: Vec<Tensor<f64>>) {
        let eval = |ps: &[Tensor<f64>], grad: bool| {
            let mut g = if grad { Graph::new() } else { Graph::inference() };
            let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
            let out = build(&mut g, &vars);
            let w = t(g.shape(out), 0.77);
            let wv = g.constant(w);
            let prod = g.mul(out, wv);
            let root = g.sum(prod);
            let value = g.scalar(root);
            let grads = grad.then(|| {
                let gr = g.backward(root);
                vars.iter().map(|v| gr.get(*v).cloned().unwrap()).collect::<Vec<_>>()
            });
            (value, grads)
        };
        let (_, grads) = eval(&params, true);
        let grads = grads.unwrap();
        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            for j in 0..p.len() {
                let mut plus = params.clone();
                plus[pi].data_mut()[j] += h;
                let mut minus = params.clone();
                minus[pi].data_mut()[j] -= h;
                let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
                let an = grads[pi].data()[j];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-5, "param {pi}[{j}]: analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn elementwise_ops() {
        check(
            |g, v| {
                let a = g.add(v[0], v[1]);
                let b = g.mul(a, v[1]);
                let c = g.sub(b, v[0]);
                let d = g.silu(c);
                let e = g.sigmoid(d);
                g.scale(e, 1.7)
            },
            vec![t(&[2, 3], 0.3), t(&[2, 3], 1.1)],
        );
    }

    #[test]
    fn conv_and_resampling_ops() {
        check(
            |g, v| {
                let c = g.conv2d(v[0], v[1], v[2], 2);
                let s = g.silu(c);
                let u = g.upsample_nearest(s, 2);
                let b = g.upsample_bilinear(u, 2);
                g.slice_channels(b, 1, 2)
            },
            vec![t(&[2, 4, 4, 2], 0.4), t(&[3, 3, 2, 3], 0.9), t(&[3], 0.2)],
        );
    }

    #[test]
    fn gaussian_ops() {
        check(
            |g, v| {
                let a = g.kl_standard(v[0], v[1]);
                let b = g.kl_diag(v[0], v[1], v[2], v[3]);
                let c = g.relative_kl(v[1], v[2], v[3]);
                let z = g.reparam(v[0], v[1], t(&[1, 2, 2, 1], 2.3));
                let d = g.log_normal(z, v[2], v[3]);
                let ab = g.add(a, b);
                let cd = g.add(c, d);
                g.linear(&[(ab, 0.5), (cd, -1.5)])
            },
            vec![t(&[1, 2, 2, 1], 0.3), t(&[1, 2, 2, 1], 0.7), t(&[1, 2, 2, 1], 1.9), t(&[1, 2, 2, 1], 0.45)],
        );
    }

    #[test]
    fn mixture_op() {
        check(
            |g, v| g.mixture_log_density(v[0], v[1], v[2]),
            vec![t(&[3, 2, 2, 1], 1.3), t(&[4, 2, 2, 1], 0.6), t(&[4, 2, 2, 1], 0.25)],
        );
    }

    #[test]
    fn repeat_items_op() {
        check(|g, v| g.repeat_items(v[0], 3), vec![t(&[1, 2, 2, 2], 0.9)]);
    }

    #[test]
    fn seg_loss_and_broadcast() {
        let target = Tensor::from_vec(&[2, 2, 2, 1], vec![1., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        check(
            move |g, v| {
                let b = g.broadcast(v[1], &[2, 2, 2, 1]);
                let a = g.mul(v[0], b);
                g.seg_loss(a, target.clone())
            },
            vec![t(&[2, 2, 2, 1], 1.7), t(&[1], 0.9)],
        );
    }

    #[test]
    fn inference_graph_tracks_no_gradients() {
        let mut g = Graph::<f32>::inference();
        let a = g.param(Tensor::full(&[2], 1.0));
        let b = g.add(a, a);
        assert_eq!(g.value(b).data(), &[2.0, 2.0]);
        assert!(!g.grad_enabled());
    }
}
