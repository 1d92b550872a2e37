//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! bound from a [`ParamStore`] by name; whether a bound parameter receives a
//! gradient is decided by the graph's [`Trainable`] filter, which is how
//! discriminator and generator updates are kept apart and how frozen modules
//! stay frozen. Shape errors inside the graph are programming errors and
//! panic; public entry points validate user input before building graphs.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, ConvGeom, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which bound parameters require gradients.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Trainable {
    None,
    All,
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn prefixes<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Trainable::Prefixes(items.into_iter().map(Into::into).collect())
    }

    pub fn matches(&self, name: &str) -> bool {
        match self {
            Trainable::None => false,
            Trainable::All => true,
            Trainable::Prefixes(p) => p.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &Nodes<'_>, &mut GradBuf)>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Read access to forward values during the backward sweep.
pub struct Nodes<'a>(&'a [Node]);

impl Nodes<'_> {
    #[inline]
    fn val(&self, v: Var) -> &Tensor {
        &self.0[v.0].value
    }
}

struct GradBuf {
    slots: Vec<Option<Vec<f64>>>,
    wants: Vec<bool>,
    sizes: Vec<usize>,
}

impl GradBuf {
    #[inline]
    fn wants(&self, v: Var) -> bool {
        self.wants[v.0]
    }

    /// Mutable gradient slot for `v`, allocated on first use.
    fn slot(&mut self, v: Var) -> &mut [f64] {
        let size = self.sizes[v.0];
        self.slots[v.0].get_or_insert_with(|| vec![0.0; size])
    }

    fn add(&mut self, v: Var, g: &[f64]) {
        if !self.wants(v) {
            return;
        }
        match &mut self.slots[v.0] {
            Some(s) => s.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    by_var: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient w.r.t. a leaf that required grad. `None` if nothing reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|v| self.wrt(*v))
    }

    /// Gradients of every trainable bound parameter that was reached.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(k, v)| self.wrt(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

/// Precomputed bilinear taps used by [`Graph::gather_bilinear`].
///
/// For each batch item and destination pixel there are four `(source index,
/// weight)` taps into the source plane; invalid pixels carry zero weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePlan {
    pub batch: usize,
    pub src_hw: (usize, usize),
    pub dst_hw: (usize, usize),
    pub taps: Vec<[(u32, f64); 4]>,
}

pub struct Graph<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    trainable: Trainable,
    grad_enabled: bool,
    bound: BTreeMap<String, Var>,
}

impl<'p> Graph<'p> {
    /// Graph whose bound parameters require grad according to `trainable`.
    pub fn new(params: &'p ParamStore, trainable: Trainable) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(params),
            trainable,
            grad_enabled: true,
            bound: BTreeMap::new(),
        }
    }

    /// Forward-only graph: nothing requires grad and no backward closures are
    /// kept.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(params),
            trainable: Trainable::None,
            grad_enabled: false,
            bound: BTreeMap::new(),
        }
    }

    /// A graph without parameters, for differentiating plain functions.
    pub fn detached() -> Graph<'static> {
        Graph {
            nodes: Vec::new(),
            params: None,
            trainable: Trainable::None,
            grad_enabled: true,
            bound: BTreeMap::new(),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// The parameter store bound to this graph, if any.
    pub fn store(&self) -> Option<&'p ParamStore> {
        self.params
    }

    /// Parameters bound from now on are read from `params`; names already
    /// bound keep their current values.
    pub fn switch_store(&mut self, params: &'p ParamStore) {
        self.params = Some(params);
    }

    pub fn trainable(&self) -> &Trainable {
        &self.trainable
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that receives a gradient (e.g. discriminator inputs for R1).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Bind a named parameter, once per graph.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let store = self
            .params
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let t = store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?
            .clone();
        let rg = self.trainable.matches(name);
        let v = self.leaf(t, rg);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Like [`Graph::param`] but panics on a missing name. Module code uses
    /// this after construction has registered every name it reads.
    pub fn p(&mut self, name: &str) -> Var {
        self.param(name)
            .unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: &[Var],
        backward: impl Fn(&Tensor, &Nodes<'_>, &mut GradBuf) + 'static,
    ) -> Var {
        let rg = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad: rg,
            backward: if rg { Some(Box::new(backward)) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar");
        let n = loss.0 + 1;
        let mut buf = GradBuf {
            slots: vec![None; n],
            wants: self.nodes[..n].iter().map(|x| x.requires_grad).collect(),
            sizes: self.nodes[..n].iter().map(|x| x.value.numel()).collect(),
        };
        let mut by_var: Vec<Option<Tensor>> = vec![None; n];
        if !self.nodes[loss.0].requires_grad {
            return Gradients {
                by_var,
                params: self.bound.clone(),
            };
        }
        buf.slots[loss.0] = Some(vec![1.0]);
        let nodes = Nodes(&self.nodes[..n]);
        for i in (0..n).rev() {
            let Some(g) = buf.slots[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let g = Tensor::from_vec(node.value.shape(), g);
            match &node.backward {
                Some(f) => f(&g, &nodes, &mut buf),
                None => by_var[i] = Some(g),
            }
        }
        Gradients {
            by_var,
            params: self.bound.clone(),
        }
    }

    // ----- elementwise ---------------------------------------------------

    fn check_same(&self, op: &'static str, a: Var, b: Var) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same("add", a, b);
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y).unwrap();
        self.push(out, &[a, b], move |g, _, buf| {
            buf.add(a, g.data());
            buf.add(b, g.data());
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same("sub", a, b);
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y).unwrap();
        self.push(out, &[a, b], move |g, _, buf| {
            buf.add(a, g.data());
            if buf.wants(b) {
                let s = buf.slot(b);
                s.iter_mut().zip(g.data()).for_each(|(s, g)| *s -= g);
            }
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same("mul", a, b);
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y).unwrap();
        self.push(out, &[a, b], move |g, nodes, buf| {
            if buf.wants(a) {
                let bv = nodes.val(b).data();
                let s = buf.slot(a);
                for i in 0..s.len() {
                    s[i] += g.data()[i] * bv[i];
                }
            }
            if buf.wants(b) {
                let av = nodes.val(a).data();
                let s = buf.slot(b);
                for i in 0..s.len() {
                    s[i] += g.data()[i] * av[i];
                }
            }
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.check_same("div", a, b);
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y).unwrap();
        self.push(out, &[a, b], move |g, nodes, buf| {
            let av = nodes.val(a).data();
            let bv = nodes.val(b).data();
            if buf.wants(a) {
                let s = buf.slot(a);
                for i in 0..s.len() {
                    s[i] += g.data()[i] / bv[i];
                }
            }
            if buf.wants(b) {
                let s = buf.slot(b);
                for i in 0..s.len() {
                    s[i] -= g.data()[i] * av[i] / (bv[i] * bv[i]);
                }
            }
        })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, &[a], move |g, _, buf| {
            if buf.wants(a) {
                let s = buf.slot(a);
                s.iter_mut().zip(g.data()).for_each(|(s, g)| *s += k * g);
            }
        })
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        self.push(out, &[a], move |g, _, buf| buf.add(a, g.data()))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Elementwise `f` with derivative `df(x)`.
    pub fn unary(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Var {
        let out = self.value(a).map(f);
        self.push(out, &[a], move |g, nodes, buf| {
            if !buf.wants(a) {
                return;
            }
            let x = nodes.val(a).data();
            let s = buf.slot(a);
            for i in 0..s.len() {
                s[i] += g.data()[i] * df(x[i]);
            }
        })
    }

    /// Elementwise op whose derivative is expressed through its output.
    fn unary_y(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        dfy: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let out = self.value(a).map(f);
        let y = out.clone();
        self.push(out, &[a], move |g, nodes, buf| {
            if !buf.wants(a) {
                return;
            }
            let x = nodes.val(a).data();
            let s = buf.slot(a);
            for i in 0..s.len() {
                s[i] += g.data()[i] * dfy(x[i], y.data()[i]);
            }
        })
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, crate::math::sin, crate::math::cos)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary_y(a, crate::math::exp, |_, y| y)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x| 2.0 * x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, libm::fabs, |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, sigmoid)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary_y(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary_y(a, libm::tanh, |_, y| 1.0 - y * y)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    // ----- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, &[a], move |g, _, buf| {
            if buf.wants(a) {
                let gv = g.data()[0];
                buf.slot(a).iter_mut().for_each(|s| *s += gv);
            }
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // ----- shape ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self
            .value(a)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(out, &[a], move |g, _, buf| buf.add(a, g.data()))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let shape = self.shape(a).to_vec();
        assert_eq!(perm.len(), shape.len(), "permute rank");
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let index = permute_index(&shape, perm);
        let src = self.value(a).data();
        let data: Vec<f64> = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::from_vec(&out_shape, data);
        self.push(out, &[a], move |g, _, buf| {
            if buf.wants(a) {
                let s = buf.slot(a);
                for (o, &i) in index.iter().enumerate() {
                    s[i] += g.data()[o];
                }
            }
        })
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(a).to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = Tensor::from_vec(&out_shape, data);
        self.push(out, &[a], move |g, _, buf| {
            if buf.wants(a) {
                let s = buf.slot(a);
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    let gs = &g.data()[o * len * inner..(o + 1) * len * inner];
                    s[base..base + len * inner]
                        .iter_mut()
                        .zip(gs)
                        .for_each(|(s, g)| *s += g);
                }
            }
        })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let lens: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = self.shape(*p);
                assert_eq!(s.len(), first.len(), "concat rank");
                for (d, (x, y)) in s.iter().zip(&first).enumerate() {
                    assert!(d == axis || x == y, "concat: shapes differ off-axis");
                }
                s[axis]
            })
            .collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                let src = self.value(*p).data();
                data.extend_from_slice(&src[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let out = Tensor::from_vec(&out_shape, data);
        let parts_v = parts.to_vec();
        self.push(out, parts, move |g, _, buf| {
            let mut offset = 0;
            for (p, &l) in parts_v.iter().zip(&lens) {
                if buf.wants(*p) {
                    let s = buf.slot(*p);
                    for o in 0..outer {
                        let gs = &g.data()[(o * total + offset) * inner..(o * total + offset + l) * inner];
                        s[o * l * inner..(o + 1) * l * inner]
                            .iter_mut()
                            .zip(gs)
                            .for_each(|(s, g)| *s += g);
                    }
                }
                offset += l;
            }
        })
    }

    // ----- dense layers --------------------------------------------------

    /// `x [M, K] · wᵀ + b` with `w [N, K]`, `b [N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1], "linear shapes {xs:?} {ws:?}");
        let (m, k, n) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), true, 0.0, &mut out);
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[n], "linear bias");
            let bv = self.value(b).data();
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        let out = Tensor::from_vec(&[m, n], out);
        let parents: Vec<Var> = match b {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        self.push(out, &parents, move |g, nodes, buf| {
            if buf.wants(x) {
                let wv = nodes.val(w).data();
                gemm(m, n, k, g.data(), false, wv, false, 1.0, buf.slot(x));
            }
            if buf.wants(w) {
                let xv = nodes.val(x).data();
                gemm(n, m, k, g.data(), true, xv, false, 1.0, buf.slot(w));
            }
            if let Some(b) = b {
                if buf.wants(b) {
                    let s = buf.slot(b);
                    for row in g.data().chunks(n) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                }
            }
        })
    }

    /// `sin(gamma ⊙ h + beta)` with `h [B, P, D]` and per-sample `gamma`,
    /// `beta` of shape `[B, D]`.
    pub fn film_sin(&mut self, h: Var, gamma: Var, beta: Var) -> Var {
        let hs = self.shape(h).to_vec();
        assert_eq!(hs.len(), 3, "film_sin expects [B, P, D]");
        let (bsz, p, d) = (hs[0], hs[1], hs[2]);
        assert_eq!(self.shape(gamma), &[bsz, d], "film gamma");
        assert_eq!(self.shape(beta), &[bsz, d], "film beta");
        let hv = self.value(h).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; bsz * p * d];
        for b in 0..bsz {
            let gm = &gv[b * d..(b + 1) * d];
            let bt = &bv[b * d..(b + 1) * d];
            for i in 0..p {
                let off = (b * p + i) * d;
                for j in 0..d {
                    out[off + j] = crate::math::sin(gm[j] * hv[off + j] + bt[j]);
                }
            }
        }
        let out = Tensor::from_vec(&hs, out);
        self.push(out, &[h, gamma, beta], move |g, nodes, buf| {
            let hv = nodes.val(h).data();
            let gv = nodes.val(gamma).data();
            let bv = nodes.val(beta).data();
            let gd = g.data();
            // du = g * cos(u)
            let mut du = vec![0.0; gd.len()];
            for b in 0..bsz {
                for i in 0..p {
                    let off = (b * p + i) * d;
                    for j in 0..d {
                        let u = gv[b * d + j] * hv[off + j] + bv[b * d + j];
                        du[off + j] = gd[off + j] * crate::math::cos(u);
                    }
                }
            }
            if buf.wants(h) {
                let s = buf.slot(h);
                for b in 0..bsz {
                    for i in 0..p {
                        let off = (b * p + i) * d;
                        for j in 0..d {
                            s[off + j] += du[off + j] * gv[b * d + j];
                        }
                    }
                }
            }
            if buf.wants(gamma) {
                let s = buf.slot(gamma);
                for b in 0..bsz {
                    for i in 0..p {
                        let off = (b * p + i) * d;
                        for j in 0..d {
                            s[b * d + j] += du[off + j] * hv[off + j];
                        }
                    }
                }
            }
            if buf.wants(beta) {
                let s = buf.slot(beta);
                for b in 0..bsz {
                    for i in 0..p {
                        let off = (b * p + i) * d;
                        for j in 0..d {
                            s[b * d + j] += du[off + j];
                        }
                    }
                }
            }
        })
    }

    // ----- volume rendering ---------------------------------------------

    /// Compositing weights `w_i = T_i (1 - exp(-σ_i δ_i))`,
    /// `T_i = exp(-Σ_{j<i} σ_j δ_j)` for `sigma [R, N]` and fixed `delta [R, N]`.
    pub fn render_weights(&mut self, sigma: Var, delta: Arc<Vec<f64>>) -> Var {
        let ss = self.shape(sigma).to_vec();
        assert_eq!(ss.len(), 2, "render_weights expects [R, N]");
        let (r, n) = (ss[0], ss[1]);
        assert_eq!(delta.len(), r * n, "render_weights delta");
        let out = Tensor::from_vec(&ss, alpha_weights(self.value(sigma).data(), &delta, r, n));
        self.push(out, &[sigma], move |g, nodes, buf| {
            if !buf.wants(sigma) {
                return;
            }
            let sv = nodes.val(sigma).data();
            let w = alpha_weights(sv, &delta, r, n);
            let s = buf.slot(sigma);
            for ray in 0..r {
                let base = ray * n;
                // suffix[k] = Σ_{i>k} g_i w_i
                let mut suffix = 0.0;
                let mut trans = 1.0;
                let mut transmit = vec![0.0; n];
                for i in 0..n {
                    transmit[i] = trans;
                    trans *= crate::math::exp(-sv[base + i] * delta[base + i]);
                }
                for k in (0..n).rev() {
                    let idx = base + k;
                    let e = crate::math::exp(-sv[idx] * delta[idx]);
                    s[idx] += g.data()[idx] * transmit[k] * delta[idx] * e - delta[idx] * suffix;
                    suffix += g.data()[idx] * w[idx];
                }
            }
        })
    }

    /// `out[r, c] = Σ_n w[r, n] · v[r, n, c]`.
    pub fn composite(&mut self, w: Var, v: Var) -> Var {
        let ws = self.shape(w).to_vec();
        let vs = self.shape(v).to_vec();
        assert!(vs.len() == 3 && ws == vs[..2], "composite shapes {ws:?} {vs:?}");
        let (r, n, c) = (vs[0], vs[1], vs[2]);
        let wv = self.value(w).data();
        let vv = self.value(v).data();
        let mut out = vec![0.0; r * c];
        for ray in 0..r {
            for i in 0..n {
                let wi = wv[ray * n + i];
                if wi == 0.0 {
                    continue;
                }
                let src = &vv[(ray * n + i) * c..(ray * n + i + 1) * c];
                out[ray * c..(ray + 1) * c]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(o, x)| *o += wi * x);
            }
        }
        let out = Tensor::from_vec(&[r, c], out);
        self.push(out, &[w, v], move |g, nodes, buf| {
            let wv = nodes.val(w).data();
            let vv = nodes.val(v).data();
            let gd = g.data();
            if buf.wants(w) {
                let s = buf.slot(w);
                for ray in 0..r {
                    for i in 0..n {
                        let src = &vv[(ray * n + i) * c..(ray * n + i + 1) * c];
                        s[ray * n + i] += src
                            .iter()
                            .zip(&gd[ray * c..(ray + 1) * c])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
            }
            if buf.wants(v) {
                let s = buf.slot(v);
                for ray in 0..r {
                    for i in 0..n {
                        let wi = wv[ray * n + i];
                        let dst = &mut s[(ray * n + i) * c..(ray * n + i + 1) * c];
                        dst.iter_mut()
                            .zip(&gd[ray * c..(ray + 1) * c])
                            .for_each(|(d, g)| *d += wi * g);
                    }
                }
            }
        })
    }

    // ----- convolution & resampling --------------------------------------

    /// 2D convolution over `[B, Ci, H, W]` with `w [Co, Ci, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let wsh = self.shape(w).to_vec();
        assert!(xs.len() == 4 && wsh.len() == 4, "conv2d rank");
        assert_eq!(xs[1], wsh[1], "conv2d input channels");
        assert_eq!(wsh[2], wsh[3], "conv2d square kernel");
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: wsh[2],
            stride,
            padding,
        };
        let (bsz, co) = (xs[0], wsh[0]);
        let (oh, ow) = geom.out_hw();
        let plane = oh * ow;
        let rows = geom.col_rows();
        let in_sz = xs[1] * xs[2] * xs[3];
        let mut cols = vec![0.0; rows * plane];
        let mut out = vec![0.0; bsz * co * plane];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..bsz {
                geom.im2col(&xv[bi * in_sz..(bi + 1) * in_sz], &mut cols);
                let dst = &mut out[bi * co * plane..(bi + 1) * co * plane];
                gemm(co, rows, plane, wv, false, &cols, false, 0.0, dst);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                assert_eq!(bv.len(), co, "conv2d bias");
                for bi in 0..bsz {
                    for c in 0..co {
                        let off = (bi * co + c) * plane;
                        out[off..off + plane].iter_mut().for_each(|o| *o += bv[c]);
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[bsz, co, oh, ow], out);
        let parents: Vec<Var> = match b {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        self.push(out, &parents, move |g, nodes, buf| {
            let xv = nodes.val(x).data();
            let wv = nodes.val(w).data();
            let gd = g.data();
            let want_x = buf.wants(x);
            let want_w = buf.wants(w);
            let mut cols = vec![0.0; rows * plane];
            let mut gw = if want_w { vec![0.0; co * rows] } else { Vec::new() };
            for bi in 0..bsz {
                let gb = &gd[bi * co * plane..(bi + 1) * co * plane];
                if want_w {
                    geom.im2col(&xv[bi * in_sz..(bi + 1) * in_sz], &mut cols);
                    gemm(co, plane, rows, gb, false, &cols, true, 1.0, &mut gw);
                }
                if want_x {
                    gemm(rows, co, plane, wv, true, gb, false, 0.0, &mut cols);
                    let s = buf.slot(x);
                    geom.col2im(&cols, &mut s[bi * in_sz..(bi + 1) * in_sz]);
                }
            }
            if want_w {
                buf.add(w, &gw);
            }
            if let Some(b) = b {
                if buf.wants(b) {
                    let s = buf.slot(b);
                    for bi in 0..bsz {
                        for c in 0..co {
                            let off = (bi * co + c) * plane;
                            s[c] += gd[off..off + plane].iter().sum::<f64>();
                        }
                    }
                }
            }
        })
    }

    /// Nearest-neighbour upsampling of `[B, C, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (h, w) = (xs[2], xs[3]);
        self.resize_nearest(x, h * factor, w * factor)
    }

    /// Nearest resize of `[B, C, H, W]` to `[B, C, oh, ow]`; source index is
    /// `floor((i + 0.5) · H / oh)`.
    pub fn resize_nearest(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "resize_nearest expects NCHW");
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let map = nearest_map(h, w, oh, ow);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let src = &xv[p * h * w..(p + 1) * h * w];
            out.extend(map.iter().map(|&i| src[i as usize]));
        }
        let out = Tensor::from_vec(&[xs[0], xs[1], oh, ow], out);
        self.push(out, &[x], move |g, _, buf| {
            if buf.wants(x) {
                let s = buf.slot(x);
                for p in 0..planes {
                    let gs = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    for (o, &i) in map.iter().enumerate() {
                        s[p * h * w + i as usize] += gs[o];
                    }
                }
            }
        })
    }

    /// Gather four bilinear taps per destination pixel from `src [B, C, H, W]`.
    pub fn gather_bilinear(&mut self, src: Var, plan: Arc<SamplePlan>) -> Var {
        let ss = self.shape(src).to_vec();
        assert_eq!(ss.len(), 4, "gather_bilinear expects NCHW");
        assert_eq!(ss[0], plan.batch, "gather_bilinear batch");
        assert_eq!((ss[2], ss[3]), plan.src_hw, "gather_bilinear source size");
        let (bsz, c) = (ss[0], ss[1]);
        let (sh, sw) = plan.src_hw;
        let (dh, dw) = plan.dst_hw;
        let (sp, dp) = (sh * sw, dh * dw);
        let sv = self.value(src).data();
        let mut out = vec![0.0; bsz * c * dp];
        for b in 0..bsz {
            let taps = &plan.taps[b * dp..(b + 1) * dp];
            for ch in 0..c {
                let plane = &sv[(b * c + ch) * sp..(b * c + ch + 1) * sp];
                let dst = &mut out[(b * c + ch) * dp..(b * c + ch + 1) * dp];
                for (o, t) in dst.iter_mut().zip(taps) {
                    *o = t.iter().map(|&(i, wt)| if wt == 0.0 { 0.0 } else { wt * plane[i as usize] }).sum();
                }
            }
        }
        let out = Tensor::from_vec(&[bsz, c, dh, dw], out);
        self.push(out, &[src], move |g, _, buf| {
            if !buf.wants(src) {
                return;
            }
            let s = buf.slot(src);
            for b in 0..bsz {
                let taps = &plan.taps[b * dp..(b + 1) * dp];
                for ch in 0..c {
                    let gs = &g.data()[(b * c + ch) * dp..(b * c + ch + 1) * dp];
                    let dst = &mut s[(b * c + ch) * sp..(b * c + ch + 1) * sp];
                    for (gv, t) in gs.iter().zip(taps) {
                        for &(i, wt) in t {
                            if wt != 0.0 {
                                dst[i as usize] += wt * gv;
                            }
                        }
                    }
                }
            }
        })
    }

    /// Per-channel "valid" correlation of `[B, C, H, W]` with the separable
    /// kernel `k ⊗ k`.
    pub fn separable_filter_valid(&mut self, x: Var, kernel: Arc<Vec<f64>>) -> Var {
        let xs = self.shape(x).to_vec();
        let k = kernel.len();
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        assert!(h >= k && w >= k, "separable_filter_valid: image smaller than kernel");
        let (oh, ow) = (h - k + 1, w - k + 1);
        let xv = self.value(x).data();
        let mut out = vec![0.0; planes * oh * ow];
        let mut tmp = vec![0.0; h * ow];
        for p in 0..planes {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for ox in 0..ow {
                    tmp[y * ow + ox] = (0..k).map(|j| kernel[j] * src[y * w + ox + j]).sum();
                }
            }
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    dst[oy * ow + ox] = (0..k).map(|i| kernel[i] * tmp[(oy + i) * ow + ox]).sum();
                }
            }
        }
        let out = Tensor::from_vec(&[xs[0], xs[1], oh, ow], out);
        self.push(out, &[x], move |g, _, buf| {
            if !buf.wants(x) {
                return;
            }
            let s = buf.slot(x);
            let mut tmp = vec![0.0; h * ow];
            for p in 0..planes {
                let gs = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                tmp.iter_mut().for_each(|t| *t = 0.0);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = gs[oy * ow + ox];
                        for i in 0..k {
                            tmp[(oy + i) * ow + ox] += kernel[i] * gv;
                        }
                    }
                }
                let dst = &mut s[p * h * w..(p + 1) * h * w];
                for y in 0..h {
                    for ox in 0..ow {
                        let tv = tmp[y * ow + ox];
                        for j in 0..k {
                            dst[y * w + ox + j] += kernel[j] * tv;
                        }
                    }
                }
            }
        })
    }

    // ----- normalization -------------------------------------------------

    /// Per-sample, per-channel normalization over spatial positions.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "instance_norm expects NCHW");
        let planes = xs[0] * xs[1];
        let n = xs[2] * xs[3];
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; planes];
        for p in 0..planes {
            let src = &xv[p * n..(p + 1) * n];
            let (mu, var) = mean_var(src);
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std[p] = is;
            for (o, v) in out[p * n..(p + 1) * n].iter_mut().zip(src) {
                *o = (v - mu) * is;
            }
        }
        let y = Tensor::from_vec(&xs, out);
        let y_saved = y.clone();
        self.push(y, &[x], move |g, _, buf| {
            if !buf.wants(x) {
                return;
            }
            let yv = y_saved.data();
            let s = buf.slot(x);
            let nf = n as f64;
            for p in 0..planes {
                let gs = &g.data()[p * n..(p + 1) * n];
                let ys = &yv[p * n..(p + 1) * n];
                let mg: f64 = gs.iter().sum::<f64>() / nf;
                let mgy: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / nf;
                for i in 0..n {
                    s[p * n + i] += inv_std[p] * (gs[i] - mg - ys[i] * mgy);
                }
            }
        })
    }

    /// `x * scale + shift` with per-sample, per-channel `scale`/`shift [B, C]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "channel_affine expects NCHW");
        let planes = xs[0] * xs[1];
        assert_eq!(self.shape(scale), &xs[..2], "channel_affine scale");
        assert_eq!(self.shape(shift), &xs[..2], "channel_affine shift");
        let n = xs[2] * xs[3];
        let xv = self.value(x).data();
        let sc = self.value(scale).data();
        let sh = self.value(shift).data();
        let mut out = vec![0.0; xv.len()];
        for p in 0..planes {
            for i in 0..n {
                out[p * n + i] = xv[p * n + i] * sc[p] + sh[p];
            }
        }
        let out = Tensor::from_vec(&xs, out);
        self.push(out, &[x, scale, shift], move |g, nodes, buf| {
            let gd = g.data();
            if buf.wants(x) {
                let sc = nodes.val(scale).data();
                let s = buf.slot(x);
                for p in 0..planes {
                    for i in 0..n {
                        s[p * n + i] += gd[p * n + i] * sc[p];
                    }
                }
            }
            if buf.wants(scale) {
                let xv = nodes.val(x).data();
                let s = buf.slot(scale);
                for p in 0..planes {
                    s[p] += (0..n).map(|i| gd[p * n + i] * xv[p * n + i]).sum::<f64>();
                }
            }
            if buf.wants(shift) {
                let s = buf.slot(shift);
                for p in 0..planes {
                    s[p] += gd[p * n..(p + 1) * n].iter().sum::<f64>();
                }
            }
        })
    }

    /// Softmax over the channel axis of `[B, C, H, W]`.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "softmax_channels expects NCHW");
        let y = softmax_channels(self.value(x));
        let (bsz, c, n) = (xs[0], xs[1], xs[2] * xs[3]);
        let y_saved = y.clone();
        self.push(y, &[x], move |g, _, buf| {
            if !buf.wants(x) {
                return;
            }
            let yv = y_saved.data();
            let gd = g.data();
            let s = buf.slot(x);
            for b in 0..bsz {
                for i in 0..n {
                    let dot: f64 = (0..c)
                        .map(|ch| {
                            let idx = (b * c + ch) * n + i;
                            gd[idx] * yv[idx]
                        })
                        .sum();
                    for ch in 0..c {
                        let idx = (b * c + ch) * n + i;
                        s[idx] += yv[idx] * (gd[idx] - dot);
                    }
                }
            }
        })
    }

    /// Broadcast `m [B, 1, H, W]` across `C` channels.
    pub fn broadcast_channels(&mut self, m: Var, c: usize) -> Var {
        let ms = self.shape(m).to_vec();
        assert!(ms.len() == 4 && ms[1] == 1, "broadcast_channels expects [B, 1, H, W]");
        let (bsz, n) = (ms[0], ms[2] * ms[3]);
        let mv = self.value(m).data();
        let mut out = Vec::with_capacity(bsz * c * n);
        for b in 0..bsz {
            for _ in 0..c {
                out.extend_from_slice(&mv[b * n..(b + 1) * n]);
            }
        }
        let out = Tensor::from_vec(&[bsz, c, ms[2], ms[3]], out);
        self.push(out, &[m], move |g, _, buf| {
            if buf.wants(m) {
                let s = buf.slot(m);
                for b in 0..bsz {
                    for ch in 0..c {
                        let gs = &g.data()[(b * c + ch) * n..(b * c + ch + 1) * n];
                        s[b * n..(b + 1) * n].iter_mut().zip(gs).for_each(|(s, g)| *s += g);
                    }
                }
            }
        })
    }
}

// ----- shared numeric helpers ----------------------------------------------

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(crate::math::exp(-x))
    } else {
        libm::log1p(crate::math::exp(x))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + crate::math::exp(-x))
    } else {
        let e = crate::math::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var)
}

pub(crate) fn alpha_weights(sigma: &[f64], delta: &[f64], r: usize, n: usize) -> Vec<f64> {
    let mut w = vec![0.0; r * n];
    for ray in 0..r {
        let mut trans = 1.0;
        for i in 0..n {
            let idx = ray * n + i;
            let e = crate::math::exp(-sigma[idx] * delta[idx]);
            w[idx] = trans * (1.0 - e);
            trans *= e;
        }
    }
    w
}

pub fn softmax_channels(x: &Tensor) -> Tensor {
    let xs = x.shape();
    let (bsz, c, n) = (xs[0], xs[1], xs[2] * xs[3]);
    let xv = x.data();
    let mut out = vec![0.0; xv.len()];
    for b in 0..bsz {
        for i in 0..n {
            let mut mx = f64::NEG_INFINITY;
            for ch in 0..c {
                mx = mx.max(xv[(b * c + ch) * n + i]);
            }
            let mut z = 0.0;
            for ch in 0..c {
                let idx = (b * c + ch) * n + i;
                let e = crate::math::exp(xv[idx] - mx);
                out[idx] = e;
                z += e;
            }
            for ch in 0..c {
                out[(b * c + ch) * n + i] /= z;
            }
        }
    }
    Tensor::from_vec(xs, out)
}

fn nearest_map(h: usize, w: usize, oh: usize, ow: usize) -> Vec<u32> {
    let mut map = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let si = (((i as f64 + 0.5) * h as f64 / oh as f64) as usize).min(h - 1);
        for j in 0..ow {
            let sj = (((j as f64 + 0.5) * w as f64 / ow as f64) as usize).min(w - 1);
            map.push((si * w + sj) as u32);
        }
    }
    map
}

/// Source flat index for every output position of a permutation.
fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    for _ in 0..total {
        idx.push(counter.iter().zip(&out_strides).map(|(c, s)| c * s).sum());
        for d in (0..rank).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    idx
}
