use std::collections::BTreeMap;

use crate::error::{shape_err, AutodiffError, Result};
use crate::float::Float;
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride, dilation and zero padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self { stride: 1, dilation: 1, padding: 0 }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        c_out: usize,
        col: Vec<T>,
    },
    Relu(Var),
    Affine {
        x: Var,
        w: Var,
        b: Var,
        n: usize,
        d: usize,
        k: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
        ignore_index: usize,
        counted: usize,
        k: usize,
    },
    L2DistanceMap {
        a: Var,
        b: Var,
        dist: Vec<T>,
        hw: usize,
    },
    GradReverse(Var),
    PoolAvg2d {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        out_h: usize,
        out_w: usize,
    },
    UpsampleBilinear {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
        rows: Vec<(usize, usize, f64)>,
        cols: Vec<(usize, usize, f64)>,
    },
    Sum(Var),
    Mean(Var),
    Scale(Var, T),
    Combine(Vec<(Var, T)>),
    ChannelsLast {
        x: Var,
        c: usize,
        hw: usize,
    },
    GatherRows {
        sources: Vec<Var>,
        picks: Vec<(usize, usize)>,
        d: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of `requires_grad` leaves, keyed by leaf handle.
#[derive(Debug, Clone, Default)]
pub struct GradientMap<T> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Float> GradientMap<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }
}

/// A tape of operations recorded in execution order.
///
/// Calling [`backward`](Graph::backward) twice without [`zero_grad`](Graph::zero_grad)
/// accumulates into the leaf gradients.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: BTreeMap<usize, Vec<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaf_grads: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Copies the current value of `x` into a new constant leaf; no gradient
    /// flows back through the copy.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    // ---------------------------------------------------------------- ops

    /// 2-D convolution of a `[C_in, H, W]` input with a `[C_out, C_in, kh, kw]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        const OP: &str = "conv2d";
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(AutodiffError::Param {
                op: OP,
                detail: format!("stride {} and dilation {} must be >= 1", spec.stride, spec.dilation),
            });
        }
        let (is, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if is.len() != 3 || ks.len() != 4 {
            return shape_err(OP, format!("input {is:?} must be [C,H,W], kernel {ks:?} [Co,Ci,kh,kw]"));
        }
        if is[0] != ks[1] {
            return shape_err(OP, format!("input has {} channels, kernel expects {}", is[0], ks[1]));
        }
        let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return shape_err(OP, format!("bias {:?} must be [{c_out}]", self.shape(b)));
            }
        }
        let span_h = spec.dilation * (kh - 1) + 1;
        let span_w = spec.dilation * (kw - 1) + 1;
        if is[1] + 2 * spec.padding < span_h || is[2] + 2 * spec.padding < span_w {
            return shape_err(OP, format!("input {is:?} with padding {} smaller than kernel span", spec.padding));
        }
        let geom = ConvGeom {
            c_in: is[0],
            h: is[1],
            w: is[2],
            kh,
            kw,
            stride: spec.stride,
            dilation: spec.dilation,
            padding: spec.padding,
            out_h: (is[1] + 2 * spec.padding - span_h) / spec.stride + 1,
            out_w: (is[2] + 2 * spec.padding - span_w) / spec.stride + 1,
        };
        let col = kernels::im2col(self.value(input).data(), &geom);
        let (rows, n) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![T::zero(); c_out * n];
        if let Some(b) = bias {
            for (o, &bv) in self.value(b).data().iter().enumerate() {
                out[o * n..(o + 1) * n].fill(bv);
            }
        }
        T::gemm(
            c_out,
            rows,
            n,
            (self.value(kernel).data(), rows as isize, 1),
            (&col, n as isize, 1),
            T::one(),
            (&mut out, n as isize, 1),
        );
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        let col = if self.rg(kernel) { col } else { Vec::new() };
        let value = Tensor::new(vec![c_out, geom.out_h, geom.out_w], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, geom, c_out, col }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // NaN passes through so divergence stays visible downstream
        let value = self.value(x).map(|v| if v < T::zero() { T::zero() } else { v });
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// `x · weight + bias` for `x: [N,D]`, `weight: [D,K]`, `bias: [K]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        const OP: &str = "affine";
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return shape_err(OP, format!("x {xs:?}, weight {ws:?}, bias {bs:?}"));
        }
        let (n, d, k) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(n * k);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            n,
            d,
            k,
            (self.value(x).data(), d as isize, 1),
            (self.value(w).data(), k as isize, 1),
            T::one(),
            (&mut out, k as isize, 1),
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::new(vec![n, k], out)?;
        Ok(self.push(value, Op::Affine { x, w, b, n, d, k }, rg))
    }

    /// Mean over non-ignored rows of `-log softmax(logits)[label]`. Returns 0
    /// (with zero gradient) when every row is ignored.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], ignore_index: usize) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy";
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return shape_err(OP, format!("logits {ls:?} vs {} labels", labels.len()));
        }
        let (n, k) = (ls[0], ls[1]);
        if let Some(bad) = labels.iter().find(|&&l| l >= k && l != ignore_index) {
            return Err(AutodiffError::Validation {
                op: OP,
                detail: format!("label {bad} outside [0,{k}) and not ignore index {ignore_index}"),
            });
        }
        let data = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        let mut counted = 0usize;
        for (r, &label) in labels.iter().enumerate() {
            let row = &data[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp() / denom;
            }
            if label != ignore_index {
                total = total - (row[label] - max - denom.ln());
                counted += 1;
            }
        }
        let loss = if counted == 0 { T::zero() } else { total / T::from_usize(counted).unwrap() };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, probs, labels: labels.to_vec(), ignore_index, counted, k },
            rg,
        ))
    }

    /// Per-location Euclidean distance over the channel axis of two `[C,H,W]` maps.
    pub fn l2_distance_map(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb || sa.len() != 3 {
            return shape_err("l2_distance_map", format!("{sa:?} vs {sb:?}"));
        }
        let (c, hw) = (sa[0], sa[1] * sa[2]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut dist = vec![T::zero(); hw];
        for ch in 0..c {
            for (p, d) in dist.iter_mut().enumerate() {
                let diff = va[ch * hw + p] - vb[ch * hw + p];
                *d = *d + diff * diff;
            }
        }
        for d in &mut dist {
            *d = d.sqrt();
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(vec![sa[1], sa[2]], dist.clone())?;
        Ok(self.push(value, Op::L2DistanceMap { a, b, dist, hw }, rg))
    }

    /// Identity forward, negated gradient backward.
    pub fn grad_reverse(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        let rg = self.rg(x);
        self.push(value, Op::GradReverse(x), rg)
    }

    pub fn pool_avg2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        const OP: &str = "pool_avg2d";
        let s = self.shape(x).to_vec();
        if k == 0 || stride == 0 {
            return Err(AutodiffError::Param { op: OP, detail: format!("window {k}, stride {stride}") });
        }
        if s.len() != 3 || s[1] < k || s[2] < k {
            return shape_err(OP, format!("window {k} larger than input {s:?}"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (out_h, out_w) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let src = self.value(x).data();
        let inv = T::one() / T::from_usize(k * k).unwrap();
        let mut out = vec![T::zero(); c * out_h * out_w];
        for ch in 0..c {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = T::zero();
                    for dy in 0..k {
                        let row = ch * h * w + (oy * stride + dy) * w + ox * stride;
                        acc = acc + src[row..row + k].iter().copied().sum::<T>();
                    }
                    out[(ch * out_h + oy) * out_w + ox] = acc * inv;
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![c, out_h, out_w], out)?;
        Ok(self.push(value, Op::PoolAvg2d { x, c, h, w, k, stride, out_h, out_w }, rg))
    }

    /// Corner-aligned bilinear resize of a `[C,h,w]` map to `[C,out_h,out_w]`.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || out_h < s[1] || out_w < s[2] {
            return shape_err("upsample_bilinear", format!("{s:?} -> [{out_h},{out_w}]"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let rows = kernels::bilinear_table(h, out_h);
        let cols = kernels::bilinear_table(w, out_w);
        let out = kernels::upsample(self.value(x).data(), c, (h, w), &rows, &cols);
        let rg = self.rg(x);
        let value = Tensor::new(vec![c, out_h, out_w], out)?;
        Ok(self.push(value, Op::UpsampleBilinear { x, c, h, w, rows, cols }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap();
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// `Σ coeff_i · x_i` over same-shaped inputs, accumulated left to right.
    pub fn linear_combination(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return shape_err("linear_combination", "no terms");
        };
        let shape = self.shape(first).to_vec();
        let mut acc = vec![T::zero(); self.value(first).len()];
        for &(v, c) in terms {
            if self.shape(v) != shape.as_slice() {
                return shape_err("linear_combination", format!("{:?} vs {shape:?}", self.shape(v)));
            }
            for (a, &x) in acc.iter_mut().zip(self.value(v).data()) {
                *a = *a + c * x;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        let value = Tensor::new(shape, acc)?;
        Ok(self.push(value, Op::Combine(terms.to_vec()), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear_combination(&[(a, T::one()), (b, T::one())])
    }

    /// `[C,H,W]` → `[H·W, C]`: one row per spatial position.
    pub fn channels_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return shape_err("channels_last", format!("{s:?} is not [C,H,W]"));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * hw];
        for ch in 0..c {
            for p in 0..hw {
                out[p * c + ch] = src[ch * hw + p];
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![hw, c], out)?;
        Ok(self.push(value, Op::ChannelsLast { x, c, hw }, rg))
    }

    /// Stacks selected rows of `[N_i, D]` matrices: pick `(i, r)` takes row
    /// `r` of `sources[i]`.
    pub fn gather_rows(&mut self, sources: &[Var], picks: &[(usize, usize)]) -> Result<Var> {
        const OP: &str = "gather_rows";
        if sources.is_empty() || picks.is_empty() {
            return shape_err(OP, "nothing to gather");
        }
        let d = match self.shape(sources[0]) {
            [_, d] => *d,
            s => return shape_err(OP, format!("{s:?} is not [N,D]")),
        };
        for &s in sources {
            if self.shape(s).len() != 2 || self.shape(s)[1] != d {
                return shape_err(OP, format!("{:?} has width != {d}", self.shape(s)));
            }
        }
        let mut out = Vec::with_capacity(picks.len() * d);
        for &(i, r) in picks {
            let Some(&src) = sources.get(i) else {
                return shape_err(OP, format!("source index {i} out of range"));
            };
            if r >= self.shape(src)[0] {
                return shape_err(OP, format!("row {r} out of range for {:?}", self.shape(src)));
            }
            out.extend_from_slice(&self.value(src).data()[r * d..(r + 1) * d]);
        }
        let rg = sources.iter().any(|&s| self.rg(s));
        let value = Tensor::new(vec![picks.len(), d], out)?;
        Ok(self.push(value, Op::GatherRows { sources: sources.to_vec(), picks: picks.to_vec(), d }, rg))
    }

    // ----------------------------------------------------------- backward

    /// Propagates d(loss)/d(leaf) to every `requires_grad` leaf reachable from
    /// `loss`, adding into the leaf accumulators.
    pub fn backward(&mut self, loss: Var) -> Result<GradientMap<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(AutodiffError::Contract(format!("unknown node {}", loss.0)));
        }
        if !self.value(loss).is_scalar() {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);
        let mut reached = Vec::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                reached.push(id);
                match self.leaf_grads.get_mut(&id) {
                    Some(acc) => add_into(acc, &g),
                    None => {
                        self.leaf_grads.insert(id, g);
                    }
                }
                continue;
            }
            self.propagate(id, &g, &mut adj);
        }

        let grads = reached
            .into_iter()
            .map(|id| {
                let t = Tensor::new(self.nodes[id].value.shape().to_vec(), self.leaf_grads[&id].clone())
                    .expect("gradient matches leaf shape");
                (Var(id), t)
            })
            .collect();
        Ok(GradientMap { grads })
    }

    fn propagate(&self, id: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut send = |v: Var, grad: Vec<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => add_into(acc, &grad),
                slot @ None => *slot = Some(grad),
            }
        };
        let val = |v: Var| nodes[v.0].value.data();

        match &nodes[id].op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::Conv2d { input, kernel, bias, geom, c_out, col } => {
                let (rows, n, c_out) = (geom.col_rows(), geom.col_cols(), *c_out);
                if let Some(b) = bias {
                    let db = (0..c_out).map(|o| g[o * n..(o + 1) * n].iter().copied().sum()).collect();
                    send(*b, db);
                }
                if nodes[kernel.0].requires_grad {
                    let mut dk = vec![T::zero(); c_out * rows];
                    // dK = G · colᵀ
                    T::gemm(c_out, n, rows, (g, n as isize, 1), (col, 1, n as isize), T::zero(), (&mut dk, rows as isize, 1));
                    send(*kernel, dk);
                }
                if nodes[input.0].requires_grad {
                    let mut dcol = vec![T::zero(); rows * n];
                    // dcol = Kᵀ · G
                    T::gemm(
                        rows,
                        c_out,
                        n,
                        (val(*kernel), 1, rows as isize),
                        (g, n as isize, 1),
                        T::zero(),
                        (&mut dcol, n as isize, 1),
                    );
                    send(*input, kernels::col2im(&dcol, geom));
                }
            }
            Op::Relu(x) => {
                let dx = val(*x).iter().zip(g).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect();
                send(*x, dx);
            }
            Op::Affine { x, w, b, n, d, k } => {
                let (n, d, k) = (*n, *d, *k);
                if nodes[b.0].requires_grad {
                    let mut db = vec![T::zero(); k];
                    for r in 0..n {
                        add_into(&mut db, &g[r * k..(r + 1) * k]);
                    }
                    send(*b, db);
                }
                if nodes[w.0].requires_grad {
                    let mut dw = vec![T::zero(); d * k];
                    // dW = xᵀ · G
                    T::gemm(d, n, k, (val(*x), 1, d as isize), (g, k as isize, 1), T::zero(), (&mut dw, k as isize, 1));
                    send(*w, dw);
                }
                if nodes[x.0].requires_grad {
                    let mut dx = vec![T::zero(); n * d];
                    // dx = G · Wᵀ
                    T::gemm(n, k, d, (g, k as isize, 1), (val(*w), 1, k as isize), T::zero(), (&mut dx, d as isize, 1));
                    send(*x, dx);
                }
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels, ignore_index, counted, k } => {
                let mut dl = vec![T::zero(); probs.len()];
                if *counted > 0 {
                    let scale = g[0] / T::from_usize(*counted).unwrap();
                    for (r, &label) in labels.iter().enumerate() {
                        if label == *ignore_index {
                            continue;
                        }
                        let row = r * k;
                        for c in 0..*k {
                            let target = if c == label { T::one() } else { T::zero() };
                            dl[row + c] = (probs[row + c] - target) * scale;
                        }
                    }
                }
                send(*logits, dl);
            }
            Op::L2DistanceMap { a, b, dist, hw } => {
                let hw = *hw;
                let (va, vb) = (val(*a), val(*b));
                let eps = T::from_f64_lossy(1e-12);
                let mut da = vec![T::zero(); va.len()];
                for (i, d) in da.iter_mut().enumerate() {
                    let p = i % hw;
                    if dist[p] >= eps {
                        *d = g[p] * (va[i] - vb[i]) / dist[p];
                    }
                }
                if nodes[b.0].requires_grad {
                    send(*b, da.iter().map(|&v| -v).collect());
                }
                send(*a, da);
            }
            Op::GradReverse(x) => send(*x, g.iter().map(|&v| -v).collect()),
            Op::PoolAvg2d { x, c, h, w, k, stride, out_h, out_w } => {
                let (h, w, k, s) = (*h, *w, *k, *stride);
                let inv = T::one() / T::from_usize(k * k).unwrap();
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..*c {
                    for oy in 0..*out_h {
                        for ox in 0..*out_w {
                            let share = g[(ch * out_h + oy) * out_w + ox] * inv;
                            for dy in 0..k {
                                let row = ch * h * w + (oy * s + dy) * w + ox * s;
                                for v in &mut dx[row..row + k] {
                                    *v = *v + share;
                                }
                            }
                        }
                    }
                }
                send(*x, dx);
            }
            Op::UpsampleBilinear { x, c, h, w, rows, cols } => {
                send(*x, kernels::upsample_transpose(g, *c, (*h, *w), rows, cols));
            }
            Op::Sum(x) => send(*x, vec![g[0]; nodes[x.0].value.len()]),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len();
                send(*x, vec![g[0] / T::from_usize(n).unwrap(); n]);
            }
            Op::Scale(x, f) => send(*x, g.iter().map(|&v| v * *f).collect()),
            Op::Combine(terms) => {
                for &(v, c) in terms {
                    send(v, g.iter().map(|&gv| gv * c).collect());
                }
            }
            Op::ChannelsLast { x, c, hw } => {
                let mut dx = vec![T::zero(); c * hw];
                for p in 0..*hw {
                    for ch in 0..*c {
                        dx[ch * hw + p] = g[p * c + ch];
                    }
                }
                send(*x, dx);
            }
            Op::GatherRows { sources, picks, d } => {
                let d = *d;
                let mut per_source: Vec<Option<Vec<T>>> = vec![None; sources.len()];
                for (row, &(i, r)) in picks.iter().enumerate() {
                    if !nodes[sources[i].0].requires_grad {
                        continue;
                    }
                    let buf = per_source[i].get_or_insert_with(|| vec![T::zero(); nodes[sources[i].0].value.len()]);
                    add_into(&mut buf[r * d..(r + 1) * d], &g[row * d..(row + 1) * d]);
                }
                for (i, buf) in per_source.into_iter().enumerate() {
                    if let Some(buf) = buf {
                        send(sources[i], buf);
                    }
                }
            }
        }
    }
}
