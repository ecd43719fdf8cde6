//! Eager reverse-mode tape.
//!
//! Every op computes its value immediately and records enough state to run
//! its vector-Jacobian product later. `backward` walks the tape once in
//! reverse, skipping nodes that no trainable leaf feeds into, so frozen
//! modules cost only the input-gradient half of their backward pass.

use super::tensor::{log_sum_exp, softmax_row_in_place};
use super::{NumericsError, ParamId, ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Graph handles for every parameter of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Gelu { a: Var, tanh: Vec<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, seq: usize, probs: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    GatherRows { a: Var, idx: Vec<usize> },
    SegmentMean { a: Var, segments: Vec<(usize, usize)> },
    L2Normalize { a: Var, norms: Vec<T> },
    Reshape(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<T>, count: usize },
    Mse { a: Var, b: Var },
}

struct Node<T> {
    value: Tensor<T>,
    needs_grad: bool,
    op: Op<T>,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
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

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, needs_grad: false, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that collects a gradient even though it is not a parameter.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, needs_grad: true, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn bind(&mut self, store: &ParamStore, trainable: bool) -> Bound {
        self.bind_perturbed(store, trainable, None)
    }

    /// Bind all parameters, optionally shifting one element by `delta`
    /// (in `T` precision, after the cast from storage).
    pub fn bind_perturbed(&mut self, store: &ParamStore, trainable: bool, perturb: Option<(ParamId, usize, f64)>) -> Bound {
        let vars = store
            .ids()
            .map(|id| {
                let mut value: Tensor<T> = store.value(id).cast();
                if let Some((pid, idx, delta)) = perturb {
                    if pid == id {
                        let x = &mut value.data_mut()[idx];
                        *x = T::of(x.f64() + delta);
                    }
                }
                self.nodes.push(Node { value, needs_grad: trainable, op: Op::Leaf });
                Var(self.nodes.len() - 1)
            })
            .collect();
        Bound { vars }
    }

    /// Add gradients of bound trainable leaves into `store`'s `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore, bound: &Bound) {
        for id in store.ids().collect::<Vec<_>>() {
            if let Some(g) = self.grad(bound.get(id)) {
                let dst = store.get_mut(id).grad.data_mut();
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s.f64() as f32;
                }
            }
        }
    }

    /// `a [n,k] x b [k,m]`, or `a x b^T` when `b` is `[m,k]` and `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, k) = (av.rows(), av.cols());
        let (bk, m) = if trans_b { (bv.cols(), bv.rows()) } else { (bv.rows(), bv.cols()) };
        assert_eq!(k, bk, "matmul inner dims {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![T::zero(); n * m];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (m as isize, 1) };
        T::gemm(n, k, m, av.data(), k as isize, 1, bv.data(), rsb, csb, T::zero(), &mut out, m as isize, 1);
        let value = Tensor::new(&[n, m], out).expect("matmul shape");
        self.push(value, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        let src = av.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out).expect("transpose shape");
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape_of(a), self.shape_of(b), "add shape mismatch");
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape_of(a), data).expect("add shape");
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// Adds a length-`m` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let m = self.nodes[a.0].value.cols();
        assert_eq!(self.nodes[row.0].value.len(), m, "add_row width mismatch");
        let r = self.data(row).to_vec();
        let mut data = self.data(a).to_vec();
        for c in data.chunks_mut(m) {
            for (x, &y) in c.iter_mut().zip(&r) {
                *x = *x + y;
            }
        }
        let value = Tensor::new(self.shape_of(a), data).expect("add_row shape");
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cc = T::of(c);
        let data = self.data(a).iter().map(|&x| x * cc).collect();
        let value = Tensor::new(self.shape_of(a), data).expect("scale shape");
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.nodes[s.0].value.len(), 1, "mul_scalar needs a scalar");
        let sv = self.data(s)[0];
        let data = self.data(a).iter().map(|&x| x * sv).collect();
        let value = Tensor::new(self.shape_of(a), data).expect("mul_scalar shape");
        self.push(value, Op::MulScalar(a, s), &[a, s])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| x.exp()).collect();
        let value = Tensor::new(self.shape_of(a), data).expect("exp shape");
        self.push(value, Op::Exp(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::of(GELU_C), T::of(GELU_A));
        let (half, one, two) = (T::of(0.5), T::one(), T::of(2.0));
        let xs = self.data(a);
        let mut tanh = vec![T::zero(); xs.len()];
        let mut data = vec![T::zero(); xs.len()];
        for ((t, y), &x) in tanh.iter_mut().zip(data.iter_mut()).zip(xs) {
            let u = c * (x + k * x * x * x);
            *t = one - two / ((two * u).exp() + one);
            *y = half * x * (one + *t);
        }
        let value = Tensor::new(self.shape_of(a), data).expect("gelu shape");
        self.push(value, Op::Gelu { a, tanh }, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let m = xv.cols();
        let (g, b) = (self.data(gamma), self.data(beta));
        assert!(g.len() == m && b.len() == m, "layer_norm width mismatch");
        let mut out = Vec::with_capacity(xv.len());
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(xv.rows());
        for row in xv.data().chunks(m) {
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(T::of(r));
            for (j, v) in row.iter().enumerate() {
                let h = (v.f64() - mean) * r;
                xhat.push(T::of(h));
                out.push(T::of(h * g[j].f64() + b[j].f64()));
            }
        }
        let value = Tensor::new(xv.shape(), out).expect("layer_norm shape");
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Multi-head scaled dot-product attention over `rows / seq` independent
    /// sequences of length `seq`. With `causal`, position `i` attends to `j <= i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq: usize, causal: bool) -> Var {
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let d = qv.cols();
        assert!(qv.shape() == kv.shape() && qv.shape() == vv.shape(), "attention q/k/v shapes");
        assert!(d % heads == 0 && qv.rows() % seq == 0, "attention geometry");
        let dh = d / heads;
        let blocks = qv.rows() / seq;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); blocks * heads * seq * seq];
        let mut out = vec![T::zero(); qv.len()];
        for b in 0..blocks {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                T::gemm(seq, dh, seq, &qv.data()[off..], d as isize, 1, &kv.data()[off..], 1, d as isize, T::zero(), p, seq as isize, 1);
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let live = if causal { i + 1 } else { seq };
                    row[..live].iter_mut().for_each(|x| *x = *x * scale);
                    softmax_row_in_place(&mut row[..live]);
                    row[live..].iter_mut().for_each(|x| *x = T::zero());
                }
                T::gemm(seq, seq, dh, p, seq as isize, 1, &vv.data()[off..], d as isize, 1, T::zero(), &mut out[off..], d as isize, 1);
            }
        }
        let value = Tensor::new(qv.shape(), out).expect("attention shape");
        self.push(value, Op::Attention { q, k, v, heads, seq, probs }, &[q, k, v])
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = &self.nodes[table.0].value;
        let d = tv.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < tv.rows(), "embedding id {i} out of range");
            out.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(&[ids.len(), d], out).expect("embedding shape");
        self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let d = self.nodes[parts[0].0].value.cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.cols(), d, "concat_rows width mismatch");
            out.extend_from_slice(t.data());
            rows += t.rows();
        }
        let value = Tensor::new(&[rows, d], out).expect("concat shape");
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = &self.nodes[a.0].value;
        let d = av.cols();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(av.row(i));
        }
        let value = Tensor::new(&[idx.len(), d], out).expect("gather shape");
        self.push(value, Op::GatherRows { a, idx: idx.to_vec() }, &[a])
    }

    /// Mean of each `(start, len)` row range.
    pub fn segment_mean(&mut self, a: Var, segments: &[(usize, usize)]) -> Var {
        let av = &self.nodes[a.0].value;
        let d = av.cols();
        let mut out = vec![T::zero(); segments.len() * d];
        for (s, &(start, len)) in segments.iter().enumerate() {
            assert!(len > 0, "empty segment");
            for j in 0..d {
                let sum: f64 = (start..start + len).map(|r| av.data()[r * d + j].f64()).sum();
                out[s * d + j] = T::of(sum / len as f64);
            }
        }
        let value = Tensor::new(&[segments.len(), d], out).expect("segment shape");
        self.push(value, Op::SegmentMean { a, segments: segments.to_vec() }, &[a])
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let d = av.cols();
        let mut out = Vec::with_capacity(av.len());
        let mut norms = Vec::with_capacity(av.rows());
        for row in av.data().chunks(d) {
            let n = row.iter().map(|x| x.f64().powi(2)).sum::<f64>().sqrt().max(1e-12);
            norms.push(T::of(n));
            out.extend(row.iter().map(|x| T::of(x.f64() / n)));
        }
        let value = Tensor::new(av.shape(), out).expect("normalize shape");
        self.push(value, Op::L2Normalize { a, norms }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.nodes[a.0].value.clone().reshape(shape).expect("reshape");
        self.push(value, Op::Reshape(a), &[a])
    }

    /// Mean token NLL over rows whose `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var, NumericsError> {
        let lv = &self.nodes[logits.0].value;
        let (rows, vocab) = (lv.rows(), lv.cols());
        if targets.len() != rows || mask.len() != rows {
            return Err(NumericsError::Shape(format!("{rows} logit rows but {} targets and {} mask entries", targets.len(), mask.len())));
        }
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = 0f64;
        let mut count = 0;
        for i in 0..rows {
            if !mask[i] {
                continue;
            }
            if targets[i] >= vocab {
                return Err(NumericsError::TargetOutOfRange { target: targets[i], vocab });
            }
            let row = lv.row(i);
            let lse = log_sum_exp(row);
            total += lse - row[targets[i]].f64();
            let lse_t = T::of(lse);
            for (p, &x) in probs[i * vocab..(i + 1) * vocab].iter_mut().zip(row) {
                *p = (x - lse_t).exp();
            }
            count += 1;
        }
        if count == 0 {
            return Err(NumericsError::EmptyLossSupport);
        }
        let value = Tensor::scalar(T::of(total / count as f64));
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs, count };
        Ok(self.push(value, op, &[logits]))
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape_of(a), self.shape_of(b), "mse shape mismatch");
        let n = self.data(a).len();
        let s: f64 = self.data(a).iter().zip(self.data(b)).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum();
        let value = Tensor::scalar(T::of(s / n as f64));
        self.push(value, Op::Mse { a, b }, &[a, b])
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].needs_grad;
        let len = |v: Var| nodes[v.0].value.len();
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                let n = nodes[v.0].value.len();
                grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
            }};
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (n, k) = (av.rows(), av.cols());
                let m = nodes[i].value.cols();
                if needs(*a) {
                    let (rs, cs) = if *trans_b { (k as isize, 1) } else { (1, m as isize) };
                    T::gemm(n, m, k, g, m as isize, 1, bv.data(), rs, cs, T::one(), slot!(*a), k as isize, 1);
                }
                if needs(*b) {
                    if *trans_b {
                        T::gemm(m, n, k, g, 1, m as isize, av.data(), k as isize, 1, T::one(), slot!(*b), k as isize, 1);
                    } else {
                        T::gemm(k, n, m, av.data(), 1, k as isize, g, m as isize, 1, T::one(), slot!(*b), m as isize, 1);
                    }
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    let (r, c) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                    let s = slot!(*a);
                    for x in 0..r {
                        for y in 0..c {
                            s[x * c + y] = s[x * c + y] + g[y * r + x];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        slot!(v).iter_mut().zip(g).for_each(|(s, &x)| *s = *s + x);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    slot!(*a).iter_mut().zip(g).for_each(|(s, &x)| *s = *s + x);
                }
                if needs(*row) {
                    let m = len(*row);
                    let mut acc = vec![0f64; m];
                    for c in g.chunks(m) {
                        acc.iter_mut().zip(c).for_each(|(s, x)| *s += x.f64());
                    }
                    slot!(*row).iter_mut().zip(acc).for_each(|(s, x)| *s = *s + T::of(x));
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    let c = T::of(*c);
                    slot!(*a).iter_mut().zip(g).for_each(|(s, &x)| *s = *s + x * c);
                }
            }
            Op::MulScalar(a, s) => {
                let sv = nodes[s.0].value.data()[0];
                if needs(*a) {
                    slot!(*a).iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x * sv);
                }
                if needs(*s) {
                    let dot: f64 = g.iter().zip(nodes[a.0].value.data()).map(|(x, y)| x.f64() * y.f64()).sum();
                    let d = slot!(*s);
                    d[0] = d[0] + T::of(dot);
                }
            }
            Op::Exp(a) => {
                if needs(*a) {
                    let y = nodes[i].value.data();
                    slot!(*a).iter_mut().zip(g.iter().zip(y)).for_each(|(d, (&x, &e))| *d = *d + x * e);
                }
            }
            Op::Gelu { a, tanh } => {
                if needs(*a) {
                    let xs = nodes[a.0].value.data();
                    let (c, k) = (T::of(GELU_C), T::of(GELU_A));
                    let (half, one, three) = (T::of(0.5), T::one(), T::of(3.0));
                    for ((d, &gy), (&x, &t)) in slot!(*a).iter_mut().zip(g).zip(xs.iter().zip(tanh)) {
                        let dydx = half * (one + t) + half * x * (one - t * t) * c * (one + three * k * x * x);
                        *d = *d + gy * dydx;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let m = len(*gamma);
                let gam = nodes[gamma.0].value.data();
                if needs(*gamma) || needs(*beta) {
                    let mut dg = vec![0f64; m];
                    let mut db = vec![0f64; m];
                    for (gr, hr) in g.chunks(m).zip(xhat.chunks(m)) {
                        for j in 0..m {
                            dg[j] += gr[j].f64() * hr[j].f64();
                            db[j] += gr[j].f64();
                        }
                    }
                    if needs(*gamma) {
                        slot!(*gamma).iter_mut().zip(dg).for_each(|(s, v)| *s = *s + T::of(v));
                    }
                    if needs(*beta) {
                        slot!(*beta).iter_mut().zip(db).for_each(|(s, v)| *s = *s + T::of(v));
                    }
                }
                if needs(*x) {
                    let dx = slot!(*x);
                    for (r, (gr, hr)) in g.chunks(m).zip(xhat.chunks(m)).enumerate() {
                        let mut mean_d = 0f64;
                        let mut mean_dh = 0f64;
                        for j in 0..m {
                            let dh = gr[j].f64() * gam[j].f64();
                            mean_d += dh;
                            mean_dh += dh * hr[j].f64();
                        }
                        mean_d /= m as f64;
                        mean_dh /= m as f64;
                        let rs = rstd[r].f64();
                        for j in 0..m {
                            let dh = gr[j].f64() * gam[j].f64();
                            let v = rs * (dh - mean_d - hr[j].f64() * mean_dh);
                            dx[r * m + j] = dx[r * m + j] + T::of(v);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, seq, probs } => {
                self.attention_backward(g, *q, *k, *v, *heads, *seq, probs, grads);
            }
            Op::Embedding { table, ids } => {
                if needs(*table) {
                    let d = nodes[table.0].value.cols();
                    let s = slot!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            s[id * d + j] = s[id * d + j] + g[r * d + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = len(*p);
                    if needs(*p) {
                        slot!(*p).iter_mut().zip(&g[off..off + n]).for_each(|(s, &x)| *s = *s + x);
                    }
                    off += n;
                }
            }
            Op::GatherRows { a, idx } => {
                if needs(*a) {
                    let d = nodes[a.0].value.cols();
                    let s = slot!(*a);
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..d {
                            s[src * d + j] = s[src * d + j] + g[r * d + j];
                        }
                    }
                }
            }
            Op::SegmentMean { a, segments } => {
                if needs(*a) {
                    let d = nodes[a.0].value.cols();
                    let s = slot!(*a);
                    for (k, &(start, n)) in segments.iter().enumerate() {
                        let inv = T::of(1.0 / n as f64);
                        for r in start..start + n {
                            for j in 0..d {
                                s[r * d + j] = s[r * d + j] + g[k * d + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { a, norms } => {
                if needs(*a) {
                    let d = nodes[a.0].value.cols();
                    let y = nodes[i].value.data();
                    let s = slot!(*a);
                    for (r, norm) in norms.iter().enumerate() {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.f64() * b.f64()).sum();
                        for j in 0..d {
                            let v = (gr[j].f64() - yr[j].f64() * dot) / norm.f64();
                            s[r * d + j] = s[r * d + j] + T::of(v);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    slot!(*a).iter_mut().zip(g).for_each(|(s, &x)| *s = *s + x);
                }
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                if needs(*logits) {
                    let vocab = nodes[logits.0].value.cols();
                    let scale = g[0].f64() / *count as f64;
                    let s = slot!(*logits);
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..vocab {
                            let mut d = probs[r * vocab + j].f64();
                            if j == t {
                                d -= 1.0;
                            }
                            s[r * vocab + j] = s[r * vocab + j] + T::of(d * scale);
                        }
                    }
                }
            }
            Op::Mse { a, b } => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let c = 2.0 * g[0].f64() / av.len() as f64;
                let diff: Vec<f64> = av.iter().zip(bv).map(|(x, y)| (x.f64() - y.f64()) * c).collect();
                if needs(*a) {
                    slot!(*a).iter_mut().zip(&diff).for_each(|(s, &d)| *s = *s + T::of(d));
                }
                if needs(*b) {
                    slot!(*b).iter_mut().zip(&diff).for_each(|(s, &d)| *s = *s - T::of(d));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(&self, g: &[T], q: Var, k: Var, v: Var, heads: usize, seq: usize, probs: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let (qv, kv, vv) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
        let d = nodes[q.0].value.cols();
        let dh = d / heads;
        let blocks = nodes[q.0].value.rows() / seq;
        let scale = 1.0 / (dh as f64).sqrt();
        let total = qv.len();
        let mut dq = vec![T::zero(); total];
        let mut dk = vec![T::zero(); total];
        let mut dv = vec![T::zero(); total];
        let mut dp = vec![T::zero(); seq * seq];
        let (ds_, di) = (d as isize, seq as isize);
        for b in 0..blocks {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                // dV = P^T dO ; dP = dO V^T
                T::gemm(seq, seq, dh, p, 1, di, &g[off..], ds_, 1, T::one(), &mut dv[off..], ds_, 1);
                T::gemm(seq, dh, seq, &g[off..], ds_, 1, &vv[off..], 1, ds_, T::zero(), &mut dp, di, 1);
                for i in 0..seq {
                    let pr = &p[i * seq..(i + 1) * seq];
                    let dr = &mut dp[i * seq..(i + 1) * seq];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a.f64() * b.f64()).sum();
                    for (x, pp) in dr.iter_mut().zip(pr) {
                        *x = T::of(pp.f64() * (x.f64() - dot) * scale);
                    }
                }
                T::gemm(seq, seq, dh, &dp, di, 1, &kv[off..], ds_, 1, T::one(), &mut dq[off..], ds_, 1);
                T::gemm(seq, seq, dh, &dp, 1, di, &qv[off..], ds_, 1, T::one(), &mut dk[off..], ds_, 1);
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if nodes[var.0].needs_grad {
                let s = grads[var.0].get_or_insert_with(|| vec![T::zero(); total]);
                s.iter_mut().zip(delta).for_each(|(a, b)| *a = *a + b);
            }
        }
    }
}
