use std::collections::HashMap;

use super::ops;
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operations reachable through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Gelu,
    Exp,
    Log,
    Square,
}

#[derive(Clone, Debug)]
enum Op<R> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Transpose(Var),
    SwapAxes12(Var),
    Reshape(Var),
    Softmax(Var),
    LogSumExp(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<R>,
        rstd: Vec<R>,
    },
    Sum(Var),
    Mean(Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Pick {
        x: Var,
        ids: Vec<usize>,
    },
    ConcatLast(Var, Var),
    ConcatRows(Var, Var),
    StraightThrough {
        e: Var,
    },
}

#[derive(Debug)]
struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
    grad: Option<Vec<R>>,
}

/// Append-only record of a forward computation. Parents always precede
/// children, so replaying node ids in reverse is a valid topological order.
#[derive(Debug)]
pub struct Tape<R: Real = f32> {
    nodes: Vec<Node<R>>,
    params: HashMap<ParamId, Var>,
    check_finite: bool,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            check_finite: false,
        }
    }

    /// Turn on NaN/Inf detection after every operation.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, false)
    }

    /// Bind a stored parameter onto this tape (once per tape). Frozen
    /// parameters become constants.
    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value().clone(), !p.is_frozen());
        self.params.insert(id, v);
        v
    }

    /// Make later [`Tape::param`] lookups of `id` resolve to `v`.
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        self.params.insert(id, v);
    }

    /// Parameters bound on this tape together with their accumulated gradients.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Option<&[R]>)> + '_ {
        self.params
            .iter()
            .map(|(&id, &v)| (id, self.nodes[v.0].grad.as_deref()))
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> R {
        self.nodes[v.0].value.data()[0]
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, name: &str, value: Tensor<R>, op: Op<R>, parents: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NumericFault {
                context: name.to_string(),
            });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[R] {
        self.nodes[v.0].value.data()
    }

    // ---- elementwise -------------------------------------------------

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::invalid(format!("{op:?} needs two operands")));
        match op {
            ElementwiseOp::Add => self.add(a, need_b()?),
            ElementwiseOp::Sub => self.sub(a, need_b()?),
            ElementwiseOp::Mul => self.mul(a, need_b()?),
            ElementwiseOp::Scale(c) => self.scale(a, c),
            ElementwiseOp::Gelu => self.gelu(a),
            ElementwiseOp::Exp => self.exp(a),
            ElementwiseOp::Log => self.log(a),
            ElementwiseOp::Square => self.square(a),
        }
    }

    /// Output shape for a binary op: the shorter shape must be a suffix of
    /// the longer one (broadcast over leading dimensions only).
    fn broadcast_shape(&self, name: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (long, short) = if sa.len() >= sb.len() {
            (sa, sb)
        } else {
            (sb, sa)
        };
        if long[long.len() - short.len()..] != *short {
            return Err(Error::shape(name, sa, sb));
        }
        Ok(long.to_vec())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(R, R) -> R,
        op: Op<R>,
    ) -> Result<Var> {
        let shape = self.broadcast_shape(name, a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let n = numel(&shape);
        let out: Vec<R> = (0..n)
            .map(|i| f(da[i % da.len()], db[i % db.len()]))
            .collect();
        self.push(name, Tensor::new(shape, out)?, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(R) -> R, op: Op<R>) -> Result<Var> {
        let src = self.value(a);
        let out = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&x| f(x)).collect(),
        )?;
        self.push(name, out, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let cr = R::from_f64_lossy(c);
        self.unary("scale", a, |x| x * cr, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let cr = R::from_f64_lossy(c);
        self.unary("add_scalar", a, |x| x + cr, Op::AddScalar(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, ops::gelu, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, R::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.data(a).iter().find(|&&x| !(x > R::zero())) {
            return Err(Error::invalid(format!("log of non-positive value {bad}")));
        }
        self.unary("log", a, R::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    // ---- linear algebra ----------------------------------------------

    /// `a·b` where `a` is `[.., m, k]` and `b` is either a shared `[k, n]`
    /// matrix or batched `[.., k, n]` with the same leading dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` where `b` is `[n, k]` or batched `[.., n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_dims(&self, a: Var, b: Var, trans_b: bool) -> Result<MatMulDims> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let err = || Error::shape("matmul", sa, sb);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (bk, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if bk != k {
            return Err(err());
        }
        let lead = &sa[..sa.len() - 2];
        let shared = sb.len() == 2;
        if !shared && sb[..sb.len() - 2] != *lead {
            return Err(err());
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        Ok(MatMulDims {
            batch: numel(lead),
            m,
            k,
            n,
            shared,
            out_shape,
        })
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let d = self.matmul_dims(a, b, trans_b)?;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![R::zero(); d.batch * d.m * d.n];
        if d.shared {
            R::gemm(
                d.batch * d.m,
                d.k,
                d.n,
                da,
                false,
                db,
                trans_b,
                &mut out,
                false,
            );
        } else {
            for i in 0..d.batch {
                R::gemm(
                    d.m,
                    d.k,
                    d.n,
                    &da[i * d.m * d.k..],
                    false,
                    &db[i * d.k * d.n..],
                    trans_b,
                    &mut out[i * d.m * d.n..],
                    false,
                );
            }
        }
        let t = Tensor::new(d.out_shape, out)?;
        self.push("matmul", t, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    /// Transpose the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel(&s[..s.len() - 2]);
        let out = ops::transpose_last2(self.data(a), batch, r, c);
        let mut shape = s.clone();
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        self.push(
            "transpose",
            Tensor::new(shape, out)?,
            Op::Transpose(a),
            &[a],
        )
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let dims: [usize; 4] = s
            .as_slice()
            .try_into()
            .map_err(|_| Error::shape("swap_axes12", &s, &[0; 4]))?;
        let out = ops::swap_axes12(self.data(x), dims);
        let shape = vec![dims[0], dims[2], dims[1], dims[3]];
        self.push(
            "swap_axes12",
            Tensor::new(shape, out)?,
            Op::SwapAxes12(x),
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    // ---- normalisation and reductions -------------------------------

    /// Softmax over the last axis. With `causal`, the last two axes are
    /// treated as `(query, key)` and keys after the query are masked out.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || (causal && s.len() < 2) {
            return Err(Error::shape("softmax", &s, &[]));
        }
        let cols = s[s.len() - 1];
        let rows = if s.len() >= 2 { s[s.len() - 2] } else { 1 };
        let out = ops::softmax_rows(self.data(x), rows, cols, causal);
        self.push("softmax", Tensor::new(s, out)?, Op::Softmax(x), &[x])
    }

    /// Log-sum-exp over the last axis; drops that axis.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let Some((&cols, lead)) = s.split_last() else {
            return Err(Error::shape("logsumexp", &s, &[]));
        };
        let out = ops::logsumexp_rows(self.data(x), cols);
        self.push(
            "logsumexp",
            Tensor::new(lead.to_vec(), out)?,
            Op::LogSumExp(x),
            &[x],
        )
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let h = *s
            .last()
            .ok_or_else(|| Error::shape("layer_norm", &s, &[]))?;
        if self.shape(gamma) != [h] || self.shape(beta) != [h] {
            return Err(Error::shape("layer_norm", &s, self.shape(gamma)));
        }
        let eps = R::from_f64_lossy(eps);
        let hr = R::from_usize(h).unwrap();
        let (g, b) = (self.data(gamma), self.data(beta));
        let src = self.data(x);
        let mut xhat = vec![R::zero(); src.len()];
        let mut rstd = Vec::with_capacity(src.len() / h);
        let mut out = vec![R::zero(); src.len()];
        for ((row, xh), o) in src.chunks(h).zip(xhat.chunks_mut(h)).zip(out.chunks_mut(h)) {
            let mean = row.iter().copied().sum::<R>() / hr;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / hr;
            let r = R::one() / (var + eps).sqrt();
            for j in 0..h {
                xh[j] = (row[j] - mean) * r;
                o[j] = xh[j] * g[j] + b[j];
            }
            rstd.push(r);
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push("layer_norm", Tensor::new(s, out)?, op, &[x, gamma, beta])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.data(x).iter().copied().sum::<R>();
        self.push("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let total = d.iter().copied().sum::<R>() / R::from_usize(d.len()).unwrap();
        self.push("mean", Tensor::scalar(total), Op::Mean(x), &[x])
    }

    // ---- indexing -----------------------------------------------------

    /// Rows of a `[n, h]` table, giving `[ids.len(), h]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() {
            return Err(Error::shape("gather_rows", &s, &[ids.len()]));
        }
        let (n, h) = (s[0], s[1]);
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows table",
                    index: i,
                    size: n,
                });
            }
            out.extend_from_slice(&src[i * h..(i + 1) * h]);
        }
        let op = Op::GatherRows {
            table,
            ids: ids.to_vec(),
        };
        self.push(
            "gather_rows",
            Tensor::new(vec![ids.len(), h], out)?,
            op,
            &[table],
        )
    }

    /// `x[i, ids[i]]` for a `[n, v]` input, giving `[n]`.
    pub fn pick(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != ids.len() {
            return Err(Error::shape("pick", &s, &[ids.len()]));
        }
        let v = s[1];
        let src = self.data(x);
        let mut out = Vec::with_capacity(ids.len());
        for (i, &j) in ids.iter().enumerate() {
            if j >= v {
                return Err(Error::IndexOutOfRange {
                    what: "pick column",
                    index: j,
                    size: v,
                });
            }
            out.push(src[i * v + j]);
        }
        let op = Op::Pick {
            x,
            ids: ids.to_vec(),
        };
        self.push("pick", Tensor::new(vec![ids.len()], out)?, op, &[x])
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat_last", &sa, &sb));
        }
        let (p, q) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(da.len() + db.len());
        for (ra, rb) in da.chunks(p).zip(db.chunks(q)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = p + q;
        self.push(
            "concat_last",
            Tensor::new(shape, out)?,
            Op::ConcatLast(a, b),
            &[a, b],
        )
    }

    /// Concatenate along the first axis; trailing axes must agree.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(Error::shape("concat_rows", &sa, &sb));
        }
        let mut out = self.data(a).to_vec();
        out.extend_from_slice(self.data(b));
        let mut shape = sa.clone();
        shape[0] += sb[0];
        self.push(
            "concat_rows",
            Tensor::new(shape, out)?,
            Op::ConcatRows(a, b),
            &[a, b],
        )
    }

    // ---- gradient routing ---------------------------------------------

    /// Copy of `x` with no gradient path back to it.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    /// Forward value is exactly `q`; the backward pass hands the incoming
    /// gradient to `e` unchanged.
    pub fn straight_through(&mut self, e: Var, q: Var) -> Result<Var> {
        if self.shape(e) != self.shape(q) {
            return Err(Error::shape(
                "straight_through",
                self.shape(e),
                self.shape(q),
            ));
        }
        let v = self.value(q).clone();
        self.push("straight_through", v, Op::StraightThrough { e }, &[e])
    }

    // ---- backward -----------------------------------------------------

    /// Accumulate d(root)/d(node) into every gradient-requiring node
    /// reachable from `root`. Repeated calls add up until [`zero_grad`].
    ///
    /// [`zero_grad`]: Tape::zero_grad
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rs = self.shape(root);
        if numel(rs) != 1 {
            return Err(Error::NonScalarRoot(rs.to_vec()));
        }
        let mut local: Vec<Option<Vec<R>>> = vec![None; root.0 + 1];
        local[root.0] = Some(vec![R::one()]);
        for id in (0..=root.0).rev() {
            let Some(g) = local[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut local);
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[R], local: &mut [Option<Vec<R>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[id].value.data();

        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[id].op, Op::Sub(..)) {
                    -R::one()
                } else {
                    R::one()
                };
                if let Some(ga) = slot(nodes, local, *a) {
                    if ga.len() == g.len() {
                        ga.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                    } else {
                        ops::reduce_broadcast(ga, g);
                    }
                }
                if let Some(gb) = slot(nodes, local, *b) {
                    let scaled: Vec<R> = g.iter().map(|&v| v * sign).collect();
                    if gb.len() == g.len() {
                        gb.iter_mut().zip(&scaled).for_each(|(d, &v)| *d += v);
                    } else {
                        ops::reduce_broadcast(gb, &scaled);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                for (this, ov) in [(*a, vb), (*b, va)] {
                    if let Some(gs) = slot(nodes, local, this) {
                        let contrib: Vec<R> = g
                            .iter()
                            .enumerate()
                            .map(|(i, &v)| v * ov[i % ov.len()])
                            .collect();
                        if gs.len() == g.len() {
                            gs.iter_mut().zip(&contrib).for_each(|(d, &v)| *d += v);
                        } else {
                            ops::reduce_broadcast(gs, &contrib);
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = R::from_f64_lossy(*c);
                if let Some(ga) = slot(nodes, local, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &v)| *d += v * c);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = slot(nodes, local, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Gelu(a) => {
                let x = val(*a);
                if let Some(ga) = slot(nodes, local, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * ops::gelu_grad(x[i]);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = slot(nodes, local, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * out[i];
                    }
                }
            }
            Op::Log(a) => {
                let x = val(*a);
                if let Some(ga) = slot(nodes, local, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] / x[i];
                    }
                }
            }
            Op::Square(a) => {
                let x = val(*a);
                let two = R::from_f64_lossy(2.0);
                if let Some(ga) = slot(nodes, local, *a) {
                    for i in 0..g.len() {
                        ga[i] += two * g[i] * x[i];
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let d = self
                    .matmul_dims(*a, *b, *trans_b)
                    .expect("validated in forward");
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (d.m, d.k, d.n);
                if let Some(ga) = slot(nodes, local, *a) {
                    // dA = dC · op(B)ᵀ
                    if d.shared {
                        R::gemm(d.batch * m, n, k, g, false, vb, !trans_b, ga, true);
                    } else {
                        for i in 0..d.batch {
                            R::gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..],
                                false,
                                &vb[i * k * n..],
                                !trans_b,
                                &mut ga[i * m * k..],
                                true,
                            );
                        }
                    }
                }
                if let Some(gb) = slot(nodes, local, *b) {
                    // dB = Aᵀ·dC, or dCᵀ·A when B is stored transposed.
                    let (rows, mm) = if d.shared {
                        (1, d.batch * m)
                    } else {
                        (d.batch, m)
                    };
                    for i in 0..rows {
                        let ai = &va[i * mm * k..];
                        let gi = &g[i * mm * n..];
                        let off = if d.shared { 0 } else { i * k * n };
                        if *trans_b {
                            R::gemm(n, mm, k, gi, true, ai, false, &mut gb[off..], true);
                        } else {
                            R::gemm(k, mm, n, ai, true, gi, false, &mut gb[off..], true);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = slot(nodes, local, *a) {
                    let s = nodes[id].value.shape();
                    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                    let back = ops::transpose_last2(g, numel(&s[..s.len() - 2]), r, c);
                    ga.iter_mut().zip(&back).for_each(|(d, &v)| *d += v);
                }
            }
            Op::SwapAxes12(a) => {
                if let Some(ga) = slot(nodes, local, *a) {
                    let s = nodes[id].value.shape();
                    let back = ops::swap_axes12(g, [s[0], s[1], s[2], s[3]]);
                    ga.iter_mut().zip(&back).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Softmax(x) => {
                if let Some(gx) = slot(nodes, local, *x) {
                    let cols = *nodes[id].value.shape().last().unwrap();
                    for ((y, gy), dx) in out
                        .chunks(cols)
                        .zip(g.chunks(cols))
                        .zip(gx.chunks_mut(cols))
                    {
                        let dot: R = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            dx[j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::LogSumExp(x) => {
                if let Some(gx) = slot(nodes, local, *x) {
                    let xs = val(*x);
                    let cols = *nodes[x.0].value.shape().last().unwrap();
                    for (r, (row, dx)) in xs.chunks(cols).zip(gx.chunks_mut(cols)).enumerate() {
                        for j in 0..cols {
                            dx[j] += g[r] * (row[j] - out[r]).exp();
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let h = nodes[gamma.0].value.numel();
                let hr = R::from_usize(h).unwrap();
                let gam = val(*gamma);
                if let Some(gg) = slot(nodes, local, *gamma) {
                    for (xh, gy) in xhat.chunks(h).zip(g.chunks(h)) {
                        for j in 0..h {
                            gg[j] += gy[j] * xh[j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, local, *beta) {
                    ops::reduce_broadcast(gb, g);
                }
                if let Some(gx) = slot(nodes, local, *x) {
                    for (r, ((xh, gy), dx)) in xhat
                        .chunks(h)
                        .zip(g.chunks(h))
                        .zip(gx.chunks_mut(h))
                        .enumerate()
                    {
                        let mut mean_d = R::zero();
                        let mut mean_dx = R::zero();
                        for j in 0..h {
                            let d = gy[j] * gam[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= hr;
                        mean_dx /= hr;
                        for j in 0..h {
                            dx[j] += rstd[r] * (gy[j] * gam[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, local, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = slot(nodes, local, *x) {
                    let share = g[0] / R::from_usize(gx.len()).unwrap();
                    gx.iter_mut().for_each(|d| *d += share);
                }
            }
            Op::GatherRows { table, ids } => {
                if let Some(gt) = slot(nodes, local, *table) {
                    let h = nodes[table.0].value.shape()[1];
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..h {
                            gt[i * h + j] += g[r * h + j];
                        }
                    }
                }
            }
            Op::Pick { x, ids } => {
                if let Some(gx) = slot(nodes, local, *x) {
                    let v = nodes[x.0].value.shape()[1];
                    for (r, &j) in ids.iter().enumerate() {
                        gx[r * v + j] += g[r];
                    }
                }
            }
            Op::ConcatLast(a, b) => {
                let p = *nodes[a.0].value.shape().last().unwrap();
                let q = *nodes[b.0].value.shape().last().unwrap();
                if let Some(ga) = slot(nodes, local, *a) {
                    for (dst, src) in ga.chunks_mut(p).zip(g.chunks(p + q)) {
                        dst.iter_mut().zip(&src[..p]).for_each(|(d, &v)| *d += v);
                    }
                }
                if let Some(gb) = slot(nodes, local, *b) {
                    for (dst, src) in gb.chunks_mut(q).zip(g.chunks(p + q)) {
                        dst.iter_mut().zip(&src[p..]).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let na = nodes[a.0].value.numel();
                if let Some(ga) = slot(nodes, local, *a) {
                    ga.iter_mut().zip(&g[..na]).for_each(|(d, &v)| *d += v);
                }
                if let Some(gb) = slot(nodes, local, *b) {
                    gb.iter_mut().zip(&g[na..]).for_each(|(d, &v)| *d += v);
                }
            }
            Op::StraightThrough { e } => {
                if let Some(ge) = slot(nodes, local, *e) {
                    ge.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
        }
    }
}

fn slot<'a, R: Real>(
    nodes: &[Node<R>],
    local: &'a mut [Option<Vec<R>>],
    v: Var,
) -> Option<&'a mut [R]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(
        local[v.0]
            .get_or_insert_with(|| vec![R::zero(); n])
            .as_mut_slice(),
    )
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared: bool,
    out_shape: Vec<usize>,
}
