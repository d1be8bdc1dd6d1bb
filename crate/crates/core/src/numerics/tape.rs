//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough
//! saved state to apply the local gradient rule. `backward` walks the nodes
//! in reverse insertion order, so each recorded op is visited exactly once.

use rand::Rng;

use super::tensor::{gemm, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boundary handling for the 1-D convolution along time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Padding {
    /// Wrap around the sequence ends; kernel centered on the output step.
    #[default]
    Circular,
    /// Zero history before the first step; output `t` only sees steps `<= t`.
    Causal,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        /// (a batch offset, b batch offset) per output batch item.
        pairs: Vec<(usize, usize)>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        padding: Padding,
    },
    SliceLast {
        a: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    SliceRows {
        a: Var,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    SumAll(Var),
    SumRows(Var),
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.get(v)?;
        Tensor::new(self.shapes[v.0].clone(), g.to_vec()).ok()
    }
}

fn suffix_of(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

/// Output batch shape plus flat `(a, b)` offsets for every output batch index.
type Broadcast = (Vec<usize>, Vec<(usize, usize)>);

/// Right-aligned broadcast of batch shapes.
fn broadcast_batches(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    let rank = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| {
        let pad = rank - s.len();
        if i < pad {
            1
        } else {
            s[i - pad]
        }
    };
    let mut out = Vec::with_capacity(rank);
    for i in 0..rank {
        let (da, db) = (dim(a, i), dim(b, i));
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out.push(da.max(db));
    }
    let total: usize = out.iter().product();
    let mut pairs = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let (mut fa, mut fb) = (0, 0);
        for (i, &k) in idx.iter().enumerate() {
            let (da, db) = (dim(a, i), dim(b, i));
            fa = fa * da + if da == 1 { 0 } else { k };
            fb = fb * db + if db == 1 { 0 } else { k };
        }
        pairs.push((fa, fb));
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < out[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    Some((out, pairs))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::shape("matmul", &sa, &sb);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(err());
        }
        let (batch, pairs) =
            broadcast_batches(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).ok_or_else(err)?;
        let mut shape = batch;
        shape.extend([m, n]);
        let mut out = Tensor::zeros(shape);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let od = out.data_mut();
            for (ci, &(ao, bo)) in pairs.iter().enumerate() {
                gemm(
                    m,
                    k,
                    n,
                    &av[ao * m * k..(ao + 1) * m * k],
                    false,
                    &bv[bo * k * n..(bo + 1) * k * n],
                    trans_b,
                    T::zero(),
                    &mut od[ci * m * n..(ci + 1) * m * n],
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                trans_b,
                m,
                k,
                n,
                pairs,
            },
            rg,
        ))
    }

    fn zip_broadcast(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !suffix_of(ta.shape(), tb.shape()) {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let nb = tb.numel();
        let bd = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % nb]))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Element-wise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_broadcast(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("sub", self.shape(a), self.shape(b)));
        }
        let out = self.zip_broadcast(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Element-wise product; `b` may broadcast over leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_broadcast(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(out, Op::Square(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Softmax over the last axis with max-subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.last_dim();
        if c == 0 || x.rank() == 0 {
            return Err(Error::shape("softmax_rows", x.shape(), &[1]));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Normalizes each last-axis row to zero mean and unit variance, then
    /// applies `gain` and `bias` (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xv = self.value(x);
        let d = xv.last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", xv.shape(), self.shape(p)));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = Tensor::zeros(xv.shape().to_vec());
        let inv_d = T::one() / T::of(d as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd[r] = rs;
            let od = &mut out.data_mut()[r * d..(r + 1) * d];
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                od[j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// 1-D convolution along the first axis: `x` is `[L, M]`, `kernel` is
    /// `[width, M, D]`, output is `[L, D]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, padding: Padding) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 2 || sk.len() != 3 || sx[1] != sk[1] {
            return Err(Error::shape("conv1d", &sx, &sk));
        }
        let (len, m, width, d) = (sx[0], sx[1], sk[0], sk[2]);
        if width % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel width must be odd, got {width}")));
        }
        let mut out = Tensor::zeros([len, d]);
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let mut shifted = vec![T::zero(); len * m];
        for tap in 0..width {
            shift_rows(xd, &mut shifted, len, m, tap, width, padding);
            gemm(
                len,
                m,
                d,
                &shifted,
                false,
                &kd[tap * m * d..(tap + 1) * m * d],
                false,
                T::one(),
                out.data_mut(),
            );
        }
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(
            out,
            Op::Conv1d {
                x,
                kernel,
                padding,
            },
            rg,
        ))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let c = t.last_dim();
        if t.rank() == 0 || start + len > c {
            return Err(Error::shape("slice_last", t.shape(), &[start, len]));
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let data = t
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceLast { a, start }, rg))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat_last", self.shape(first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatLast(parts.to_vec()), rg))
    }

    /// Rows `start..start + len` along the first axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 || start + len > t.shape()[0] {
            return Err(Error::shape("slice_rows", t.shape(), &[start, len]));
        }
        let inner: usize = t.shape()[1..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let out = Tensor::new(shape, t.data()[start * inner..(start + len) * inner].to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceRows { a, start }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose2()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Sum over the first axis of a 2-D tensor, giving a 1-D tensor.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::shape("sum_rows", t.shape(), &[2]));
        }
        let c = t.shape()[1];
        let mut out = Tensor::zeros([c]);
        for row in t.data().chunks(c) {
            for (o, &v) in out.data_mut().iter_mut().zip(row) {
                *o += v;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SumRows(a), rg))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let x = self.value(a);
        let mask: Vec<T> = (0..x.numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Dropout { a, mask }, rg))
    }

    /// Row lookup into a `[n, D]` table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("gather_rows", t.shape(), &[2]));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!("lookup index {bad} out of range for table of {n} rows")));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new([indices.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_rule(node, &g, &mut grads);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn apply_rule(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                trans_b,
                m,
                k,
                n,
                pairs,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for (ci, &(ao, bo)) in pairs.iter().enumerate() {
                        let gc = &g[ci * m * n..(ci + 1) * m * n];
                        let bs = &bv[bo * k * n..(bo + 1) * k * n];
                        let das = &mut da[ao * m * k..(ao + 1) * m * k];
                        // C = A·B  => dA = dC·Bᵀ ; C = A·Bᵀ => dA = dC·B
                        gemm(m, n, k, gc, false, bs, !*trans_b, T::one(), das);
                    }
                });
                acc(*b, &mut |db| {
                    for (ci, &(ao, bo)) in pairs.iter().enumerate() {
                        let gc = &g[ci * m * n..(ci + 1) * m * n];
                        let as_ = &av[ao * m * k..(ao + 1) * m * k];
                        let dbs = &mut db[bo * k * n..(bo + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gc, true, as_, false, T::one(), dbs);
                        } else {
                            gemm(k, m, n, as_, true, gc, false, T::one(), dbs);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| reduce_into(db, g, |x, _| x));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| {
                    for (d, &x) in db.iter_mut().zip(g) {
                        *d -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let nb = bv.len();
                acc(*a, &mut |da| {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * bv[i % nb];
                    }
                });
                acc(*b, &mut |db| reduce_into(db, g, |x, i| x * av[i]));
            }
            Op::Scale(a, c) => acc(*a, &mut |da| {
                for (d, &x) in da.iter_mut().zip(g) {
                    *d += x * *c;
                }
            }),
            Op::Square(a) => {
                let av = val(*a);
                acc(*a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] += T::of(2.0) * av[i] * g[i];
                    }
                })
            }
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, &mut |da| {
                    for i in 0..da.len() {
                        if av[i] > T::zero() {
                            da[i] += g[i];
                        }
                    }
                })
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                acc(*a, &mut |da| {
                    for ((dr, yr), gr) in da.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gv = val(*gain);
                acc(*x, &mut |dx| {
                    let inv_d = T::one() / T::of(d as f64);
                    for r in 0..rstd.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dx[r * d + j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |dg| reduce_into(dg, g, |x, i| x * xhat[i]));
                acc(*bias, &mut |db| reduce_into(db, g, |x, _| x));
            }
            Op::Conv1d {
                x,
                kernel,
                padding,
            } => {
                let (sx, sk) = (nodes[x.0].value.shape(), nodes[kernel.0].value.shape());
                let (len, m, width, d) = (sx[0], sx[1], sk[0], sk[2]);
                let (xd, kd) = (val(*x), val(*kernel));
                acc(*kernel, &mut |dk| {
                    let mut shifted = vec![T::zero(); len * m];
                    for tap in 0..width {
                        shift_rows(xd, &mut shifted, len, m, tap, width, *padding);
                        gemm(
                            m,
                            len,
                            d,
                            &shifted,
                            true,
                            g,
                            false,
                            T::one(),
                            &mut dk[tap * m * d..(tap + 1) * m * d],
                        );
                    }
                });
                acc(*x, &mut |dx| {
                    let mut dshift = vec![T::zero(); len * m];
                    for tap in 0..width {
                        gemm(
                            len,
                            d,
                            m,
                            g,
                            false,
                            &kd[tap * m * d..(tap + 1) * m * d],
                            true,
                            T::zero(),
                            &mut dshift,
                        );
                        for t in 0..len {
                            if let Some(src) = source_row(t, tap, width, len, *padding) {
                                for c in 0..m {
                                    dx[src * m + c] += dshift[t * m + c];
                                }
                            }
                        }
                    }
                });
            }
            Op::SliceLast { a, start } => {
                let w = node.value.last_dim();
                let c = nodes[a.0].value.last_dim();
                acc(*a, &mut |da| {
                    for (r, gr) in g.chunks(w).enumerate() {
                        add_into(&mut da[r * c + start..r * c + start + w], gr);
                    }
                })
            }
            Op::ConcatLast(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.last_dim();
                    acc(p, &mut |dp| {
                        for (r, dr) in dp.chunks_mut(w).enumerate() {
                            add_into(dr, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows { a, start } => {
                let inner = node.value.numel() / node.value.shape()[0].max(1);
                acc(*a, &mut |da| add_into(&mut da[start * inner..start * inner + g.len()], g))
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let (r, c) = (s[0], s[1]);
                acc(*a, &mut |da| {
                    // output is r x c, input c x r
                    for i in 0..r {
                        for j in 0..c {
                            da[j * r + i] += g[i * c + j];
                        }
                    }
                })
            }
            Op::Reshape(a) => acc(*a, &mut |da| add_into(da, g)),
            Op::SumAll(a) => acc(*a, &mut |da| {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::SumRows(a) => {
                let c = node.value.numel();
                acc(*a, &mut |da| {
                    for row in da.chunks_mut(c) {
                        add_into(row, g);
                    }
                })
            }
            Op::Dropout { a, mask } => acc(*a, &mut |da| {
                for i in 0..da.len() {
                    da[i] += g[i] * mask[i];
                }
            }),
            Op::Gather { table, indices } => {
                let d = node.value.last_dim();
                acc(*table, &mut |dt| {
                    for (r, &ix) in indices.iter().enumerate() {
                        add_into(&mut dt[ix * d..(ix + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                })
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Accumulates `f(g[i], i)` into `dst[i % dst.len()]` (suffix broadcast).
fn reduce_into<T: Real>(dst: &mut [T], g: &[T], f: impl Fn(T, usize) -> T) {
    let n = dst.len();
    for (i, &x) in g.iter().enumerate() {
        dst[i % n] += f(x, i);
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Input row read by output step `t` at kernel tap `tap`.
fn source_row(t: usize, tap: usize, width: usize, len: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Circular => {
            let half = width / 2;
            Some((t + len * width + tap - half) % len)
        }
        Padding::Causal => (t + tap).checked_sub(width - 1),
    }
}

fn shift_rows<T: Real>(
    x: &[T],
    out: &mut [T],
    len: usize,
    m: usize,
    tap: usize,
    width: usize,
    padding: Padding,
) {
    for t in 0..len {
        let dst = &mut out[t * m..(t + 1) * m];
        match source_row(t, tap, width, len, padding) {
            Some(src) => dst.copy_from_slice(&x[src * m..(src + 1) * m]),
            None => dst.fill(T::zero()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let b = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c), tape.value(b));

        let r = tape.constant(t2(&[&[1.0, 2.0]]));
        let col = tape.constant(t2(&[&[3.0], &[4.0]]));
        let dot = tape.matmul(r, col).unwrap();
        assert_eq!(tape.value(dot).data(), &[11.0]);

        let x = tape.constant(Tensor::zeros([2, 3]));
        let y = tape.constant(Tensor::zeros([2, 3]));
        match tape.matmul(x, y) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn batched_matmul_broadcasts() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn([3, 2, 2], |i| i as f64));
        let b = tape.constant(Tensor::eye(2).reshape([1, 2, 2]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), tape.value(a));
        let bad = tape.constant(Tensor::zeros([2, 2, 2]));
        assert!(tape.matmul(a, bad).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(&[&[0.0, 0.0], &[1000.0, 1000.0], &[0.0, 3f64.ln()]]));
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(&v[..4], &[0.5, 0.5, 0.5, 0.5]);
        assert!((v[4] - 0.25).abs() < 1e-12 && (v[5] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::full([2], 1.0));
        let zeros = tape.constant(Tensor::zeros([2]));
        let c = tape.constant(t2(&[&[5.0, 5.0]]));
        let y = tape.layer_norm(c, ones, zeros, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

        let x = tape.constant(t2(&[&[1.0, 3.0]]));
        let y = tape.layer_norm(x, ones, zeros, 1e-12).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);

        let bias = tape.constant(Tensor::from_rows(&[vec![0.5, -2.0]]).unwrap().reshape([2]).unwrap());
        let y = tape.layer_norm(x, zeros, bias, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -2.0]);
        assert!(tape.layer_norm(x, ones, zeros, 0.0).is_err());
    }

    #[test]
    fn circular_conv_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let avg = tape.constant(Tensor::full([3, 1, 1], 1.0 / 3.0));
        let y = tape.conv1d(x, avg, Padding::Circular).unwrap();
        let expect = [7.0 / 3.0, 2.0, 3.0, 8.0 / 3.0];
        for (a, b) in tape.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }

        // centered delta mapping channel i -> i
        let m = 3;
        let delta = Tensor::from_fn([3, m, m], |i| {
            let (tap, rest) = (i / (m * m), i % (m * m));
            if tap == 1 && rest / m == rest % m {
                1.0
            } else {
                0.0
            }
        });
        let xs = tape.constant(Tensor::from_fn([5, m], |i| (i * i) as f64 - 3.0));
        let k = tape.constant(delta);
        let y = tape.conv1d(xs, k, Padding::Circular).unwrap();
        assert_eq!(tape.value(y), tape.value(xs));

        let zero = tape.constant(Tensor::zeros([3, m, 2]));
        let y = tape.conv1d(xs, zero, Padding::Circular).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let even = tape.constant(Tensor::zeros([2, m, 2]));
        assert!(matches!(tape.conv1d(xs, even, Padding::Circular), Err(Error::Config(_))));
    }

    #[test]
    fn causal_conv_ignores_future() {
        let mut tape = Tape::<f64>::new();
        let k = tape.constant(Tensor::from_fn([3, 2, 2], |i| (i as f64).sin()));
        let a = tape.constant(Tensor::from_fn([6, 2], |i| i as f64));
        let b = tape.constant(Tensor::from_fn([6, 2], |i| if i >= 8 { 100.0 } else { i as f64 }));
        let ya = tape.conv1d(a, k, Padding::Causal).unwrap();
        let yb = tape.conv1d(b, k, Padding::Causal).unwrap();
        assert_eq!(&tape.value(ya).data()[..8], &tape.value(yb).data()[..8]);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn([2, 3], |i| i as f64), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().iter().all(|&v| v == 1.0));

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let sq = tape.square(x);
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_has_no_grad_but_reachable_zero_path_does() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([2], 1.0), true);
        let unused = tape.leaf(Tensor::full([2], 1.0), true);
        let z = tape.scale(x, 0.0);
        let s = tape.sum(z);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0]);
        assert!(g.get(unused).is_none());
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let t = tape.leaf(Tensor::zeros([4, 2]), true);
        assert!(tape.gather_rows(t, &[0, 3]).is_ok());
        assert!(matches!(tape.gather_rows(t, &[4]), Err(Error::Contract(_))));
    }
}
