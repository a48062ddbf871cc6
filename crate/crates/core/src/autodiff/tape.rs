//! Reverse-mode tape over dense tensors.
//!
//! A [`Tape`] borrows a [`ParamStore`] for the duration of one forward and
//! backward pass. Parameters enter the tape by reference (no copies), every
//! other value is owned by the node that produced it. Nodes are appended in
//! evaluation order, so the node list is always topologically sorted and
//! the backward sweep is a single reverse pass.

use rand::Rng;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::special;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    MatVec(Var, Var),
    Conv1d { x: Var, w: Var, b: Var, window: usize },
    MaxPoolTime { x: Var, argmax: Vec<usize> },
    Relu(Var),
    Elu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    Lgamma(Var),
    Digamma(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    Sum(Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Index(Var, usize),
    Reshape(Var),
    Embedding { table: Var, ids: Vec<usize>, padding: Option<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    /// Elementwise map with externally supplied partial derivatives:
    /// d out_i / d input_j[i] = partials[j][i].
    Elementwise { inputs: Vec<Var>, partials: Vec<Vec<f64>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::ScaleBy(..) => "scale_by",
            Op::MatVec(..) => "matvec",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxPoolTime { .. } => "max_pool_time",
            Op::Relu(_) => "relu",
            Op::Elu(_) => "elu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Recip(_) => "recip",
            Op::Lgamma(_) => "lgamma",
            Op::Digamma(_) => "digamma",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LogSumExp(_) => "log_sum_exp",
            Op::Sum(_) => "sum",
            Op::Concat(_) => "concat",
            Op::Stack(_) => "stack",
            Op::Index(..) => "index",
            Op::Reshape(_) => "reshape",
            Op::Embedding { .. } => "embedding",
            Op::Dropout { .. } => "dropout",
            Op::Elementwise { .. } => "elementwise",
        }
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    op: Op,
    value: Value,
}

/// Recorded computation graph for one forward pass.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
}

/// Gradients of a scalar loss with respect to every parameter that the
/// loss depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(num_params: usize) -> Self {
        Self {
            grads: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g.as_ref()))
    }

    /// Add `scale * other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => {
                        for (a, b) in m.data_mut().iter_mut().zip(t.data()) {
                            *a += scale * b;
                        }
                    }
                    None => {
                        let mut c = t.clone();
                        c.data_mut().iter_mut().for_each(|v| *v *= scale);
                        *mine = Some(c);
                    }
                }
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            bound: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value: Value::Owned(t),
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a trainable parameter; repeated calls reuse one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param,
            value: Value::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.0] = Some(v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(op, out)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(op, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    /// Multiply every element of `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(shape_err("scale_by", format!("scale must be scalar, got {:?}", self.value(s).shape())));
        }
        let c = self.value(s).item();
        self.map(x, Op::ScaleBy(x, s), |v| v * c)
    }

    /// Row vector times matrix: `x [n]` · `w [n, m]` → `[m]`.
    pub fn matvec(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.shape().len() != 2 || tx.len() != tw.rows() {
            return Err(shape_err("matvec", format!("{:?} · {:?}", tx.shape(), tw.shape())));
        }
        let m = tw.cols();
        let mut out = vec![0.0; m];
        for (i, &xi) in tx.data().iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, &wv) in out.iter_mut().zip(tw.row(i)) {
                *o += xi * wv;
            }
        }
        self.push(Op::MatVec(x, w), Tensor::vector(out))
    }

    /// Affine map `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matvec(x, w)?;
        self.add(y, b)
    }

    /// Valid 1-d convolution over time.
    ///
    /// `x [T, E]`, `w [window * E, F]`, `b [F]` → `[T - window + 1, F]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, window: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.shape().len() != 2 || tw.shape().len() != 2 || window == 0 {
            return Err(shape_err("conv1d", format!("x {:?}, w {:?}", tx.shape(), tw.shape())));
        }
        let (t_len, e) = (tx.rows(), tx.cols());
        let f = tw.cols();
        if tw.rows() != window * e || tb.len() != f || t_len < window {
            return Err(shape_err(
                "conv1d",
                format!("x {:?}, w {:?}, b {:?}, window {window}", tx.shape(), tw.shape(), tb.shape()),
            ));
        }
        let out_len = t_len - window + 1;
        let xd = tx.data();
        let mut out = Vec::with_capacity(out_len * f);
        for t in 0..out_len {
            let mut acc = tb.data().to_vec();
            let patch = &xd[t * e..(t + window) * e];
            for (j, &xv) in patch.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (a, &wv) in acc.iter_mut().zip(tw.row(j)) {
                    *a += xv * wv;
                }
            }
            out.extend(acc);
        }
        let out = Tensor::matrix(out_len, f, out)?;
        self.push(Op::Conv1d { x, w, b, window }, out)
    }

    /// Max over the time (row) axis: `[T, F]` → `[F]`; ties go to the lowest row.
    pub fn max_pool_time(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(shape_err("max_pool_time", format!("{:?}", t.shape())));
        }
        let f = t.cols();
        let mut best = t.row(0).to_vec();
        let mut argmax = vec![0; f];
        for r in 1..t.rows() {
            for (j, &v) in t.row(r).iter().enumerate() {
                if v > best[j] {
                    best[j] = v;
                    argmax[j] = r;
                }
            }
        }
        self.push(Op::MaxPoolTime { x, argmax }, Tensor::vector(best))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Elu(x), elu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Log(x), f64::ln)
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Recip(x), |v| 1.0 / v)
    }

    pub fn lgamma(&mut self, x: Var) -> Result<Var> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| special::lgamma(v))
            .collect::<Result<Vec<_>>>()?;
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push(Op::Lgamma(x), out)
    }

    pub fn digamma(&mut self, x: Var) -> Result<Var> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| special::digamma(v))
            .collect::<Result<Vec<_>>>()?;
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push(Op::Digamma(x), out)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::vector(softmax(self.value(x).data()));
        self.push(Op::Softmax(x), out)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).data();
        let lse = log_sum_exp(d);
        let out = Tensor::vector(d.iter().map(|v| v - lse).collect());
        self.push(Op::LogSoftmax(x), out)
    }

    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(log_sum_exp(self.value(x).data()));
        self.push(Op::LogSumExp(x), out)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(Op::Sum(x), out)
    }

    /// Concatenate 1-d tensors.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let mut out = Vec::new();
        for &x in xs {
            let t = self.value(x);
            if t.shape().len() != 1 {
                return Err(shape_err("concat", format!("input shape {:?} is not 1-d", t.shape())));
            }
            out.extend_from_slice(t.data());
        }
        self.push(Op::Concat(xs.to_vec()), Tensor::vector(out))
    }

    /// Stack equal-length 1-d tensors as the rows of a matrix.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(shape_err("stack", "no inputs".into()));
        }
        let width = self.value(xs[0]).len();
        let mut out = Vec::with_capacity(width * xs.len());
        for &x in xs {
            let t = self.value(x);
            if t.shape() != [width] {
                return Err(shape_err("stack", format!("row shape {:?} vs [{width}]", t.shape())));
            }
            out.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(xs.len(), width, out)?;
        self.push(Op::Stack(xs.to_vec()), out)
    }

    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = self.value(x);
        if i >= t.len() {
            return Err(shape_err("index", format!("index {i} out of range for {:?}", t.shape())));
        }
        let out = Tensor::scalar(t.data()[i]);
        self.push(Op::Index(x, i), out)
    }

    /// Same data under a new shape with the same number of elements.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n: usize = shape.iter().product();
        if n != t.len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", t.shape())));
        }
        let out = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        self.push(Op::Reshape(x), out)
    }

    /// Row lookup `table [V, E]` → `[ids.len(), E]`. The `padding` row, if
    /// given, receives no gradient.
    pub fn embedding(&mut self, table: Var, ids: &[usize], padding: Option<usize>) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 || ids.is_empty() {
            return Err(shape_err("embedding", format!("table {:?}, {} ids", t.shape(), ids.len())));
        }
        let (v, e) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(shape_err("embedding", format!("id {id} out of range for vocabulary {v}")));
            }
            out.extend_from_slice(t.row(id));
        }
        let out = Tensor::matrix(ids.len(), e, out)?;
        self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                padding,
            },
            out,
        )
    }

    /// Inverted dropout: zero each element with probability `rate`, scale
    /// survivors by `1 / (1 - rate)`. The mask is drawn from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Op::Dropout { x, mask }, out)
    }

    /// Record an elementwise function computed outside the tape, with its
    /// partial derivative with respect to each (same-shaped) input.
    pub fn elementwise(&mut self, inputs: &[Var], value: Tensor, partials: Vec<Vec<f64>>) -> Result<Var> {
        if inputs.len() != partials.len() {
            return Err(shape_err("elementwise", format!("{} inputs, {} partials", inputs.len(), partials.len())));
        }
        for (&x, p) in inputs.iter().zip(&partials) {
            let s = self.value(x).shape();
            if s != value.shape() || p.len() != value.len() {
                return Err(shape_err(
                    "elementwise",
                    format!("input {s:?}, output {:?}, {} partials", value.shape(), p.len()),
                ));
            }
        }
        if partials.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "elementwise" });
        }
        self.push(
            Op::Elementwise {
                inputs: inputs.to_vec(),
                partials,
            },
            value,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let out = self.value(Var(i));
            match &node.op {
                Op::Constant => {}
                Op::Param => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    let n = g.len();
                    acc(&mut grads, *a, n).iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    acc(&mut grads, *b, n).iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                }
                Op::Sub(a, b) => {
                    let n = g.len();
                    acc(&mut grads, *a, n).iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    acc(&mut grads, *b, n).iter_mut().zip(&g).for_each(|(x, y)| *x -= y);
                }
                Op::Mul(a, b) => {
                    let n = g.len();
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    for (k, x) in acc(&mut grads, *a, n).iter_mut().enumerate() {
                        *x += g[k] * vb[k];
                    }
                    for (k, x) in acc(&mut grads, *b, n).iter_mut().enumerate() {
                        *x += g[k] * va[k];
                    }
                }
                Op::Scale(x, c) => {
                    acc(&mut grads, *x, g.len()).iter_mut().zip(&g).for_each(|(a, y)| *a += c * y);
                }
                Op::AddScalar(x) => {
                    acc(&mut grads, *x, g.len()).iter_mut().zip(&g).for_each(|(a, y)| *a += y);
                }
                Op::ScaleBy(x, s) => {
                    let c = self.value(*s).item();
                    let xv = self.value(*x).data();
                    let ds: f64 = g.iter().zip(xv).map(|(a, b)| a * b).sum();
                    acc(&mut grads, *x, g.len()).iter_mut().zip(&g).for_each(|(a, y)| *a += c * y);
                    acc(&mut grads, *s, 1)[0] += ds;
                }
                Op::MatVec(x, w) => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let m = tw.cols();
                    let gx = acc(&mut grads, *x, tx.len());
                    for (r, gxr) in gx.iter_mut().enumerate() {
                        *gxr += tw.row(r).iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
                    }
                    let gw = acc(&mut grads, *w, tw.len());
                    for (r, &xv) in tx.data().iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        for (a, &gm) in gw[r * m..(r + 1) * m].iter_mut().zip(&g) {
                            *a += xv * gm;
                        }
                    }
                }
                Op::Conv1d { x, w, b, window } => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let e = tx.cols();
                    let f = tw.cols();
                    let out_len = out.rows();
                    let span = window * e;
                    {
                        let gb = acc(&mut grads, *b, f);
                        for t in 0..out_len {
                            for (a, gv) in gb.iter_mut().zip(&g[t * f..(t + 1) * f]) {
                                *a += gv;
                            }
                        }
                    }
                    {
                        let gx = acc(&mut grads, *x, tx.len());
                        for t in 0..out_len {
                            let gt = &g[t * f..(t + 1) * f];
                            if gt.iter().all(|&v| v == 0.0) {
                                continue;
                            }
                            for j in 0..span {
                                let s: f64 = tw.row(j).iter().zip(gt).map(|(a, b)| a * b).sum();
                                gx[t * e + j] += s;
                            }
                        }
                    }
                    let gw = acc(&mut grads, *w, tw.len());
                    let xd = tx.data();
                    for t in 0..out_len {
                        let gt = &g[t * f..(t + 1) * f];
                        if gt.iter().all(|&v| v == 0.0) {
                            continue;
                        }
                        for j in 0..span {
                            let xv = xd[t * e + j];
                            if xv == 0.0 {
                                continue;
                            }
                            for (a, gv) in gw[j * f..(j + 1) * f].iter_mut().zip(gt) {
                                *a += xv * gv;
                            }
                        }
                    }
                }
                Op::MaxPoolTime { x, argmax } => {
                    let tx = self.value(*x);
                    let f = tx.cols();
                    let gx = acc(&mut grads, *x, tx.len());
                    for (j, &r) in argmax.iter().enumerate() {
                        gx[r * f + j] += g[j];
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let gx = acc(&mut grads, *x, xv.len());
                    for k in 0..xv.len() {
                        if xv[k] > 0.0 {
                            gx[k] += g[k];
                        }
                    }
                }
                Op::Elu(x) => {
                    let xv = self.value(*x).data();
                    let gx = acc(&mut grads, *x, xv.len());
                    for k in 0..xv.len() {
                        let d = if xv[k] > 0.0 { 1.0 } else { out.data()[k] + 1.0 };
                        gx[k] += g[k] * d;
                    }
                }
                Op::Sigmoid(x) => {
                    let o = out.data();
                    let gx = acc(&mut grads, *x, o.len());
                    for k in 0..o.len() {
                        gx[k] += g[k] * o[k] * (1.0 - o[k]);
                    }
                }
                Op::Exp(x) => {
                    let o = out.data();
                    let gx = acc(&mut grads, *x, o.len());
                    for k in 0..o.len() {
                        gx[k] += g[k] * o[k];
                    }
                }
                Op::Log(x) => {
                    let xv = self.value(*x).data();
                    let gx = acc(&mut grads, *x, xv.len());
                    for k in 0..xv.len() {
                        gx[k] += g[k] / xv[k];
                    }
                }
                Op::Recip(x) => {
                    let o = out.data();
                    let gx = acc(&mut grads, *x, o.len());
                    for k in 0..o.len() {
                        gx[k] -= g[k] * o[k] * o[k];
                    }
                }
                Op::Lgamma(x) => {
                    let xv = self.value(*x).data();
                    let gx = acc(&mut grads, *x, xv.len());
                    for k in 0..xv.len() {
                        gx[k] += g[k] * special::digamma(xv[k])?;
                    }
                }
                Op::Digamma(x) => {
                    let xv = self.value(*x).data();
                    let gx = acc(&mut grads, *x, xv.len());
                    for k in 0..xv.len() {
                        gx[k] += g[k] * special::trigamma(xv[k])?;
                    }
                }
                Op::Softmax(x) => {
                    let o = out.data();
                    let dot: f64 = g.iter().zip(o).map(|(a, b)| a * b).sum();
                    let gx = acc(&mut grads, *x, o.len());
                    for k in 0..o.len() {
                        gx[k] += o[k] * (g[k] - dot);
                    }
                }
                Op::LogSoftmax(x) => {
                    let o = out.data();
                    let total: f64 = g.iter().sum();
                    let gx = acc(&mut grads, *x, o.len());
                    for k in 0..o.len() {
                        gx[k] += g[k] - o[k].exp() * total;
                    }
                }
                Op::LogSumExp(x) => {
                    let p = softmax(self.value(*x).data());
                    let gx = acc(&mut grads, *x, p.len());
                    for k in 0..p.len() {
                        gx[k] += g[0] * p[k];
                    }
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    acc(&mut grads, *x, n).iter_mut().for_each(|a| *a += g[0]);
                }
                Op::Concat(xs) | Op::Stack(xs) => {
                    let mut offset = 0;
                    for &x in xs {
                        let n = self.value(x).len();
                        acc(&mut grads, x, n)
                            .iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(a, b)| *a += b);
                        offset += n;
                    }
                }
                Op::Index(x, k) => {
                    let n = self.value(*x).len();
                    acc(&mut grads, *x, n)[*k] += g[0];
                }
                Op::Reshape(x) => {
                    acc(&mut grads, *x, g.len()).iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                Op::Embedding { table, ids, padding } => {
                    let tt = self.value(*table);
                    let e = tt.cols();
                    let gt = acc(&mut grads, *table, tt.len());
                    for (r, &id) in ids.iter().enumerate() {
                        if Some(id) == *padding {
                            continue;
                        }
                        for (a, b) in gt[id * e..(id + 1) * e].iter_mut().zip(&g[r * e..(r + 1) * e]) {
                            *a += b;
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    let gx = acc(&mut grads, *x, mask.len());
                    for k in 0..mask.len() {
                        gx[k] += g[k] * mask[k];
                    }
                }
                Op::Elementwise { inputs, partials } => {
                    for (&x, p) in inputs.iter().zip(partials) {
                        let gx = acc(&mut grads, x, p.len());
                        for k in 0..p.len() {
                            gx[k] += g[k] * p[k];
                        }
                    }
                }
            }
        }

        let mut out = Gradients::empty(self.params.len());
        for (pid, bound) in self.bound.iter().enumerate() {
            if let Some(v) = bound {
                if let Some(g) = grads[v.0].take() {
                    let shape = self.params.get(ParamId(pid)).shape().to_vec();
                    out.grads[pid] = Some(Tensor::new(shape, g)?);
                }
            }
        }
        Ok(out)
    }
}
