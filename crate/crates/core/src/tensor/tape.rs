use std::borrow::Cow;

use super::{numel, ParamGrads, ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        n: usize,
        k: usize,
        m: usize,
        shared_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(Var),
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    TakeLast {
        a: Var,
        idx: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f64]>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    /// Address of the owning set and the parameter's index in it.
    param: Option<(usize, ParamId)>,
}

/// Records forward operations so that gradients can be replayed backwards.
///
/// A tape created with [`Tape::no_grad`] binds parameters as constants, so
/// nothing downstream of them is recorded for differentiation.
#[derive(Debug)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    grad_enabled: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    // `v - v` is 0 for finite values and NaN otherwise; four lanes let this vectorise
    let mut acc = [0.0f64; 4];
    let mut chunks = data.chunks_exact(4);
    for c in &mut chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += v - v;
        }
    }
    let tail: f64 = chunks.remainder().iter().map(|v| v - v).sum();
    if (acc[0] + acc[1] + acc[2] + acc[3] + tail) == 0.0 {
        Ok(())
    } else {
        Err(Error::Numeric { op })
    }
}

/// `c = a·b + beta·c` with arbitrary element strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every element the kernel can touch.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (with `shape`) into the axis order given by `perm`.
/// With `scatter` the mapping is reversed and accumulated into `dst`.
fn permute_into(src: &[f64], shape: &[usize], perm: &[usize], dst: &mut [f64], scatter: bool) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let stride_of_out: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let mut counter = vec![0usize; rank];
    let mut src_off = 0usize;
    for out_idx in 0..numel(&out_shape) {
        if scatter {
            dst[src_off] += src[out_idx];
        } else {
            dst[out_idx] = src[src_off];
        }
        for d in (0..rank).rev() {
            counter[d] += 1;
            src_off += stride_of_out[d];
            if counter[d] < out_shape[d] {
                break;
            }
            src_off -= stride_of_out[d] * out_shape[d];
            counter[d] = 0;
        }
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape whose parameter bindings never require gradients.
    pub fn no_grad() -> Self {
        Tape {
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

    fn node(&self, v: Var) -> &Node<'p> {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Gradients of the parameters of `params` bound on this tape, summed
    /// over repeated bindings. Bindings of other sets are ignored.
    pub fn param_grads(&self, params: &ParamSet) -> ParamGrads {
        let owner = params as *const ParamSet as usize;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; params.len()];
        for n in &self.nodes {
            let (Some((set, id)), Some(g)) = (n.param, n.grad.as_deref()) else { continue };
            if set != owner {
                continue;
            }
            match &mut grads[id.0] {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g.to_vec()),
            }
        }
        ParamGrads { grads }
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Cow<'p, [f64]>, rg: bool, param: Option<(usize, ParamId)>) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad: rg,
            grad: None,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &data)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(data),
            op,
            requires_grad: rg,
            grad: None,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an owned tensor as a leaf.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        check_finite("leaf", &t.data)?;
        let rg = t.requires_grad;
        Ok(self.push_leaf(t.shape, Cow::Owned(t.data), rg, None))
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t.shape, Cow::Owned(t.data), false, None)
    }

    pub fn constant_data(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::Dimension(format!("constant of shape {shape:?} with {} values", data.len())));
        }
        Ok(self.push_leaf(shape, Cow::Owned(data), false, None))
    }

    /// Binds a parameter by borrowing its storage.
    pub fn param(&mut self, params: &'p ParamSet, id: ParamId) -> Var {
        let t = params.get(id);
        let rg = self.grad_enabled && t.requires_grad;
        let owner = params as *const ParamSet as usize;
        self.push_leaf(t.shape.clone(), Cow::Borrowed(&t.data), rg, Some((owner, id)))
    }

    pub fn param_named(&mut self, params: &'p ParamSet, name: &str) -> Result<Var> {
        let id = params.id(name)?;
        Ok(self.param(params, id))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Matrix product. `a` is `[.., n, k]`; `b` is either a `[k, m]` matrix
    /// shared over all leading dimensions of `a`, or a `[batch, k, m]` stack
    /// matching `a`'s `[batch, n, k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Like [`Tape::matmul`] but multiplies by the transpose of the last two
    /// axes of `b` (`[m, k]` or `[batch, m, k]`).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || Error::Dimension(format!("matmul: incompatible shapes {sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() < 2 || !(sb.len() == 2 || sb.len() == 3) {
            return Err(bad());
        }
        let k = sa[sa.len() - 1];
        let (bk, m) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if bk != k {
            return Err(bad());
        }
        let (batch, n, shared_b, out_shape) = if sb.len() == 2 {
            let rows: usize = sa[..sa.len() - 1].iter().product();
            let mut out = sa[..sa.len() - 1].to_vec();
            out.push(m);
            (1, rows, true, out)
        } else {
            if sa.len() != 3 || sa[0] != sb[0] {
                return Err(bad());
            }
            (sa[0], sa[1], false, vec![sa[0], sa[1], m])
        };
        let mut out = vec![0.0; batch * n * m];
        {
            let av = self.value(a);
            let bv = self.value(b);
            let bstr = if trans_b { (1, k) } else { (m, 1) };
            for bi in 0..batch {
                let boff = if shared_b { 0 } else { bi * k * m };
                gemm(
                    n,
                    k,
                    m,
                    &av[bi * n * k..],
                    (k, 1),
                    &bv[boff..],
                    bstr,
                    &mut out[bi * n * m..],
                    0.0,
                );
            }
        }
        self.push(
            "matmul",
            out_shape,
            out,
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                n,
                k,
                m,
                shared_b,
            },
            &[a, b],
        )
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, data, op, &[a, b])
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

    /// Adds a `[d]` vector to every row of a `[.., d]` tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [d] {
            return Err(Error::Dimension(format!(
                "add_row: bias {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let bv = self.value(bias);
        let mut data = self.value(x).to_vec();
        for row in data.chunks_mut(d.max(1)) {
            for (a, b) in row.iter_mut().zip(bv) {
                *a += b;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push("add_row", shape, data, Op::AddRow { x, bias }, &[x, bias])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let data = self.value(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, data, op, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "sigmoid",
            a,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(a),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let d = *self.shape(a).last().unwrap_or(&1);
        let data = softmax_rows(self.value(a), d);
        let shape = self.shape(a).to_vec();
        self.push("softmax", shape, data, Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last axis, computed as `x - logsumexp(x)`.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let d = *self.shape(a).last().unwrap_or(&1);
        let data = log_softmax_rows(self.value(a), d);
        let shape = self.shape(a).to_vec();
        self.push("log_softmax", shape, data, Op::LogSoftmax(a), &[a])
    }

    /// Rows of a `[rows, d]` table selected by `ids`, giving `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::Dimension(format!("gather_rows: table must be 2-D, got {st:?}")));
        }
        let (rows, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Vocab { token: bad, size: rows });
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        self.push(
            "gather_rows",
            vec![ids.len(), d],
            data,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Dimension("concat: no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension(format!("concat: axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let ok = s.len() == base.len() && s.iter().enumerate().all(|(i, &x)| i == axis || x == base[i]);
            if !ok {
                return Err(Error::Dimension(format!("concat: {s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in inputs {
                let chunk = self.shape(*v)[axis] * inner;
                data.extend_from_slice(&self.value(*v)[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            "concat",
            shape,
            data,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(Error::Dimension(format!("slice: [{start}, {}) on axis {axis} of {sa:?}", start + len)));
        }
        let (outer, alen, inner) = axis_split(&sa, axis);
        let av = self.value(a);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            data.extend_from_slice(&av[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        self.push("slice", shape, data, Op::Slice { a, axis, start }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Dimension("mean of empty tensor".into()));
        }
        let s = self.value(a).iter().sum::<f64>() / n as f64;
        self.push("mean", vec![1], vec![s], Op::Mean(a), &[a])
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Dimension("layer_norm: gain/bias must match last axis".into()));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let rows = xv.len() / d.max(1);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(a).len() {
            return Err(Error::Dimension(format!("reshape: {:?} -> {shape:?}", self.shape(a))));
        }
        let data = self.value(a).to_vec();
        self.push("reshape", shape, data, Op::Reshape(a), &[a])
    }

    /// Reorders axes; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len() || perm.iter().any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension(format!("permute: {perm:?} is not a permutation of {sa:?}")));
        }
        let mut data = vec![0.0; numel(&sa)];
        permute_into(self.value(a), &sa, perm, &mut data, false);
        let shape = perm.iter().map(|&p| sa[p]).collect();
        self.push(
            "permute",
            shape,
            data,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            &[a],
        )
    }

    /// Picks one entry per row along the last axis: `out[r] = a[r, idx[r]]`.
    pub fn take_last(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        let d = *sa.last().unwrap_or(&0);
        let rows = numel(sa) / d.max(1);
        if idx.len() != rows {
            return Err(Error::Dimension(format!("take_last: {} indices for {rows} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= d) {
            return Err(Error::Vocab { token: bad, size: d });
        }
        let av = self.value(a);
        let data = idx.iter().enumerate().map(|(r, &i)| av[r * d + i]).collect();
        self.push(
            "take_last",
            vec![rows],
            data,
            Op::TakeLast {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        )
    }

    /// Reverse pass from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        let val = |v: Var| -> &[f64] { &nodes[v.0].value };

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                n,
                k,
                m,
                shared_b,
            } => {
                if wants(a) {
                    let bv = val(b);
                    acc(a, &mut |ga| {
                        // dA = dC · Bᵀ
                        let bstr = if trans_b { (k, 1) } else { (1, m) };
                        for bi in 0..batch {
                            let boff = if shared_b { 0 } else { bi * k * m };
                            gemm(n, m, k, &g[bi * n * m..], (m, 1), &bv[boff..], bstr, &mut ga[bi * n * k..], 1.0);
                        }
                    });
                }
                if wants(b) {
                    let av = val(a);
                    acc(b, &mut |gb| {
                        for bi in 0..batch {
                            let boff = if shared_b { 0 } else { bi * k * m };
                            if trans_b {
                                // dB[m,k] = dCᵀ · A
                                gemm(m, n, k, &g[bi * n * m..], (1, m), &av[bi * n * k..], (k, 1), &mut gb[boff..], 1.0);
                            } else {
                                // dB[k,m] = Aᵀ · dC
                                gemm(k, n, m, &av[bi * n * k..], (1, k), &g[bi * n * m..], (m, 1), &mut gb[boff..], 1.0);
                            }
                        }
                    });
                }
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * bv[j];
                    }
                });
                acc(b, &mut |gb| {
                    for j in 0..gb.len() {
                        gb[j] += g[j] * av[j];
                    }
                });
            }
            &Op::AddRow { x, bias } => {
                acc(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                acc(bias, &mut |gb| {
                    let d = gb.len();
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            &Op::Scale(a, s) => acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            &Op::AddScalar(a) => acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            &Op::Sigmoid(a) => acc(a, &mut |ga| {
                for j in 0..ga.len() {
                    ga[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }),
            &Op::Tanh(a) => acc(a, &mut |ga| {
                for j in 0..ga.len() {
                    ga[j] += g[j] * (1.0 - out[j] * out[j]);
                }
            }),
            &Op::Relu(a) => {
                let av = val(a);
                acc(a, &mut |ga| {
                    for j in 0..ga.len() {
                        if av[j] > 0.0 {
                            ga[j] += g[j];
                        }
                    }
                })
            }
            &Op::Exp(a) => acc(a, &mut |ga| {
                for j in 0..ga.len() {
                    ga[j] += g[j] * out[j];
                }
            }),
            &Op::Log(a) => {
                let av = val(a);
                acc(a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] / av[j];
                    }
                })
            }
            &Op::Softmax(a) => {
                let d = *nodes[i].shape.last().unwrap_or(&1);
                acc(a, &mut |ga| {
                    for ((gr, yr), dr) in g.chunks(d).zip(out.chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for j in 0..d {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                })
            }
            &Op::LogSoftmax(a) => {
                let d = *nodes[i].shape.last().unwrap_or(&1);
                acc(a, &mut |ga| {
                    for ((gr, yr), dr) in g.chunks(d).zip(out.chunks(d)).zip(ga.chunks_mut(d)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..d {
                            dr[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                })
            }
            Op::GatherRows { table, ids } => {
                let d = nodes[table.0].shape[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        gt[id * d..(id + 1) * d].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                })
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(&nodes[i].shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = nodes[v.0].shape[*axis];
                    acc(*v, &mut |gv| {
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset * inner..][..len * inner];
                            gv[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                    offset += len;
                }
            }
            &Op::Slice { a, axis, start } => {
                let (outer, alen, inner) = axis_split(&nodes[a.0].shape, axis);
                let len = nodes[i].shape[axis];
                acc(a, &mut |ga| {
                    for o in 0..outer {
                        let base = o * alen * inner + start * inner;
                        ga[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(x, y)| *x += y);
                    }
                })
            }
            &Op::Sum(a) => acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            &Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n))
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = nodes[gain.0].value.len();
                let gv = val(*gain);
                acc(*x, &mut |gx| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            gx[r * d + j] += rs * (dh - inv_d * s1 - hr[j] * inv_d * s2);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                });
            }
            &Op::Reshape(a) => acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            Op::Permute { a, perm } => {
                let sa = nodes[a.0].shape.clone();
                acc(*a, &mut |ga| permute_into(g, &sa, perm, ga, true))
            }
            Op::TakeLast { a, idx } => {
                let d = *nodes[a.0].shape.last().unwrap_or(&1);
                acc(*a, &mut |ga| {
                    for (r, &j) in idx.iter().enumerate() {
                        ga[r * d + j] += g[r];
                    }
                })
            }
        }
    }
}

/// Row-wise softmax of a flat `[rows, d]` buffer.
pub fn softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d.max(1)) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut z = 0.0;
        for v in row {
            let e = (v - mx).exp();
            z += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= z);
    }
    out
}

/// Row-wise log-softmax of a flat `[rows, d]` buffer.
pub fn log_softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d.max(1)) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}
