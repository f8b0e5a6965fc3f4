//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough
//! information to apply its vector-Jacobian product later. Nodes are only ever
//! appended, so node order is already a topological order and the backward
//! pass is a single reverse sweep.

use crate::error::{Error, Result};

use super::tensor::{matmul_a_bt_acc, matmul_at_b_acc, matmul_raw, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `b` is a vector matching the trailing axis of `a`.
    Row,
    /// `b` holds a single value.
    Scalar,
}

#[derive(Debug)]
struct GruCache {
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    rh: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    Row(Var, usize),
    StackRows(Vec<Var>),
    Reshape(Var),
    MaskRows(Var, Vec<bool>),
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    GruCell {
        x: Var,
        h: Var,
        w: Var,
        u: Var,
        b: Var,
        cache: GruCache,
    },
    SmoothL1(Var),
    Sum(Var),
    Mean(Var),
    Index(Var, usize),
    SoftBce {
        r: Var,
        targets: Vec<f64>,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A gradient tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every leaf that requires grad.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` is not a grad-requiring leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {:?} by {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = Tensor::new(vec![m, n], matmul_raw(av.data(), bv.data(), m, k, n))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() != 2 {
            return Err(Error::dim(
                "transpose",
                format!("expected a matrix, got {:?}", av.shape()),
            ));
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = av.data()[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            Ok(Broadcast::Same)
        } else if bv.is_scalar() {
            Ok(Broadcast::Scalar)
        } else if bv.len() == av.last_dim() && bv.rows() == 1 {
            Ok(Broadcast::Row)
        } else {
            Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} do not broadcast", av.shape(), bv.shape()),
            ))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let kind = self.broadcast_kind(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let c = av.last_dim();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match kind {
                    Broadcast::Same => bv.data()[i],
                    Broadcast::Row => bv.data()[i % c],
                    Broadcast::Scalar => bv.data()[0],
                };
                f(x, y)
            })
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, make(a, b, kind), rg))
    }

    /// `a + b`; `b` may be same-shaped, a trailing-axis row vector, or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.last_dim();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Concatenates along the trailing axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_last", "no inputs"))?;
        let lead = self.value(*first).shape()[..self.value(*first).ndim() - 1].to_vec();
        for p in parts {
            let s = self.value(*p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::dim(
                    "concat_last",
                    format!("leading shape {:?} differs from {:?}", &s[..s.len() - 1], lead),
                ));
            }
        }
        let rows = self.value(*first).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).last_dim()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatLast(parts.to_vec()), rg))
    }

    /// Concatenates along the leading axis; trailing axes must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.shape()[1..] != tail[..] {
                return Err(Error::dim(
                    "concat_rows",
                    format!("trailing shape {:?} differs from {:?}", &v.shape()[1..], tail),
                ));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() != 2 || i >= av.shape()[0] {
            return Err(Error::dim(
                "row",
                format!("row {i} out of range for {:?}", av.shape()),
            ));
        }
        let out = Tensor::vector(av.row(i).to_vec())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Row(a, i), rg))
    }

    /// Stacks equal-length vectors into a matrix. Repeating a handle is allowed.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::dim("stack_rows", "no inputs"))?;
        let c = self.value(*first).len();
        let mut data = Vec::with_capacity(rows.len() * c);
        for r in rows {
            let v = self.value(*r);
            if v.len() != c {
                return Err(Error::dim(
                    "stack_rows",
                    format!("row of length {} does not match {c}", v.len()),
                ));
            }
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows.len(), c, data)?;
        let rg = self.any_grad(rows);
        Ok(self.push(out, Op::StackRows(rows.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Keeps row `l` iff `mask[l]`, zeroing the rest.
    pub fn mask_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() != 2 || mask.len() != av.shape()[0] {
            return Err(Error::dim(
                "mask_rows",
                format!("mask of length {} for {:?}", mask.len(), av.shape()),
            ));
        }
        let c = av.last_dim();
        let mut data = av.data().to_vec();
        for (row, &keep) in data.chunks_mut(c).zip(mask) {
            if !keep {
                row.fill(0.0);
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::MaskRows(a, mask.to_vec()), rg))
    }

    /// Valid (unpadded, stride 1) 1-D convolution.
    ///
    /// `input: T×c_in`, `kernel: w×c_in×c_out`, `bias: c_out`, output
    /// `(T−w+1)×c_out` where output row `p` reads input rows `p..p+w`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (iv, kv, bv) = (self.value(input), self.value(kernel), self.value(bias));
        if iv.ndim() != 2 || kv.ndim() != 3 {
            return Err(Error::dim(
                "conv1d",
                format!("input {:?} / kernel {:?}", iv.shape(), kv.shape()),
            ));
        }
        let (t, c_in) = (iv.shape()[0], iv.shape()[1]);
        let (w, k_in, c_out) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
        if k_in != c_in || bv.len() != c_out {
            return Err(Error::dim(
                "conv1d",
                format!(
                    "input {:?}, kernel {:?}, bias {:?} are inconsistent",
                    iv.shape(),
                    kv.shape(),
                    bv.shape()
                ),
            ));
        }
        if w > t {
            return Err(Error::Config(format!(
                "filter size {w} exceeds sequence length {t}; drop this filter size"
            )));
        }
        let p_len = t - w + 1;
        let mut out = Vec::with_capacity(p_len * c_out);
        let window = w * c_in;
        for p in 0..p_len {
            // The window rows p..p+w are contiguous in row-major order.
            let x = &iv.data()[p * c_in..p * c_in + window];
            let mut acc = bv.data().to_vec();
            for (idx, &xv) in x.iter().enumerate() {
                let k_row = &kv.data()[idx * c_out..(idx + 1) * c_out];
                for (a, &kw) in acc.iter_mut().zip(k_row) {
                    *a += xv * kw;
                }
            }
            out.extend(acc);
        }
        let out = Tensor::matrix(p_len, c_out, out)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            out,
            Op::Conv1d {
                input,
                kernel,
                bias,
            },
            rg,
        ))
    }

    /// One GRU step.
    ///
    /// `w: d_in×3h` and `u: h×3h` hold the update, reset and candidate blocks
    /// in that column order; `b: 3h`.
    ///
    /// ```text
    /// z  = σ(x W_z + h U_z + b_z)
    /// r  = σ(x W_r + h U_r + b_r)
    /// ñ  = tanh(x W_n + (r ⊙ h) U_n + b_n)
    /// h' = (1 − z) ⊙ h + z ⊙ ñ
    /// ```
    pub fn gru_cell(&mut self, x: Var, h: Var, w: Var, u: Var, b: Var) -> Result<Var> {
        let (xv, hv, wv, uv, bv) = (
            self.value(x),
            self.value(h),
            self.value(w),
            self.value(u),
            self.value(b),
        );
        let d_in = xv.len();
        let hd = hv.len();
        if wv.shape() != [d_in, 3 * hd] || uv.shape() != [hd, 3 * hd] || bv.len() != 3 * hd {
            return Err(Error::dim(
                "gru_cell",
                format!(
                    "x {:?}, h {:?}, W {:?}, U {:?}, b {:?} are inconsistent",
                    xv.shape(),
                    hv.shape(),
                    wv.shape(),
                    uv.shape(),
                    bv.shape()
                ),
            ));
        }
        let h3 = 3 * hd;
        let xw = matmul_raw(xv.data(), wv.data(), 1, d_in, h3);
        let hu = matmul_raw(hv.data(), &uv.data()[..], 1, hd, h3);
        let bd = bv.data();
        let hp = hv.data();
        let mut z = vec![0.0; hd];
        let mut r = vec![0.0; hd];
        for j in 0..hd {
            z[j] = sigmoid(xw[j] + hu[j] + bd[j]);
            r[j] = sigmoid(xw[hd + j] + hu[hd + j] + bd[hd + j]);
        }
        let rh: Vec<f64> = r.iter().zip(hp).map(|(a, b)| a * b).collect();
        // (r ⊙ h) U_n, reading only the candidate block of U.
        let mut rhu = vec![0.0; hd];
        for (p, &v) in rh.iter().enumerate() {
            let u_row = &uv.data()[p * h3 + 2 * hd..p * h3 + h3];
            for (o, &uw) in rhu.iter_mut().zip(u_row) {
                *o += v * uw;
            }
        }
        let mut n = vec![0.0; hd];
        let mut out = vec![0.0; hd];
        for j in 0..hd {
            n[j] = (xw[2 * hd + j] + rhu[j] + bd[2 * hd + j]).tanh();
            out[j] = (1.0 - z[j]) * hp[j] + z[j] * n[j];
        }
        let out = Tensor::vector(out)?;
        let rg = self.any_grad(&[x, h, w, u, b]);
        Ok(self.push(
            out,
            Op::GruCell {
                x,
                h,
                w,
                u,
                b,
                cache: GruCache { z, r, n, rh },
            },
            rg,
        ))
    }

    pub fn smooth_l1(&mut self, a: Var) -> Var {
        let out = self.value(a).map(smooth_l1);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::SmoothL1(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::scalar(av.data().iter().sum::<f64>() / av.len() as f64);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// Element `i` of the flattened tensor as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let av = self.value(a);
        if i >= av.len() {
            return Err(Error::dim(
                "index",
                format!("index {i} out of range for {:?}", av.shape()),
            ));
        }
        let out = Tensor::scalar(av.data()[i]);
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Index(a, i), rg))
    }

    /// Mean soft-target binary cross-entropy with `r` clamped to `[eps, 1−eps]`:
    /// `−(1/K) Σ t log r + (1−t) log(1−r)`.
    pub fn soft_bce(&mut self, r: Var, targets: &[f64], eps: f64) -> Result<Var> {
        let rv = self.value(r);
        if rv.len() != targets.len() {
            return Err(Error::dim(
                "soft_bce",
                format!("{} scores vs {} targets", rv.len(), targets.len()),
            ));
        }
        let k = targets.len() as f64;
        let total: f64 = rv
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let c = p.clamp(eps, 1.0 - eps);
                t * c.ln() + (1.0 - t) * (1.0 - c).ln()
            })
            .sum();
        let out = Tensor::scalar(-total / k);
        let rg = self.any_grad(&[r]);
        Ok(self.push(
            out,
            Op::SoftBce {
                r,
                targets: targets.to_vec(),
                eps,
            },
            rg,
        ))
    }

    /// Runs the backward sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let n_nodes = self.nodes.len();
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n_nodes];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_vjp(node, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(
                    g.map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                        .unwrap_or_else(|| Tensor::zeros(node.value.shape())),
                ),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn apply_vjp(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;

        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    matmul_a_bt_acc(g, bv.data(), m, k, n, ga);
                }
                if wants(*b) {
                    let gb = acc(grads, nodes, *b);
                    matmul_at_b_acc(av.data(), g, m, k, n, gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                let ga = acc(grads, nodes, *a);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if wants(*b) {
                    let c = node.value.last_dim();
                    let gb = acc(grads, nodes, *b);
                    for (i, &y) in g.iter().enumerate() {
                        let j = match kind {
                            Broadcast::Same => i,
                            Broadcast::Row => i % c,
                            Broadcast::Scalar => 0,
                        };
                        gb[j] += sign * y;
                    }
                }
            }
            Op::Mul(a, b, kind) => {
                let (av, bv) = (val(*a), val(*b));
                let c = node.value.last_dim();
                let bidx = |i: usize| match kind {
                    Broadcast::Same => i,
                    Broadcast::Row => i % c,
                    Broadcast::Scalar => 0,
                };
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    for (i, &y) in g.iter().enumerate() {
                        ga[i] += y * bv.data()[bidx(i)];
                    }
                }
                if wants(*b) {
                    let gb = acc(grads, nodes, *b);
                    for (i, &y) in g.iter().enumerate() {
                        gb[bidx(i)] += y * av.data()[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = acc(grads, nodes, *a);
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += c * y;
                }
            }
            Op::Relu(a) => {
                let av = val(*a);
                let ga = acc(grads, nodes, *a);
                for ((x, y), &inp) in ga.iter_mut().zip(g).zip(av.data()) {
                    if inp > 0.0 {
                        *x += y;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let ga = acc(grads, nodes, *a);
                for ((x, y), &s) in ga.iter_mut().zip(g).zip(node.value.data()) {
                    *x += y * s * (1.0 - s);
                }
            }
            Op::Tanh(a) => {
                let ga = acc(grads, nodes, *a);
                for ((x, y), &t) in ga.iter_mut().zip(g).zip(node.value.data()) {
                    *x += y * (1.0 - t * t);
                }
            }
            Op::Softmax(a) => {
                let c = node.value.last_dim();
                let ga = acc(grads, nodes, *a);
                for ((gx, gy), ys) in ga
                    .chunks_mut(c)
                    .zip(g.chunks(c))
                    .zip(node.value.data().chunks(c))
                {
                    let dot: f64 = gy.iter().zip(ys).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[j] += ys[j] * (gy[j] - dot);
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let c = val(*p).last_dim();
                    if wants(*p) {
                        let gp = acc(grads, nodes, *p);
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).len();
                    if wants(*p) {
                        let gp = acc(grads, nodes, *p);
                        for (x, y) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *x += y;
                        }
                    }
                    offset += len;
                }
            }
            Op::Row(a, i) => {
                let c = val(*a).last_dim();
                let ga = acc(grads, nodes, *a);
                for (x, y) in ga[i * c..(i + 1) * c].iter_mut().zip(g) {
                    *x += y;
                }
            }
            Op::StackRows(rows) => {
                let c = node.value.last_dim();
                for (r, v) in rows.iter().enumerate() {
                    if wants(*v) {
                        let gv = acc(grads, nodes, *v);
                        for (x, y) in gv.iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                let ga = acc(grads, nodes, *a);
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }
            Op::MaskRows(a, mask) => {
                let c = node.value.last_dim();
                let ga = acc(grads, nodes, *a);
                for ((gx, gy), &keep) in ga.chunks_mut(c).zip(g.chunks(c)).zip(mask) {
                    if keep {
                        for (x, y) in gx.iter_mut().zip(gy) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Conv1d {
                input,
                kernel,
                bias,
            } => {
                let (iv, kv) = (val(*input), val(*kernel));
                let c_in = iv.shape()[1];
                let (w, c_out) = (kv.shape()[0], kv.shape()[2]);
                let window = w * c_in;
                let p_len = node.value.shape()[0];
                if wants(*bias) {
                    let gb = acc(grads, nodes, *bias);
                    for gp in g.chunks(c_out) {
                        for (x, y) in gb.iter_mut().zip(gp) {
                            *x += y;
                        }
                    }
                }
                if wants(*kernel) {
                    let gk = acc(grads, nodes, *kernel);
                    for p in 0..p_len {
                        let x = &iv.data()[p * c_in..p * c_in + window];
                        let gp = &g[p * c_out..(p + 1) * c_out];
                        for (idx, &xv) in x.iter().enumerate() {
                            for (o, &gy) in gp.iter().enumerate() {
                                gk[idx * c_out + o] += xv * gy;
                            }
                        }
                    }
                }
                if wants(*input) {
                    let gi = acc(grads, nodes, *input);
                    for p in 0..p_len {
                        let gp = &g[p * c_out..(p + 1) * c_out];
                        for idx in 0..window {
                            let k_row = &kv.data()[idx * c_out..(idx + 1) * c_out];
                            let dot: f64 = k_row.iter().zip(gp).map(|(a, b)| a * b).sum();
                            gi[p * c_in + idx] += dot;
                        }
                    }
                }
            }
            Op::GruCell {
                x,
                h,
                w,
                u,
                b,
                cache,
            } => {
                let (xv, hv, wv, uv) = (val(*x), val(*h), val(*w), val(*u));
                let d_in = xv.len();
                let hd = hv.len();
                let h3 = 3 * hd;
                let hp = hv.data();
                let GruCache { z, r, n, rh } = cache;

                // Pre-activation gradients, laid out [z | r | n] like the weights.
                let mut da = vec![0.0; h3];
                let mut dh = vec![0.0; hd];
                for j in 0..hd {
                    let dz = g[j] * (n[j] - hp[j]);
                    let dn = g[j] * z[j];
                    dh[j] = g[j] * (1.0 - z[j]);
                    da[j] = dz * z[j] * (1.0 - z[j]);
                    da[2 * hd + j] = dn * (1.0 - n[j] * n[j]);
                }
                // d(r ⊙ h) = da_n · U_nᵀ
                let mut drh = vec![0.0; hd];
                for (p, d) in drh.iter_mut().enumerate() {
                    let u_row = &uv.data()[p * h3 + 2 * hd..p * h3 + h3];
                    *d = u_row.iter().zip(&da[2 * hd..]).map(|(a, b)| a * b).sum();
                }
                for j in 0..hd {
                    let dr = drh[j] * hp[j];
                    dh[j] += drh[j] * r[j];
                    da[hd + j] = dr * r[j] * (1.0 - r[j]);
                }
                // Recurrent contributions of the update and reset gates.
                for p in 0..hd {
                    let u_row = &uv.data()[p * h3..p * h3 + 2 * hd];
                    dh[p] += u_row.iter().zip(&da[..2 * hd]).map(|(a, b)| a * b).sum::<f64>();
                }

                if wants(*b) {
                    let gb = acc(grads, nodes, *b);
                    for (x, y) in gb.iter_mut().zip(&da) {
                        *x += y;
                    }
                }
                if wants(*w) {
                    let gw = acc(grads, nodes, *w);
                    matmul_at_b_acc(xv.data(), &da, 1, d_in, h3, gw);
                }
                if wants(*u) {
                    let gu = acc(grads, nodes, *u);
                    for p in 0..hd {
                        let row = &mut gu[p * h3..(p + 1) * h3];
                        for j in 0..2 * hd {
                            row[j] += hp[p] * da[j];
                        }
                        for j in 2 * hd..h3 {
                            row[j] += rh[p] * da[j];
                        }
                    }
                }
                if wants(*x) {
                    let gx = acc(grads, nodes, *x);
                    matmul_a_bt_acc(&da, wv.data(), 1, d_in, h3, gx);
                }
                if wants(*h) {
                    let gh = acc(grads, nodes, *h);
                    for (x, y) in gh.iter_mut().zip(&dh) {
                        *x += y;
                    }
                }
            }
            Op::SmoothL1(a) => {
                let av = val(*a);
                let ga = acc(grads, nodes, *a);
                for ((x, y), &inp) in ga.iter_mut().zip(g).zip(av.data()) {
                    *x += y * smooth_l1_grad(inp);
                }
            }
            Op::Sum(a) => {
                let ga = acc(grads, nodes, *a);
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
            Op::Mean(a) => {
                let ga = acc(grads, nodes, *a);
                let scale = g[0] / ga.len() as f64;
                for x in ga.iter_mut() {
                    *x += scale;
                }
            }
            Op::Index(a, i) => {
                let ga = acc(grads, nodes, *a);
                ga[*i] += g[0];
            }
            Op::SoftBce { r, targets, eps } => {
                let rv = val(*r);
                let k = targets.len() as f64;
                let gr = acc(grads, nodes, *r);
                for ((x, &p), &t) in gr.iter_mut().zip(rv.data()).zip(targets) {
                    // The clamp is flat outside (eps, 1−eps).
                    if p > *eps && p < 1.0 - eps {
                        *x += g[0] * (p - t) / (k * p * (1.0 - p));
                    }
                }
            }
        }
    }
}
