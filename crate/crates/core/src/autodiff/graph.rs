use std::rc::Rc;

use super::tensor::numel;
use super::{ParameterSet, Tensor, TensorError};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Broadcast(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    BceLogits {
        logits: Var,
        targets: Var,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

/// C ← A·B + beta·C with logical A: m×k and B: k×n, either optionally stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above; strides describe in-bounds layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded nodes are well-formed")
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Gradient of a tracked leaf created with [`Graph::input`], after `backward_leaves`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Result<Var, TensorError> {
        debug_assert_eq!(numel(&shape), value.len());
        if cfg!(debug_assertions) && value.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite(op_name(&op)));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Result<Var, TensorError> {
        let shape = t.shape().to_vec();
        let data = t.data().to_vec();
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, TensorError> {
        let t = Tensor::new(shape, data)?;
        self.constant(t)
    }

    /// Tracked input whose gradient is available through [`Graph::grad`].
    pub fn input(&mut self, t: Tensor) -> Result<Var, TensorError> {
        let shape = t.shape().to_vec();
        let data = t.data().to_vec();
        self.push(shape, data, Op::Leaf, true)
    }

    /// Reads a named parameter onto the tape. Gradients flow back into `params`.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var, TensorError> {
        let idx = params
            .index_of(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        let t = params.tensor(idx);
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(idx), true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// `a[.., k] · b[k, n] -> [.., n]`; leading dimensions of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(TensorError::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, 0.0, &mut out);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        self.push(shape, out, Op::MatMul { a, b, m, k, n }, rg)
    }

    /// Batched product `a[B, m, k] · b[B, k, n]`, or `a · bᵀ` for `b[B, n, k]` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || TensorError::Dimension {
            op: "batch_matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        )
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>, bool), TensorError> {
        self.same_shape(op, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), out, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (s, v, rg) = self.binary("add", a, b, |x, y| x + y)?;
        self.push(s, v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (s, v, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(s, v, Op::Sub(a, b), rg)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (s, v, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(s, v, Op::Mul(a, b), rg)
    }

    /// Adds a bias vector `[n]` to every row of `x[.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        let n = *sx.last().unwrap();
        if sb.len() != 1 || sb[0] != n {
            return Err(TensorError::Dimension {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let bv = self.value(bias);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(a, b)| a + b))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        self.push(sx, out, Op::AddBias { x, bias }, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, TensorError> {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, op, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, sigmoid_scalar, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Row softmax over the last dimension.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        self.softmax_masked(x, None)
    }

    /// Row softmax over the last dimension with an optional boolean mask.
    ///
    /// `mask` holds `true` for admissible entries and covers `p` rows of the last
    /// dimension; row `r` of `x` uses mask row `r % p`. Masked entries get
    /// probability exactly zero.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<Rc<[bool]>>) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if let Some(m) = &mask {
            if m.is_empty() || m.len() % n != 0 {
                return Err(TensorError::Dimension {
                    op: "softmax_masked",
                    lhs: shape,
                    rhs: vec![m.len()],
                });
            }
        }
        let period = mask.as_ref().map(|m| m.len() / n).unwrap_or(1);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for (r, (row, orow)) in xv.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let mrow = mask.as_ref().map(|m| &m[(r % period) * n..(r % period + 1) * n]);
            let allowed = |j: usize| mrow.map(|m| m[j]).unwrap_or(true);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TensorError::FullyMaskedRow(r));
            }
            let mut sum = 0.0;
            for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
                if allowed(j) {
                    *o = (v - max).exp();
                    sum += *o;
                }
            }
            orow.iter_mut().for_each(|o| *o /= sum);
        }
        let rg = self.rg(x);
        self.push(shape, out, Op::Softmax { x }, rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::Dimension {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let rg = self.rg(x);
        self.push(s, out, Op::Slice { x, axis, start }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        if numel(&shape) != self.value(x).len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Dimension {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let v = self.value(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, v, Op::Reshape(x), rg)
    }

    /// Stacks `count` copies of `x` along a new leading axis.
    pub fn broadcast(&mut self, x: Var, count: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let mut out = Vec::with_capacity(count * xv.len());
        for _ in 0..count {
            out.extend_from_slice(xv);
        }
        let mut shape = vec![count];
        shape.extend_from_slice(self.shape(x));
        let rg = self.rg(x);
        self.push(shape, out, Op::Broadcast(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Mean(x), rg)
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(TensorError::Dimension {
                    op: "layer_norm",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        self.same_shape("mse", pred, target)?;
        let p = self.value(pred);
        let t = self.value(target);
        let s = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let rg = self.rg(pred) || self.rg(target);
        self.push(vec![1], vec![s], Op::Mse { pred, target }, rg)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 `targets`,
    /// evaluated in the overflow-free logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var, TensorError> {
        self.same_shape("bce_with_logits", logits, targets)?;
        let z = self.value(logits);
        let y = self.value(targets);
        let s = z
            .iter()
            .zip(y)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / z.len() as f64;
        let rg = self.rg(logits);
        self.push(vec![1], vec![s], Op::BceLogits { logits, targets }, rg)
    }

    fn compute_grads(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>, TensorError> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul { a, b, m, k, n } => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(a, &mut |da| gemm(m, n, k, g, false, bv, true, 1.0, da));
                acc(b, &mut |db| gemm(k, m, n, av, true, g, false, 1.0, db));
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(a, &mut |da| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        // dA = dC · Bᵀ, where B is stored [k, n] or, when transposed, [n, k].
                        gemm(
                            m,
                            n,
                            k,
                            gi,
                            false,
                            bi,
                            !trans_b,
                            1.0,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                acc(b, &mut |db| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, gi, true, ai, false, 1.0, dbi);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, 1.0, dbi);
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |da| add_into(da, g));
                acc(b, &mut |db| add_into(db, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |da| add_into(da, g));
                acc(b, &mut |db| db.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            &Op::Mul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(a, &mut |da| {
                    for ((d, g), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                acc(b, &mut |db| {
                    for ((d, g), x) in db.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            &Op::AddBias { x, bias } => {
                acc(x, &mut |dx| add_into(dx, g));
                let n = nodes[bias.0].value.len();
                acc(bias, &mut |db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            &Op::Scale(x, c) => acc(x, &mut |dx| {
                dx.iter_mut().zip(g).for_each(|(d, g)| *d += g * c);
            }),
            &Op::Tanh(x) => {
                let y = &node.value;
                acc(x, &mut |dx| {
                    for ((d, g), y) in dx.iter_mut().zip(g).zip(y) {
                        *d += g * (1.0 - y * y);
                    }
                });
            }
            &Op::Sigmoid(x) => {
                let y = &node.value;
                acc(x, &mut |dx| {
                    for ((d, g), y) in dx.iter_mut().zip(g).zip(y) {
                        *d += g * y * (1.0 - y);
                    }
                });
            }
            &Op::Relu(x) => {
                let xv = &nodes[x.0].value;
                acc(x, &mut |dx| {
                    for ((d, g), x) in dx.iter_mut().zip(g).zip(xv) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            &Op::Softmax { x } => {
                let n = *node.shape.last().unwrap();
                let y = &node.value;
                acc(x, &mut |dx| {
                    for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].shape[*axis] * inner;
                    acc(p, &mut |dp| {
                        for o in 0..outer {
                            add_into(
                                &mut dp[o * len..(o + 1) * len],
                                &g[o * total + offset..o * total + offset + len],
                            );
                        }
                    });
                    offset += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let (outer, dim, inner) = split_axis(&nodes[x.0].shape, axis);
                let len = node.shape[axis] * inner;
                acc(x, &mut |dx| {
                    for o in 0..outer {
                        let base = (o * dim + start) * inner;
                        add_into(&mut dx[base..base + len], &g[o * len..(o + 1) * len]);
                    }
                });
            }
            &Op::Reshape(x) => acc(x, &mut |dx| add_into(dx, g)),
            &Op::Broadcast(x) => {
                let n = nodes[x.0].value.len();
                acc(x, &mut |dx| {
                    for chunk in g.chunks(n) {
                        add_into(dx, chunk);
                    }
                });
            }
            &Op::Sum(x) => acc(x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            &Op::Mean(x) => {
                let c = g[0] / nodes[x.0].value.len() as f64;
                acc(x, &mut |dx| dx.iter_mut().for_each(|d| *d += c));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = *node.shape.last().unwrap();
                let gv = &nodes[gamma.0].value;
                acc(*gamma, &mut |dg| {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for grow in g.chunks(n) {
                        add_into(db, grow);
                    }
                });
                acc(*x, &mut |dx| {
                    let nf = n as f64;
                    for (r, ((drow, grow), hrow)) in dx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..n {
                            let dh = grow[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[j];
                        }
                        for j in 0..n {
                            let dh = grow[j] * gv[j];
                            drow[j] += rstd[r] / nf * (nf * dh - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                });
            }
            &Op::Mse { pred, target } => {
                let pv = &nodes[pred.0].value;
                let tv = &nodes[target.0].value;
                let c = 2.0 * g[0] / pv.len() as f64;
                acc(pred, &mut |dp| {
                    for ((d, p), t) in dp.iter_mut().zip(pv).zip(tv) {
                        *d += c * (p - t);
                    }
                });
                acc(target, &mut |dt| {
                    for ((d, p), t) in dt.iter_mut().zip(pv).zip(tv) {
                        *d -= c * (p - t);
                    }
                });
            }
            &Op::BceLogits { logits, targets } => {
                let zv = &nodes[logits.0].value;
                let yv = &nodes[targets.0].value;
                let c = g[0] / zv.len() as f64;
                acc(logits, &mut |dz| {
                    for ((d, z), y) in dz.iter_mut().zip(zv).zip(yv) {
                        *d += c * (sigmoid_scalar(*z) - y);
                    }
                });
            }
        }
    }

    /// Reverse pass from a scalar `loss`; parameter gradients are added into `params`.
    ///
    /// Calling this repeatedly accumulates; use [`ParameterSet::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var, params: &mut ParameterSet) -> Result<(), TensorError> {
        let grads = self.compute_grads(loss)?;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if let Op::Param(idx) = self.nodes[i].op {
                if idx >= params.len() || params.tensor(idx).len() != g.len() {
                    return Err(TensorError::Invalid {
                        op: "backward",
                        msg: "parameter set does not match the one used for the forward pass".into(),
                    });
                }
                params.accumulate_grad(idx, g);
            }
        }
        self.store_leaf_grads(grads);
        Ok(())
    }

    /// Reverse pass for graphs without parameters; gradients land on tracked inputs.
    pub fn backward_leaves(&mut self, loss: Var) -> Result<(), TensorError> {
        let grads = self.compute_grads(loss)?;
        self.store_leaf_grads(grads);
        Ok(())
    }

    fn store_leaf_grads(&mut self, grads: Vec<Option<Vec<f64>>>) {
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let (Op::Leaf, Some(g)) = (&self.nodes[i].op, g) {
                match &mut self.leaf_grads[i] {
                    Some(existing) => add_into(existing, &g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::MatMul { .. } => "matmul",
        Op::BatchMatMul { .. } => "batch_matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddBias { .. } => "add_bias",
        Op::Scale(..) => "scale",
        Op::Tanh(_) => "tanh",
        Op::Sigmoid(_) => "sigmoid",
        Op::Relu(_) => "relu",
        Op::Softmax { .. } => "softmax",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Reshape(_) => "reshape",
        Op::Broadcast(_) => "broadcast",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Mse { .. } => "mse",
        Op::BceLogits { .. } => "bce_with_logits",
    }
}
