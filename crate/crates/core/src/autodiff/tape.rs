use super::tensor::Tensor;
use crate::error::{invalid, Result};
use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        probs: Vec<f64>,
    },
    LogSoftmaxRows(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Pick {
        x: Var,
        cols: Vec<usize>,
    },
    Sum(Var),
    RowMean(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    BatchNorm {
        x: Var,
        xhat: Vec<f64>,
        inv_std: f64,
    },
    MonoHinge {
        q: Var,
        /// Index of the earlier maximum for every position whose hinge is active.
        active: Vec<Option<usize>>,
    },
}

#[derive(Debug)]
struct Node<'a> {
    rows: usize,
    cols: usize,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
    param: Option<usize>,
}

/// Linear record of a computation. Inputs always precede their consumers, so
/// the reverse pass is a single backwards sweep over the node list.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    poisoned: Option<String>,
}

/// Gradients of a scalar with respect to every trainable leaf, keyed by the
/// parameter id given at registration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub by_param: BTreeMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, param: usize) -> Option<&[f64]> {
        self.by_param.get(&param).map(Vec::as_slice)
    }
}

impl<'a> Tape<'a> {
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(n.rows * n.cols, 1, "node {} is not a scalar", v.0);
        n.value[0]
    }

    /// First non-finite intermediate recorded, if any.
    pub fn check_finite(&self) -> Result<()> {
        match &self.poisoned {
            Some(msg) => Err(invalid!("{msg}")),
            None => Ok(()),
        }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Cow<'a, [f64]>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        if self.poisoned.is_none() && value.iter().any(|x| !x.is_finite()) {
            self.poisoned = Some(alloc::format!(
                "non-finite value produced by node {} ({})",
                self.nodes.len(),
                op_name(&op)
            ));
        }
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf borrowing a parameter tensor.
    pub fn param(&mut self, id: usize, t: &'a Tensor) -> Var {
        let (rows, cols) = t.as_matrix();
        let v = self.push(rows, cols, Cow::Borrowed(t.data()), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Non-trainable leaf borrowing a tensor.
    pub fn frozen(&mut self, t: &'a Tensor) -> Var {
        let (rows, cols) = t.as_matrix();
        self.push(rows, cols, Cow::Borrowed(t.data()), Op::Leaf, false)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len(), "constant shape mismatch");
        self.push(rows, cols, Cow::Owned(data), Op::Leaf, false)
    }

    /// Trainable leaf owning its data; used by tests and the gradient checker.
    pub fn variable(&mut self, id: usize, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len(), "variable shape mismatch");
        let v = self.push(rows, cols, Cow::Owned(data), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions {k} vs {k2}");
        let mut out = alloc::vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), m, k, n, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(m, n, Cow::Owned(out), Op::MatMul(a, b), ng)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let sa = self.shape(a);
        assert_eq!(sa, self.shape(b), "elementwise shape mismatch");
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(sa.0, sa.1, Cow::Owned(out), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + row`, broadcasting a `1 x n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row shape mismatch");
        let r = self.value(row);
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % n])
            .collect();
        let ng = self.ng(a) || self.ng(row);
        self.push(m, n, Cow::Owned(out), Op::AddRow(a, row), ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(m, n, Cow::Owned(out), op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    /// Elementwise product with a constant array (masks, dropout).
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(c.len(), m * n, "mul_const length mismatch");
        let out: Vec<f64> = self.value(a).iter().zip(&c).map(|(&x, &y)| x * y).collect();
        let ng = self.ng(a);
        self.push(m, n, Cow::Owned(out), Op::MulConst(a, c), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    /// Per-row layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(gain), (1, n));
        assert_eq!(self.shape(bias), (1, n));
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = alloc::vec![0.0; m * n];
        let mut inv_std = alloc::vec![0.0; m];
        let mut out = alloc::vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = sum(row) / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).fold(0.0, |a, b| a + b) / n as f64;
            let s = 1.0 / libm::sqrt(var + eps);
            inv_std[i] = s;
            for j in 0..n {
                let h = (row[j] - mean) * s;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            m,
            n,
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Scaled dot-product attention of `q` (rows = queries) over `k`/`v`.
    /// With `causal`, query `i` only sees keys `0..=i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64, causal: bool) -> Var {
        let (tq, dh) = self.shape(q);
        let (tk, dk) = self.shape(k);
        let (tv, dv) = self.shape(v);
        assert_eq!(dh, dk, "attention query/key width");
        assert_eq!(tk, tv, "attention key/value length");
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut probs = alloc::vec![0.0; tq * tk];
        let mut out = alloc::vec![0.0; tq * dv];
        for i in 0..tq {
            let visible = if causal { (i + 1).min(tk) } else { tk };
            let qi = &qv[i * dh..(i + 1) * dh];
            let p = &mut probs[i * tk..i * tk + visible];
            let mut max = f64::NEG_INFINITY;
            for (j, pj) in p.iter_mut().enumerate() {
                *pj = scale * dot(qi, &kv[j * dh..(j + 1) * dh]);
                if *pj > max {
                    max = *pj;
                }
            }
            let mut total = 0.0;
            for pj in p.iter_mut() {
                *pj = libm::exp(*pj - max);
                total += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= total;
            }
            let o = &mut out[i * dv..(i + 1) * dv];
            for (j, &pj) in p.iter().enumerate() {
                let vj = &vv[j * dv..(j + 1) * dv];
                for c in 0..dv {
                    o[c] += pj * vj[c];
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            tq,
            dv,
            Cow::Owned(out),
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
            },
            ng,
        )
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let av = self.value(a);
        let mut out = alloc::vec![0.0; m * n];
        for i in 0..m {
            log_softmax_row(&av[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let ng = self.ng(a);
        self.push(m, n, Cow::Owned(out), Op::LogSoftmaxRows(a), ng)
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let (m, n) = self.shape(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            assert!(id < m, "gather id {id} out of range {m}");
            out.extend_from_slice(&tv[id * n..(id + 1) * n]);
        }
        let ng = self.ng(table);
        self.push(
            ids.len(),
            n,
            Cow::Owned(out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Column vector `[x[i, cols[i]]]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(cols.len(), m, "pick needs one column per row");
        let xv = self.value(x);
        let out: Vec<f64> = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                assert!(c < n, "pick column {c} out of range {n}");
                xv[i * n + c]
            })
            .collect();
        let ng = self.ng(x);
        self.push(
            m,
            1,
            Cow::Owned(out),
            Op::Pick {
                x,
                cols: cols.to_vec(),
            },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = sum(self.value(a));
        let ng = self.ng(a);
        self.push(1, 1, Cow::Owned(alloc::vec![s]), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column vector of per-row means.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let av = self.value(a);
        let out: Vec<f64> = (0..m).map(|i| sum(&av[i * n..(i + 1) * n]) / n as f64).collect();
        let ng = self.ng(a);
        self.push(m, 1, Cow::Owned(out), Op::RowMean(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(c, cols, "concat_rows column mismatch");
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(rows, cols, Cow::Owned(out), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(x);
        assert!(start + len <= m, "slice_rows out of range");
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        let ng = self.ng(x);
        self.push(len, n, Cow::Owned(out), Op::SliceRows { x, start }, ng)
    }

    /// Normalization over every element of `x` with population variance.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Var {
        let (m, n) = self.shape(x);
        let mut out = alloc::vec![0.0; m * n];
        let inv_std = batch_norm_forward(self.value(x), eps, &mut out);
        let xhat = out.clone();
        let ng = self.ng(x);
        self.push(m, n, Cow::Owned(out), Op::BatchNorm { x, xhat, inv_std }, ng)
    }

    /// Per-position hinge `max(max_{m<n} q_m - q_n - eps, 0)`, zero at `n = 0`.
    pub fn mono_hinge(&mut self, q: Var, eps: f64) -> Var {
        let (m, n) = self.shape(q);
        let qv = self.value(q);
        let len = m * n;
        let mut out = alloc::vec![0.0; len];
        let mut active = alloc::vec![None; len];
        let mut best = 0usize;
        for i in 1..len {
            if qv[i - 1] > qv[best] {
                best = i - 1;
            }
            let z = qv[best] - qv[i] - eps;
            if z > 0.0 {
                out[i] = z;
                active[i] = Some(best);
            }
        }
        let ng = self.ng(q);
        self.push(m, n, Cow::Owned(out), Op::MonoHinge { q, active }, ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        let (r, c) = self.shape(loss);
        if r * c != 1 {
            return Err(invalid!("backward needs a scalar loss, got {r}x{c}"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(alloc::vec![1.0]);
        let mut out = Gradients::default();
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Some(p), true) = (node.param, id <= loss.0) {
                out.by_param.insert(p, alloc::vec![0.0; node.value.len()]);
            }
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Some(p) = node.param {
                let acc = out.by_param.get_mut(&p).expect("param registered");
                add_into(acc, &g);
                continue;
            }
            self.backprop(node, &g, &mut grads);
        }
        for g in out.by_param.values() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(invalid!("non-finite gradient"));
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| alloc::vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.shape(a);
                let n = node.cols;
                let av = self.value(a);
                let bv = self.value(b);
                self.acc(grads, a, |ga| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] += dot(gi, &bv[p * n..(p + 1) * n]);
                        }
                    }
                });
                self.acc(grads, b, |gb| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            let row = &mut gb[p * n..(p + 1) * n];
                            for j in 0..n {
                                row[j] += a_ip * gi[j];
                            }
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, |ga| add_into(ga, g));
                self.acc(grads, b, |gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, |ga| add_into(ga, g));
                self.acc(grads, b, |gb| {
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                self.acc(grads, a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.acc(grads, b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            &Op::AddRow(a, row) => {
                let n = node.cols;
                self.acc(grads, a, |ga| add_into(ga, g));
                self.acc(grads, row, |gr| {
                    for (i, &x) in g.iter().enumerate() {
                        gr[i % n] += x;
                    }
                });
            }
            &Op::Scale(a, c) => self.acc(grads, a, |ga| {
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x += c * y;
                }
            }),
            &Op::AddScalar(a) => self.acc(grads, a, |ga| add_into(ga, g)),
            Op::MulConst(a, c) => self.acc(grads, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * c[i];
                }
            }),
            &Op::Gelu(a) => {
                let av = self.value(a);
                self.acc(grads, a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_grad(av[i]);
                    }
                });
            }
            &Op::Sigmoid(a) => self.acc(grads, a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            &Op::Relu(a) => {
                let av = self.value(a);
                self.acc(grads, a, |ga| {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            &Op::Square(a) => {
                let av = self.value(a);
                self.acc(grads, a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += 2.0 * av[i] * g[i];
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = (node.rows, node.cols);
                let gv = self.value(*gain);
                self.acc(grads, *x, |gx| {
                    let mut dxhat = alloc::vec![0.0; n];
                    for i in 0..m {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let d = g[i * n + j] * gv[j];
                            dxhat[j] = d;
                            s1 += d;
                            s2 += d * xhat[i * n + j];
                        }
                        let nf = n as f64;
                        for j in 0..n {
                            gx[i * n + j] +=
                                inv_std[i] * (nf * dxhat[j] - s1 - xhat[i * n + j] * s2) / nf;
                        }
                    }
                });
                self.acc(grads, *gain, |gg| {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                self.acc(grads, *bias, |gb| {
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
            } => {
                let (tq, dh) = self.shape(*q);
                let (tk, dv) = self.shape(*v);
                let qv = self.value(*q);
                let kv = self.value(*k);
                let vv = self.value(*v);
                // dS = P * (dP - rowsum(dP * P)) with dP = dO V^T
                let mut ds = alloc::vec![0.0; tq * tk];
                for i in 0..tq {
                    let gi = &g[i * dv..(i + 1) * dv];
                    let p = &probs[i * tk..(i + 1) * tk];
                    let dsi = &mut ds[i * tk..(i + 1) * tk];
                    let mut s = 0.0;
                    for j in 0..tk {
                        if p[j] != 0.0 {
                            dsi[j] = dot(gi, &vv[j * dv..(j + 1) * dv]);
                            s += dsi[j] * p[j];
                        }
                    }
                    for j in 0..tk {
                        dsi[j] = p[j] * (dsi[j] - s);
                    }
                }
                self.acc(grads, *q, |gq| {
                    for i in 0..tq {
                        for j in 0..tk {
                            let w = ds[i * tk + j] * scale;
                            if w != 0.0 {
                                for c in 0..dh {
                                    gq[i * dh + c] += w * kv[j * dh + c];
                                }
                            }
                        }
                    }
                });
                self.acc(grads, *k, |gk| {
                    for i in 0..tq {
                        for j in 0..tk {
                            let w = ds[i * tk + j] * scale;
                            if w != 0.0 {
                                for c in 0..dh {
                                    gk[j * dh + c] += w * qv[i * dh + c];
                                }
                            }
                        }
                    }
                });
                self.acc(grads, *v, |gv| {
                    for i in 0..tq {
                        for j in 0..tk {
                            let p = probs[i * tk + j];
                            if p != 0.0 {
                                for c in 0..dv {
                                    gv[j * dv + c] += p * g[i * dv + c];
                                }
                            }
                        }
                    }
                });
            }
            &Op::LogSoftmaxRows(a) => {
                let (m, n) = (node.rows, node.cols);
                self.acc(grads, a, |ga| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        let s = sum(gi);
                        for j in 0..n {
                            ga[i * n + j] += gi[j] - libm::exp(out[i * n + j]) * s;
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let n = node.cols;
                self.acc(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..n {
                            gt[id * n + j] += g[r * n + j];
                        }
                    }
                });
            }
            Op::Pick { x, cols } => {
                let n = self.shape(*x).1;
                self.acc(grads, *x, |gx| {
                    for (i, &c) in cols.iter().enumerate() {
                        gx[i * n + c] += g[i];
                    }
                });
            }
            &Op::Sum(a) => self.acc(grads, a, |ga| {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }),
            &Op::RowMean(a) => {
                let n = self.shape(a).1;
                self.acc(grads, a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i / n] / n as f64;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            &Op::SliceRows { x, start } => {
                let n = node.cols;
                self.acc(grads, x, |gx| {
                    add_into(&mut gx[start * n..start * n + g.len()], g);
                });
            }
            Op::BatchNorm { x, xhat, inv_std } => {
                self.acc(grads, *x, |gx| {
                    let nf = g.len() as f64;
                    let s1 = sum(g);
                    let s2 = g.iter().zip(xhat).map(|(a, b)| a * b).fold(0.0, |a, b| a + b);
                    for i in 0..g.len() {
                        gx[i] += inv_std * (nf * g[i] - s1 - xhat[i] * s2) / nf;
                    }
                });
            }
            Op::MonoHinge { q, active } => self.acc(grads, *q, |gq| {
                for (i, a) in active.iter().enumerate() {
                    if let Some(m) = *a {
                        gq[m] += g[i];
                        gq[i] -= g[i];
                    }
                }
            }),
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::MulConst(..) => "mul_const",
        Op::Gelu(..) => "gelu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Relu(..) => "relu",
        Op::Square(..) => "square",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Attention { .. } => "attention",
        Op::LogSoftmaxRows(..) => "log_softmax",
        Op::Gather { .. } => "gather",
        Op::Pick { .. } => "pick",
        Op::Sum(..) => "sum",
        Op::RowMean(..) => "row_mean",
        Op::ConcatRows(..) => "concat_rows",
        Op::SliceRows { .. } => "slice_rows",
        Op::BatchNorm { .. } => "batch_norm",
        Op::MonoHinge { .. } => "mono_hinge",
    }
}

pub(crate) fn sum(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |a, &b| a + b)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let bp = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += a_ip * bp[j];
            }
        }
    }
}

pub(crate) fn log_softmax_row(v: &[f64], out: &mut [f64]) {
    let max = v.iter().fold(f64::NEG_INFINITY, |a, &b| if b > a { b } else { a });
    let total = v.iter().fold(0.0, |a, &x| a + libm::exp(x - max));
    let lse = max + libm::log(total);
    for (o, &x) in out.iter_mut().zip(v) {
        *o = x - lse;
    }
}

/// Writes the normalized values and returns `1 / sqrt(var + eps)`.
pub(crate) fn batch_norm_forward(x: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = sum(x) / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).fold(0.0, |a, b| a + b) / n;
    let denom = var + eps;
    let inv_std = if denom > 0.0 { 1.0 / libm::sqrt(denom) } else { 0.0 };
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv_std;
    }
    inv_std
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
