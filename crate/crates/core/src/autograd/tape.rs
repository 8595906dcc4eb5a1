//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its output and enough of its inputs
//! to replay the chain rule. Nodes are never mutated after they are pushed;
//! `backward` walks them in reverse order.

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

use super::gemm::gemm;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How an operand is indexed when broadcast against the output.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    /// Same shape as the output.
    Full,
    /// Shape is a suffix of the output shape; index `i % len`.
    Suffix(usize),
    /// Output shape with the last axis collapsed to 1; index `i / last`.
    KeepLast(usize),
}

impl Bcast {
    #[inline]
    fn map(self, i: usize) -> usize {
        match self {
            Bcast::Full => i,
            Bcast::Suffix(n) => i % n,
            Bcast::KeepLast(w) => i / w,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Neg,
    Sqrt,
    Square,
    Exp,
    Gelu,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
        ma: Bcast,
        mb: Bcast,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    Scale {
        a: Var,
        s: f64,
    },
    AddScalar {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    MeanLast {
        a: Var,
    },
    VarLast {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape {
        a: Var,
    },
    SwapAxes01 {
        a: Var,
        d0: usize,
        d1: usize,
        inner: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation. Create one per training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    nonfinite: bool,
    corrupt: Option<CorruptRule>,
}

/// Deliberately wrong backward rules, used only to check that gradient
/// checking catches a broken derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorruptRule {
    /// GELU derivative scaled by 1.1.
    Gelu,
    /// Softmax backward drops the centering term.
    Softmax,
    /// Square derivative uses `x` instead of `2x`.
    Square,
}

impl std::str::FromStr for CorruptRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(CorruptRule::Gelu),
            "softmax" => Ok(CorruptRule::Softmax),
            "square" => Ok(CorruptRule::Square),
            other => Err(Error::invalid(format!("unknown backward rule `{other}`"))),
        }
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn with_corrupt_rule(rule: Option<CorruptRule>) -> Self {
        Tape {
            corrupt: rule,
            ..Tape::default()
        }
    }

    /// Drops every recorded node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.leaf_grads.clear();
        self.nonfinite = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True once any recorded value was NaN or infinite.
    pub fn has_nonfinite(&self) -> bool {
        self.nonfinite
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        if !self.nonfinite && data.iter().any(|v| !v.is_finite()) {
            self.nonfinite = true;
        }
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor as a leaf. It is differentiated iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Leaf that is always differentiated.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape shapes are valid")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    /// Accumulated gradient of a differentiated leaf after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    // ---- elementwise -------------------------------------------------------

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, Bcast, Bcast)> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        let err = || Error::ShapeMismatch {
            op,
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa == sb {
            return Ok((sa.clone(), Bcast::Full, Bcast::Full));
        }
        let fits = |big: &[usize], small: &[usize]| -> Option<Bcast> {
            let nb = numel(big);
            let ns = numel(small);
            if small.len() <= big.len() && big.ends_with(small) {
                return Some(Bcast::Suffix(ns));
            }
            if ns == 1 {
                return Some(Bcast::Suffix(1));
            }
            if small.len() == big.len()
                && !big.is_empty()
                && small.last() == Some(&1)
                && small[..small.len() - 1] == big[..big.len() - 1]
            {
                return Some(Bcast::KeepLast(nb / ns));
            }
            None
        };
        if numel(sa) >= numel(sb) {
            let mb = fits(sa, sb).ok_or_else(err)?;
            Ok((sa.clone(), Bcast::Full, mb))
        } else {
            let ma = fits(sb, sa).ok_or_else(err)?;
            Ok((sb.clone(), ma, Bcast::Full))
        }
    }

    fn binary(&mut self, kind: BinKind, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (shape, ma, mb) = self.bcast(name, a, b)?;
        let n = numel(&shape);
        let xa = &self.nodes[a.0].data;
        let xb = &self.nodes[b.0].data;
        let f: fn(f64, f64) -> f64 = match kind {
            BinKind::Add => |x, y| x + y,
            BinKind::Sub => |x, y| x - y,
            BinKind::Mul => |x, y| x * y,
            BinKind::Div => |x, y| x / y,
        };
        let data = (0..n).map(|i| f(xa[ma.map(i)], xb[mb.map(i)])).collect();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(shape, data, Op::Binary { kind, a, b, ma, mb }, rg))
    }

    /// `a + b` with trailing broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, "mul", a, b)
    }

    /// `a / b`. Division by zero yields non-finite values and raises the
    /// tape's non-finite flag.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, "div", a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Neg => |x| -x,
            UnaryKind::Sqrt => f64::sqrt,
            UnaryKind::Square => |x| x * x,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Gelu => gelu,
        };
        let node = &self.nodes[a.0];
        let data = node.data.iter().map(|&x| f(x)).collect();
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        self.push(shape, data, Op::Unary { kind, a }, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Gelu, a)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let node = &self.nodes[a.0];
        let data = node.data.iter().map(|&x| x * s).collect();
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        self.push(shape, data, Op::Scale { a, s }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let node = &self.nodes[a.0];
        let data = node.data.iter().map(|&x| x + c).collect();
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        self.push(shape, data, Op::AddScalar { a }, rg)
    }

    // ---- reductions --------------------------------------------------------

    /// Sum of all elements, shape `[]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let node = &self.nodes[a.0];
        let s = node.data.iter().sum();
        let rg = node.requires_grad;
        self.push(vec![], vec![s], Op::Sum { a }, rg)
    }

    /// Mean of all elements, shape `[]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let node = &self.nodes[a.0];
        let s = node.data.iter().sum::<f64>() / node.data.len() as f64;
        let rg = node.requires_grad;
        self.push(vec![], vec![s], Op::Mean { a }, rg)
    }

    fn keep_last_shape(shape: &[usize]) -> (Vec<usize>, usize) {
        let w = shape.last().copied().unwrap_or(1);
        let mut out = shape.to_vec();
        match out.last_mut() {
            Some(l) => *l = 1,
            None => out.push(1),
        }
        (out, w)
    }

    /// Mean over the last axis, keeping it with extent 1.
    pub fn mean_last(&mut self, a: Var) -> Var {
        let node = &self.nodes[a.0];
        let (shape, w) = Self::keep_last_shape(&node.shape);
        let data = node
            .data
            .chunks(w)
            .map(|c| c.iter().sum::<f64>() / w as f64)
            .collect();
        let rg = node.requires_grad;
        self.push(shape, data, Op::MeanLast { a }, rg)
    }

    /// Population variance over the last axis, keeping it with extent 1.
    pub fn var_last(&mut self, a: Var) -> Var {
        let node = &self.nodes[a.0];
        let (shape, w) = Self::keep_last_shape(&node.shape);
        let data = node
            .data
            .chunks(w)
            .map(|c| {
                let mu = c.iter().sum::<f64>() / w as f64;
                c.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / w as f64
            })
            .collect();
        let rg = node.requires_grad;
        self.push(shape, data, Op::VarLast { a }, rg)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Var {
        let node = &self.nodes[a.0];
        let w = node.shape.last().copied().unwrap_or(1);
        let mut data = node.data.clone();
        for row in data.chunks_mut(w) {
            softmax_in_place(row);
        }
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        self.push(shape, data, Op::Softmax { a }, rg)
    }

    /// Softmax over the last axis of `[.., s, s]` logits where entry `(i, j)`
    /// with `j > i` is masked out (treated as −∞, probability exactly 0).
    pub fn softmax_causal(&mut self, a: Var) -> Result<Var> {
        let node = &self.nodes[a.0];
        let r = node.shape.len();
        if r < 2 || node.shape[r - 1] != node.shape[r - 2] {
            return Err(Error::InvalidTensor(format!(
                "causal softmax needs square trailing axes, got {:?}",
                node.shape
            )));
        }
        let s = node.shape[r - 1];
        let mut data = node.data.clone();
        for (ri, row) in data.chunks_mut(s).enumerate() {
            let i = ri % s;
            softmax_in_place(&mut row[..=i]);
            row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
        }
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        Ok(self.push(shape, data, Op::Softmax { a }, rg))
    }

    // ---- linear algebra ----------------------------------------------------

    /// Matrix product.
    ///
    /// * `a: [.., m, k]`, `b: [k, n]` → `[.., m, n]` (leading axes of `a` are
    ///   flattened into rows)
    /// * `a: [B, m, k]`, `b: [B, k, n]` → `[B, m, n]`
    ///
    /// With `trans_b` the right operand is read transposed, i.e. `b` is
    /// `[n, k]` or `[B, n, k]`.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let err = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || !(sb.len() == 2 || sb.len() == 3) {
            return Err(err());
        }
        let k = *sa.last().unwrap();
        let (batch, m, kb, n, out_shape);
        if sb.len() == 2 {
            let (r, c) = (sb[0], sb[1]);
            (kb, n) = if trans_b { (c, r) } else { (r, c) };
            batch = 1;
            m = numel(&sa) / k;
            let mut s = sa[..sa.len() - 1].to_vec();
            s.push(n);
            out_shape = s;
        } else {
            if sa.len() != 3 || sa[0] != sb[0] {
                return Err(err());
            }
            let (r, c) = (sb[1], sb[2]);
            (kb, n) = if trans_b { (c, r) } else { (r, c) };
            batch = sa[0];
            m = sa[1];
            out_shape = vec![batch, m, n];
        }
        if kb != k {
            return Err(err());
        }
        let mut data = vec![0.0; batch * m * n];
        {
            let xa = &self.nodes[a.0].data;
            let xb = &self.nodes[b.0].data;
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &xa[bi * m * k..(bi + 1) * m * k],
                    false,
                    &xb[bi * k * n..(bi + 1) * k * n],
                    trans_b,
                    &mut data[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(
            out_shape,
            data,
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true)
    }

    // ---- shape manipulation -----------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let node = &self.nodes[a.0];
        if numel(shape) != node.data.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: node.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let (data, rg) = (node.data.clone(), node.requires_grad);
        Ok(self.push(shape.to_vec(), data, Op::Reshape { a }, rg))
    }

    /// `[d0, d1, ..] → [d1, d0, ..]`.
    pub fn swap_axes01(&mut self, a: Var) -> Result<Var> {
        let node = &self.nodes[a.0];
        if node.shape.len() < 2 {
            return Err(Error::InvalidTensor(format!(
                "swap_axes01 needs rank >= 2, got {:?}",
                node.shape
            )));
        }
        let (d0, d1) = (node.shape[0], node.shape[1]);
        let inner = numel(&node.shape[2..]);
        let mut data = vec![0.0; node.data.len()];
        for i in 0..d0 {
            for j in 0..d1 {
                let src = (i * d1 + j) * inner;
                let dst = (j * d0 + i) * inner;
                data[dst..dst + inner].copy_from_slice(&node.data[src..src + inner]);
            }
        }
        let mut shape = node.shape.clone();
        shape.swap(0, 1);
        let rg = node.requires_grad;
        Ok(self.push(shape, data, Op::SwapAxes01 { a, d0, d1, inner }, rg))
    }

    /// Concatenates along axis 0; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows needs at least one part"))?;
        let tail = self.nodes[first.0].shape[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut rg = false;
        for p in parts {
            let node = &self.nodes[p.0];
            if node.shape.is_empty() || node.shape[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[first.0].shape.clone(),
                    rhs: node.shape.clone(),
                });
            }
            rows += node.shape[0];
            data.extend_from_slice(&node.data);
            rg |= node.requires_grad;
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(
            shape,
            data,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let node = &self.nodes[a.0];
        let rows = node.shape.first().copied().unwrap_or(0);
        if len == 0 || start + len > rows {
            return Err(Error::invalid(format!(
                "slice_rows {start}..{} out of bounds for {rows} rows",
                start + len
            )));
        }
        let w = node.data.len() / rows;
        let data = node.data[start * w..(start + len) * w].to_vec();
        let mut shape = node.shape.clone();
        shape[0] = len;
        let rg = node.requires_grad;
        Ok(self.push(shape, data, Op::SliceRows { a, start }, rg))
    }

    /// Rows of a `[V, d]` table selected by index, giving `[idx.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let node = &self.nodes[table.0];
        if node.shape.len() != 2 || idx.is_empty() {
            return Err(Error::invalid("gather_rows needs a 2-D table and indices"));
        }
        let (v, d) = (node.shape[0], node.shape[1]);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= v {
                return Err(Error::invalid(format!("row index {i} out of range {v}")));
            }
            data.extend_from_slice(&node.data[i * d..(i + 1) * d]);
        }
        let rg = node.requires_grad;
        Ok(self.push(
            vec![idx.len(), d],
            data,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits: [n, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let node = &self.nodes[logits.0];
        if node.shape.len() != 2 || node.shape[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: node.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let v = node.shape[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::invalid(format!("target {t} outside vocabulary {v}")));
        }
        let mut probs = node.data.clone();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[t];
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        loss /= targets.len() as f64;
        let rg = node.requires_grad;
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Back-propagates from a one-element `loss`. Gradients of differentiated
    /// leaves accumulate across calls; leaves the loss does not reach receive
    /// zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.data.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                match &mut self.leaf_grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
        }

        for id in 0..=loss.0 {
            let node = &self.nodes[id];
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.leaf_grads[id].is_none() {
                self.leaf_grads[id] = Some(vec![0.0; node.data.len()]);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Accumulates `delta` into the gradient buffer of `v`, skipping
        // constants.
        fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let len = nodes[v.0].data.len();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
        }

        match &nodes[id].op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::Binary { kind, a, b, ma, mb } => {
                let xa = &nodes[a.0].data;
                let xb = &nodes[b.0].data;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (i, gi) in g.iter().enumerate() {
                        let (ia, ib) = (ma.map(i), mb.map(i));
                        ga[ia] += match kind {
                            BinKind::Add | BinKind::Sub => *gi,
                            BinKind::Mul => gi * xb[ib],
                            BinKind::Div => gi / xb[ib],
                        };
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (i, gi) in g.iter().enumerate() {
                        let (ia, ib) = (ma.map(i), mb.map(i));
                        gb[ib] += match kind {
                            BinKind::Add => *gi,
                            BinKind::Sub => -gi,
                            BinKind::Mul => gi * xa[ia],
                            BinKind::Div => -gi * xa[ia] / (xb[ib] * xb[ib]),
                        };
                    }
                }
            }
            Op::Unary { kind, a } => {
                let x = &nodes[a.0].data;
                let y = &nodes[id].data;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i]
                            * match kind {
                                UnaryKind::Neg => -1.0,
                                UnaryKind::Sqrt => 0.5 / y[i],
                                UnaryKind::Square if self.corrupt == Some(CorruptRule::Square) => x[i],
                                UnaryKind::Square => 2.0 * x[i],
                                UnaryKind::Exp => y[i],
                                UnaryKind::Gelu if self.corrupt == Some(CorruptRule::Gelu) => {
                                    1.1 * gelu_grad(x[i])
                                }
                                UnaryKind::Gelu => gelu_grad(x[i]),
                            };
                    }
                }
            }
            Op::Scale { a, s } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * s);
                }
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { a } => {
                let n = nodes[a.0].data.len() as f64;
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::MeanLast { a } => {
                let w = nodes[a.0].shape.last().copied().unwrap_or(1);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (i, d) in ga.iter_mut().enumerate() {
                        *d += g[i / w] / w as f64;
                    }
                }
            }
            Op::VarLast { a } => {
                let x = &nodes[a.0].data;
                let w = nodes[a.0].shape.last().copied().unwrap_or(1);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (r, (row, grow)) in x.chunks(w).zip(ga.chunks_mut(w)).enumerate() {
                        let mu = row.iter().sum::<f64>() / w as f64;
                        for (xi, d) in row.iter().zip(grow.iter_mut()) {
                            *d += g[r] * 2.0 * (xi - mu) / w as f64;
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                let y = &nodes[id].data;
                let w = nodes[id].shape.last().copied().unwrap_or(1);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((yr, gr), dr) in y.chunks(w).zip(g.chunks(w)).zip(ga.chunks_mut(w)) {
                        let dot: f64 = if self.corrupt == Some(CorruptRule::Softmax) {
                            0.0
                        } else {
                            yr.iter().zip(gr).map(|(p, q)| p * q).sum()
                        };
                        for j in 0..w {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let xa = &nodes[a.0].data;
                let xb = &nodes[b.0].data;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for bi in 0..*batch {
                        // dA = dC · op(B)ᵀ
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &xb[bi * k * n..(bi + 1) * k * n],
                            !trans_b,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            true,
                        );
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for bi in 0..*batch {
                        let ab = &xa[bi * m * k..(bi + 1) * m * k];
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let out = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // B is [n, k]: dB = dCᵀ · A
                            gemm(n, m, k, gc, true, ab, false, out, true);
                        } else {
                            // dB = Aᵀ · dC
                            gemm(k, m, n, ab, true, gc, false, out, true);
                        }
                    }
                }
            }
            Op::SwapAxes01 { a, d0, d1, inner } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..*d0 {
                        for j in 0..*d1 {
                            let src = (i * d1 + j) * inner;
                            let dst = (j * d0 + i) * inner;
                            for t in 0..*inner {
                                ga[src + t] += g[dst + t];
                            }
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].data.len();
                    if let Some(gp) = slot(nodes, grads, *p) {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(d, gi)| *d += gi);
                    }
                    off += len;
                }
            }
            Op::SliceRows { a, start } => {
                let w = g.len() / nodes[id].shape[0];
                if let Some(ga) = slot(nodes, grads, *a) {
                    let base = start * w;
                    ga[base..base + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, gi)| *d += gi);
                }
            }
            Op::GatherRows { table, idx } => {
                let d = nodes[table.0].shape[1];
                if let Some(gt) = slot(nodes, grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..d {
                            gt[i * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = nodes[logits.0].shape[1];
                let scale = g[0] / targets.len() as f64;
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..v {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gl[r * v + c] += scale * (probs[r * v + c] - onehot);
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax of one slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_hand_expanded() {
        // [[1*5+2*7, 1*6+2*8], [3*5+4*7, 3*6+4*8]]
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_mismatch_with_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(vec![2, 3]));
        let b = tape.constant(&Tensor::zeros(vec![2, 3]));
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_backward_rules() {
        // dA = dC·Bᵀ, dB = Aᵀ·dC with dC = ones.
        let mut tape = Tape::new();
        let a = tape.param(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(tape.grad(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(vec![4]));
        let y = tape.softmax(x);
        assert!(tape.value(y).iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let x = tape.constant(&Tensor::vector(&[0.0, 3f64.ln()]));
        let y = tape.softmax(x);
        let p = tape.value(y);
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::vector(&[0.0, 0.7, 1.4]));
        let b = tape.constant(&Tensor::vector(&[-3.2, -2.5, -1.8]));
        let (pa, pb) = (tape.softmax(a), tape.softmax(b));
        for (x, y) in tape.value(pa).iter().zip(tape.value(pb)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::randn(vec![2, 3, 3], 1.0, &mut crate::tensor::SeededRng::new(3)));
        let p = tape.softmax_causal(x).unwrap();
        let v = tape.value(p).to_vec();
        for m in 0..2 {
            for i in 0..3 {
                let row = &v[(m * 3 + i) * 3..(m * 3 + i + 1) * 3];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[i + 1..].iter().all(|&q| q == 0.0));
            }
        }
        assert_eq!(v[0], 1.0);
        let s = tape.square(p);
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap();
        // masked logits never receive gradient
        assert_eq!(g[1], 0.0);
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn mean_variance_and_sqrt_grad() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::vector(&[1.0, 3.0]));
        let m = tape.mean_last(x);
        let v = tape.var_last(x);
        assert_eq!(tape.value(m), &[2.0]);
        // ((1-2)^2 + (3-2)^2) / 2
        assert_eq!(tape.value(v), &[1.0]);

        let x = tape.param(&Tensor::scalar(4.0));
        let r = tape.sqrt(x);
        tape.backward(r).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::vector(&[1.0, 2.0, 3.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(&Tensor::vector(&[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::vector(&[1.0, 2.0, 3.0]));
        let s1 = tape.sum(x);
        let s2 = tape.sum(x);
        tape.backward(s1).unwrap();
        tape.backward(s2).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn disconnected_param_gets_exact_zero() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::vector(&[1.0, 2.0]));
        let unused = tape.param(&Tensor::vector(&[5.0, 6.0, 7.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn divide_by_zero_flags_nonfinite() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::vector(&[1.0]));
        let b = tape.constant(&Tensor::vector(&[0.0]));
        assert!(!tape.has_nonfinite());
        tape.div(a, b).unwrap();
        assert!(tape.has_nonfinite());
    }

    #[test]
    fn broadcast_suffix_and_keep_last() {
        let mut tape = Tape::new();
        let x = tape.param(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let bias = tape.param(&Tensor::vector(&[10.0, 20.0, 30.0]));
        let y = tape.add(x, bias).unwrap();
        assert_eq!(tape.value(y), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let mu = tape.mean_last(x);
        let c = tape.sub(x, mu).unwrap();
        assert_eq!(tape.value(c), &[-1.0, 0.0, 1.0, -1.0, 0.0, 1.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(bias).unwrap(), &[2.0, 2.0, 2.0]);

        let z = tape.constant(&Tensor::zeros(vec![2, 2]));
        assert!(tape.add(x, z).is_err());
    }

    #[test]
    fn batched_matmul_and_swap() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(&t(&[2, 1, 2], &[1.0, 1.0, 2.0, 0.0]));
        let c = tape.matmul_nt(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1, 1]);
        assert_eq!(tape.value(c), &[3.0, 6.0]);
        let s = tape.swap_axes01(a).unwrap();
        assert_eq!(tape.shape(s), &[1, 2, 2]);
        assert_eq!(tape.value(s), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut tape = Tape::new();
        let l = tape.param(&t(&[1, 2], &[0.0, 3f64.ln()]));
        let ce = tape.cross_entropy(l, &[1]).unwrap();
        assert!((tape.scalar(ce) + 0.75f64.ln()).abs() < 1e-12);
        tape.backward(ce).unwrap();
        let g = tape.grad(l).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-12 && (g[1] + 0.25).abs() < 1e-12);
    }
}
