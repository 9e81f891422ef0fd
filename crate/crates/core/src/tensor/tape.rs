use super::{kernels, numel, Float, Result, Tensor, TensorError};
use crate::exec;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Const,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNT { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    MulConst { a: Var, c: Vec<T> },
    AddRows { x: Var, table: Var, index: Vec<usize> },
    Gelu { a: Var },
    Log { a: Var },
    Exp { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { a: Var, inv_tau: T },
    LogSoftmax { a: Var, inv_tau: T },
    L2Normalize { a: Var, norms: Vec<T> },
    GroupMean { a: Var, group: usize },
    SelectRows { a: Var, rows: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    MaskRows { x: Var, fill: Var, rows: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, heads: usize, nq: usize, nk: usize, probs: Vec<T> },
    Sum { a: Var },
    Mean { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Koleo { a: Var, nn: Vec<usize>, dist: Vec<T>, eps: T },
    Triplet { a: Var, pos: Vec<usize>, neg: Vec<usize>, dpos: Vec<T>, dneg: Vec<T>, margin: T },
    WeightedSum { terms: Vec<(Var, T)> },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed operations. Inputs always precede the
/// operation that consumes them, so a reverse sweep is a valid topological
/// order for backpropagation.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn param_err(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Param {
        op,
        msg: msg.into(),
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which no value ever requires a gradient.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn cols(&self, v: Var) -> usize {
        *self.nodes[v.0].shape.last().unwrap_or(&1)
    }

    fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].value.len() / self.cols(v).max(1)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, inputs: &[Var], op: impl FnOnce() -> Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let rg = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op() } else { Op::Const };
        self.nodes.push(Node {
            shape,
            value,
            requires_grad: rg,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a tensor as a leaf. It tracks gradients when the tensor does and
    /// the tape is not an inference tape.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            requires_grad: self.grad_enabled && t.requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, value)?;
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.into_data(),
            requires_grad: false,
            op: Op::Const,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = super::matmul_dims(self.shape(a), self.shape(b))?;
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        Ok(self.push(vec![m, n], out, &[a, b], || Op::MatMul { a, b, m, k, n }))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let out = kernels::matmul_nt(self.value(a), self.value(b), m, k, n);
        Ok(self.push(vec![m, n], out, &[a, b], || Op::MatMulNT { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(param_err("transpose", format!("expected a matrix, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let out = kernels::transpose(self.value(a), rows, cols);
        Ok(self.push(vec![cols, rows], out, &[a], || Op::Transpose { a, rows, cols }))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), out, &[a, b], || Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), out, &[a, b], || Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), out, &[a, b], || Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        self.push(self.shape(a).to_vec(), out, &[a], || Op::Scale { a, s })
    }

    /// Elementwise product with a constant payload of the same length.
    pub fn mul_const(&mut self, a: Var, c: &[T]) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(shape_err("mul_const", self.shape(a), &[c.len()]));
        }
        let out = self.value(a).iter().zip(c).map(|(&x, &y)| x * y).collect();
        let c = c.to_vec();
        Ok(self.push(self.shape(a).to_vec(), out, &[a], || Op::MulConst { a, c }))
    }

    /// Adds `table[index[r]]` to row `r` of `x`.
    pub fn add_rows(&mut self, x: Var, table: Var, index: Vec<usize>) -> Result<Var> {
        let d = self.cols(x);
        let tlen = self.value(table).len();
        let trows = tlen / d.max(1);
        if d == 0 || tlen % d != 0 || self.cols(table) != d {
            return Err(shape_err("add_rows", self.shape(x), self.shape(table)));
        }
        if index.len() != self.rows(x) || index.iter().any(|&i| i >= trows) {
            return Err(param_err("add_rows", "row index out of range"));
        }
        let tv = self.value(table);
        let mut out = self.value(x).to_vec();
        for (r, &ti) in index.iter().enumerate() {
            for j in 0..d {
                out[r * d + j] = out[r * d + j] + tv[ti * d + j];
            }
        }
        Ok(self.push(self.shape(x).to_vec(), out, &[x, table], || Op::AddRows { x, table, index }))
    }

    /// Adds a `[d]` bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let rows = self.rows(x);
        self.add_rows(x, bias, vec![0; rows])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        self.push(self.shape(a).to_vec(), out, &[a], || Op::Gelu { a })
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.ln()).collect();
        self.push(self.shape(a).to_vec(), out, &[a], || Op::Log { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.exp()).collect();
        self.push(self.shape(a).to_vec(), out, &[a], || Op::Exp { a })
    }

    // ---- row-wise normalizations ---------------------------------------

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let d = self.cols(x);
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        if !(eps > T::zero()) {
            return Err(param_err("layer_norm", "eps must be positive"));
        }
        let (y, xhat, rstd) =
            kernels::layer_norm(self.value(x), self.value(gain), self.value(bias), d, eps);
        Ok(self.push(self.shape(x).to_vec(), y, &[x, gain, bias], || Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        }))
    }

    fn check_temperature(op: &'static str, t: T) -> Result<T> {
        if !(t > T::zero()) || !t.is_finite() {
            return Err(param_err(op, format!("temperature must be positive, got {t}")));
        }
        Ok(T::one() / t)
    }

    pub fn softmax(&mut self, a: Var, temperature: T) -> Result<Var> {
        let inv_tau = Self::check_temperature("softmax", temperature)?;
        let mut out = self.value(a).to_vec();
        kernels::softmax_rows(&mut out, self.cols(a), inv_tau);
        Ok(self.push(self.shape(a).to_vec(), out, &[a], || Op::Softmax { a, inv_tau }))
    }

    pub fn log_softmax(&mut self, a: Var, temperature: T) -> Result<Var> {
        let inv_tau = Self::check_temperature("log_softmax", temperature)?;
        let mut out = self.value(a).to_vec();
        kernels::log_softmax_rows(&mut out, self.cols(a), inv_tau);
        Ok(self.push(self.shape(a).to_vec(), out, &[a], || Op::LogSoftmax { a, inv_tau }))
    }

    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let mut out = self.value(a).to_vec();
        let norms = kernels::l2_normalize_rows(&mut out, self.cols(a));
        self.push(self.shape(a).to_vec(), out, &[a], || Op::L2Normalize { a, norms })
    }

    // ---- row bookkeeping ------------------------------------------------

    /// Means over consecutive groups of `group` rows: `[G·group × d] → [G × d]`.
    pub fn group_mean(&mut self, a: Var, group: usize) -> Result<Var> {
        let rows = self.rows(a);
        if group == 0 || rows % group != 0 {
            return Err(param_err("group_mean", format!("{rows} rows not divisible by {group}")));
        }
        let d = self.cols(a);
        let g = rows / group;
        let inv = T::one() / T::lit(group as f64);
        let v = self.value(a);
        let mut out = vec![T::zero(); g * d];
        for gi in 0..g {
            for r in 0..group {
                let src = &v[(gi * group + r) * d..(gi * group + r + 1) * d];
                for j in 0..d {
                    out[gi * d + j] = out[gi * d + j] + src[j];
                }
            }
            for o in &mut out[gi * d..(gi + 1) * d] {
                *o = *o * inv;
            }
        }
        Ok(self.push(vec![g, d], out, &[a], || Op::GroupMean { a, group }))
    }

    /// Gathers rows (repetition allowed).
    pub fn select_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        let n = self.rows(a);
        let d = self.cols(a);
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(param_err("select_rows", "row index out of range"));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            out.extend_from_slice(&v[r * d..(r + 1) * d]);
        }
        Ok(self.push(vec![rows.len(), d], out, &[a], || Op::SelectRows { a, rows }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(param_err("concat_rows", "nothing to concatenate"));
        };
        let d = self.cols(first);
        let mut out = Vec::new();
        for &p in parts {
            if self.cols(p) != d {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.value(p));
        }
        let rows = out.len() / d;
        let parts = parts.to_vec();
        let inputs = parts.clone();
        Ok(self.push(vec![rows, d], out, &inputs, || Op::ConcatRows { parts }))
    }

    /// Replaces the listed rows of `x` with the `[d]` vector `fill`.
    pub fn mask_rows(&mut self, x: Var, fill: Var, rows: Vec<usize>) -> Result<Var> {
        let d = self.cols(x);
        if self.value(fill).len() != d {
            return Err(shape_err("mask_rows", self.shape(x), self.shape(fill)));
        }
        let n = self.rows(x);
        if rows.iter().any(|&r| r >= n) {
            return Err(param_err("mask_rows", "row index out of range"));
        }
        let mut out = self.value(x).to_vec();
        let f = self.value(fill);
        for &r in &rows {
            out[r * d..(r + 1) * d].copy_from_slice(f);
        }
        Ok(self.push(self.shape(x).to_vec(), out, &[x, fill], || Op::MaskRows { x, fill, rows }))
    }

    // ---- attention ------------------------------------------------------

    /// Grouped multi-head scaled dot-product attention.
    ///
    /// `q` holds `G·nq` rows and `k`, `v` hold `G·nk` rows; the rows of group
    /// `g` only attend within group `g`. The width is split evenly across
    /// `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, nq: usize, nk: usize) -> Result<Var> {
        let d = self.cols(q);
        if self.cols(k) != d || self.shape(k) != self.shape(v) {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(param_err("attention", format!("width {d} not divisible by {heads} heads")));
        }
        let (qr, kr) = (self.rows(q), self.rows(k));
        if nq == 0 || nk == 0 || qr % nq != 0 || kr % nk != 0 || qr / nq != kr / nk {
            return Err(param_err(
                "attention",
                format!("cannot group {qr} query rows by {nq} against {kr} key rows by {nk}"),
            ));
        }
        let groups = qr / nq;
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let per_group = exec::map_indexed(groups, heads * nq * nk * dh * 2, |g| {
            let mut out = vec![T::zero(); nq * d];
            let mut probs = vec![T::zero(); heads * nq * nk];
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..nq {
                    let qrow = &qv[(g * nq + i) * d + c0..(g * nq + i) * d + c0 + dh];
                    let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let krow = &kv[(g * nk + j) * d + c0..(g * nk + j) * d + c0 + dh];
                        *pj = kernels::dot(qrow, krow) * scale;
                    }
                    kernels::softmax_rows(p, nk, T::one());
                    let orow = &mut out[i * d + c0..i * d + c0 + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vrow = &vv[(g * nk + j) * d + c0..(g * nk + j) * d + c0 + dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o = *o + pj * x;
                        }
                    }
                }
            }
            (out, probs)
        });
        let mut out = Vec::with_capacity(qr * d);
        let mut probs = Vec::with_capacity(groups * heads * nq * nk);
        for (o, p) in per_group {
            out.extend(o);
            probs.extend(p);
        }
        let rg = self.grad_enabled && [q, k, v].iter().any(|x| self.nodes[x.0].requires_grad);
        // Probabilities are kept even without gradients so they can be exported.
        self.nodes.push(Node {
            shape: vec![qr, d],
            value: out,
            requires_grad: rg,
            op: Op::Attention { q, k, v, heads, nq, nk, probs },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Attention probabilities `[G × heads × nq × nk]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(&[T], usize, usize, usize)> {
        match &self.nodes[v.0].op {
            Op::Attention { heads, nq, nk, probs, .. } => Some((probs, *heads, *nq, *nk)),
            _ => None,
        }
    }

    // ---- reductions and losses -----------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![1], vec![s], &[a], || Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().copied().sum::<T>() / T::lit(v.len() as f64);
        self.push(vec![1], vec![s], &[a], || Op::Mean { a })
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, c) = (self.rows(logits), self.cols(logits));
        if targets.len() != b {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(param_err("cross_entropy", format!("target {t} outside {c} classes")));
        }
        let mut lp = self.value(logits).to_vec();
        kernels::log_softmax_rows(&mut lp, c, T::one());
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(i, &t)| lp[i * c + t])
            .sum::<T>()
            / T::lit(b as f64);
        let probs = lp.iter().map(|x| x.exp()).collect();
        let targets = targets.to_vec();
        Ok(self.push(vec![1], vec![loss], &[logits], || Op::CrossEntropy { logits, targets, probs }))
    }

    /// `-(1/B) Σ_i log(max(min_{j≠i} ‖e_i − e_j‖, eps))` over the rows of `a`.
    pub fn koleo(&mut self, a: Var, eps: T) -> Result<Var> {
        let (b, d) = (self.rows(a), self.cols(a));
        if b < 2 {
            return Err(param_err("koleo", "needs at least two rows"));
        }
        let v = self.value(a);
        let mut nn = vec![0usize; b];
        let mut dist = vec![T::zero(); b];
        for i in 0..b {
            let ei = &v[i * d..(i + 1) * d];
            let mut best = (usize::MAX, T::infinity());
            for j in (0..b).filter(|&j| j != i) {
                let ej = &v[j * d..(j + 1) * d];
                let sq: T = ei.iter().zip(ej).map(|(&x, &y)| (x - y) * (x - y)).sum();
                if sq < best.1 {
                    best = (j, sq);
                }
            }
            nn[i] = best.0;
            dist[i] = best.1.sqrt();
        }
        let loss = -dist.iter().map(|&x| x.max(eps).ln()).sum::<T>() / T::lit(b as f64);
        Ok(self.push(vec![1], vec![loss], &[a], || Op::Koleo { a, nn, dist, eps }))
    }

    /// Mean over anchors of `max(0, ‖e_a − e_pos‖ − ‖e_a − e_neg‖ + margin)`
    /// for pre-mined positive and negative indices.
    pub fn triplet(&mut self, a: Var, pos: &[usize], neg: &[usize], margin: T) -> Result<Var> {
        let (b, d) = (self.rows(a), self.cols(a));
        if pos.len() != b || neg.len() != b || pos.iter().chain(neg).any(|&j| j >= b) {
            return Err(param_err("triplet", "mined indices do not match the batch"));
        }
        let v = self.value(a);
        let dist = |i: usize, j: usize| -> T {
            v[i * d..(i + 1) * d]
                .iter()
                .zip(&v[j * d..(j + 1) * d])
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum::<T>()
                .sqrt()
        };
        let dpos: Vec<T> = (0..b).map(|i| dist(i, pos[i])).collect();
        let dneg: Vec<T> = (0..b).map(|i| dist(i, neg[i])).collect();
        let loss = dpos
            .iter()
            .zip(&dneg)
            .map(|(&p, &n)| (p - n + margin).max(T::zero()))
            .sum::<T>()
            / T::lit(b as f64);
        let (pos, neg) = (pos.to_vec(), neg.to_vec());
        Ok(self.push(vec![1], vec![loss], &[a], || Op::Triplet { a, pos, neg, dpos, dneg, margin }))
    }

    /// `Σ w_i · term_i` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut s = T::zero();
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(param_err("weighted_sum", "terms must be scalars"));
            }
            s = s + w * self.value(v)[0];
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let terms = terms.to_vec();
        Ok(self.push(vec![1], vec![s], &inputs, || Op::WeightedSum { terms }))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            tracked: self.nodes.iter().map(|n| n.requires_grad).collect(),
            sizes: self.nodes.iter().map(|n| n.value.len()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a = *a + b;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf | Op::Const => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    let da = kernels::matmul_nt(g, self.value(b), m, n, k);
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let db = kernels::matmul_tn(self.value(a), g, m, k, n);
                    self.accumulate(grads, b, db);
                }
            }
            &Op::MatMulNT { a, b, m, k, n } => {
                if self.wants(a) {
                    let da = kernels::matmul(g, self.value(b), m, n, k);
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let db = kernels::matmul_tn(g, self.value(a), m, n, k);
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Transpose { a, rows, cols } => {
                self.accumulate(grads, a, kernels::transpose(g, cols, rows));
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            &Op::Sub { a, b } => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|&x| -x).collect());
            }
            &Op::Mul { a, b } => {
                if self.wants(a) {
                    let da = g.iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let db = g.iter().zip(self.value(a)).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Scale { a, s } => {
                self.accumulate(grads, a, g.iter().map(|&x| x * s).collect());
            }
            Op::MulConst { a, c } => {
                self.accumulate(grads, *a, g.iter().zip(c).map(|(&x, &y)| x * y).collect());
            }
            Op::AddRows { x, table, index } => {
                self.accumulate(grads, *x, g.to_vec());
                if self.wants(*table) {
                    let d = self.cols(*x);
                    let mut dt = vec![T::zero(); self.value(*table).len()];
                    for (r, &ti) in index.iter().enumerate() {
                        for j in 0..d {
                            dt[ti * d + j] = dt[ti * d + j] + g[r * d + j];
                        }
                    }
                    self.accumulate(grads, *table, dt);
                }
            }
            &Op::Gelu { a } => {
                let da = g
                    .iter()
                    .zip(self.value(a))
                    .map(|(&x, &v)| x * kernels::gelu_grad(v))
                    .collect();
                self.accumulate(grads, a, da);
            }
            &Op::Log { a } => {
                let da = g.iter().zip(self.value(a)).map(|(&x, &v)| x / v).collect();
                self.accumulate(grads, a, da);
            }
            &Op::Exp { a } => {
                let da = g.iter().zip(&node.value).map(|(&x, &y)| x * y).collect();
                self.accumulate(grads, a, da);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.cols(*x);
                let gv = self.value(*gain);
                if self.wants(*x) {
                    let dn = T::lit(d as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            m1 = m1 + dh;
                            m2 = m2 + dh * hr[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            dx[r * d + j] = rs * (gr[j] * gv[j] - m1 - hr[j] * m2);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for r in 0..rstd.len() {
                        for j in 0..d {
                            dg[j] = dg[j] + g[r * d + j] * xhat[r * d + j];
                            db[j] = db[j] + g[r * d + j];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                    self.accumulate(grads, *bias, db);
                }
            }
            &Op::Softmax { a, inv_tau } => {
                let c = self.cols(a);
                let y = &node.value;
                let mut da = vec![T::zero(); g.len()];
                for r in 0..g.len() / c {
                    let s = kernels::dot(&g[r * c..(r + 1) * c], &y[r * c..(r + 1) * c]);
                    for j in r * c..(r + 1) * c {
                        da[j] = y[j] * (g[j] - s) * inv_tau;
                    }
                }
                self.accumulate(grads, a, da);
            }
            &Op::LogSoftmax { a, inv_tau } => {
                let c = self.cols(a);
                let y = &node.value;
                let mut da = vec![T::zero(); g.len()];
                for r in 0..g.len() / c {
                    let s: T = g[r * c..(r + 1) * c].iter().copied().sum();
                    for j in r * c..(r + 1) * c {
                        da[j] = (g[j] - y[j].exp() * s) * inv_tau;
                    }
                }
                self.accumulate(grads, a, da);
            }
            Op::L2Normalize { a, norms } => {
                let c = self.cols(*a);
                let y = &node.value;
                let mut da = vec![T::zero(); g.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let s = kernels::dot(&g[r * c..(r + 1) * c], &y[r * c..(r + 1) * c]);
                    for j in r * c..(r + 1) * c {
                        da[j] = (g[j] - y[j] * s) / n;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            &Op::GroupMean { a, group } => {
                let d = self.cols(a);
                let inv = T::one() / T::lit(group as f64);
                let rows = self.rows(a);
                let mut da = vec![T::zero(); rows * d];
                for r in 0..rows {
                    let gi = r / group;
                    for j in 0..d {
                        da[r * d + j] = g[gi * d + j] * inv;
                    }
                }
                self.accumulate(grads, a, da);
            }
            Op::SelectRows { a, rows } => {
                let d = self.cols(*a);
                let mut da = vec![T::zero(); self.value(*a).len()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        da[r * d + j] = da[r * d + j] + g[i * d + j];
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::MaskRows { x, fill, rows } => {
                let d = self.cols(*x);
                if self.wants(*x) {
                    let mut dx = g.to_vec();
                    for &r in rows {
                        dx[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = T::zero());
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*fill) {
                    let mut df = vec![T::zero(); d];
                    for &r in rows {
                        for j in 0..d {
                            df[j] = df[j] + g[r * d + j];
                        }
                    }
                    self.accumulate(grads, *fill, df);
                }
            }
            Op::Attention { q, k, v, heads, nq, nk, probs } => {
                self.attention_backward(g, *q, *k, *v, *heads, *nq, *nk, probs, grads);
            }
            &Op::Sum { a } => {
                let n = self.value(a).len();
                self.accumulate(grads, a, vec![g[0]; n]);
            }
            &Op::Mean { a } => {
                let n = self.value(a).len();
                self.accumulate(grads, a, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.cols(*logits);
                let scale = g[0] / T::lit(targets.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dl[i * c + t] = dl[i * c + t] - scale;
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Koleo { a, nn, dist, eps } => {
                let d = self.cols(*a);
                let v = self.value(*a);
                let b = nn.len();
                let mut da = vec![T::zero(); v.len()];
                for i in 0..b {
                    if dist[i] <= *eps {
                        continue;
                    }
                    let j = nn[i];
                    let coef = -g[0] / (T::lit(b as f64) * dist[i] * dist[i]);
                    for c in 0..d {
                        let diff = v[i * d + c] - v[j * d + c];
                        da[i * d + c] = da[i * d + c] + coef * diff;
                        da[j * d + c] = da[j * d + c] - coef * diff;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Triplet { a, pos, neg, dpos, dneg, margin } => {
                let d = self.cols(*a);
                let v = self.value(*a);
                let b = pos.len();
                let w = g[0] / T::lit(b as f64);
                let mut da = vec![T::zero(); v.len()];
                let pull = |i: usize, j: usize, dist: T, sign: T, da: &mut [T]| {
                    if dist <= T::zero() {
                        return;
                    }
                    for c in 0..d {
                        let diff = (v[i * d + c] - v[j * d + c]) / dist * sign * w;
                        da[i * d + c] = da[i * d + c] + diff;
                        da[j * d + c] = da[j * d + c] - diff;
                    }
                };
                for i in 0..b {
                    if dpos[i] - dneg[i] + *margin > T::zero() {
                        pull(i, pos[i], dpos[i], T::one(), &mut da);
                        pull(i, neg[i], dneg[i], -T::one(), &mut da);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, vec![g[0] * w]);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        nq: usize,
        nk: usize,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let d = self.cols(q);
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let groups = self.rows(q) / nq;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let per_group = exec::map_indexed(groups, heads * nq * nk * dh * 4, |gi| {
            let mut dq = vec![T::zero(); nq * d];
            let mut dk = vec![T::zero(); nk * d];
            let mut dv = vec![T::zero(); nk * d];
            let mut dp = vec![T::zero(); nk];
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..nq {
                    let p = &probs[((gi * heads + h) * nq + i) * nk..((gi * heads + h) * nq + i + 1) * nk];
                    let go = &g[(gi * nq + i) * d + c0..(gi * nq + i) * d + c0 + dh];
                    for j in 0..nk {
                        let vrow = &vv[(gi * nk + j) * d + c0..(gi * nk + j) * d + c0 + dh];
                        dp[j] = kernels::dot(go, vrow);
                        for c in 0..dh {
                            dv[j * d + c0 + c] = dv[j * d + c0 + c] + p[j] * go[c];
                        }
                    }
                    let s = kernels::dot(p, &dp);
                    let qrow = &qv[(gi * nq + i) * d + c0..(gi * nq + i) * d + c0 + dh];
                    for j in 0..nk {
                        let ds = p[j] * (dp[j] - s) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let krow = &kv[(gi * nk + j) * d + c0..(gi * nk + j) * d + c0 + dh];
                        for c in 0..dh {
                            dq[i * d + c0 + c] = dq[i * d + c0 + c] + ds * krow[c];
                            dk[j * d + c0 + c] = dk[j * d + c0 + c] + ds * qrow[c];
                        }
                    }
                }
            }
            (dq, dk, dv)
        });
        let mut dq = Vec::with_capacity(qv.len());
        let mut dk = Vec::with_capacity(kv.len());
        let mut dv = Vec::with_capacity(vv.len());
        for (a, b, c) in per_group {
            dq.extend(a);
            dk.extend(b);
            dv.extend(c);
        }
        self.accumulate(grads, q, dq);
        self.accumulate(grads, k, dk);
        self.accumulate(grads, v, dv);
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    tracked: Vec<bool>,
    sizes: Vec<usize>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the loss with respect to `v`. Tracked values the loss does
    /// not depend on get zeros; untracked values get `None`.
    pub fn get(&self, v: Var) -> Option<Vec<T>> {
        if !self.tracked.get(v.0).copied().unwrap_or(false) {
            return None;
        }
        Some(
            self.grads[v.0]
                .clone()
                .unwrap_or_else(|| vec![T::zero(); self.sizes[v.0]]),
        )
    }
}
