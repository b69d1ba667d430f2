//! Reverse-mode differentiation over a linear tape of tensor primitives.
//!
//! Nodes are appended in execution order, so the tape index order is a
//! topological order and the backward pass is a single reverse sweep.
//! The recurrence is registered as one fused primitive with a
//! hand-derived backward (see [`crate::scan`]) instead of being unrolled
//! into per-step nodes.

use crate::error::{HgrnError, Result};
use crate::scan::{
    parallel_scan_weighted, scan_backward_weighted, sequential_scan_weighted, ComplexSeq,
    DecaySeq, PARALLEL_THRESHOLD,
};
use crate::tensor::{check_same_shape, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Affine { x: usize, w: usize, b: Option<usize> },
    Sigmoid { x: usize },
    Silu { x: usize },
    Exp { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    OneMinus { x: usize },
    ScalarMul { x: usize, k: f64 },
    SoftmaxDim0 { x: usize },
    CumsumShiftedDim0 { x: usize },
    FlipRows { x: usize },
    RowGather { x: usize, row: usize },
    RepeatRow { r: usize, n: usize },
    MulRowBcast { x: usize, r: usize },
    AddRowBcast { x: usize, r: usize },
    ConcatCols { a: usize, b: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    Embedding { table: usize, ids: Vec<usize> },
    Scan {
        lambda: usize,
        theta: Option<usize>,
        weight: usize,
        c_re: usize,
        c_im: Option<usize>,
    },
    CrossEntropy { logits: usize, targets: Vec<usize>, mask: Vec<bool> },
    Sum { x: usize },
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a node; `None` if it does not require grad.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, op: Op, value: Tensor<T>, requires: bool) -> Var {
        let grad = requires.then(|| Tensor::zeros(value.shape().to_vec()));
        self.nodes.push(Node { op, value, grad, requires });
        Var(self.nodes.len() - 1)
    }

    fn requires_any(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires)
    }

    // ---- forward primitives -------------------------------------------

    /// `x W + b` with `x: [n x p]`, `W: [p x q]`, `b: [q]` (optional).
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, p) = self.value(x).dims2()?;
        let (wp, q) = self.value(w).dims2()?;
        if p != wp {
            return Err(HgrnError::Shape(format!(
                "affine: x {:?} vs W {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            )));
        }
        if let Some(bv) = b {
            if self.value(bv).numel() != q {
                return Err(HgrnError::Shape(format!(
                    "affine: bias {:?} vs q={q}",
                    self.value(bv).shape()
                )));
            }
        }
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![T::zero(); n * q];
        for i in 0..n {
            for k in 0..p {
                let xv = xs[i * p + k];
                let wrow = &ws[k * q..(k + 1) * q];
                let orow = &mut out[i * q..(i + 1) * q];
                for j in 0..q {
                    orow[j] = orow[j] + xv * wrow[j];
                }
            }
        }
        if let Some(bv) = b {
            let bs = self.value(bv).data();
            for i in 0..n {
                for j in 0..q {
                    out[i * q + j] = out[i * q + j] + bs[j];
                }
            }
        }
        let mut ids = vec![x.0, w.0];
        if let Some(bv) = b {
            ids.push(bv.0);
        }
        let req = self.requires_any(&ids);
        Ok(self.push(
            Op::Affine { x: x.0, w: w.0, b: b.map(|v| v.0) },
            Tensor::new(vec![n, q], out)?,
            req,
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid_scalar);
        let req = self.nodes[x.0].requires;
        self.push(Op::Sigmoid { x: x.0 }, value, req)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid_scalar(v));
        let req = self.nodes[x.0].requires;
        self.push(Op::Silu { x: x.0 }, value, req)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        let req = self.nodes[x.0].requires;
        self.push(Op::Exp { x: x.0 }, value, req)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape(self.value(a), self.value(b), "add")?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let req = self.requires_any(&[a.0, b.0]);
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, value, req))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape(self.value(a), self.value(b), "sub")?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let req = self.requires_any(&[a.0, b.0]);
        Ok(self.push(Op::Sub { a: a.0, b: b.0 }, value, req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape(self.value(a), self.value(b), "mul")?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let req = self.requires_any(&[a.0, b.0]);
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, value, req))
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() - v);
        let req = self.nodes[x.0].requires;
        self.push(Op::OneMinus { x: x.0 }, value, req)
    }

    pub fn scalar_mul(&mut self, x: Var, k: f64) -> Var {
        let kk = T::from_f64(k);
        let value = self.value(x).map(|v| v * kk);
        let req = self.nodes[x.0].requires;
        self.push(Op::ScalarMul { x: x.0, k }, value, req)
    }

    /// Softmax over the layer axis (rows), per column, with max subtraction.
    pub fn softmax_dim0(&mut self, x: Var) -> Result<Var> {
        let (h, d) = self.value(x).dims2()?;
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); h * d];
        for j in 0..d {
            let mut m = T::neg_infinity();
            for k in 0..h {
                m = m.max(xs[k * d + j]);
            }
            let mut sum = T::zero();
            for k in 0..h {
                let e = (xs[k * d + j] - m).exp();
                out[k * d + j] = e;
                sum = sum + e;
            }
            for k in 0..h {
                out[k * d + j] = out[k * d + j] / sum;
            }
        }
        let req = self.nodes[x.0].requires;
        Ok(self.push(Op::SoftmaxDim0 { x: x.0 }, Tensor::new(vec![h, d], out)?, req))
    }

    /// Shifted cumulative sum over rows: `out[k] = sum_{i<=k} x[i] - x[0]`.
    /// Row 0 is exactly zero.
    pub fn cumsum_shifted_dim0(&mut self, x: Var) -> Result<Var> {
        let (h, d) = self.value(x).dims2()?;
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); h * d];
        for j in 0..d {
            let mut acc = T::zero();
            for k in 0..h {
                acc = acc + xs[k * d + j];
                out[k * d + j] = acc - xs[j];
            }
        }
        let req = self.nodes[x.0].requires;
        Ok(self.push(
            Op::CumsumShiftedDim0 { x: x.0 },
            Tensor::new(vec![h, d], out)?,
            req,
        ))
    }

    pub fn flip_rows(&mut self, x: Var) -> Result<Var> {
        let (h, d) = self.value(x).dims2()?;
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); h * d];
        for k in 0..h {
            out[k * d..(k + 1) * d].copy_from_slice(&xs[(h - 1 - k) * d..(h - k) * d]);
        }
        let req = self.nodes[x.0].requires;
        Ok(self.push(Op::FlipRows { x: x.0 }, Tensor::new(vec![h, d], out)?, req))
    }

    pub fn row_gather(&mut self, x: Var, row: usize) -> Result<Var> {
        let (h, d) = self.value(x).dims2()?;
        if row >= h {
            return Err(HgrnError::Shape(format!("row {row} out of range 0..{h}")));
        }
        let out = self.value(x).data()[row * d..(row + 1) * d].to_vec();
        let req = self.nodes[x.0].requires;
        Ok(self.push(Op::RowGather { x: x.0, row }, Tensor::new(vec![1, d], out)?, req))
    }

    pub fn repeat_row(&mut self, r: Var, n: usize) -> Result<Var> {
        let (one, d) = self.value(r).dims2()?;
        if one != 1 {
            return Err(HgrnError::Shape(format!(
                "repeat_row expects a single row, got {:?}",
                self.value(r).shape()
            )));
        }
        let row = self.value(r).data().to_vec();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(&row);
        }
        let req = self.nodes[r.0].requires;
        Ok(self.push(Op::RepeatRow { r: r.0, n }, Tensor::new(vec![n, d], out)?, req))
    }

    pub fn mul_row_bcast(&mut self, x: Var, r: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let (_, rd) = self.value(r).dims2()?;
        if rd != d {
            return Err(HgrnError::Shape(format!(
                "mul_row_bcast: x {:?} vs row {:?}",
                self.value(x).shape(),
                self.value(r).shape()
            )));
        }
        let xs = self.value(x).data();
        let rs = self.value(r).data();
        let out: Vec<T> = (0..n * d).map(|i| xs[i] * rs[i % d]).collect();
        let req = self.requires_any(&[x.0, r.0]);
        Ok(self.push(
            Op::MulRowBcast { x: x.0, r: r.0 },
            Tensor::new(vec![n, d], out)?,
            req,
        ))
    }

    pub fn add_row_bcast(&mut self, x: Var, r: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let (_, rd) = self.value(r).dims2()?;
        if rd != d {
            return Err(HgrnError::Shape(format!(
                "add_row_bcast: x {:?} vs row {:?}",
                self.value(x).shape(),
                self.value(r).shape()
            )));
        }
        let xs = self.value(x).data();
        let rs = self.value(r).data();
        let out: Vec<T> = (0..n * d).map(|i| xs[i] + rs[i % d]).collect();
        let req = self.requires_any(&[x.0, r.0]);
        Ok(self.push(
            Op::AddRowBcast { x: x.0, r: r.0 },
            Tensor::new(vec![n, d], out)?,
            req,
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, da) = self.value(a).dims2()?;
        let (nb, db) = self.value(b).dims2()?;
        if n != nb {
            return Err(HgrnError::Shape(format!(
                "concat_cols: row counts {n} vs {nb}"
            )));
        }
        let asd = self.value(a).data();
        let bsd = self.value(b).data();
        let mut out = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            out.extend_from_slice(&asd[i * da..(i + 1) * da]);
            out.extend_from_slice(&bsd[i * db..(i + 1) * db]);
        }
        let req = self.requires_any(&[a.0, b.0]);
        Ok(self.push(
            Op::ConcatCols { a: a.0, b: b.0 },
            Tensor::new(vec![n, da + db], out)?,
            req,
        ))
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (n, q) = self.value(x).dims2()?;
        if self.value(gain).numel() != q || self.value(bias).numel() != q {
            return Err(HgrnError::Shape(format!(
                "layer_norm: gain/bias must have {q} elements"
            )));
        }
        let xs = self.value(x).data();
        let gs = self.value(gain).data();
        let bs = self.value(bias).data();
        let epst = T::from_f64(eps);
        let qn = T::from_f64(q as f64);
        let mut out = vec![T::zero(); n * q];
        for i in 0..n {
            let row = &xs[i * q..(i + 1) * q];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / qn;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / qn;
            let inv = (var + epst).sqrt().recip();
            for j in 0..q {
                out[i * q + j] = gs[j] * (row[j] - mean) * inv + bs[j];
            }
        }
        let req = self.requires_any(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, eps },
            Tensor::new(vec![n, q], out)?,
            req,
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        for &id in ids {
            if id >= v {
                return Err(HgrnError::Contract(format!(
                    "token id {id} out of range for vocab {v}"
                )));
            }
        }
        let ts = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&ts[id * d..(id + 1) * d]);
        }
        let req = self.nodes[table.0].requires;
        Ok(self.push(
            Op::Embedding { table: table.0, ids: ids.to_vec() },
            Tensor::new(vec![ids.len(), d], out)?,
            req,
        ))
    }

    /// Fused gated recurrence `h_t = lambda_t e^{i theta} h_{t-1} + w_t c_t`.
    /// Output is `[n x 2d]` (re|im planes) when `c_im` is given, `[n x d]`
    /// otherwise (real-only mode, theta absent).
    pub fn scan(
        &mut self,
        lambda: Var,
        theta: Option<Var>,
        weight: Var,
        c_re: Var,
        c_im: Option<Var>,
    ) -> Result<Var> {
        let (n, d) = self.value(lambda).dims2()?;
        let decay = self.build_decay(lambda, theta, n, d)?;
        let c = ComplexSeq::new(
            self.value(c_re).clone(),
            match c_im {
                Some(v) => self.value(v).clone(),
                None => Tensor::zeros(vec![n, d]),
            },
        )?;
        let w = self.value(weight).clone();
        let h = if n > PARALLEL_THRESHOLD {
            parallel_scan_weighted(&decay, &w, &c)?
        } else {
            sequential_scan_weighted(&decay, &w, &c, None)?
        };
        let value = if c_im.is_some() {
            let mut out = Vec::with_capacity(n * 2 * d);
            for t in 0..n {
                out.extend_from_slice(&h.re.data()[t * d..(t + 1) * d]);
                out.extend_from_slice(&h.im.data()[t * d..(t + 1) * d]);
            }
            Tensor::new(vec![n, 2 * d], out)?
        } else {
            h.re.clone()
        };
        let mut ids = vec![lambda.0, weight.0, c_re.0];
        if let Some(v) = theta {
            ids.push(v.0);
        }
        if let Some(v) = c_im {
            ids.push(v.0);
        }
        let req = self.requires_any(&ids);
        Ok(self.push(
            Op::Scan {
                lambda: lambda.0,
                theta: theta.map(|v| v.0),
                weight: weight.0,
                c_re: c_re.0,
                c_im: c_im.map(|v| v.0),
            },
            value,
            req,
        ))
    }

    fn build_decay(
        &self,
        lambda: Var,
        theta: Option<Var>,
        _n: usize,
        d: usize,
    ) -> Result<DecaySeq<T>> {
        let th = match theta {
            Some(v) => self.value(v).clone(),
            None => Tensor::zeros(vec![1, d]),
        };
        DecaySeq::new(self.value(lambda).clone(), th)
    }

    /// Mean masked cross-entropy with max-subtracted log-softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (n, v) = self.value(logits).dims2()?;
        if targets.len() != n || mask.len() != n {
            return Err(HgrnError::Shape(format!(
                "cross_entropy: {n} rows vs {} targets / {} mask",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(HgrnError::Contract(
                "cross_entropy: all positions masked out".into(),
            ));
        }
        for (i, &t) in targets.iter().enumerate() {
            if mask[i] && t >= v {
                return Err(HgrnError::Contract(format!(
                    "target id {t} out of range for vocab {v}"
                )));
            }
        }
        let xs = self.value(logits).data();
        let mut loss = T::zero();
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let row = &xs[i * v..(i + 1) * v];
            let m = row.iter().fold(T::neg_infinity(), |a, &x| a.max(x));
            let lse = row.iter().fold(T::zero(), |a, &x| a + (x - m).exp()).ln() + m;
            loss = loss + (lse - row[targets[i]]);
        }
        loss = loss / T::from_f64(count as f64);
        let req = self.nodes[logits.0].requires;
        Ok(self.push(
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            Tensor::scalar(loss),
            req,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self
            .value(x)
            .data()
            .iter()
            .fold(T::zero(), |a, &v| a + v);
        let req = self.nodes[x.0].requires;
        self.push(Op::Sum { x: x.0 }, Tensor::scalar(s), req)
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar loss; gradients accumulate into every
    /// `requires_grad` node reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(HgrnError::Contract(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires {
            return Ok(());
        }
        // Local seed buffer so earlier backward() accumulations persist.
        let mut seeds: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        seeds[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = seeds[i].take() else { continue };
            if !self.nodes[i].requires {
                continue;
            }
            if let Some(acc) = self.nodes[i].grad.as_mut() {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            let op = self.nodes[i].op.clone();
            self.propagate(&op, i, &g, &mut seeds)?;
        }
        Ok(())
    }

    fn add_seed(&self, seeds: &mut [Option<Tensor<T>>], idx: usize, g: Tensor<T>) {
        if !self.nodes[idx].requires {
            return;
        }
        match &mut seeds[idx] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(
        &self,
        op: &Op,
        node: usize,
        g: &Tensor<T>,
        seeds: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (n, p) = self.nodes[x].value.dims2()?;
                let (_, q) = self.nodes[w].value.dims2()?;
                let xs = self.nodes[x].value.data();
                let ws = self.nodes[w].value.data();
                let gs = g.data();
                if self.nodes[x].requires {
                    let mut gx = vec![T::zero(); n * p];
                    for i in 0..n {
                        for k in 0..p {
                            let grow = &gs[i * q..(i + 1) * q];
                            let wrow = &ws[k * q..(k + 1) * q];
                            let mut acc = T::zero();
                            for j in 0..q {
                                acc = acc + grow[j] * wrow[j];
                            }
                            gx[i * p + k] = acc;
                        }
                    }
                    self.add_seed(seeds, x, Tensor::new(vec![n, p], gx)?);
                }
                if self.nodes[w].requires {
                    let mut gw = vec![T::zero(); p * q];
                    for i in 0..n {
                        for k in 0..p {
                            let xv = xs[i * p + k];
                            let grow = &gs[i * q..(i + 1) * q];
                            let wrow = &mut gw[k * q..(k + 1) * q];
                            for j in 0..q {
                                wrow[j] = wrow[j] + xv * grow[j];
                            }
                        }
                    }
                    self.add_seed(seeds, w, Tensor::new(vec![p, q], gw)?);
                }
                if let Some(bi) = b {
                    if self.nodes[bi].requires {
                        let mut gb = vec![T::zero(); q];
                        for i in 0..n {
                            for j in 0..q {
                                gb[j] = gb[j] + gs[i * q + j];
                            }
                        }
                        self.add_seed(
                            seeds,
                            bi,
                            Tensor::new(self.nodes[bi].value.shape().to_vec(), gb)?,
                        );
                    }
                }
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[node].value;
                let gx = zip_map(g, y, |gv, yv| gv * yv * (T::one() - yv));
                self.add_seed(seeds, x, gx);
            }
            Op::Silu { x } => {
                let xs = &self.nodes[x].value;
                let gx = zip_map(g, xs, |gv, xv| {
                    let s = sigmoid_scalar(xv);
                    gv * s * (T::one() + xv * (T::one() - s))
                });
                self.add_seed(seeds, x, gx);
            }
            Op::Exp { x } => {
                let y = &self.nodes[node].value;
                let gx = zip_map(g, y, |gv, yv| gv * yv);
                self.add_seed(seeds, x, gx);
            }
            Op::Add { a, b } => {
                self.add_seed(seeds, a, g.clone());
                self.add_seed(seeds, b, g.clone());
            }
            Op::Sub { a, b } => {
                self.add_seed(seeds, a, g.clone());
                self.add_seed(seeds, b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                if self.nodes[a].requires {
                    let gx = zip_map(g, &self.nodes[b].value, |gv, bv| gv * bv);
                    self.add_seed(seeds, a, gx);
                }
                if self.nodes[b].requires {
                    let gx = zip_map(g, &self.nodes[a].value, |gv, av| gv * av);
                    self.add_seed(seeds, b, gx);
                }
            }
            Op::OneMinus { x } => {
                self.add_seed(seeds, x, g.map(|v| -v));
            }
            Op::ScalarMul { x, k } => {
                let kk = T::from_f64(k);
                self.add_seed(seeds, x, g.map(|v| v * kk));
            }
            Op::SoftmaxDim0 { x } => {
                let y = &self.nodes[node].value;
                let (h, d) = y.dims2()?;
                let ys = y.data();
                let gs = g.data();
                let mut gx = vec![T::zero(); h * d];
                for j in 0..d {
                    let mut dot = T::zero();
                    for k in 0..h {
                        dot = dot + ys[k * d + j] * gs[k * d + j];
                    }
                    for k in 0..h {
                        gx[k * d + j] = ys[k * d + j] * (gs[k * d + j] - dot);
                    }
                }
                self.add_seed(seeds, x, Tensor::new(vec![h, d], gx)?);
            }
            Op::CumsumShiftedDim0 { x } => {
                let (h, d) = self.nodes[x].value.dims2()?;
                let gs = g.data();
                let mut gx = vec![T::zero(); h * d];
                for j in 0..d {
                    // Suffix sums; row 0's gradient is identically zero.
                    let mut suffix = T::zero();
                    for k in (0..h).rev() {
                        suffix = suffix + gs[k * d + j];
                        gx[k * d + j] = suffix;
                    }
                    gx[j] = T::zero();
                }
                self.add_seed(seeds, x, Tensor::new(vec![h, d], gx)?);
            }
            Op::FlipRows { x } => {
                let (h, d) = self.nodes[x].value.dims2()?;
                let gs = g.data();
                let mut gx = vec![T::zero(); h * d];
                for k in 0..h {
                    gx[k * d..(k + 1) * d].copy_from_slice(&gs[(h - 1 - k) * d..(h - k) * d]);
                }
                self.add_seed(seeds, x, Tensor::new(vec![h, d], gx)?);
            }
            Op::RowGather { x, row } => {
                let shape = self.nodes[x].value.shape().to_vec();
                let d = shape[1];
                let mut gx = Tensor::zeros(shape);
                gx.data_mut()[row * d..(row + 1) * d].copy_from_slice(g.data());
                self.add_seed(seeds, x, gx);
            }
            Op::RepeatRow { r, n } => {
                let d = self.nodes[r].value.numel();
                let gs = g.data();
                let mut gr = vec![T::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        gr[j] = gr[j] + gs[i * d + j];
                    }
                }
                self.add_seed(
                    seeds,
                    r,
                    Tensor::new(self.nodes[r].value.shape().to_vec(), gr)?,
                );
            }
            Op::MulRowBcast { x, r } => {
                let (n, d) = self.nodes[x].value.dims2()?;
                let gs = g.data();
                if self.nodes[x].requires {
                    let rs = self.nodes[r].value.data();
                    let gx: Vec<T> = (0..n * d).map(|i| gs[i] * rs[i % d]).collect();
                    self.add_seed(seeds, x, Tensor::new(vec![n, d], gx)?);
                }
                if self.nodes[r].requires {
                    let xs = self.nodes[x].value.data();
                    let mut gr = vec![T::zero(); d];
                    for i in 0..n * d {
                        gr[i % d] = gr[i % d] + gs[i] * xs[i];
                    }
                    self.add_seed(
                        seeds,
                        r,
                        Tensor::new(self.nodes[r].value.shape().to_vec(), gr)?,
                    );
                }
            }
            Op::AddRowBcast { x, r } => {
                let (n, d) = self.nodes[x].value.dims2()?;
                self.add_seed(seeds, x, g.clone());
                if self.nodes[r].requires {
                    let gs = g.data();
                    let mut gr = vec![T::zero(); d];
                    for i in 0..n * d {
                        gr[i % d] = gr[i % d] + gs[i];
                    }
                    self.add_seed(
                        seeds,
                        r,
                        Tensor::new(self.nodes[r].value.shape().to_vec(), gr)?,
                    );
                }
            }
            Op::ConcatCols { a, b } => {
                let (n, da) = self.nodes[a].value.dims2()?;
                let (_, db) = self.nodes[b].value.dims2()?;
                let gs = g.data();
                let mut ga = vec![T::zero(); n * da];
                let mut gb = vec![T::zero(); n * db];
                for i in 0..n {
                    let row = &gs[i * (da + db)..(i + 1) * (da + db)];
                    ga[i * da..(i + 1) * da].copy_from_slice(&row[..da]);
                    gb[i * db..(i + 1) * db].copy_from_slice(&row[da..]);
                }
                self.add_seed(seeds, a, Tensor::new(vec![n, da], ga)?);
                self.add_seed(seeds, b, Tensor::new(vec![n, db], gb)?);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (n, q) = self.nodes[x].value.dims2()?;
                let xs = self.nodes[x].value.data();
                let gns = self.nodes[gain].value.data();
                let gs = g.data();
                let epst = T::from_f64(eps);
                let qn = T::from_f64(q as f64);
                let mut gx = vec![T::zero(); n * q];
                let mut ggain = vec![T::zero(); q];
                let mut gbias = vec![T::zero(); q];
                for i in 0..n {
                    let row = &xs[i * q..(i + 1) * q];
                    let grow = &gs[i * q..(i + 1) * q];
                    let mean = row.iter().fold(T::zero(), |a, &v| a + v) / qn;
                    let var = row
                        .iter()
                        .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                        / qn;
                    let inv = (var + epst).sqrt().recip();
                    // dxhat, then reduce for the mean/var terms.
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..q {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = grow[j] * gns[j];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        ggain[j] = ggain[j] + grow[j] * xhat;
                        gbias[j] = gbias[j] + grow[j];
                    }
                    for j in 0..q {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = grow[j] * gns[j];
                        gx[i * q + j] =
                            inv * (dxhat - sum_dxhat / qn - xhat * sum_dxhat_xhat / qn);
                    }
                }
                self.add_seed(seeds, x, Tensor::new(vec![n, q], gx)?);
                self.add_seed(
                    seeds,
                    gain,
                    Tensor::new(self.nodes[gain].value.shape().to_vec(), ggain)?,
                );
                self.add_seed(
                    seeds,
                    bias,
                    Tensor::new(self.nodes[bias].value.shape().to_vec(), gbias)?,
                );
            }
            Op::Embedding { table, ref ids } => {
                let (v, d) = self.nodes[table].value.dims2()?;
                let gs = g.data();
                let mut gt = vec![T::zero(); v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] = gt[id * d + j] + gs[i * d + j];
                    }
                }
                self.add_seed(seeds, table, Tensor::new(vec![v, d], gt)?);
            }
            Op::Scan { lambda, theta, weight, c_re, c_im } => {
                let (n, d) = self.nodes[lambda].value.dims2()?;
                let decay = DecaySeq::new(
                    self.nodes[lambda].value.clone(),
                    match theta {
                        Some(t) => self.nodes[t].value.clone(),
                        None => Tensor::zeros(vec![1, d]),
                    },
                )?;
                let c = ComplexSeq::new(
                    self.nodes[c_re].value.clone(),
                    match c_im {
                        Some(v) => self.nodes[v].value.clone(),
                        None => Tensor::zeros(vec![n, d]),
                    },
                )?;
                let w = &self.nodes[weight].value;
                // Reconstruct the stored forward output and the grad planes.
                let (h, gh) = if c_im.is_some() {
                    let split = |t: &Tensor<T>| -> Result<ComplexSeq<T>> {
                        let src = t.data();
                        let mut re = vec![T::zero(); n * d];
                        let mut im = vec![T::zero(); n * d];
                        for i in 0..n {
                            re[i * d..(i + 1) * d]
                                .copy_from_slice(&src[i * 2 * d..i * 2 * d + d]);
                            im[i * d..(i + 1) * d]
                                .copy_from_slice(&src[i * 2 * d + d..(i + 1) * 2 * d]);
                        }
                        ComplexSeq::new(
                            Tensor::new(vec![n, d], re)?,
                            Tensor::new(vec![n, d], im)?,
                        )
                    };
                    (split(&self.nodes[node].value)?, split(g)?)
                } else {
                    (
                        ComplexSeq::new(
                            self.nodes[node].value.clone(),
                            Tensor::zeros(vec![n, d]),
                        )?,
                        ComplexSeq::new(g.clone(), Tensor::zeros(vec![n, d]))?,
                    )
                };
                let (g_lam, g_th, g_w, g_c) = scan_backward_weighted(&decay, w, &c, &h, &gh)?;
                self.add_seed(seeds, lambda, g_lam);
                if let Some(t) = theta {
                    self.add_seed(seeds, t, g_th);
                }
                self.add_seed(seeds, weight, g_w);
                self.add_seed(seeds, c_re, g_c.re);
                if let Some(v) = c_im {
                    self.add_seed(seeds, v, g_c.im);
                }
            }
            Op::CrossEntropy { logits, ref targets, ref mask } => {
                let (n, v) = self.nodes[logits].value.dims2()?;
                let xs = self.nodes[logits].value.data();
                let scale = g.data()[0]
                    / T::from_f64(mask.iter().filter(|&&m| m).count() as f64);
                let mut gl = vec![T::zero(); n * v];
                for i in 0..n {
                    if !mask[i] {
                        continue;
                    }
                    let row = &xs[i * v..(i + 1) * v];
                    let m = row.iter().fold(T::neg_infinity(), |a, &x| a.max(x));
                    let sum = row.iter().fold(T::zero(), |a, &x| a + (x - m).exp());
                    for j in 0..v {
                        let p = (row[j] - m).exp() / sum;
                        let onehot = if j == targets[i] { T::one() } else { T::zero() };
                        gl[i * v + j] = scale * (p - onehot);
                    }
                }
                self.add_seed(seeds, logits, Tensor::new(vec![n, v], gl)?);
            }
            Op::Sum { x } => {
                let gv = g.data()[0];
                let gx = Tensor::full(self.nodes[x].value.shape().to_vec(), gv);
                self.add_seed(seeds, x, gx);
            }
        }
        Ok(())
    }
}

fn sigmoid_scalar<T: Scalar>(z: T) -> T {
    // Branch on sign so exp never overflows.
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}
