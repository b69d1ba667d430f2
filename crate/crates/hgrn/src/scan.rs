//! Complex element-wise linear recurrence
//! `h_t = lambda_t * e^{i theta} * h_{t-1} + w_t * c_t`
//! computed three independent ways: a fused sequential kernel, a
//! work-efficient parallel scan over affine maps, and a materialized
//! token-mixing matrix (test oracle / export path). The exact backward
//! pass is hand-derived in real coordinates.

use crate::error::{HgrnError, Result};
use crate::tensor::{check_same_shape, Scalar, Tensor};

/// Sequence length above which `scan` switches from the fused sequential
/// kernel to the parallel scan.
pub const PARALLEL_THRESHOLD: usize = 512;

/// Materialization cap for the mixing matrix (O(n^2 d) memory).
pub const MIXING_CAP: usize = 512;

/// Length-n, width-d complex sequence stored as paired real planes.
#[derive(Clone, Debug)]
pub struct ComplexSeq<T> {
    pub re: Tensor<T>,
    pub im: Tensor<T>,
}

impl<T: Scalar> ComplexSeq<T> {
    pub fn new(re: Tensor<T>, im: Tensor<T>) -> Result<Self> {
        check_same_shape(&re, &im, "ComplexSeq")?;
        Ok(Self { re, im })
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            re: Tensor::zeros(vec![n, d]),
            im: Tensor::zeros(vec![n, d]),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.re.dims2().expect("ComplexSeq is rank 2")
    }
}

/// Decay schedule: per-step magnitudes in [0,1] and the rotation angle.
/// `theta` has one row when shared across time, n rows when data-dependent.
#[derive(Clone, Debug)]
pub struct DecaySeq<T> {
    pub lambda: Tensor<T>,
    pub theta: Tensor<T>,
}

impl<T: Scalar> DecaySeq<T> {
    pub fn new(lambda: Tensor<T>, theta: Tensor<T>) -> Result<Self> {
        let (n, d) = lambda.dims2()?;
        let (tn, td) = theta.dims2()?;
        if td != d || (tn != 1 && tn != n) {
            return Err(HgrnError::Shape(format!(
                "theta shape {:?} incompatible with lambda {:?}",
                theta.shape(),
                lambda.shape()
            )));
        }
        Ok(Self { lambda, theta })
    }

    pub fn theta_shared(&self) -> bool {
        self.theta.dims2().unwrap().0 == 1
    }

    fn theta_at(&self, t: usize, j: usize) -> T {
        if self.theta_shared() {
            self.theta.at2(0, j)
        } else {
            self.theta.at2(t, j)
        }
    }

    fn validate(&self) -> Result<()> {
        for &v in self.lambda.data() {
            if !(v >= T::zero() && v <= T::one()) {
                return Err(HgrnError::Contract(format!(
                    "lambda value {v} outside [0,1]"
                )));
            }
        }
        Ok(())
    }
}

/// Affine map `h -> a (*) h + b` over complex d-vectors; the monoid element
/// of the parallel scan.
#[derive(Clone, Debug)]
pub struct ScanElement<T> {
    pub a_re: Vec<T>,
    pub a_im: Vec<T>,
    pub b_re: Vec<T>,
    pub b_im: Vec<T>,
}

impl<T: Scalar> ScanElement<T> {
    pub fn identity(d: usize) -> Self {
        Self {
            a_re: vec![T::one(); d],
            a_im: vec![T::zero(); d],
            b_re: vec![T::zero(); d],
            b_im: vec![T::zero(); d],
        }
    }

    pub fn dim(&self) -> usize {
        self.a_re.len()
    }
}

/// Monoid composition: `later` applied after `earlier`.
/// a = later.a * earlier.a, b = later.a * earlier.b + later.b (complex).
pub fn compose<T: Scalar>(later: &ScanElement<T>, earlier: &ScanElement<T>) -> ScanElement<T> {
    let d = later.dim();
    debug_assert_eq!(d, earlier.dim());
    let mut out = ScanElement::identity(d);
    for j in 0..d {
        let (lar, lai) = (later.a_re[j], later.a_im[j]);
        let (ear, eai) = (earlier.a_re[j], earlier.a_im[j]);
        out.a_re[j] = lar * ear - lai * eai;
        out.a_im[j] = lar * eai + lai * ear;
        let (ebr, ebi) = (earlier.b_re[j], earlier.b_im[j]);
        out.b_re[j] = lar * ebr - lai * ebi + later.b_re[j];
        out.b_im[j] = lar * ebi + lai * ebr + later.b_im[j];
    }
    out
}

/// Per-step scan elements for the tied recurrence:
/// a_t = lambda_t e^{i theta}, b_t = (1 - lambda_t) c_t.
pub fn make_elements<T: Scalar>(
    decay: &DecaySeq<T>,
    c: &ComplexSeq<T>,
) -> Result<Vec<ScanElement<T>>> {
    check_same_shape(&decay.lambda, &c.re, "make_elements")?;
    let (n, d) = c.dims();
    let mut elems = Vec::with_capacity(n);
    for t in 0..n {
        let mut e = ScanElement::identity(d);
        for j in 0..d {
            let lam = decay.lambda.at2(t, j);
            let th = decay.theta_at(t, j).as_f64();
            e.a_re[j] = lam * T::from_f64(th.cos());
            e.a_im[j] = lam * T::from_f64(th.sin());
            let w = T::one() - lam;
            e.b_re[j] = w * c.re.at2(t, j);
            e.b_im[j] = w * c.im.at2(t, j);
        }
        elems.push(e);
    }
    Ok(elems)
}

/// Fused sequential kernel with an explicit input weight `w` (n x d):
/// `h_t = lambda_t e^{i theta_t} h_{t-1} + w_t c_t`.
pub fn sequential_scan_weighted<T: Scalar>(
    decay: &DecaySeq<T>,
    weight: &Tensor<T>,
    c: &ComplexSeq<T>,
    h0: Option<&(Vec<T>, Vec<T>)>,
) -> Result<ComplexSeq<T>> {
    check_same_shape(&decay.lambda, &c.re, "sequential_scan")?;
    check_same_shape(weight, &c.re, "sequential_scan weight")?;
    let (n, d) = c.dims();
    let mut h = ComplexSeq::zeros(n, d);
    let zero = vec![T::zero(); d];
    let (h0_re, h0_im) = match h0 {
        Some((re, im)) => (re.as_slice(), im.as_slice()),
        None => (zero.as_slice(), zero.as_slice()),
    };
    let mut prev_re = h0_re.to_vec();
    let mut prev_im = h0_im.to_vec();
    let trig = TrigTable::new(decay);
    for t in 0..n {
        for j in 0..d {
            let lam = decay.lambda.at2(t, j);
            let (cos, sin) = trig.at(t, j);
            let a_re = lam * cos;
            let a_im = lam * sin;
            let w = weight.at2(t, j);
            let hr = a_re * prev_re[j] - a_im * prev_im[j] + w * c.re.at2(t, j);
            let hi = a_re * prev_im[j] + a_im * prev_re[j] + w * c.im.at2(t, j);
            h.re.set2(t, j, hr);
            h.im.set2(t, j, hi);
            prev_re[j] = hr;
            prev_im[j] = hi;
        }
    }
    Ok(h)
}

fn tied_weight<T: Scalar>(decay: &DecaySeq<T>) -> Tensor<T> {
    decay.lambda.map(|v| T::one() - v)
}

/// Precomputed cos/sin of theta: one row when time-shared, n rows
/// otherwise. Keeps trig out of the scan inner loops.
struct TrigTable<T> {
    cos: Vec<T>,
    sin: Vec<T>,
    d: usize,
    shared: bool,
}

impl<T: Scalar> TrigTable<T> {
    fn new(decay: &DecaySeq<T>) -> Self {
        let (_, d) = decay.theta.dims2().unwrap();
        let shared = decay.theta_shared();
        let mut cos = Vec::with_capacity(decay.theta.numel());
        let mut sin = Vec::with_capacity(decay.theta.numel());
        for &th in decay.theta.data() {
            let v = th.as_f64();
            cos.push(T::from_f64(v.cos()));
            sin.push(T::from_f64(v.sin()));
        }
        Self { cos, sin, d, shared }
    }

    #[inline]
    fn at(&self, t: usize, j: usize) -> (T, T) {
        let idx = if self.shared { j } else { t * self.d + j };
        (self.cos[idx], self.sin[idx])
    }
}

/// Tied-gate sequential recurrence (Algorithm form): input weighted by
/// `1 - lambda_t`. Validates `lambda` in [0,1].
pub fn sequential_scan<T: Scalar>(
    decay: &DecaySeq<T>,
    c: &ComplexSeq<T>,
    h0: Option<&(Vec<T>, Vec<T>)>,
) -> Result<ComplexSeq<T>> {
    decay.validate()?;
    sequential_scan_weighted(decay, &tied_weight(decay), c, h0)
}

/// Blelloch two-phase scan over the affine-map monoid. Sequence is padded
/// to the next power of two with identity elements; the exclusive result
/// of the down-sweep is composed with each element to yield the inclusive
/// prefix. Agrees with the sequential kernel to float accuracy.
pub fn parallel_scan_weighted<T: Scalar>(
    decay: &DecaySeq<T>,
    weight: &Tensor<T>,
    c: &ComplexSeq<T>,
) -> Result<ComplexSeq<T>> {
    check_same_shape(&decay.lambda, &c.re, "parallel_scan")?;
    check_same_shape(weight, &c.re, "parallel_scan weight")?;
    let (n, d) = c.dims();
    let mut elems = Vec::with_capacity(n);
    for t in 0..n {
        let mut e = ScanElement::identity(d);
        for j in 0..d {
            let lam = decay.lambda.at2(t, j);
            let th = decay.theta_at(t, j).as_f64();
            e.a_re[j] = lam * T::from_f64(th.cos());
            e.a_im[j] = lam * T::from_f64(th.sin());
            let w = weight.at2(t, j);
            e.b_re[j] = w * c.re.at2(t, j);
            e.b_im[j] = w * c.im.at2(t, j);
        }
        elems.push(e);
    }
    let inclusive = blelloch_inclusive(&elems, d);
    let mut h = ComplexSeq::zeros(n, d);
    for t in 0..n {
        // h_0 = 0, so h_t is just the b part of the composed prefix.
        for j in 0..d {
            h.re.set2(t, j, inclusive[t].b_re[j]);
            h.im.set2(t, j, inclusive[t].b_im[j]);
        }
    }
    Ok(h)
}

/// Tied-gate parallel scan; same contract as [`sequential_scan`].
pub fn parallel_scan<T: Scalar>(decay: &DecaySeq<T>, c: &ComplexSeq<T>) -> Result<ComplexSeq<T>> {
    decay.validate()?;
    parallel_scan_weighted(decay, &tied_weight(decay), c)
}

fn blelloch_inclusive<T: Scalar>(elems: &[ScanElement<T>], d: usize) -> Vec<ScanElement<T>> {
    let n = elems.len();
    let m = n.next_power_of_two().max(1);
    let mut tree: Vec<ScanElement<T>> = Vec::with_capacity(m);
    tree.extend_from_slice(elems);
    tree.resize(m, ScanElement::identity(d));

    // Up-sweep: reduce pairs, later operand on the left of compose.
    let mut stride = 1;
    while stride < m {
        let mut i = 2 * stride - 1;
        while i < m {
            tree[i] = compose(&tree[i], &tree[i - stride]);
            i += 2 * stride;
        }
        stride *= 2;
    }

    // Down-sweep: convert to exclusive prefixes.
    tree[m - 1] = ScanElement::identity(d);
    let mut stride = m / 2;
    while stride >= 1 {
        let mut i = 2 * stride - 1;
        while i < m {
            let left = tree[i - stride].clone();
            tree[i - stride] = tree[i].clone();
            tree[i] = compose(&left, &tree[i]);
            i += 2 * stride;
        }
        stride /= 2;
    }

    (0..n).map(|t| compose(&elems[t], &tree[t])).collect()
}

/// Dispatches to the sequential kernel below [`PARALLEL_THRESHOLD`] and the
/// parallel scan above it.
pub fn scan<T: Scalar>(decay: &DecaySeq<T>, c: &ComplexSeq<T>) -> Result<ComplexSeq<T>> {
    let (n, _) = c.dims();
    if n > PARALLEL_THRESHOLD {
        parallel_scan(decay, c)
    } else {
        sequential_scan(decay, c, None)
    }
}

/// One hidden dimension's token-mixing matrices: lower-triangular decay
/// matrix `Lambda` and the phase matrix `Theta` split into real/imag parts.
/// `H = (Lambda (*) Theta) C` reproduces the tied recurrence.
pub fn mixing_matrix<T: Scalar>(
    decay: &DecaySeq<T>,
    dim: usize,
    cap: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, d) = decay.lambda.dims2()?;
    if n > cap {
        return Err(HgrnError::Contract(format!(
            "mixing matrix materialization: n={n} exceeds cap {cap}"
        )));
    }
    if dim >= d {
        return Err(HgrnError::Shape(format!("dim {dim} out of range 0..{d}")));
    }
    let mut lam_m = Tensor::zeros(vec![n, n]);
    let mut th_re = Tensor::zeros(vec![n, n]);
    let mut th_im = Tensor::zeros(vec![n, n]);
    // Cumulative phase: phase(t, s) = sum_{k=s+1..=t} theta_k.
    let mut cum_theta = vec![0.0f64; n + 1];
    for t in 0..n {
        cum_theta[t + 1] = cum_theta[t] + decay.theta_at(t, dim).as_f64();
    }
    for t in 0..n {
        // Walk s from the diagonal down, accumulating the decay product.
        let mut prod = T::one();
        for s in (0..=t).rev() {
            if s < t {
                prod = prod * decay.lambda.at2(s + 1, dim);
            }
            let w = T::one() - decay.lambda.at2(s, dim);
            lam_m.set2(t, s, w * prod);
            let phase = cum_theta[t + 1] - cum_theta[s + 1];
            th_re.set2(t, s, T::from_f64(phase.cos()));
            th_im.set2(t, s, T::from_f64(phase.sin()));
        }
    }
    Ok((lam_m, th_re, th_im))
}

/// Oracle path: apply the materialized mixing matrix to `C` for every
/// hidden dimension and return the stacked result.
pub fn mixing_matrix_apply<T: Scalar>(
    decay: &DecaySeq<T>,
    c: &ComplexSeq<T>,
    cap: usize,
) -> Result<ComplexSeq<T>> {
    let (n, d) = c.dims();
    let mut h = ComplexSeq::zeros(n, d);
    for j in 0..d {
        let (lam_m, th_re, th_im) = mixing_matrix(decay, j, cap)?;
        for t in 0..n {
            let mut acc_re = T::zero();
            let mut acc_im = T::zero();
            for s in 0..=t {
                let a_re = lam_m.at2(t, s) * th_re.at2(t, s);
                let a_im = lam_m.at2(t, s) * th_im.at2(t, s);
                let (cr, ci) = (c.re.at2(s, j), c.im.at2(s, j));
                acc_re = acc_re + a_re * cr - a_im * ci;
                acc_im = acc_im + a_re * ci + a_im * cr;
            }
            h.re.set2(t, j, acc_re);
            h.im.set2(t, j, acc_im);
        }
    }
    Ok(h)
}

/// Gradients of the weighted recurrence, reverse-time accumulation.
/// Returns (grad_lambda, grad_theta, grad_weight, grad_c). `grad_theta`
/// matches the theta shape (summed over t when shared).
pub fn scan_backward_weighted<T: Scalar>(
    decay: &DecaySeq<T>,
    weight: &Tensor<T>,
    c: &ComplexSeq<T>,
    h: &ComplexSeq<T>,
    grad_h: &ComplexSeq<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, ComplexSeq<T>)> {
    check_same_shape(&grad_h.re, &h.re, "scan_backward grad_h")?;
    check_same_shape(&h.re, &c.re, "scan_backward h vs c")?;
    let (n, d) = c.dims();
    let mut g_lambda = Tensor::zeros(vec![n, d]);
    let mut g_theta = Tensor::zeros(decay.theta.shape().to_vec());
    let shared = decay.theta_shared();
    let mut g_weight = Tensor::zeros(vec![n, d]);
    let mut g_c = ComplexSeq::zeros(n, d);
    // Running complex adjoint of h_t, per dimension.
    let mut adj_re = vec![T::zero(); d];
    let mut adj_im = vec![T::zero(); d];
    let trig = TrigTable::new(decay);
    for t in (0..n).rev() {
        for j in 0..d {
            let gr = adj_re[j] + grad_h.re.at2(t, j);
            let gi = adj_im[j] + grad_h.im.at2(t, j);
            let lam = decay.lambda.at2(t, j);
            let (cos, sin) = trig.at(t, j);
            // Previous state (h_0 = 0).
            let (pr, pi) = if t == 0 {
                (T::zero(), T::zero())
            } else {
                (h.re.at2(t - 1, j), h.im.at2(t - 1, j))
            };
            // u = e^{i theta} h_{t-1}
            let u_re = cos * pr - sin * pi;
            let u_im = cos * pi + sin * pr;
            // h_t = lam * u + w * c_t
            g_lambda.set2(t, j, u_re * gr + u_im * gi);
            let w = weight.at2(t, j);
            let (cr, ci) = (c.re.at2(t, j), c.im.at2(t, j));
            g_weight.set2(t, j, cr * gr + ci * gi);
            g_c.re.set2(t, j, w * gr);
            g_c.im.set2(t, j, w * gi);
            // Adjoint into u, then theta and h_{t-1}.
            let gu_re = lam * gr;
            let gu_im = lam * gi;
            let dth = -u_im * gu_re + u_re * gu_im;
            if shared {
                let cur = g_theta.at2(0, j);
                g_theta.set2(0, j, cur + dth);
            } else {
                g_theta.set2(t, j, dth);
            }
            // g_{h_{t-1}} = conj(e^{i theta}) * gu
            adj_re[j] = cos * gu_re + sin * gu_im;
            adj_im[j] = cos * gu_im - sin * gu_re;
        }
    }
    Ok((g_lambda, g_theta, g_weight, g_c))
}

/// Tied-gate backward: folds the input-weight adjoint (`w = 1 - lambda`)
/// into `grad_lambda`.
pub fn scan_backward<T: Scalar>(
    decay: &DecaySeq<T>,
    c: &ComplexSeq<T>,
    h: &ComplexSeq<T>,
    grad_h: &ComplexSeq<T>,
) -> Result<(Tensor<T>, Tensor<T>, ComplexSeq<T>)> {
    let w = tied_weight(decay);
    let (mut g_lambda, g_theta, g_weight, g_c) =
        scan_backward_weighted(decay, &w, c, h, grad_h)?;
    for (gl, gw) in g_lambda.data_mut().iter_mut().zip(g_weight.data()) {
        *gl = *gl - *gw;
    }
    Ok((g_lambda, g_theta, g_c))
}

/// Largest deviation of any Theta diagonal from its first entry, measured
/// on the materialized phase matrix for one hidden dimension. Zero (to
/// float noise) when theta is time-shared; data-dependent theta breaks
/// the relative-position (Toeplitz) structure and drives this up.
pub fn theta_toeplitz_deviation<T: Scalar>(decay: &DecaySeq<T>, dim: usize) -> Result<f64> {
    let (n, _) = decay.lambda.dims2()?;
    let (_, th_re, th_im) = mixing_matrix(decay, dim, n.max(1))?;
    let mut worst = 0.0f64;
    for offset in 0..n {
        let (r0, i0) = (
            th_re.at2(offset, 0).as_f64(),
            th_im.at2(offset, 0).as_f64(),
        );
        for s in 1..n - offset {
            let t = s + offset;
            let dr = th_re.at2(t, s).as_f64() - r0;
            let di = th_im.at2(t, s).as_f64() - i0;
            worst = worst.max(dr.abs().max(di.abs()));
        }
    }
    Ok(worst)
}
