//! Dense complex linear algebra used throughout the crate.
//!
//! Vectorization is column-major: the `d x d` matrix `A` maps to the vector
//! with entry `A[(i, j)]` at position `i + j * d`. With this convention
//! `vec(A X B) = (B^T kron A) vec(X)`.

use nalgebra::linalg::Schur;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Result, RiesError};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn vec_of(a: &CMat) -> CVec {
    let d = a.nrows();
    CVec::from_fn(d * a.ncols(), |k, _| a[(k % d, k / d)])
}

pub fn unvec(v: &CVec, d: usize) -> CMat {
    debug_assert_eq!(v.len(), d * d);
    CMat::from_fn(d, d, |i, j| v[i + j * d])
}

/// Matrix of `X -> A X` on vectorized `d x d` matrices.
pub fn left_mul(a: &CMat) -> CMat {
    CMat::identity(a.nrows(), a.nrows()).kronecker(a)
}

/// Matrix of `X -> X B` on vectorized `d x d` matrices.
pub fn right_mul(b: &CMat) -> CMat {
    b.transpose().kronecker(&CMat::identity(b.nrows(), b.nrows()))
}

pub fn hermiticity_defect(a: &CMat) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..a.nrows() {
        for j in i..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)].conj()).norm());
        }
    }
    worst
}

pub fn check_hermitian(a: &CMat, what: &str, tol: f64) -> Result<()> {
    if !a.is_square() {
        return Err(RiesError::Validation(format!("{what} is not square")));
    }
    let defect = hermiticity_defect(a);
    if defect > tol {
        return Err(RiesError::Validation(format!(
            "{what} is not Hermitian (defect {defect:.3e} > {tol:.1e})"
        )));
    }
    Ok(())
}

/// Eigendecomposition of a Hermitian matrix; eigenvalues ascending.
pub fn eigh(a: &CMat) -> (Vec<f64>, CMat) {
    let h = symmetrize(a);
    let eig = h.symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMat::from_fn(n, n, |r, k| eig.eigenvectors[(r, order[k])]);
    (values, vectors)
}

/// `(A + A^*) / 2`.
pub fn symmetrize(a: &CMat) -> CMat {
    (a + a.adjoint()).scale(0.5)
}

/// Applies `f` to the spectrum of a Hermitian matrix.
pub fn hermitian_function<F>(a: &CMat, f: F) -> CMat
where
    F: Fn(f64) -> C64,
{
    let (values, vectors) = eigh(a);
    let n = values.len();
    let mut scaled = vectors.clone();
    for k in 0..n {
        let fk = f(values[k]);
        for r in 0..n {
            scaled[(r, k)] *= fk;
        }
    }
    &scaled * vectors.adjoint()
}

/// `exp(-i t H)` for Hermitian `H`.
pub fn unitary_exp(h: &CMat, t: f64) -> CMat {
    hermitian_function(h, |e| C64::from_polar(1.0, -t * e))
}

/// Padé scaling-and-squaring exponential of an arbitrary square matrix.
///
/// Independent of [`unitary_exp`]; kept for cross-checks.
pub fn expm_pade(a: &CMat) -> CMat {
    let n = a.nrows();
    let norm = a.iter().map(|z| z.norm()).fold(0.0, f64::max) * n as f64;
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = a.scale(0.5_f64.powi(squarings));
    // (6,6) Padé approximant
    let coeffs = [1.0, 0.5, 5.0 / 44.0, 1.0 / 66.0, 1.0 / 792.0, 1.0 / 15840.0, 1.0 / 665280.0];
    let id = CMat::identity(n, n);
    let mut num = id.clone();
    let mut den = id.clone();
    let mut power = id;
    for (k, &ck) in coeffs.iter().enumerate().skip(1) {
        power = &power * &scaled;
        num += power.scale(ck);
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        den += power.scale(sign * ck);
    }
    let mut result = den.lu().solve(&num).expect("Padé denominator is well conditioned");
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

pub fn spectral_norm(a: &CMat) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Singular values in descending order.
pub fn singular_values(a: &CMat) -> Vec<f64> {
    let mut s: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

pub fn trace_norm(a: &CMat) -> f64 {
    singular_values(a).iter().sum()
}

pub fn inner(u: &CVec, v: &CVec) -> C64 {
    u.dotc(v)
}

/// `|u><v|`.
pub fn outer(u: &CVec, v: &CVec) -> CMat {
    u * v.adjoint()
}

/// Eigenvalues of a general square matrix from its complex Schur form.
pub fn eigenvalues(a: &CMat) -> Result<Vec<C64>> {
    let (_, t) = schur(a)?;
    Ok((0..t.nrows()).map(|i| t[(i, i)]).collect())
}

pub fn spectral_radius(a: &CMat) -> Result<f64> {
    Ok(eigenvalues(a)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Complex Schur decomposition `A = Z T Z^*`, returned as `(Z, T)`.
pub fn schur(a: &CMat) -> Result<(CMat, CMat)> {
    let n = a.nrows();
    if n == 0 {
        return Ok((CMat::zeros(0, 0), CMat::zeros(0, 0)));
    }
    let decomposition = Schur::try_new(a.clone(), 1e-15, 10_000 * n)
        .ok_or_else(|| RiesError::Eigen("Schur iteration did not converge".into()))?;
    let (z, mut t) = decomposition.unpack();
    for j in 0..n {
        for i in (j + 1)..n {
            t[(i, j)] = ZERO;
        }
    }
    Ok((z, t))
}

/// Swaps the diagonal entries `k` and `k + 1` of an upper triangular Schur
/// factor, updating `Z` so that `Z T Z^*` is unchanged.
fn swap_schur(z: &mut CMat, t: &mut CMat, k: usize) {
    let a = t[(k, k)];
    let b = t[(k + 1, k + 1)];
    let v1 = t[(k, k + 1)];
    let v2 = b - a;
    let r = (v1.norm_sqr() + v2.norm_sqr()).sqrt();
    if r == 0.0 {
        return;
    }
    // unitary G with first column (v1, v2) / r: the eigenvector for b
    let g11 = v1 / r;
    let g21 = v2 / r;
    let g12 = -g21.conj();
    let g22 = g11.conj();
    let n = t.nrows();
    // T <- G^* T on rows k, k+1
    for j in 0..n {
        let x = t[(k, j)];
        let y = t[(k + 1, j)];
        t[(k, j)] = g11.conj() * x + g21.conj() * y;
        t[(k + 1, j)] = g12.conj() * x + g22.conj() * y;
    }
    // T <- T G and Z <- Z G on columns k, k+1
    for m in [&mut *t, &mut *z] {
        for i in 0..n {
            let x = m[(i, k)];
            let y = m[(i, k + 1)];
            m[(i, k)] = x * g11 + y * g21;
            m[(i, k + 1)] = x * g12 + y * g22;
        }
    }
    t[(k + 1, k)] = ZERO;
    t[(k, k)] = b;
    t[(k + 1, k + 1)] = a;
}

/// Spectral projection onto the eigenvalues of `a` selected by `select`.
///
/// Uses an ordered Schur form and a triangular Sylvester solve, so it does
/// not rely on a full eigenvector basis. Returns the projection and the
/// number of selected eigenvalues.
pub fn spectral_projection<F>(a: &CMat, select: F) -> Result<(CMat, usize)>
where
    F: Fn(C64) -> bool,
{
    let n = a.nrows();
    let (mut z, mut t) = schur(a)?;
    let mut k = 0;
    for j in 0..n {
        if select(t[(j, j)]) {
            let mut pos = j;
            while pos > k {
                swap_schur(&mut z, &mut t, pos - 1);
                pos -= 1;
            }
            k += 1;
        }
    }
    if k == 0 {
        return Ok((CMat::zeros(n, n), 0));
    }
    let m = n - k;
    let top = t.view((0, 0), (k, k)).into_owned();
    let bottom = t.view((k, k), (m, m)).into_owned();
    let coupling = t.view((0, k), (k, m)).into_owned();
    // top * R - R * bottom = -coupling
    let r = solve_triangular_sylvester(&top, &bottom, &(-coupling))?;
    let mut block = CMat::zeros(n, n);
    for i in 0..k {
        block[(i, i)] = ONE;
        for j in 0..m {
            block[(i, k + j)] = -r[(i, j)];
        }
    }
    Ok((&z * block * z.adjoint(), k))
}

/// Solves `A R - R B = F` for upper triangular `A` and `B` with disjoint spectra.
pub fn solve_triangular_sylvester(a: &CMat, b: &CMat, f: &CMat) -> Result<CMat> {
    let k = a.nrows();
    let m = b.nrows();
    let mut r = CMat::zeros(k, m);
    for j in 0..m {
        let mut rhs: Vec<C64> = (0..k).map(|i| f[(i, j)]).collect();
        for l in 0..j {
            for (i, value) in rhs.iter_mut().enumerate() {
                *value += r[(i, l)] * b[(l, j)];
            }
        }
        let shift = b[(j, j)];
        for i in (0..k).rev() {
            let mut acc = rhs[i];
            for l in (i + 1)..k {
                acc -= a[(i, l)] * r[(l, j)];
            }
            let pivot = a[(i, i)] - shift;
            if pivot.norm() < 1e-300 {
                return Err(RiesError::Eigen("Sylvester equation is singular".into()));
            }
            r[(i, j)] = acc / pivot;
        }
    }
    Ok(r)
}

/// Embeds `op`, acting on the tensor factors listed in `sites` (ascending),
/// into the full product space with factor dimensions `dims`.
pub fn embed(op: &CMat, dims: &[usize], sites: &[usize]) -> CMat {
    let total: usize = dims.iter().product();
    let local: Vec<usize> = sites.iter().map(|&s| dims[s]).collect();
    let local_total: usize = local.iter().product();
    debug_assert_eq!(op.nrows(), local_total);
    let strides = strides_of(dims);
    let local_strides = strides_of(&local);
    let mut out = CMat::zeros(total, total);
    for row in 0..total {
        let mut local_row = 0;
        let mut base = row;
        for (q, &s) in sites.iter().enumerate() {
            let digit = (row / strides[s]) % dims[s];
            local_row += digit * local_strides[q];
            base -= digit * strides[s];
        }
        for local_col in 0..local_total {
            let value = op[(local_row, local_col)];
            if value == ZERO {
                continue;
            }
            let mut col = base;
            for (q, &s) in sites.iter().enumerate() {
                col += ((local_col / local_strides[q]) % local[q]) * strides[s];
            }
            out[(row, col)] += value;
        }
    }
    out
}

/// `(op on sites) · x` without forming the embedded operator.
pub fn apply_local(op: &CMat, x: &CMat, dims: &[usize], sites: &[usize]) -> CMat {
    let local: Vec<usize> = sites.iter().map(|&s| dims[s]).collect();
    let local_total: usize = local.iter().product();
    let strides = strides_of(dims);
    let local_strides = strides_of(&local);
    let offsets: Vec<usize> = (0..local_total)
        .map(|l| sites.iter().enumerate().map(|(q, &s)| ((l / local_strides[q]) % local[q]) * strides[s]).sum())
        .collect();
    let mut out = CMat::zeros(x.nrows(), x.ncols());
    let mut scratch = vec![ZERO; local_total];
    for row in 0..x.nrows() {
        let mut local_row = 0;
        let mut base = row;
        for (q, &s) in sites.iter().enumerate() {
            let digit = (row / strides[s]) % dims[s];
            local_row += digit * local_strides[q];
            base -= digit * strides[s];
        }
        if local_row != 0 {
            continue;
        }
        for col in 0..x.ncols() {
            for (l, slot) in scratch.iter_mut().enumerate() {
                *slot = x[(base + offsets[l], col)];
            }
            for (i, off) in offsets.iter().enumerate() {
                let mut acc = ZERO;
                for (j, v) in scratch.iter().enumerate() {
                    acc += op[(i, j)] * v;
                }
                out[(base + off, col)] = acc;
            }
        }
    }
    out
}

fn strides_of(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    strides
}

/// `Tr_B[(1 ⊗ sigma) X]` for `X` on `A ⊗ B`, `sigma` on `B`.
pub fn weighted_partial_trace(x: &CMat, dim_a: usize, sigma: &CMat) -> CMat {
    let dim_b = sigma.nrows();
    CMat::from_fn(dim_a, dim_a, |s, t| {
        let mut acc = ZERO;
        for e in 0..dim_b {
            for f in 0..dim_b {
                acc += sigma[(f, e)] * x[(s * dim_b + e, t * dim_b + f)];
            }
        }
        acc
    })
}

/// Compensated (Neumaier) running sum of complex matrices.
#[derive(Clone, Debug)]
pub struct CompensatedSum {
    sum: CMat,
    comp: CMat,
    count: u64,
}

impl CompensatedSum {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { sum: CMat::zeros(rows, cols), comp: CMat::zeros(rows, cols), count: 0 }
    }

    pub fn add(&mut self, x: &CMat) {
        for ((s, c), v) in self.sum.iter_mut().zip(self.comp.iter_mut()).zip(x.iter()) {
            let (re, re_c) = neumaier(s.re, v.re);
            let (im, im_c) = neumaier(s.im, v.im);
            *s = C64::new(re, im);
            *c += C64::new(re_c, im_c);
        }
        self.count += 1;
    }

    pub fn merge(&mut self, other: &CompensatedSum) {
        for ((s, c), (v, vc)) in self
            .sum
            .iter_mut()
            .zip(self.comp.iter_mut())
            .zip(other.sum.iter().zip(other.comp.iter()))
        {
            let (re, re_c) = neumaier(s.re, v.re);
            let (im, im_c) = neumaier(s.im, v.im);
            *s = C64::new(re, im);
            *c += C64::new(re_c, im_c) + vc;
        }
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn total(&self) -> CMat {
        &self.sum + &self.comp
    }

    pub fn mean(&self) -> CMat {
        self.total().unscale(self.count.max(1) as f64)
    }
}

fn neumaier(sum: f64, x: f64) -> (f64, f64) {
    let t = sum + x;
    let correction = if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
    (t, correction)
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}
