//! Dense linear algebra: row-major f64 matrices, LU linear solves, and a
//! symmetric eigensolver (Householder tridiagonalization + implicit QL).
//!
//! Everything here is pure: the same inputs produce bit-identical outputs.
//! The eigensolver follows the classic dense approach (tred2/tqli family,
//! cf. Numerical Recipes §11.2-11.3); desk-scale problems (N up to a few
//! thousand) make dense O(N³) acceptable. For the large symmetric systems
//! arising in LLE, `symmetric_eig_smallest` computes only the bottom of the
//! spectrum: eigenvalues by a vector-free QL pass, eigenvectors by inverse
//! iteration on the tridiagonal form, back-transformed through the stored
//! Householder reflectors.

use crate::error::{ensure, Error, Result};

/// Dense row-major matrix of 64-bit floats.
///
/// Constructors reject non-finite entries so every `Matrix` in the system is
/// NaN/Inf-free by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        ensure!(data.iter().all(|v| v.is_finite()), "matrix data contains a non-finite entry");
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        ensure!(!rows.is_empty(), "from_rows requires at least one row");
        let cols = rows[0].len();
        ensure!(rows.iter().all(|r| r.len() == cols), "from_rows requires equal-length rows");
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        debug_assert!(v.is_finite());
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert!(i < self.rows);
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        debug_assert!(i < self.rows);
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `self · b`. See module-level `matmul` for the operation contract.
    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        ensure!(
            self.cols == b.rows,
            "matmul dimension mismatch: {}x{} by {}x{}",
            self.rows,
            self.cols,
            b.rows,
            b.cols
        );
        Ok(matmul_nn(self, b))
    }
}

/// Standard matrix product with the same accumulation order as the naive
/// triple loop (k ascending per output entry), so it matches the oracle
/// bit-for-bit while staying cache-friendly.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

pub(crate) fn matmul_nn(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut c = Matrix::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let crow = c.row_mut(i);
        for (kk, &aik) in arow.iter().enumerate().take(k) {
            if aik == 0.0 {
                continue;
            }
            let brow = b.row(kk);
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += aik * bv;
            }
        }
    }
    c
}

/// `a · bᵀ` — both operands traversed along contiguous rows.
pub(crate) fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols, b.cols);
    let (m, n) = (a.rows, b.rows);
    let mut c = Matrix::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        for (j, cv) in c.row_mut(i).iter_mut().enumerate() {
            *cv = dot(arow, b.row(j));
        }
    }
    c
}

/// `aᵀ · b` — accumulated row-by-row so output entries sum in sample order.
pub(crate) fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.rows, b.rows);
    let (m, n) = (a.cols, b.cols);
    let mut c = Matrix::zeros(m, n);
    for s in 0..a.rows {
        let arow = a.row(s);
        let brow = b.row(s);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c.data[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Dot product with a fixed 4-lane accumulation order: deterministic and
/// still vectorizable.
#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f64; 4];
    let xc = x.chunks_exact(4);
    let yc = y.chunks_exact(4);
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (cx, cy) in xc.zip(yc) {
        acc[0] += cx[0] * cy[0];
        acc[1] += cx[1] * cy[1];
        acc[2] += cx[2] * cy[2];
        acc[3] += cx[3] * cy[3];
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

// ---------------------------------------------------------------------------
// Linear solve
// ---------------------------------------------------------------------------

struct LuFactors {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

fn lu_factor(a: &Matrix) -> Result<LuFactors> {
    let n = a.rows;
    let mut lu = a.data.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let tol = 1e-12 * (n as f64) * a.max_abs();
    for col in 0..n {
        let mut piv = col;
        let mut best = lu[col * n + col].abs();
        for r in col + 1..n {
            let v = lu[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best <= tol {
            return Err(Error::SingularSystem(format!(
                "pivot {best:.3e} at column {col} below tolerance {tol:.3e}"
            )));
        }
        if piv != col {
            for j in 0..n {
                lu.swap(col * n + j, piv * n + j);
            }
            perm.swap(col, piv);
        }
        let pivot = lu[col * n + col];
        for r in col + 1..n {
            let f = lu[r * n + col] / pivot;
            lu[r * n + col] = f;
            if f != 0.0 {
                for j in col + 1..n {
                    lu[r * n + j] -= f * lu[col * n + j];
                }
            }
        }
    }
    Ok(LuFactors { n, lu, perm })
}

impl LuFactors {
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 1..n {
            let mut s = x[i];
            for (&l, &xj) in self.lu[i * n..i * n + i].iter().zip(&x[..i]) {
                s -= l * xj;
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for (&l, &xj) in self.lu[i * n + i + 1..i * n + n].iter().zip(&x[i + 1..]) {
                s -= l * xj;
            }
            x[i] = s / self.lu[i * n + i];
        }
        x
    }
}

/// Solve `a·x = b` by LU with partial pivoting plus one step of iterative
/// refinement. Matrices singular to tolerance produce `SingularSystem`.
pub fn solve_linear(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    ensure!(a.rows == a.cols, "solve_linear requires a square matrix, got {}x{}", a.rows, a.cols);
    ensure!(
        b.len() == a.rows,
        "solve_linear rhs length {} does not match {}x{} matrix",
        b.len(),
        a.rows,
        a.cols
    );
    if a.rows == 0 {
        return Ok(Vec::new());
    }
    let f = lu_factor(a)?;
    let mut x = f.solve(b);
    // One refinement pass tightens the residual for mildly ill-conditioned
    // systems (the Eq. 7 local Grams can be skewed even after regularization).
    let n = a.rows;
    let mut r = vec![0.0; n];
    for i in 0..n {
        r[i] = b[i] - dot(a.row(i), &x);
    }
    let dx = f.solve(&r);
    for i in 0..n {
        x[i] += dx[i];
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition
// ---------------------------------------------------------------------------

/// Eigenvalues ascending; `eigenvectors` column `i` pairs with `eigenvalues[i]`.
#[derive(Debug, Clone)]
pub struct EigenResult {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

fn check_symmetric(a: &Matrix) -> Result<()> {
    ensure!(
        a.rows == a.cols,
        "eigendecomposition requires a square matrix, got {}x{}",
        a.rows,
        a.cols
    );
    let tol = 1e-10 * a.max_abs().max(1.0);
    for i in 0..a.rows {
        for j in i + 1..a.cols {
            let diff = (a.get(i, j) - a.get(j, i)).abs();
            ensure!(
                diff <= tol,
                "matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {diff:.3e} > {tol:.3e}"
            );
        }
    }
    Ok(())
}

/// Householder tridiagonalization with accumulation of the orthogonal
/// transform: on return `q` holds Q with A = Q·T·Qᵀ, `d` the diagonal of T,
/// and `e[i]` the subdiagonal coupling i and i+1 (`e[n-1]` = 0).
fn tred2_with_q(q: &mut Matrix, d: &mut [f64], e: &mut [f64]) {
    let n = q.rows;
    let a = &mut q.data;
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let mut scale = 0.0;
            for k in 0..=l {
                scale += a[i * n + k].abs();
            }
            if scale == 0.0 {
                e[i] = a[i * n + l];
            } else {
                for k in 0..=l {
                    a[i * n + k] /= scale;
                    h += a[i * n + k] * a[i * n + k];
                }
                let f = a[i * n + l];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a[i * n + l] = f - g;
                let mut f_acc = 0.0;
                for j in 0..=l {
                    a[j * n + i] = a[i * n + j] / h;
                    let mut g_acc = 0.0;
                    for k in 0..=j {
                        g_acc += a[j * n + k] * a[i * n + k];
                    }
                    for k in j + 1..=l {
                        g_acc += a[k * n + j] * a[i * n + k];
                    }
                    e[j] = g_acc / h;
                    f_acc += e[j] * a[i * n + j];
                }
                let hh = f_acc / (h + h);
                for j in 0..=l {
                    let f = a[i * n + j];
                    e[j] -= hh * f;
                    let g = e[j];
                    for k in 0..=j {
                        a[j * n + k] -= f * e[k] + g * a[i * n + k];
                    }
                }
            }
        } else {
            e[i] = a[i * n + l];
        }
        d[i] = h;
    }
    d[0] = 0.0;
    e[0] = 0.0;
    for i in 0..n {
        if d[i] != 0.0 {
            for j in 0..i {
                let mut g = 0.0;
                for k in 0..i {
                    g += a[i * n + k] * a[k * n + j];
                }
                for k in 0..i {
                    a[k * n + j] -= g * a[k * n + i];
                }
            }
        }
        d[i] = a[i * n + i];
        a[i * n + i] = 1.0;
        for j in 0..i {
            a[j * n + i] = 0.0;
            a[i * n + j] = 0.0;
        }
    }
    // shift to the "e[i] couples i and i+1" convention
    for i in 0..n - 1 {
        e[i] = e[i + 1];
    }
    e[n - 1] = 0.0;
}

/// Householder tridiagonalization that keeps the reflectors instead of
/// accumulating Q. Reflector i lives in `house` row i (first i entries) with
/// its `h` in `hs[i]`; `hs[i] == 0` marks a skipped (identity) step.
struct HouseholderTridiag {
    n: usize,
    house: Vec<f64>,
    hs: Vec<f64>,
    d: Vec<f64>,
    e: Vec<f64>,
}

fn tred2_householder(a_in: &Matrix) -> HouseholderTridiag {
    let n = a_in.rows;
    let mut a = a_in.data.clone();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    let mut hs = vec![0.0; n];
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let mut scale = 0.0;
            for k in 0..=l {
                scale += a[i * n + k].abs();
            }
            if scale == 0.0 {
                e[i] = a[i * n + l];
            } else {
                for k in 0..=l {
                    a[i * n + k] /= scale;
                    h += a[i * n + k] * a[i * n + k];
                }
                let f = a[i * n + l];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a[i * n + l] = f - g;
                let mut f_acc = 0.0;
                for j in 0..=l {
                    let mut g_acc = 0.0;
                    for k in 0..=j {
                        g_acc += a[j * n + k] * a[i * n + k];
                    }
                    for k in j + 1..=l {
                        g_acc += a[k * n + j] * a[i * n + k];
                    }
                    e[j] = g_acc / h;
                    f_acc += e[j] * a[i * n + j];
                }
                let hh = f_acc / (h + h);
                for j in 0..=l {
                    let f = a[i * n + j];
                    e[j] -= hh * f;
                    let g = e[j];
                    for k in 0..=j {
                        a[j * n + k] -= f * e[k] + g * a[i * n + k];
                    }
                }
            }
        } else {
            e[i] = a[i * n + l];
        }
        hs[i] = h;
    }
    for i in 0..n {
        d[i] = a[i * n + i];
    }
    // keep only the reflector rows; zero the rest for clarity
    let mut house = vec![0.0; n * n];
    for i in 1..n {
        if hs[i] != 0.0 {
            house[i * n..i * n + i].copy_from_slice(&a[i * n..i * n + i]);
        }
    }
    for i in 0..n.saturating_sub(1) {
        e[i] = e[i + 1];
    }
    if n > 0 {
        e[n - 1] = 0.0;
    }
    HouseholderTridiag { n, house, hs, d, e }
}

impl HouseholderTridiag {
    /// Map an eigenvector of T back to an eigenvector of A: apply the
    /// reflectors in reduction-reverse order (P₁ first).
    fn back_transform(&self, v: &mut [f64]) {
        let n = self.n;
        for i in 1..n {
            let h = self.hs[i];
            if h == 0.0 {
                continue;
            }
            let u = &self.house[i * n..i * n + i];
            let sigma = dot(u, &v[..i]) / h;
            for k in 0..i {
                v[k] -= sigma * u[k];
            }
        }
    }
}

/// Implicit QL with shifts on a tridiagonal (d, e). Rotations are applied to
/// `z`'s columns when given. The sweep counter is shared across eigenvalues;
/// exceeding `cap` aborts with `ConvergenceFailure`.
fn tqli(d: &mut [f64], e: &mut [f64], mut z: Option<&mut Matrix>, cap: usize) -> Result<()> {
    let n = d.len();
    if n == 0 {
        return Ok(());
    }
    let mut sweeps = 0usize;
    for l in 0..n {
        'outer: loop {
            let mut m = l;
            while m < n - 1 {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd + f64::MIN_POSITIVE {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            sweeps += 1;
            if sweeps > cap {
                return Err(Error::ConvergenceFailure { n, cap });
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    continue 'outer;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                if let Some(zm) = z.as_deref_mut() {
                    let zn = zm.cols;
                    let zdata = &mut zm.data;
                    for k in 0..zm.rows {
                        f = zdata[k * zn + i + 1];
                        zdata[k * zn + i + 1] = s * zdata[k * zn + i] + c * f;
                        zdata[k * zn + i] = c * zdata[k * zn + i] - s * f;
                    }
                }
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

/// Make the largest-magnitude entry of each column positive (ties: lowest
/// row index), so eigenvector output is bit-deterministic despite the
/// inherent sign ambiguity.
pub(crate) fn canonicalize_column_signs(m: &mut Matrix) {
    let (rows, cols) = (m.rows, m.cols);
    for j in 0..cols {
        let mut best = 0.0;
        let mut arg = 0;
        for i in 0..rows {
            let v = m.data[i * cols + j].abs();
            if v > best {
                best = v;
                arg = i;
            }
        }
        if m.data[arg * cols + j] < 0.0 {
            for i in 0..rows {
                m.data[i * cols + j] = -m.data[i * cols + j];
            }
        }
    }
}

fn sort_eigen(d: Vec<f64>, z: Matrix) -> EigenResult {
    let n = d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap().then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| d[i]).collect();
    let mut vecs = Matrix::zeros(z.rows, n);
    for (newj, &oldj) in order.iter().enumerate() {
        for i in 0..z.rows {
            vecs.data[i * n + newj] = z.data[i * z.cols + oldj];
        }
    }
    canonicalize_column_signs(&mut vecs);
    EigenResult { eigenvalues, eigenvectors: vecs }
}

/// Full eigendecomposition of a symmetric matrix. Eigenvalues ascending,
/// eigenvector columns orthonormal, signs canonicalized.
pub fn symmetric_eig(a: &Matrix) -> Result<EigenResult> {
    check_symmetric(a)?;
    let n = a.rows;
    if n == 0 {
        return Ok(EigenResult { eigenvalues: Vec::new(), eigenvectors: Matrix::zeros(0, 0) });
    }
    if n == 1 {
        return Ok(EigenResult {
            eigenvalues: vec![a.get(0, 0)],
            eigenvectors: Matrix::identity(1),
        });
    }
    let mut q = a.clone();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2_with_q(&mut q, &mut d, &mut e);
    tqli(&mut d, &mut e, Some(&mut q), 100 * n)?;
    Ok(sort_eigen(d, q))
}

/// Solve (T − λI)·x = rhs for tridiagonal T given by (d, e), with partial
/// pivoting and tiny-pivot substitution so exactly-singular shifts still
/// produce a usable (huge, then normalized) solution.
fn solve_tridiag_shifted(d: &[f64], e: &[f64], lambda: f64, rhs: &[f64]) -> Vec<f64> {
    let n = d.len();
    let scale = d.iter().chain(e.iter()).fold(1.0f64, |m, v| m.max(v.abs()));
    let tiny = f64::EPSILON * scale * 1e-6 + f64::MIN_POSITIVE;
    let mut diag: Vec<f64> = d.iter().map(|&v| v - lambda).collect();
    let mut sup: Vec<f64> = (0..n).map(|i| if i < n - 1 { e[i] } else { 0.0 }).collect();
    let mut sup2 = vec![0.0; n];
    let mut x = rhs.to_vec();
    for i in 0..n.saturating_sub(1) {
        let low = e[i];
        if diag[i].abs() >= low.abs() {
            if diag[i] == 0.0 {
                diag[i] = tiny;
            }
            let m = low / diag[i];
            diag[i + 1] -= m * sup[i];
            x[i + 1] -= m * x[i];
        } else {
            // swap rows i and i+1; |m| <= 1 keeps elimination stable
            let m = diag[i] / low;
            let t_diag = diag[i + 1];
            let t_sup = if i + 1 < n - 1 { sup[i + 1] } else { 0.0 };
            diag[i] = low;
            diag[i + 1] = sup[i] - m * t_diag;
            if i + 1 < n - 1 {
                sup[i + 1] = -m * t_sup;
            }
            sup[i] = t_diag;
            sup2[i] = t_sup;
            let xt = x[i];
            x[i] = x[i + 1];
            x[i + 1] = xt - m * x[i];
        }
    }
    if diag[n - 1] == 0.0 {
        diag[n - 1] = tiny;
    }
    x[n - 1] /= diag[n - 1];
    if n >= 2 {
        x[n - 2] = (x[n - 2] - sup[n - 2] * x[n - 1]) / diag[n - 2];
    }
    for i in (0..n.saturating_sub(2)).rev() {
        x[i] = (x[i] - sup[i] * x[i + 1] - sup2[i] * x[i + 2]) / diag[i];
    }
    x
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

/// Eigendecomposition restricted to the `m` smallest eigenvalues, for large
/// matrices where accumulating the full transform is too expensive. Returns
/// the m smallest eigenvalues (ascending) and their orthonormal,
/// sign-canonicalized eigenvectors as columns of an n×m matrix.
pub fn symmetric_eig_smallest(a: &Matrix, m: usize) -> Result<EigenResult> {
    check_symmetric(a)?;
    let n = a.rows;
    ensure!(m <= n, "requested {m} eigenpairs from a {n}x{n} matrix");
    if m == 0 {
        return Ok(EigenResult { eigenvalues: Vec::new(), eigenvectors: Matrix::zeros(n, 0) });
    }
    if n == 1 {
        return Ok(EigenResult {
            eigenvalues: vec![a.get(0, 0)],
            eigenvectors: Matrix::identity(1),
        });
    }
    let tri = tred2_householder(a);
    let mut dv = tri.d.clone();
    let mut ev = tri.e.clone();
    tqli(&mut dv, &mut ev, None, 100 * n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| dv[x].partial_cmp(&dv[y]).unwrap().then(x.cmp(&y)));
    let targets: Vec<f64> = order.iter().take(m).map(|&i| dv[i]).collect();

    let scale = tri.d.iter().chain(tri.e.iter()).fold(1.0f64, |acc, v| acc.max(v.abs()));
    let cluster_tol = scale * 1e-10;
    use rand::RngCore;
    use rand::SeedableRng;
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(m);
    for (j, &lambda) in targets.iter().enumerate() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5EED_0000 + j as u64);
        let mut v: Vec<f64> =
            (0..n).map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5).collect();
        normalize(&mut v);
        for _ in 0..3 {
            v = solve_tridiag_shifted(&tri.d, &tri.e, lambda, &v);
            // keep cluster members distinct
            for (jj, prev) in vectors.iter().enumerate() {
                if (targets[jj] - lambda).abs() <= cluster_tol {
                    let c = dot(&v, prev);
                    for (vk, pk) in v.iter_mut().zip(prev.iter()) {
                        *vk -= c * pk;
                    }
                }
            }
            if normalize(&mut v) == 0.0 {
                for x in v.iter_mut() {
                    *x = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
                }
                normalize(&mut v);
            }
        }
        vectors.push(v);
    }
    // Final modified Gram-Schmidt polish across the whole set.
    for j in 0..vectors.len() {
        let (head, tail) = vectors.split_at_mut(j);
        let v = &mut tail[0];
        for prev in head.iter() {
            let c = dot(v, prev);
            for (vk, pk) in v.iter_mut().zip(prev.iter()) {
                *vk -= c * pk;
            }
        }
        normalize(v);
    }
    let mut out = Matrix::zeros(n, m);
    for (j, v) in vectors.iter_mut().enumerate() {
        tri.back_transform(v);
        for (i, &vi) in v.iter().enumerate() {
            out.data[i * m + j] = vi;
        }
    }
    canonicalize_column_signs(&mut out);
    Ok(EigenResult { eigenvalues: targets, eigenvectors: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                c.set(i, j, s);
            }
        }
        c
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-10.0..10.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn random_symmetric(n: usize, seed: u64) -> Matrix {
        let a = random_matrix(n, n, seed);
        let mut s = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                s.set(i, j, 0.5 * (a.get(i, j) + a.get(j, i)));
            }
        }
        s
    }

    #[test]
    fn constructors_reject_bad_data() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0, 2.0, f64::NAN, 4.0]).is_err());
        assert!(Matrix::new(1, 2, vec![f64::INFINITY, 0.0]).is_err());
        assert!(Matrix::new(2, 2, vec![0.0; 4]).is_ok());
    }

    #[test]
    fn matmul_identity() {
        let a = random_matrix(3, 3, 7);
        let got = matmul(&Matrix::identity(3), &a).unwrap();
        assert_eq!(got, a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = random_matrix(5, 7, 11);
        let b = random_matrix(7, 3, 12);
        let got = matmul(&a, &b).unwrap();
        let want = naive_matmul(&a, &b);
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_kernels_agree_with_naive() {
        let a = random_matrix(6, 9, 21);
        let b = random_matrix(4, 9, 22);
        let nt = matmul_nt(&a, &b);
        let want = naive_matmul(&a, &b.transpose());
        for (x, y) in nt.data().iter().zip(want.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
        let c = random_matrix(9, 5, 23);
        let d = random_matrix(9, 6, 24);
        let tn = matmul_tn(&c, &d);
        let want = naive_matmul(&c.transpose(), &d);
        for (x, y) in tn.data().iter().zip(want.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn prop_matmul_matches_oracle(m in 1usize..12, k in 1usize..12, n in 1usize..12, seed in 0u64..1000) {
            let a = random_matrix(m, k, seed);
            let b = random_matrix(k, n, seed.wrapping_add(1));
            let got = matmul(&a, &b).unwrap();
            let want = naive_matmul(&a, &b);
            for (x, y) in got.data().iter().zip(want.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn solve_identity_and_diagonal() {
        let b = vec![3.0, -1.0];
        let x = solve_linear(&Matrix::identity(2), &b).unwrap();
        assert_eq!(x, b);
        let a = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let x = solve_linear(&a, &[2.0, 8.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn solve_spd_residual() {
        let g = random_matrix(6, 6, 33);
        let mut spd = matmul_nt(&g, &g);
        for i in 0..6 {
            spd.set(i, i, spd.get(i, i) + 1.0);
        }
        let b = vec![1.0, -2.0, 3.0, 0.5, -0.25, 4.0];
        let x = solve_linear(&spd, &b).unwrap();
        let bound = 1e-8 * (1.0 + b.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        for (i, &bi) in b.iter().enumerate() {
            let r = (dot(spd.row(i), &x) - bi).abs();
            assert!(r <= bound, "residual {r} exceeds {bound}");
        }
    }

    #[test]
    fn solve_singular_detected() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0], vec![0.0, 1.0, 1.0]])
            .unwrap();
        match solve_linear(&a, &[1.0, 2.0, 3.0]) {
            Err(Error::SingularSystem(_)) => {}
            other => panic!("expected SingularSystem, got {other:?}"),
        }
    }

    #[test]
    fn eig_diagonal() {
        let a = Matrix::from_rows(&[vec![3.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 2.0]])
            .unwrap();
        let r = symmetric_eig(&a).unwrap();
        let want = [1.0, 2.0, 3.0];
        for (got, want) in r.eigenvalues.iter().zip(want) {
            assert!((got - want).abs() < 1e-10);
        }
        // axis eigenvectors, canonical sign makes them +e_i
        let axes = [1usize, 2, 0]; // eigenvalue 1 -> axis 1, 2 -> axis 2, 3 -> axis 0
        for (col, &axis) in axes.iter().enumerate() {
            for i in 0..3 {
                let want = if i == axis { 1.0 } else { 0.0 };
                assert!((r.eigenvectors.get(i, col) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn eig_known_2x2() {
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let r = symmetric_eig(&a).unwrap();
        assert!((r.eigenvalues[0] + 1.0).abs() < 1e-12);
        assert!((r.eigenvalues[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        match symmetric_eig(&a) {
            Err(Error::Contract(_)) => {}
            other => panic!("expected Contract, got {other:?}"),
        }
    }

    fn assert_orthonormal(v: &Matrix, tol: f64) {
        for a in 0..v.cols() {
            for b in a..v.cols() {
                let mut s = 0.0;
                for i in 0..v.rows() {
                    s += v.get(i, a) * v.get(i, b);
                }
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((s - want).abs() <= tol, "VtV[{a}][{b}] = {s} (want {want})");
            }
        }
    }

    #[test]
    fn eig_reconstructs_random_symmetric() {
        for seed in [1u64, 2, 3] {
            let a = random_symmetric(10, seed);
            let r = symmetric_eig(&a).unwrap();
            assert_orthonormal(&r.eigenvectors, 1e-8);
            // a = V diag(l) V^T
            let n = 10;
            for i in 0..n {
                for j in 0..n {
                    let mut s = 0.0;
                    for k in 0..n {
                        s += r.eigenvectors.get(i, k) * r.eigenvalues[k] * r.eigenvectors.get(j, k);
                    }
                    assert!(
                        (s - a.get(i, j)).abs() <= 1e-8,
                        "reconstruction off at ({i},{j}): {s} vs {}",
                        a.get(i, j)
                    );
                }
            }
            // residual form of the contract
            let bound = 1e-8 * (1.0 + a.max_abs());
            for k in 0..n {
                for i in 0..n {
                    let mut av = 0.0;
                    for j in 0..n {
                        av += a.get(i, j) * r.eigenvectors.get(j, k);
                    }
                    let res = (av - r.eigenvalues[k] * r.eigenvectors.get(i, k)).abs();
                    assert!(res <= bound);
                }
            }
        }
    }

    #[test]
    fn eig_deterministic() {
        let a = random_symmetric(8, 99);
        let r1 = symmetric_eig(&a).unwrap();
        let r2 = symmetric_eig(&a).unwrap();
        assert_eq!(r1.eigenvalues, r2.eigenvalues);
        assert_eq!(r1.eigenvectors, r2.eigenvectors);
    }

    #[test]
    fn partial_eig_matches_full() {
        let a = random_symmetric(40, 5);
        let full = symmetric_eig(&a).unwrap();
        let part = symmetric_eig_smallest(&a, 7).unwrap();
        for j in 0..7 {
            assert!(
                (full.eigenvalues[j] - part.eigenvalues[j]).abs() <= 1e-9 * (1.0 + a.max_abs()),
                "eigenvalue {j}: {} vs {}",
                full.eigenvalues[j],
                part.eigenvalues[j]
            );
        }
        assert_orthonormal(&part.eigenvectors, 1e-8);
        let bound = 1e-8 * (1.0 + a.max_abs());
        for k in 0..7 {
            for i in 0..40 {
                let mut av = 0.0;
                for j in 0..40 {
                    av += a.get(i, j) * part.eigenvectors.get(j, k);
                }
                let res = (av - part.eigenvalues[k] * part.eigenvectors.get(i, k)).abs();
                assert!(res <= bound, "residual {res} at vector {k}");
            }
        }
    }

    #[test]
    fn partial_eig_handles_degenerate_spectrum() {
        // two exactly repeated eigenvalues via a block design
        let mut a = Matrix::zeros(6, 6);
        for (i, v) in [2.0, 2.0, 5.0, 5.0, 9.0, 11.0].iter().enumerate() {
            a.set(i, i, *v);
        }
        // rotate so eigenvectors are not axis-aligned
        let g = random_symmetric(6, 77);
        let rot = symmetric_eig(&g).unwrap().eigenvectors;
        let ar = matmul_nn(&matmul_nn(&rot, &a), &rot.transpose());
        // symmetrize exactly against rounding
        let mut sym = Matrix::zeros(6, 6);
        for i in 0..6 {
            for j in 0..6 {
                sym.set(i, j, 0.5 * (ar.get(i, j) + ar.get(j, i)));
            }
        }
        let part = symmetric_eig_smallest(&sym, 4).unwrap();
        assert_orthonormal(&part.eigenvectors, 1e-8);
        let bound = 1e-8 * (1.0 + sym.max_abs());
        for k in 0..4 {
            for i in 0..6 {
                let mut av = 0.0;
                for j in 0..6 {
                    av += sym.get(i, j) * part.eigenvectors.get(j, k);
                }
                let res = (av - part.eigenvalues[k] * part.eigenvectors.get(i, k)).abs();
                assert!(res <= bound);
            }
        }
    }

    #[test]
    fn partial_eig_near_null_space() {
        // LLE-style: a PSD matrix with an exact null vector (the constant)
        let n = 12;
        let mut iw = Matrix::identity(n);
        // each row subtracts the mean of two "neighbors": rows sum to zero
        for i in 0..n {
            let j = (i + 1) % n;
            let k = (i + 2) % n;
            iw.set(i, j, iw.get(i, j) - 0.5);
            iw.set(i, k, iw.get(i, k) - 0.5);
        }
        let m = matmul_tn(&iw, &iw);
        let part = symmetric_eig_smallest(&m, 4).unwrap();
        assert!(part.eigenvalues[0].abs() < 1e-10);
        assert_orthonormal(&part.eigenvectors, 1e-8);
        // bottom eigenvector is the constant vector (normalized)
        let c = part.eigenvectors.get(0, 0);
        for i in 1..n {
            assert!((part.eigenvectors.get(i, 0) - c).abs() < 1e-7);
        }
    }
}
