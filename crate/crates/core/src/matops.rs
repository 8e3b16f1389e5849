//! Small dense matrix kernel.
//!
//! Everything here works on square, row-major [`Matrix`] values of dimension
//! at most [`MAX_DIM`]. The routines are the ones needed to certify the
//! triangular time-delay plant: companion-form construction, the Lyapunov
//! equation `AᵀP + PA = -I`, symmetric eigenvalue bounds, a Hurwitz test and
//! the diagonal θ-scaling matrix.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 16;

/// Eigenvalues with real part at or above `-HURWITZ_MARGIN` count as unstable.
pub const HURWITZ_MARGIN: f64 = 1e-9;

const JACOBI_TOL: f64 = 1e-14;
const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Result<Self> {
        check_dim(n)?;
        Ok(Matrix {
            n,
            data: vec![0.0; n * n],
        })
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Self::zeros(n)?;
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        Ok(m)
    }

    pub fn diag(entries: &[f64]) -> Result<Self> {
        let mut m = Self::zeros(entries.len())?;
        for (i, &v) in entries.iter().enumerate() {
            m[(i, i)] = v;
        }
        m.check_finite()?;
        Ok(m)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        check_dim(n)?;
        let mut data = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != n {
                return Err(Error::Config(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        let m = Matrix { n, data };
        m.check_finite()?;
        Ok(m)
    }

    fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("matrix has non-finite entries".into()))
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn transpose(&self) -> Matrix {
        let n = self.n;
        let mut t = self.clone();
        for i in 0..n {
            for j in 0..n {
                t[(i, j)] = self[(j, i)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.n, other.n, "dimension mismatch");
        let n = self.n;
        let mut out = Matrix {
            n,
            data: vec![0.0; n * n],
        };
        for i in 0..n {
            for k in 0..n {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.n, v.len(), "dimension mismatch");
        (0..self.n)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.n, other.n, "dimension mismatch");
        Matrix {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            n: self.n,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    /// `A + LC` for a column `l` and a row `c`.
    pub fn add_outer(&self, col: &[f64], row: &[f64]) -> Matrix {
        assert!(col.len() == self.n && row.len() == self.n, "dimension mismatch");
        let mut out = self.clone();
        for i in 0..self.n {
            for j in 0..self.n {
                out[(i, j)] += col[i] * row[j];
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest `|M_ij - M_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.max_abs();
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for j in i + 1..self.n {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst / scale
    }

    pub fn symmetrized(&self) -> Matrix {
        self.add(&self.transpose()).scale(0.5)
    }

    /// Quadratic form `vᵀ M v`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        v.iter().zip(self.mul_vec(v)).map(|(a, b)| a * b).sum()
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.n + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<&[f64]> = (0..self.n).map(|i| self.row(i)).collect();
        f.debug_list().entries(rows).finish()
    }
}

fn check_dim(n: usize) -> Result<()> {
    if (1..=MAX_DIM).contains(&n) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "dimension {n} outside supported range 1..={MAX_DIM}"
        )))
    }
}

/// Chain-of-integrators triple `(A, B, C)`: ones on the superdiagonal of `A`,
/// `B = e_n`, `C = e_1ᵀ`.
pub fn build_companion(n: usize) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    let mut a = Matrix::zeros(n)?;
    for i in 0..n - 1 {
        a[(i, i + 1)] = 1.0;
    }
    let mut b = vec![0.0; n];
    b[n - 1] = 1.0;
    let mut c = vec![0.0; n];
    c[0] = 1.0;
    Ok((a, b, c))
}

#[derive(Debug, Clone)]
pub struct LyapunovCertificate {
    pub solution: Matrix,
    /// `‖AᵀP + PA + I‖_F`
    pub residual: f64,
    pub spectral_norm: f64,
    pub min_eig: f64,
}

/// Frobenius norm of `AᵀX + XA + I`.
pub fn lyapunov_residual(a: &Matrix, x: &Matrix) -> f64 {
    let n = a.dim();
    let mut r = a.transpose().matmul(x).add(&x.matmul(a));
    for i in 0..n {
        r[(i, i)] += 1.0;
    }
    r.frobenius_norm()
}

/// Solves `AᵀP + PA = -I` through the n²×n² Kronecker system.
pub fn solve_lyapunov(a: &Matrix) -> Result<LyapunovCertificate> {
    let n = a.dim();
    let size = n * n;
    // Unknown P[k][l] sits at column k*n + l; equation (i, j) at row i*n + j.
    let mut sys = vec![0.0; size * size];
    let mut rhs = vec![0.0; size];
    for i in 0..n {
        for j in 0..n {
            let row = i * n + j;
            for k in 0..n {
                // (AᵀP)_ij = Σ_k A_ki P_kj
                sys[row * size + k * n + j] += a[(k, i)];
                // (PA)_ij = Σ_k P_ik A_kj
                sys[row * size + i * n + k] += a[(k, j)];
            }
            if i == j {
                rhs[row] = -1.0;
            }
        }
    }
    let vec_p = solve_dense(&mut sys, &mut rhs, size)
        .ok_or_else(|| Error::NotHurwitz("Lyapunov system is singular".into()))?;

    let mut p = Matrix::zeros(n)?;
    for i in 0..n {
        for j in 0..n {
            p[(i, j)] = vec_p[i * n + j];
        }
    }
    let p = p.symmetrized();
    if !p.data.iter().all(|v| v.is_finite()) {
        return Err(Error::NotHurwitz("Lyapunov solution is not finite".into()));
    }
    let eig = symmetric_eigenvalues(&p);
    let min_eig = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let max_abs = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if min_eig <= 0.0 {
        return Err(Error::NotHurwitz(format!(
            "Lyapunov solution is not positive definite (min eigenvalue {min_eig:e})"
        )));
    }
    Ok(LyapunovCertificate {
        residual: lyapunov_residual(a, &p),
        solution: p,
        spectral_norm: max_abs,
        min_eig,
    })
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_dense(m: &mut [f64], b: &mut [f64], size: usize) -> Option<Vec<f64>> {
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    let tiny = scale * f64::EPSILON * size as f64;
    for col in 0..size {
        let (piv, piv_abs) = (col..size)
            .map(|r| (r, m[r * size + col].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if piv_abs <= tiny {
            return None;
        }
        if piv != col {
            for k in 0..size {
                m.swap(col * size + k, piv * size + k);
            }
            b.swap(col, piv);
        }
        let d = m[col * size + col];
        for r in col + 1..size {
            let factor = m[r * size + col] / d;
            if factor == 0.0 {
                continue;
            }
            for k in col..size {
                m[r * size + k] -= factor * m[col * size + k];
            }
            b[r] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; size];
    for r in (0..size).rev() {
        let s: f64 = (r + 1..size).map(|k| m[r * size + k] * x[k]).sum();
        x[r] = (b[r] - s) / m[r * size + r];
    }
    Some(x)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
    let n = m.dim();
    let mut a = m.symmetrized();
    let total = a.frobenius_norm();
    if total == 0.0 {
        return vec![0.0; n];
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * total {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(f64::total_cmp);
    eig
}

/// Largest `|λ|` of a symmetric matrix; closed form for 2×2, Jacobi otherwise.
pub fn spectral_norm_sym(m: &Matrix) -> Result<f64> {
    if m.asymmetry() > SYMMETRY_TOL {
        return Err(Error::ContractViolation(format!(
            "matrix is not symmetric (relative asymmetry {:e})",
            m.asymmetry()
        )));
    }
    Ok(match m.dim() {
        1 => m[(0, 0)].abs(),
        2 => {
            let (a, b, d) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
            let mid = 0.5 * (a + d);
            let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
            (mid + rad).abs().max((mid - rad).abs())
        }
        _ => symmetric_eigenvalues(m)
            .into_iter()
            .fold(0.0, |acc: f64, v| acc.max(v.abs())),
    })
}

/// Coefficients `[1, c_1, …, c_n]` of `det(λI - A) = λⁿ + c_1 λⁿ⁻¹ + … + c_n`
/// by the Faddeev–LeVerrier recursion.
pub fn characteristic_polynomial(a: &Matrix) -> Vec<f64> {
    let n = a.dim();
    let ident = Matrix::identity(n).expect("dimension already validated");
    let mut coeffs = vec![1.0];
    let mut m = Matrix {
        n,
        data: vec![0.0; n * n],
    };
    for k in 1..=n {
        m = a.matmul(&m).add(&ident.scale(coeffs[k - 1]));
        let c = -a.matmul(&m).trace() / k as f64;
        coeffs.push(c);
    }
    coeffs
}

/// Routh–Hurwitz test on a monic polynomial; any non-positive first-column
/// entry (including an exact zero) fails.
pub fn routh_hurwitz(coeffs: &[f64]) -> bool {
    let degree = coeffs.len() - 1;
    if coeffs.iter().any(|c| !c.is_finite()) {
        return false;
    }
    if degree == 0 {
        return true;
    }
    let width = degree / 2 + 1;
    let row = |start: usize| -> Vec<f64> {
        (0..width)
            .map(|j| coeffs.get(start + 2 * j).copied().unwrap_or(0.0))
            .collect()
    };
    let mut prev = row(0);
    let mut cur = row(1);
    if prev[0] <= 0.0 || cur[0] <= 0.0 {
        return false;
    }
    for _ in 2..=degree {
        let next: Vec<f64> = (0..width)
            .map(|j| {
                let p1 = prev.get(j + 1).copied().unwrap_or(0.0);
                let c1 = cur.get(j + 1).copied().unwrap_or(0.0);
                (cur[0] * p1 - prev[0] * c1) / cur[0]
            })
            .collect();
        if next[0] <= 0.0 {
            return false;
        }
        prev = cur;
        cur = next;
    }
    true
}

/// True iff every eigenvalue of `a` has real part below `-HURWITZ_MARGIN`.
pub fn is_hurwitz(a: &Matrix) -> bool {
    if !a.data.iter().all(|v| v.is_finite()) {
        return false;
    }
    let n = a.dim();
    let mut shifted = a.clone();
    for i in 0..n {
        shifted[(i, i)] += HURWITZ_MARGIN;
    }
    routh_hurwitz(&characteristic_polynomial(&shifted))
}

/// `Δθ = diag[1, 1/θ, …, 1/θⁿ⁻¹]`.
pub fn delta_theta(theta: f64, n: usize) -> Result<Matrix> {
    check_theta(theta)?;
    Matrix::diag(&delta_theta_diag(theta, n))
}

pub(crate) fn delta_theta_diag(theta: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| theta.powi(-(i as i32))).collect()
}

pub(crate) fn check_theta(theta: f64) -> Result<()> {
    if theta.is_finite() && theta > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("theta must be positive, got {theta}")))
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
