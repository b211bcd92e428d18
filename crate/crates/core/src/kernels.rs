//! Small numeric kernels: plane rotations, the per-pair angle problem,
//! SVD and basis completion, and the 2x2 pencil eigenvalue classifier.

use serde::{Deserialize, Serialize};

use crate::error::KernelError;
use crate::tensor::Matrix;

/// Default relative tolerance for the repeated-eigenvalue band.
pub const PENCIL_TOL: f64 = 1e-10;

/// Derivative of `f(a) = |x~|^2` where `[x~ y~] = [x y] R(a)`, which equals
/// `2 x~^T y~`.
pub fn rotation_derivative(x: &[f64], y: &[f64], alpha: f64) -> Result<f64, KernelError> {
    if x.len() != y.len() {
        return Err(KernelError::Length(x.len(), y.len()));
    }
    let (s, c) = alpha.sin_cos();
    let dot: f64 = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| (c * xi + s * yi) * (-s * xi + c * yi))
        .sum();
    Ok(2.0 * dot)
}

/// Objective restricted to one plane rotation:
/// `f(a) = A cos^2 a + 2 B sin a cos a + C sin^2 a`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AngleQuadratic {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl AngleQuadratic {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        AngleQuadratic { a, b, c }
    }

    pub fn eval(&self, alpha: f64) -> f64 {
        let (s, c) = alpha.sin_cos();
        self.a * c * c + 2.0 * self.b * s * c + self.c * s * s
    }

    /// `f'(a) = (C - A) sin 2a + 2 B cos 2a`.
    pub fn derivative(&self, alpha: f64) -> f64 {
        let (s2, c2) = (2.0 * alpha).sin_cos();
        (self.c - self.a) * s2 + 2.0 * self.b * c2
    }

    /// Global maximizer on `(-pi/2, pi/2]`.
    pub fn optimal_angle(&self) -> f64 {
        optimal_angle(*self)
    }
}

/// `a* = atan2(2B, A - C) / 2`; `A = C, B = 0` gives 0.
pub fn optimal_angle(q: AngleQuadratic) -> f64 {
    0.5 * (2.0 * q.b).atan2(q.a - q.c)
}

/// Which index of a matrix a rotation mixes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Rows,
    Cols,
}

/// Rotates rows (or columns) `i` and `j` in place:
/// `v_i <- c v_i + s v_j`, `v_j <- -s v_i + c v_j`.
pub fn apply_givens(m: &mut Matrix, side: Side, i: usize, j: usize, alpha: f64) -> Result<(), KernelError> {
    let n = match side {
        Side::Rows => m.nrows(),
        Side::Cols => m.ncols(),
    };
    if i == j || i >= n || j >= n {
        return Err(KernelError::Indices { i, j, n });
    }
    let (s, c) = alpha.sin_cos();
    match side {
        Side::Rows => {
            for col in 0..m.ncols() {
                let (x, y) = (m[(i, col)], m[(j, col)]);
                m[(i, col)] = c * x + s * y;
                m[(j, col)] = -s * x + c * y;
            }
        }
        Side::Cols => {
            for row in 0..m.nrows() {
                let (x, y) = (m[(row, i)], m[(row, j)]);
                m[(row, i)] = c * x + s * y;
                m[(row, j)] = -s * x + c * y;
            }
        }
    }
    Ok(())
}

/// Thin SVD `M = left * diag(singular_values) * right^T`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub left: Matrix,
    pub singular_values: Vec<f64>,
    pub right: Matrix,
}

/// Thin SVD with singular values sorted descending and each left singular
/// vector's first non-negligible entry made positive (the matching right
/// vector flips with it).
pub fn svd(m: &Matrix) -> Svd {
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Svd {
            left: Matrix::zeros(rows, 0),
            singular_values: Vec::new(),
            right: Matrix::zeros(cols, 0),
        };
    }
    let dec = m.clone().svd(true, true);
    let u = dec.u.expect("left singular vectors requested");
    let vt = dec.v_t.expect("right singular vectors requested");
    let sv = dec.singular_values;
    let mut order: Vec<usize> = (0..k).collect();
    // stable: equal values keep nalgebra's order
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));

    let mut left = Matrix::zeros(rows, k);
    let mut right = Matrix::zeros(cols, k);
    let mut values = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let mut lc = u.column(src).clone_owned();
        let mut rc = vt.row(src).transpose();
        let pivot = lc.iter().copied().find(|v| v.abs() > 1e-12).unwrap_or(0.0);
        if pivot < 0.0 {
            lc.neg_mut();
            rc.neg_mut();
        }
        left.set_column(dst, &lc);
        right.set_column(dst, &rc);
        values.push(sv[src].max(0.0));
    }
    Svd {
        left,
        singular_values: values,
        right,
    }
}

/// Leading `r` left singular vectors of `m`.
pub fn leading_left_singular_vectors(m: &Matrix, r: usize) -> Matrix {
    let dec = svd(m);
    let have = dec.left.ncols();
    if r <= have {
        return dec.left.columns(0, r).clone_owned();
    }
    // fewer columns than requested (wide-rank deficiency): pad orthonormally
    let mut out = Matrix::zeros(m.nrows(), r);
    out.columns_mut(0, have).copy_from(&dec.left);
    let full = complete_basis(&dec.left);
    out.columns_mut(have, r - have).copy_from(&full.columns(have, r - have));
    out
}

/// Square orthogonal matrix whose leading columns are the (orthonormal)
/// columns of `m`; the trailing columns come from the Householder QR of `m`.
pub fn complete_basis(m: &Matrix) -> Matrix {
    let (n, r) = m.shape();
    let mut a = m.clone();
    let mut q = Matrix::identity(n, n);
    for c in 0..r.min(n) {
        let x = a.view((c, c), (n - c, 1)).clone_owned();
        let alpha = x.norm();
        if alpha == 0.0 {
            continue;
        }
        let sign = if x[0] >= 0.0 { 1.0 } else { -1.0 };
        let mut v = x;
        v[0] += sign * alpha;
        let vn = v.norm_squared();
        if vn == 0.0 {
            continue;
        }
        // A <- H A on rows c.., Q <- Q H on columns c..
        for col in 0..r {
            let mut d = 0.0;
            for t in 0..n - c {
                d += v[t] * a[(c + t, col)];
            }
            let f = 2.0 * d / vn;
            for t in 0..n - c {
                a[(c + t, col)] -= f * v[t];
            }
        }
        for row in 0..n {
            let mut d = 0.0;
            for t in 0..n - c {
                d += q[(row, c + t)] * v[t];
            }
            let f = 2.0 * d / vn;
            for t in 0..n - c {
                q[(row, c + t)] -= f * v[t];
            }
        }
    }
    q.columns_mut(0, r).copy_from(m);
    q
}

/// Largest eigenvalue of a symmetric matrix.
pub fn sym_max_eigenvalue(m: &Matrix) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Generalized eigenvalue structure of the pencil `X2 - l X1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PencilClass {
    RealDistinct,
    RealRepeated { independent_eigvecs: u8 },
    ComplexPair,
    DegeneratePencil,
}

/// Coefficients of `det(u X1 + v X2) = c u^2 + b u v + a v^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PencilQuadratic {
    /// `det(X2)`
    pub a: f64,
    pub b: f64,
    /// `det(X1)`
    pub c: f64,
}

pub fn det2(m: &[[f64; 2]; 2]) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

impl PencilQuadratic {
    pub fn new(x1: &[[f64; 2]; 2], x2: &[[f64; 2]; 2]) -> Self {
        let a = det2(x2);
        let c = det2(x1);
        // mixed term of det(X1 + t X2), expanded to avoid cancellation
        let b = x1[0][0] * x2[1][1] + x2[0][0] * x1[1][1] - x1[0][1] * x2[1][0] - x2[0][1] * x1[1][0];
        PencilQuadratic { a, b, c }
    }

    pub fn discriminant(&self) -> f64 {
        self.b * self.b - 4.0 * self.a * self.c
    }
}

fn sq_norm2(m: &[[f64; 2]; 2]) -> f64 {
    m.iter().flatten().map(|v| v * v).sum()
}

/// Classifies the pencil through the discriminant of `det(u X1 + v X2)`,
/// never inverting either slice. The repeated band is `|D| <= rel_tol * s`
/// with `s = (|X1|^2 + |X2|^2)^2`.
pub fn eig_class_2x2_pencil(x1: &[[f64; 2]; 2], x2: &[[f64; 2]; 2], rel_tol: f64) -> PencilClass {
    let scale2 = sq_norm2(x1) + sq_norm2(x2);
    if scale2 == 0.0 {
        return PencilClass::DegeneratePencil;
    }
    let s = scale2 * scale2;
    let q = PencilQuadratic::new(x1, x2);
    let band = rel_tol * scale2;
    if q.a.abs() <= band && q.b.abs() <= band && q.c.abs() <= band {
        return PencilClass::DegeneratePencil;
    }
    let disc = q.discriminant();
    if disc > rel_tol * s {
        return PencilClass::RealDistinct;
    }
    if disc < -rel_tol * s {
        return PencilClass::ComplexPair;
    }
    // double root (u : v) of the binary quadratic
    let (u, v) = if q.c.abs() >= q.a.abs() {
        (-q.b / (2.0 * q.c), 1.0)
    } else {
        (1.0, -q.b / (2.0 * q.a))
    };
    let n = (u * u + v * v).sqrt();
    let (u, v) = (u / n, v / n);
    let mut m_sq = 0.0;
    for r in 0..2 {
        for c in 0..2 {
            let e = u * x1[r][c] + v * x2[r][c];
            m_sq += e * e;
        }
    }
    // rank-0 test on the linear scale of the entries
    let independent_eigvecs = if m_sq.sqrt() <= rel_tol.powf(0.25) * scale2.sqrt() {
        2
    } else {
        1
    };
    PencilClass::RealRepeated { independent_eigvecs }
}
