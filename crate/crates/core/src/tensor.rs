//! Dense real order-3 tensors, factor triples and the multilinear algebra
//! shared by every other module.
//!
//! Entries are stored flat with the first index slowest and the third index
//! fastest, so entry `(i, j, k)` (0-based) lives at `(i * J + j) * K + k`.
//! That layout is also the on-disk layout of the JSON tensor format.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::kernels::svd;

/// Dense real matrix used for factors and unfoldings.
pub type Matrix = DMatrix<f64>;

/// Default orthonormality tolerance for [`FactorTriple`].
pub const ORTHO_TOL: f64 = 1e-10;

/// Default relative threshold for numerical multilinear rank.
pub const MRANK_TOL: f64 = 1e-8;

/// One of the three tensor modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    One,
    Two,
    Three,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::One, Mode::Two, Mode::Three];

    /// Zero-based axis index.
    pub fn axis(self) -> usize {
        match self {
            Mode::One => 0,
            Mode::Two => 1,
            Mode::Three => 2,
        }
    }

    pub fn from_axis(axis: usize) -> Option<Mode> {
        match axis {
            0 => Some(Mode::One),
            1 => Some(Mode::Two),
            2 => Some(Mode::Three),
            _ => None,
        }
    }
}

/// Dense real `I x J x K` array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor3 {
    type Error = TensorError;

    fn try_from(raw: RawTensor) -> Result<Self, Self::Error> {
        let dims: [usize; 3] = raw
            .dims
            .as_slice()
            .try_into()
            .map_err(|_| TensorError::Order(raw.dims.len()))?;
        Tensor3::new(dims, raw.data)
    }
}

impl From<Tensor3> for RawTensor {
    fn from(t: Tensor3) -> Self {
        RawTensor {
            dims: t.dims.to_vec(),
            data: t.data,
        }
    }
}

impl Tensor3 {
    /// Builds a tensor from flat data; rejects zero dimensions, wrong lengths
    /// and non-finite entries.
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self, TensorError> {
        if dims.contains(&0) {
            return Err(TensorError::ZeroDimension(dims));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(TensorError::Length {
                expected,
                actual: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(pos));
        }
        Ok(Tensor3 { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "tensor dimensions must be positive");
        Tensor3 {
            dims,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Tensor3::zeros(dims);
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    t.data[(i * dims[1] + j) * dims[2] + k] = f(i, j, k);
                }
            }
        }
        t
    }

    /// Builds a 2x2x2 tensor from its two frontal slices `x1 = Y[:, :, 0]`
    /// and `x2 = Y[:, :, 1]`, each given row-major.
    pub fn from_slices_222(x1: [[f64; 2]; 2], x2: [[f64; 2]; 2]) -> Self {
        Tensor3::from_fn([2, 2, 2], |i, j, k| if k == 0 { x1[i][j] } else { x2[i][j] })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let o = self.offset(i, j, k);
        self.data[o] = v;
    }

    /// Frontal slice `k` as a 2x2 array; requires a 2x2xK tensor.
    pub fn slice_222(&self, k: usize) -> [[f64; 2]; 2] {
        debug_assert!(self.dims[0] == 2 && self.dims[1] == 2);
        [
            [self.get(0, 0, k), self.get(0, 1, k)],
            [self.get(1, 0, k), self.get(1, 1, k)],
        ]
    }

    pub fn scale(&self, c: f64) -> Tensor3 {
        Tensor3 {
            dims: self.dims,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn sub(&self, other: &Tensor3) -> Result<Tensor3, TensorError> {
        self.check_same_dims(other)?;
        Ok(Tensor3 {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn add(&self, other: &Tensor3) -> Result<Tensor3, TensorError> {
        self.check_same_dims(other)?;
        Ok(Tensor3 {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    fn check_same_dims(&self, other: &Tensor3) -> Result<(), TensorError> {
        if self.dims != other.dims {
            return Err(TensorError::DimensionMismatch(format!(
                "{:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Sum of squared entries.
    pub fn fro_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Sum of squared entrywise differences.
    pub fn fro_dist_sq(&self, other: &Tensor3) -> Result<f64, TensorError> {
        self.check_same_dims(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    /// Mode-`mode` product with `m`: the `mode` index is contracted against
    /// the columns of `m`, so that dimension becomes `m.nrows()`.
    pub fn mode_product(&self, mode: Mode, m: &Matrix) -> Result<Tensor3, TensorError> {
        let ax = mode.axis();
        if m.ncols() != self.dims[ax] {
            return Err(TensorError::DimensionMismatch(format!(
                "mode-{} product: matrix has {} columns, tensor dimension is {}",
                ax + 1,
                m.ncols(),
                self.dims[ax]
            )));
        }
        let mut dims = self.dims;
        dims[ax] = m.nrows();
        let [di, dj, dk] = self.dims;
        let mut out = Tensor3::zeros(dims);
        match mode {
            Mode::One => {
                for p in 0..dims[0] {
                    for i in 0..di {
                        let c = m[(p, i)];
                        if c == 0.0 {
                            continue;
                        }
                        let src = &self.data[i * dj * dk..(i + 1) * dj * dk];
                        let dst = &mut out.data[p * dj * dk..(p + 1) * dj * dk];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += c * s;
                        }
                    }
                }
            }
            Mode::Two => {
                for i in 0..di {
                    for q in 0..dims[1] {
                        for j in 0..dj {
                            let c = m[(q, j)];
                            if c == 0.0 {
                                continue;
                            }
                            let src = (i * dj + j) * dk;
                            let dst = (i * dims[1] + q) * dk;
                            for k in 0..dk {
                                out.data[dst + k] += c * self.data[src + k];
                            }
                        }
                    }
                }
            }
            Mode::Three => {
                for ij in 0..di * dj {
                    let src = &self.data[ij * dk..(ij + 1) * dk];
                    for r in 0..dims[2] {
                        let mut acc = 0.0;
                        for (k, s) in src.iter().enumerate() {
                            acc += m[(r, k)] * s;
                        }
                        out.data[ij * dims[2] + r] = acc;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Mode-`mode` unfolding. Column orderings: mode 1 uses `j * K + k`,
    /// mode 2 uses `i * K + k`, mode 3 uses `i * J + j`.
    pub fn unfold(&self, mode: Mode) -> Matrix {
        let [di, dj, dk] = self.dims;
        match mode {
            Mode::One => Matrix::from_fn(di, dj * dk, |i, c| self.get(i, c / dk, c % dk)),
            Mode::Two => Matrix::from_fn(dj, di * dk, |j, c| self.get(c / dk, j, c % dk)),
            Mode::Three => Matrix::from_fn(dk, di * dj, |k, c| self.get(c / dj, c % dj, k)),
        }
    }

    /// Inverse of [`Tensor3::unfold`].
    pub fn fold(m: &Matrix, mode: Mode, dims: [usize; 3]) -> Result<Tensor3, TensorError> {
        let [di, dj, dk] = dims;
        let (rows, cols) = match mode {
            Mode::One => (di, dj * dk),
            Mode::Two => (dj, di * dk),
            Mode::Three => (dk, di * dj),
        };
        if m.shape() != (rows, cols) {
            return Err(TensorError::DimensionMismatch(format!(
                "cannot fold {:?} into {:?} along mode {}",
                m.shape(),
                dims,
                mode.axis() + 1
            )));
        }
        let t = match mode {
            Mode::One => Tensor3::from_fn(dims, |i, j, k| m[(i, j * dk + k)]),
            Mode::Two => Tensor3::from_fn(dims, |i, j, k| m[(j, i * dk + k)]),
            Mode::Three => Tensor3::from_fn(dims, |i, j, k| m[(k, i * dj + j)]),
        };
        Ok(t)
    }

    /// Numerical multilinear rank: per mode, the count of unfolding singular
    /// values above `rel_tol` times the largest one.
    pub fn mrank(&self, rel_tol: f64) -> [usize; 3] {
        let mut out = [0; 3];
        for mode in Mode::ALL {
            let sv = svd(&self.unfold(mode)).singular_values;
            let top = sv.first().copied().unwrap_or(0.0);
            if top > 0.0 {
                out[mode.axis()] = sv.iter().filter(|&&s| s > rel_tol * top).count();
            }
        }
        out
    }

    /// Standard-normal entries from a seeded ChaCha stream.
    pub fn random_gaussian(dims: [usize; 3], seed: u64) -> Tensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor3::zeros(dims);
        for v in t.data.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        t
    }
}

/// `(S, T, U) . G`: `y_ijk = sum_pqr s_ip t_jq u_kr g_pqr`.
pub fn multilinear_transform(s: &Matrix, t: &Matrix, u: &Matrix, g: &Tensor3) -> Result<Tensor3, TensorError> {
    g.mode_product(Mode::One, s)?
        .mode_product(Mode::Two, t)?
        .mode_product(Mode::Three, u)
}

/// `n x r` matrix with orthonormal columns, obtained by Gram-Schmidt (twice)
/// on a seeded Gaussian matrix. Matches a QR factorization with positive
/// diagonal in `R`.
pub fn random_orthonormal(n: usize, r: usize, seed: u64) -> Result<Matrix, TensorError> {
    if r > n {
        return Err(TensorError::Rank { rank: r, dim: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::from_fn(n, r, |_, _| StandardNormal.sample(&mut rng));
    orthonormalize_columns(&mut m);
    Ok(m)
}

/// Modified Gram-Schmidt with one reorthogonalization pass. Columns that
/// collapse numerically are replaced by the first unused coordinate axis
/// orthogonal to the previous ones.
pub(crate) fn orthonormalize_columns(m: &mut Matrix) {
    let (n, r) = m.shape();
    for c in 0..r {
        for _ in 0..2 {
            for p in 0..c {
                let d = m.column(p).dot(&m.column(c));
                let prev = m.column(p).clone_owned();
                m.column_mut(c).axpy(-d, &prev, 1.0);
            }
        }
        let nrm = m.column(c).norm();
        if nrm > 1e-12 {
            m.column_mut(c).scale_mut(1.0 / nrm);
            continue;
        }
        for axis in 0..n {
            let mut e = nalgebra::DVector::zeros(n);
            e[axis] = 1.0;
            for p in 0..c {
                let d = m.column(p).dot(&e);
                e.axpy(-d, &m.column(p).clone_owned(), 1.0);
            }
            let en = e.norm();
            if en > 1e-6 {
                m.set_column(c, &(e / en));
                break;
            }
        }
    }
}

/// Three factors with orthonormal columns: `S` (I x R1), `T` (J x R2),
/// `U` (K x R3).
#[derive(Clone, Debug, PartialEq)]
pub struct FactorTriple {
    pub s: Matrix,
    pub t: Matrix,
    pub u: Matrix,
}

impl FactorTriple {
    /// Validates column orthonormality within [`ORTHO_TOL`].
    pub fn new(s: Matrix, t: Matrix, u: Matrix) -> Result<Self, TensorError> {
        Self::with_tolerance(s, t, u, ORTHO_TOL)
    }

    pub fn with_tolerance(s: Matrix, t: Matrix, u: Matrix, tol: f64) -> Result<Self, TensorError> {
        for (name, m) in [("S", &s), ("T", &t), ("U", &u)] {
            if m.ncols() > m.nrows() {
                return Err(TensorError::Rank {
                    rank: m.ncols(),
                    dim: m.nrows(),
                });
            }
            let gram = m.transpose() * m;
            let dev = (gram - Matrix::identity(m.ncols(), m.ncols())).amax();
            if dev > tol {
                return Err(TensorError::NotOrthonormal {
                    factor: name,
                    deviation: dev,
                });
            }
        }
        Ok(FactorTriple { s, t, u })
    }

    /// Row counts `(I, J, K)`.
    pub fn outer_dims(&self) -> [usize; 3] {
        [self.s.nrows(), self.t.nrows(), self.u.nrows()]
    }

    /// Column counts `(R1, R2, R3)`.
    pub fn ranks(&self) -> [usize; 3] {
        [self.s.ncols(), self.t.ncols(), self.u.ncols()]
    }

    pub fn get(&self, mode: Mode) -> &Matrix {
        match mode {
            Mode::One => &self.s,
            Mode::Two => &self.t,
            Mode::Three => &self.u,
        }
    }

    /// `(S^T, T^T, U^T) . Z`.
    pub fn project(&self, z: &Tensor3) -> Result<Tensor3, TensorError> {
        multilinear_transform(&self.s.transpose(), &self.t.transpose(), &self.u.transpose(), z)
    }

    /// `(S, T, U) . G`.
    pub fn expand(&self, g: &Tensor3) -> Result<Tensor3, TensorError> {
        multilinear_transform(&self.s, &self.t, &self.u, g)
    }

    /// Random orthonormal factors for an `(I, J, K)` tensor and the given
    /// ranks. Each factor draws from its own sub-seed.
    pub fn random(dims: [usize; 3], ranks: [usize; 3], seed: u64) -> Result<Self, TensorError> {
        let s = random_orthonormal(dims[0], ranks[0], crate::seeds::mix(seed, 1))?;
        let t = random_orthonormal(dims[1], ranks[1], crate::seeds::mix(seed, 2))?;
        let u = random_orthonormal(dims[2], ranks[2], crate::seeds::mix(seed, 3))?;
        Ok(FactorTriple { s, t, u })
    }
}

impl Serialize for FactorTriple {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let rows =
            |m: &Matrix| -> Vec<Vec<f64>> { (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect() };
        let mut st = serializer.serialize_struct("FactorTriple", 3)?;
        st.serialize_field("s", &rows(&self.s))?;
        st.serialize_field("t", &rows(&self.t))?;
        st.serialize_field("u", &rows(&self.u))?;
        st.end()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rank1(a: &[f64], b: &[f64], c: &[f64]) -> Tensor3 {
        Tensor3::from_fn([a.len(), b.len(), c.len()], |i, j, k| a[i] * b[j] * c[k])
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            Tensor3::new([2, 2, 2], vec![0.0; 7]),
            Err(TensorError::Length { expected: 8, actual: 7 })
        ));
        let mut d = vec![0.0; 8];
        d[3] = f64::NAN;
        assert!(matches!(Tensor3::new([2, 2, 2], d), Err(TensorError::NonFinite(3))));
        assert!(Tensor3::new([0, 2, 2], vec![]).is_err());
    }

    #[test]
    fn flat_layout_is_k_fastest() {
        let t = Tensor3::new([2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        assert_eq!(t.get(1, 2, 3), 23.0);
        assert_eq!(t.get(0, 1, 0), 4.0);
        assert_eq!(t.get(1, 0, 0), 12.0);
    }

    #[test]
    fn unfold_column_orderings() {
        let t = Tensor3::new([2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let m1 = t.unfold(Mode::One);
        assert_eq!(m1.shape(), (2, 12));
        assert_eq!(m1[(1, 2 * 4 + 3)], t.get(1, 2, 3));
        let m2 = t.unfold(Mode::Two);
        assert_eq!(m2.shape(), (3, 8));
        assert_eq!(m2[(2, 4 + 1)], t.get(1, 2, 1));
        let m3 = t.unfold(Mode::Three);
        assert_eq!(m3.shape(), (4, 6));
        assert_eq!(m3[(3, 3 + 2)], t.get(1, 2, 3));
        for mode in Mode::ALL {
            assert_eq!(Tensor3::fold(&t.unfold(mode), mode, t.dims()).unwrap(), t);
        }
    }

    #[test]
    fn rank_one_unfoldings() {
        let t = rank1(&[1.0, -2.0, 0.5], &[3.0, 1.0], &[1.0, 1.0, 2.0, -1.0]);
        assert_eq!(t.mrank(MRANK_TOL), [1, 1, 1]);
    }

    #[test]
    fn generic_mrank() {
        let t = Tensor3::random_gaussian([3, 4, 5], 11);
        assert_eq!(t.mrank(MRANK_TOL), [3, 4, 5]);
        assert_eq!(Tensor3::zeros([2, 3, 2]).mrank(MRANK_TOL), [0, 0, 0]);
    }

    #[test]
    fn identity_transform() {
        let g = Tensor3::random_gaussian([2, 2, 2], 5);
        let id = Matrix::identity(2, 2);
        assert_eq!(multilinear_transform(&id, &id, &id, &g).unwrap(), g);
    }

    #[test]
    fn transform_rejects_mismatch() {
        let g = Tensor3::random_gaussian([2, 2, 2], 5);
        let bad = Matrix::identity(3, 3);
        let id = Matrix::identity(2, 2);
        assert!(matches!(
            multilinear_transform(&bad, &id, &id, &g),
            Err(TensorError::DimensionMismatch(_))
        ));
        assert!(g.fro_dist_sq(&Tensor3::zeros([2, 2, 3])).is_err());
    }

    #[test]
    fn transform_matches_direct_sum() {
        let g = Tensor3::random_gaussian([2, 3, 2], 1);
        let s = Matrix::from_fn(4, 2, |i, p| (i as f64 + 1.0) * 0.3 - p as f64);
        let t = Matrix::from_fn(3, 3, |i, p| ((i * 3 + p) as f64).sin());
        let u = Matrix::from_fn(5, 2, |i, p| ((i + 2 * p) as f64).cos());
        let y = multilinear_transform(&s, &t, &u, &g).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                for k in 0..5 {
                    let mut acc = 0.0;
                    for p in 0..2 {
                        for q in 0..3 {
                            for r in 0..2 {
                                acc += s[(i, p)] * t[(j, q)] * u[(k, r)] * g.get(p, q, r);
                            }
                        }
                    }
                    assert!((acc - y.get(i, j, k)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn transform_composes() {
        for seed in 0..20u64 {
            let g = Tensor3::random_gaussian([2, 3, 2], seed);
            let draw = |r: usize, c: usize, tag: u64| {
                let t = Tensor3::random_gaussian([r, c, 1], seed * 16 + tag);
                Matrix::from_fn(r, c, |i, j| t.get(i, j, 0))
            };
            let (s1, s2) = (draw(4, 3, 1), draw(3, 2, 2));
            let (t1, t2) = (draw(2, 4, 3), draw(4, 3, 4));
            let (u1, u2) = (draw(3, 2, 5), draw(2, 2, 6));
            let once = multilinear_transform(&(&s1 * &s2), &(&t1 * &t2), &(&u1 * &u2), &g).unwrap();
            let inner = multilinear_transform(&s2, &t2, &u2, &g).unwrap();
            let twice = multilinear_transform(&s1, &t1, &u1, &inner).unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                assert!((a - b).abs() <= 1e-12, "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn seeded_draws_are_deterministic() {
        assert_eq!(
            Tensor3::random_gaussian([3, 3, 3], 42),
            Tensor3::random_gaussian([3, 3, 3], 42)
        );
        assert_eq!(
            random_orthonormal(5, 2, 9).unwrap(),
            random_orthonormal(5, 2, 9).unwrap()
        );
        assert_ne!(
            Tensor3::random_gaussian([3, 3, 3], 42),
            Tensor3::random_gaussian([3, 3, 3], 43)
        );
    }

    #[test]
    fn orthonormal_columns() {
        let q = random_orthonormal(5, 2, 3).unwrap();
        let gram = q.transpose() * &q;
        assert!((gram - Matrix::identity(2, 2)).amax() < 1e-12);
        assert!(matches!(random_orthonormal(2, 3, 0), Err(TensorError::Rank { .. })));
    }

    #[test]
    fn gaussian_moments() {
        let t = Tensor3::random_gaussian([50, 40, 50], 2024);
        let n = t.data().len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn factor_triple_validation() {
        let q = random_orthonormal(4, 2, 1).unwrap();
        assert!(FactorTriple::new(q.clone(), q.clone(), q.clone()).is_ok());
        let bad = q.clone() * 2.0;
        assert!(matches!(
            FactorTriple::new(bad, q.clone(), q),
            Err(TensorError::NotOrthonormal { factor: "S", .. })
        ));
    }

    #[test]
    fn json_round_trip_and_length_check() {
        let t = Tensor3::random_gaussian([2, 3, 2], 8);
        let s = serde_json::to_string(&t).unwrap();
        let back: Tensor3 = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
        assert!(serde_json::from_str::<Tensor3>(r#"{"dims":[2,2,2],"data":[1,2,3]}"#).is_err());
        assert!(serde_json::from_str::<Tensor3>(r#"{"dims":[2,2],"data":[1,2,3,4]}"#).is_err());
    }
}
