//! Optimization engines.
//!
//! * [`hooi`]: alternating SVD updates for the best rank-(R1,R2,R3)
//!   approximation (maximizes `|(S^T, T^T, U^T) . Z|^2`).
//! * [`masked_givens`]: Jacobi-style sweeps of plane rotations on the
//!   working tensor `(S~^T, T~^T, U~^T) . Z`, each rotation set to the exact
//!   maximizer of the masked 2x2x2 leading-core norm. The `FULL` mask gives
//!   the rank-(2,2,2) problem, `TRIU` and `ROG` give the closure of the
//!   rank-2 set through upper-triangular cores.
//!
//! Both engines stop when a full iteration lowers the fit by less than
//! `rel_tol` relative *and* the largest rotation derivative, normalized by
//! `|Z|^2`, is at most `10 * rel_tol`.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::kernels::{
    apply_givens, complete_basis, leading_left_singular_vectors, optimal_angle, AngleQuadratic, Side,
};
use crate::tensor::{FactorTriple, Matrix, Mode, Tensor3};

pub const DEFAULT_REL_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 2000;
/// Sweep budget for multistart runs; closure minima near the rank-3
/// boundary converge linearly with a contraction factor close to one.
pub const MULTISTART_MAX_ITER: usize = 20_000;

/// Which entries of the 2x2x2 leading core count toward the objective.
/// Bit `4p + 2q + r` stands for the 0-based position `(p, q, r)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CoreMask(u8);

impl CoreMask {
    pub const FULL: CoreMask = CoreMask(0xFF);
    /// Upper-triangular frontal slices: drops `(2,1,1)` and `(2,1,2)`.
    pub const TRIU: CoreMask = CoreMask(!(1 << 4 | 1 << 5));
    /// `TRIU` with `h112` pinned to zero as well.
    pub const ROG: CoreMask = CoreMask(!(1 << 4 | 1 << 5 | 1 << 1));

    pub fn from_positions(keep: &[(usize, usize, usize)]) -> Self {
        let mut bits = 0u8;
        for &(p, q, r) in keep {
            assert!(p < 2 && q < 2 && r < 2, "mask positions are 0-based within 2x2x2");
            bits |= 1 << (4 * p + 2 * q + r);
        }
        CoreMask(bits)
    }

    #[inline]
    pub fn contains(self, p: usize, q: usize, r: usize) -> bool {
        p < 2 && q < 2 && r < 2 && self.0 & (1 << (4 * p + 2 * q + r)) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset_of(self, other: CoreMask) -> bool {
        self.0 & !other.0 == 0
    }

    /// Whether both frontal slices keep the same positions; if not, mixing
    /// slices 1 and 2 changes the objective and joins the sweep.
    pub fn slice_symmetric(self) -> bool {
        (0..2).all(|p| (0..2).all(|q| self.contains(p, q, 0) == self.contains(p, q, 1)))
    }

    /// Keeps masked entries of a 2x2x2 core and zeroes the rest.
    pub fn apply(self, core: &Tensor3) -> Tensor3 {
        Tensor3::from_fn(
            [2, 2, 2],
            |p, q, r| {
                if self.contains(p, q, r) {
                    core.get(p, q, r)
                } else {
                    0.0
                }
            },
        )
    }

    /// Sum of squares over masked entries of the leading 2x2x2 block.
    pub fn norm_sq(self, w: &Tensor3) -> f64 {
        let mut acc = 0.0;
        for p in 0..2 {
            for q in 0..2 {
                for r in 0..2 {
                    if self.contains(p, q, r) {
                        let v = w.get(p, q, r);
                        acc += v * v;
                    }
                }
            }
        }
        acc
    }
}

/// Approximation problem solved by a multistart run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Problem {
    /// Best rank-(2,2,2) approximation, solved by [`hooi`].
    M222,
    /// Closure of the rank-2 set, triangular cores, [`masked_givens`] with `TRIU`.
    S2barTriu,
    /// Closure of the rank-2 set with `h112 = 0`, [`masked_givens`] with `ROG`.
    S2barRog,
}

impl Problem {
    pub const ALL: [Problem; 3] = [Problem::M222, Problem::S2barTriu, Problem::S2barRog];

    pub fn mask(self) -> CoreMask {
        match self {
            Problem::M222 => CoreMask::FULL,
            Problem::S2barTriu => CoreMask::TRIU,
            Problem::S2barRog => CoreMask::ROG,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Problem::M222 => "m222",
            Problem::S2barTriu => "s2bar-triu",
            Problem::S2barRog => "s2bar-rog",
        }
    }

    pub fn parse(s: &str) -> Option<Problem> {
        Problem::ALL.into_iter().find(|p| p.name() == s)
    }
}

impl std::fmt::Display for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            rel_tol: DEFAULT_REL_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

/// Normalized first-order residuals of the rank-(R1,R2,R3) problem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlrankResiduals {
    pub row: f64,
    pub col: f64,
    pub slice: f64,
}

impl MlrankResiduals {
    pub fn max(&self) -> f64 {
        self.row.max(self.col).max(self.slice)
    }
}

/// Normalized first-order residuals of the closure-of-rank-2 problem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct S2barResiduals {
    pub row: f64,
    pub col: f64,
    pub slice: f64,
    pub row12: f64,
    pub col12: f64,
}

impl S2barResiduals {
    pub fn max(&self) -> f64 {
        self.row.max(self.col).max(self.slice).max(self.row12).max(self.col12)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stationarity {
    Mlrank(MlrankResiduals),
    S2bar(S2barResiduals),
}

impl Stationarity {
    pub fn max(&self) -> f64 {
        match self {
            Stationarity::Mlrank(r) => r.max(),
            Stationarity::S2bar(r) => r.max(),
        }
    }
}

/// Output of one engine run.
#[derive(Clone, Debug, Serialize)]
pub struct LocalMinimum {
    pub problem: Problem,
    pub factors: FactorTriple,
    /// Core with unmasked entries zeroed.
    pub core: Tensor3,
    /// `|Z - X|^2` for the reconstruction `X`.
    pub fit: f64,
    /// Masked core norm squared.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_residual: f64,
    pub stationarity: Stationarity,
    /// Objective after initialization and after every iteration.
    #[serde(skip)]
    pub history: Vec<f64>,
}

impl LocalMinimum {
    /// `X = (S, T, U) . core`.
    pub fn reconstruction(&self) -> Tensor3 {
        self.factors
            .expand(&self.core)
            .expect("factor and core shapes agree by construction")
    }
}

/// Leading singular vectors of the three unfoldings.
pub fn hosvd_init(z: &Tensor3, ranks: [usize; 3]) -> Result<FactorTriple, TensorError> {
    let dims = z.dims();
    for ax in 0..3 {
        if ranks[ax] > dims[ax] || ranks[ax] == 0 {
            return Err(TensorError::Rank {
                rank: ranks[ax],
                dim: dims[ax],
            });
        }
    }
    let f = |mode: Mode| leading_left_singular_vectors(&z.unfold(mode), ranks[mode.axis()]);
    Ok(FactorTriple {
        s: f(Mode::One),
        t: f(Mode::Two),
        u: f(Mode::Three),
    })
}

fn check_init(z: &Tensor3, init: &FactorTriple) -> Result<(), TensorError> {
    if init.outer_dims() != z.dims() {
        return Err(TensorError::DimensionMismatch(format!(
            "factors span {:?}, tensor is {:?}",
            init.outer_dims(),
            z.dims()
        )));
    }
    Ok(())
}

fn stopping_slack(nz: f64) -> f64 {
    f64::EPSILON * nz
}

/// Alternating updates: each factor becomes the leading left singular
/// vectors of the matching unfolding of `Z` projected on the other two.
pub fn hooi(
    z: &Tensor3,
    ranks: [usize; 3],
    init: &FactorTriple,
    cfg: &EngineConfig,
) -> Result<LocalMinimum, TensorError> {
    check_init(z, init)?;
    if init.ranks() != ranks {
        return Err(TensorError::DimensionMismatch(format!(
            "initial factors have ranks {:?}, requested {:?}",
            init.ranks(),
            ranks
        )));
    }
    let nz = z.fro_norm_sq();
    let mut f = init.clone();
    let mut obj = f.project(z)?.fro_norm_sq();
    let mut history = vec![obj];
    let mut converged = false;
    let mut iterations = 0;
    let mut grad = f64::INFINITY;
    while iterations < cfg.max_iter {
        iterations += 1;
        let y = z
            .mode_product(Mode::Two, &f.t.transpose())?
            .mode_product(Mode::Three, &f.u.transpose())?;
        f.s = leading_left_singular_vectors(&y.unfold(Mode::One), ranks[0]);
        let y = z
            .mode_product(Mode::One, &f.s.transpose())?
            .mode_product(Mode::Three, &f.u.transpose())?;
        f.t = leading_left_singular_vectors(&y.unfold(Mode::Two), ranks[1]);
        let y = z
            .mode_product(Mode::One, &f.s.transpose())?
            .mode_product(Mode::Two, &f.t.transpose())?;
        f.u = leading_left_singular_vectors(&y.unfold(Mode::Three), ranks[2]);
        let new_obj = f.project(z)?.fro_norm_sq();
        history.push(new_obj);
        let fit_old = nz - obj;
        let decrease = new_obj - obj;
        obj = new_obj;
        if decrease <= cfg.rel_tol * fit_old.max(0.0) + stopping_slack(nz) {
            grad = mlrank_products(z, &f)?.grad_residual;
            if grad <= 10.0 * cfg.rel_tol {
                converged = true;
                break;
            }
        }
    }
    let core = f.project(z)?;
    let objective = core.fro_norm_sq();
    let fit = z.fro_dist_sq(&f.expand(&core)?)?;
    let products = mlrank_products(z, &f)?;
    if !converged {
        grad = products.grad_residual;
    }
    Ok(LocalMinimum {
        problem: Problem::M222,
        factors: f,
        core,
        fit,
        objective,
        iterations,
        converged,
        grad_residual: grad,
        stationarity: Stationarity::Mlrank(products.residuals),
        history,
    })
}

/// Working state of the rotation engine: `w = (Q1^T, Q2^T, Q3^T) . Z` with
/// square orthogonal `Q_m` whose leading two columns are the factors.
struct RotationState {
    w: Tensor3,
    q: [Matrix; 3],
    mask: CoreMask,
    strides: [usize; 3],
}

impl RotationState {
    fn new(z: &Tensor3, init: &FactorTriple, mask: CoreMask) -> Result<Self, TensorError> {
        let q = [
            complete_basis(&init.s),
            complete_basis(&init.t),
            complete_basis(&init.u),
        ];
        let w = crate::tensor::multilinear_transform(&q[0].transpose(), &q[1].transpose(), &q[2].transpose(), z)?;
        let [_, dj, dk] = w.dims();
        Ok(RotationState {
            w,
            q,
            mask,
            strides: [dj * dk, dk, 1],
        })
    }

    fn other_axes(mode: usize) -> (usize, usize) {
        match mode {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        }
    }

    fn position(mode: usize, idx: usize, u: usize, v: usize) -> [usize; 3] {
        match mode {
            0 => [idx, u, v],
            1 => [u, idx, v],
            _ => [u, v, idx],
        }
    }

    /// Exact restriction of the masked objective to rotating indices `i`
    /// and `j` of `mode`, up to the constant contributed elsewhere.
    fn pair_quadratic(&self, mode: usize, i: usize, j: usize) -> AngleQuadratic {
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        let data = self.w.data();
        let st = self.strides;
        let (oa, ob) = Self::other_axes(mode);
        for u in 0..2 {
            for v in 0..2 {
                let pi = Self::position(mode, i, u, v);
                let pj = Self::position(mode, j, u, v);
                let in_i = self.mask.contains(pi[0], pi[1], pi[2]);
                let in_j = self.mask.contains(pj[0], pj[1], pj[2]);
                if !in_i && !in_j {
                    continue;
                }
                let base = u * st[oa] + v * st[ob];
                let x = data[base + i * st[mode]];
                let y = data[base + j * st[mode]];
                if in_i {
                    a += x * x;
                    c += y * y;
                    b += x * y;
                }
                if in_j {
                    a += y * y;
                    c += x * x;
                    b -= x * y;
                }
            }
        }
        AngleQuadratic::new(a, b, c)
    }

    fn rotate(&mut self, mode: usize, i: usize, j: usize, alpha: f64) {
        let (s, c) = alpha.sin_cos();
        let dims = self.w.dims();
        let st = self.strides;
        let (oa, ob) = Self::other_axes(mode);
        let mut data = std::mem::replace(&mut self.w, Tensor3::zeros([1, 1, 1])).into_data();
        for u in 0..dims[oa] {
            for v in 0..dims[ob] {
                let base = u * st[oa] + v * st[ob];
                let (oi, oj) = (base + i * st[mode], base + j * st[mode]);
                let (x, y) = (data[oi], data[oj]);
                data[oi] = c * x + s * y;
                data[oj] = -s * x + c * y;
            }
        }
        self.w = Tensor3::new(dims, data).expect("rotation keeps entries finite");
        apply_givens(&mut self.q[mode], Side::Cols, i, j, alpha).expect("pair indices are valid");
    }

    fn objective(&self) -> f64 {
        self.mask.norm_sq(&self.w)
    }

    fn factors(&self) -> FactorTriple {
        FactorTriple {
            s: self.q[0].columns(0, 2).clone_owned(),
            t: self.q[1].columns(0, 2).clone_owned(),
            u: self.q[2].columns(0, 2).clone_owned(),
        }
    }
}

/// Rotation pairs visited for `mode` in sweep order: `(0, 1)` (skipped for
/// slices when the mask is slice-symmetric), then `(i, j)` with `i < 2 <= j`.
fn sweep_pairs(n: usize, mode: usize, mask: CoreMask) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..2.min(n) {
        for j in i + 1..n {
            if i == 0 && j == 1 && mode == 2 && mask.slice_symmetric() {
                continue;
            }
            pairs.push((i, j));
        }
    }
    pairs
}

/// Rotation sweeps maximizing the masked leading-core norm. `init` must have
/// two columns per factor; it is completed to square orthogonal matrices.
pub fn masked_givens(
    z: &Tensor3,
    mask: CoreMask,
    init: &FactorTriple,
    cfg: &EngineConfig,
) -> Result<LocalMinimum, TensorError> {
    check_init(z, init)?;
    if init.ranks() != [2, 2, 2] {
        return Err(TensorError::DimensionMismatch(format!(
            "rotation engine needs two columns per factor, got {:?}",
            init.ranks()
        )));
    }
    let dims = z.dims();
    let nz = z.fro_norm_sq();
    let mut state = RotationState::new(z, init, mask)?;
    let pairs: Vec<Vec<(usize, usize)>> = (0..3).map(|m| sweep_pairs(dims[m], m, mask)).collect();

    let gradient = |state: &RotationState| -> f64 {
        if nz == 0.0 {
            return 0.0;
        }
        let mut g: f64 = 0.0;
        for (mode, list) in pairs.iter().enumerate() {
            for &(i, j) in list {
                g = g.max((2.0 * state.pair_quadratic(mode, i, j).b).abs());
            }
        }
        g / nz
    };

    let mut obj = state.objective();
    let mut history = vec![obj];
    let mut converged = false;
    let mut iterations = 0;
    let mut grad = f64::INFINITY;
    while iterations < cfg.max_iter {
        iterations += 1;
        for (mode, list) in pairs.iter().enumerate() {
            for &(i, j) in list {
                let q = state.pair_quadratic(mode, i, j);
                let alpha = optimal_angle(q);
                if alpha != 0.0 {
                    state.rotate(mode, i, j, alpha);
                }
            }
        }
        let new_obj = state.objective();
        history.push(new_obj);
        let fit_old = nz - obj;
        let increase = new_obj - obj;
        obj = new_obj;
        if increase <= cfg.rel_tol * fit_old.max(0.0) + stopping_slack(nz) {
            grad = gradient(&state);
            if grad <= 10.0 * cfg.rel_tol {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        grad = gradient(&state);
    }
    let factors = state.factors();
    let core = mask.apply(&factors.project(z)?);
    let objective = core.fro_norm_sq();
    let fit = z.fro_dist_sq(&factors.expand(&core)?)?;
    let (problem, stationarity) = if mask == CoreMask::FULL {
        (Problem::M222, Stationarity::Mlrank(mlrank_residuals(z, &factors)?))
    } else {
        let problem = if mask == CoreMask::ROG {
            Problem::S2barRog
        } else {
            Problem::S2barTriu
        };
        (problem, Stationarity::S2bar(s2bar_residuals(z, &factors)?))
    };
    Ok(LocalMinimum {
        problem,
        factors,
        core,
        fit,
        objective,
        iterations,
        converged,
        grad_residual: grad,
        stationarity,
        history,
    })
}

/// Runs the engine that matches `problem`.
pub fn solve(
    z: &Tensor3,
    problem: Problem,
    init: &FactorTriple,
    cfg: &EngineConfig,
) -> Result<LocalMinimum, TensorError> {
    match problem {
        Problem::M222 => hooi(z, [2, 2, 2], init, cfg),
        Problem::S2barTriu => masked_givens(z, CoreMask::TRIU, init, cfg),
        Problem::S2barRog => masked_givens(z, CoreMask::ROG, init, cfg),
    }
}

/// The three first-order products for leading block `ranks` of
/// `w = (S~^T, T~^T, U~^T) . Z`, restricted to positions kept by `keep`.
/// Entry `(a, b)` of product `m` is `x^T y` where `x` holds the kept entries
/// of index `a` along mode `m` and `y` the entries of index `R_m + b` at the
/// same positions.
fn first_order_products(w: &Tensor3, ranks: [usize; 3], keep: impl Fn(usize, usize, usize) -> bool) -> [Matrix; 3] {
    let dims = w.dims();
    let mut out: [Matrix; 3] = [
        Matrix::zeros(ranks[0], dims[0] - ranks[0]),
        Matrix::zeros(ranks[1], dims[1] - ranks[1]),
        Matrix::zeros(ranks[2], dims[2] - ranks[2]),
    ];
    for p in 0..ranks[0] {
        for q in 0..ranks[1] {
            for r in 0..ranks[2] {
                if !keep(p, q, r) {
                    continue;
                }
                let g = w.get(p, q, r);
                for b in 0..dims[0] - ranks[0] {
                    out[0][(p, b)] += g * w.get(ranks[0] + b, q, r);
                }
                for b in 0..dims[1] - ranks[1] {
                    out[1][(q, b)] += g * w.get(p, ranks[1] + b, r);
                }
                for b in 0..dims[2] - ranks[2] {
                    out[2][(r, b)] += g * w.get(p, q, ranks[2] + b);
                }
            }
        }
    }
    out
}

fn completed_transform(z: &Tensor3, f: &FactorTriple) -> Result<Tensor3, TensorError> {
    check_init(z, f)?;
    crate::tensor::multilinear_transform(
        &complete_basis(&f.s).transpose(),
        &complete_basis(&f.t).transpose(),
        &complete_basis(&f.u).transpose(),
        z,
    )
}

struct MlrankProducts {
    residuals: MlrankResiduals,
    grad_residual: f64,
}

fn mlrank_products(z: &Tensor3, f: &FactorTriple) -> Result<MlrankProducts, TensorError> {
    let w = completed_transform(z, f)?;
    let nz = z.fro_norm_sq();
    let prods = first_order_products(&w, f.ranks(), |_, _, _| true);
    if nz == 0.0 {
        return Ok(MlrankProducts {
            residuals: MlrankResiduals {
                row: 0.0,
                col: 0.0,
                slice: 0.0,
            },
            grad_residual: 0.0,
        });
    }
    let amax = prods
        .iter()
        .map(|m| if m.is_empty() { 0.0 } else { m.amax() })
        .fold(0.0, f64::max);
    Ok(MlrankProducts {
        residuals: MlrankResiduals {
            row: prods[0].norm() / nz,
            col: prods[1].norm() / nz,
            slice: prods[2].norm() / nz,
        },
        grad_residual: 2.0 * amax / nz,
    })
}

/// Norms of the row, column and slice first-order products of the
/// rank-(R1,R2,R3) problem, each divided by `|Z|^2`.
pub fn mlrank_residuals(z: &Tensor3, factors: &FactorTriple) -> Result<MlrankResiduals, TensorError> {
    Ok(mlrank_products(z, factors)?.residuals)
}

/// First-order residuals of the closure-of-rank-2 problem with triangular
/// cores: the three masked products plus the two scalar conditions for
/// rotating rows 1, 2 and columns 1, 2. All divided by `|Z|^2`.
pub fn s2bar_residuals(z: &Tensor3, factors: &FactorTriple) -> Result<S2barResiduals, TensorError> {
    if factors.ranks() != [2, 2, 2] {
        return Err(TensorError::DimensionMismatch(format!(
            "closure residuals need two columns per factor, got {:?}",
            factors.ranks()
        )));
    }
    let w = completed_transform(z, factors)?;
    let nz = z.fro_norm_sq();
    if nz == 0.0 {
        return Ok(S2barResiduals {
            row: 0.0,
            col: 0.0,
            slice: 0.0,
            row12: 0.0,
            col12: 0.0,
        });
    }
    let mask = CoreMask::TRIU;
    let prods = first_order_products(&w, [2, 2, 2], |p, q, r| mask.contains(p, q, r));
    let g = |p, q, r| w.get(p, q, r);
    let row12 = g(1, 0, 0) * g(0, 0, 0) + g(1, 0, 1) * g(0, 0, 1);
    let col12 = g(1, 0, 0) * g(1, 1, 0) + g(1, 0, 1) * g(1, 1, 1);
    Ok(S2barResiduals {
        row: prods[0].norm() / nz,
        col: prods[1].norm() / nz,
        slice: prods[2].norm() / nz,
        row12: row12.abs() / nz,
        col12: col12.abs() / nz,
    })
}
