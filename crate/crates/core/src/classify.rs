//! Classification of 2x2x2 tensors: hyperdeterminant sign, the eight real
//! orbits under nonsingular multilinear transforms, interior/boundary/exterior
//! of the closure of the rank-2 set, and the two core-rank tests used by the
//! existence decision.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::kernels::{eig_class_2x2_pencil, PencilClass, PencilQuadratic, PENCIL_TOL};
use crate::tensor::{Tensor3, MRANK_TOL};

/// Default relative band for a vanishing hyperdeterminant.
pub const ORBIT_TOL: f64 = 1e-10;

/// Default relative threshold for the `h222 = 0` test.
pub const H222_TOL: f64 = 1e-4;

/// Real orbit of a 2x2x2 tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OrbitLabel {
    D0,
    D1,
    D2,
    D2p,
    D2pp,
    G2,
    D3,
    G3,
}

impl OrbitLabel {
    pub const ALL: [OrbitLabel; 8] = [
        OrbitLabel::D0,
        OrbitLabel::D1,
        OrbitLabel::D2,
        OrbitLabel::D2p,
        OrbitLabel::D2pp,
        OrbitLabel::G2,
        OrbitLabel::D3,
        OrbitLabel::G3,
    ];

    /// Tensor rank shared by every member of the orbit.
    pub fn rank(self) -> usize {
        match self {
            OrbitLabel::D0 => 0,
            OrbitLabel::D1 => 1,
            OrbitLabel::D2 | OrbitLabel::D2p | OrbitLabel::D2pp | OrbitLabel::G2 => 2,
            OrbitLabel::D3 | OrbitLabel::G3 => 3,
        }
    }

    /// Multilinear rank shared by every member of the orbit.
    pub fn mrank(self) -> [usize; 3] {
        match self {
            OrbitLabel::D0 => [0, 0, 0],
            OrbitLabel::D1 => [1, 1, 1],
            OrbitLabel::D2 => [2, 2, 1],
            OrbitLabel::D2p => [2, 1, 2],
            OrbitLabel::D2pp => [1, 2, 2],
            OrbitLabel::G2 | OrbitLabel::D3 | OrbitLabel::G3 => [2, 2, 2],
        }
    }

    /// Only the two generic orbits have positive volume.
    pub fn is_generic(self) -> bool {
        matches!(self, OrbitLabel::G2 | OrbitLabel::G3)
    }

    pub fn point_class(self) -> PointClass {
        match self {
            OrbitLabel::G2 => PointClass::Interior,
            OrbitLabel::G3 => PointClass::Exterior,
            _ => PointClass::Boundary,
        }
    }

    /// Canonical representative. Frontal slices `Y[:, :, 0]`, `Y[:, :, 1]`.
    pub fn canonical(self) -> Tensor3 {
        let z = [[0.0; 2]; 2];
        let e11 = [[1.0, 0.0], [0.0, 0.0]];
        let id = [[1.0, 0.0], [0.0, 1.0]];
        match self {
            OrbitLabel::D0 => Tensor3::from_slices_222(z, z),
            OrbitLabel::D1 => Tensor3::from_slices_222(e11, z),
            OrbitLabel::D2 => Tensor3::from_slices_222(id, z),
            // y111 = y212 = 1: mode-2 fibres all lie along e1
            OrbitLabel::D2p => Tensor3::from_slices_222(e11, [[0.0, 0.0], [1.0, 0.0]]),
            // y111 = y122 = 1: mode-1 fibres all lie along e1
            OrbitLabel::D2pp => Tensor3::from_slices_222(e11, [[0.0, 1.0], [0.0, 0.0]]),
            OrbitLabel::G2 => Tensor3::from_slices_222(e11, [[0.0, 0.0], [0.0, 1.0]]),
            OrbitLabel::D3 => Tensor3::from_slices_222(id, [[0.0, 1.0], [0.0, 0.0]]),
            OrbitLabel::G3 => Tensor3::from_slices_222(id, [[0.0, -1.0], [1.0, 0.0]]),
        }
    }
}

impl std::fmt::Display for OrbitLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            OrbitLabel::D0 => "D0",
            OrbitLabel::D1 => "D1",
            OrbitLabel::D2 => "D2",
            OrbitLabel::D2p => "D2p",
            OrbitLabel::D2pp => "D2pp",
            OrbitLabel::G2 => "G2",
            OrbitLabel::D3 => "D3",
            OrbitLabel::G3 => "G3",
        };
        f.write_str(s)
    }
}

/// Position relative to the closure of the rank-2 set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointClass {
    Interior,
    Boundary,
    Exterior,
}

fn require_222(g: &Tensor3) -> Result<(), TensorError> {
    if g.dims() != [2, 2, 2] {
        return Err(TensorError::DimensionMismatch(format!(
            "expected a 2x2x2 tensor, got {:?}",
            g.dims()
        )));
    }
    Ok(())
}

/// Discriminant `b^2 - 4ac` of `det(X1 + t X2) = c + b t + a t^2`, where
/// `X1`, `X2` are the frontal slices. Positive on the generic rank-2 orbit,
/// negative on the generic rank-3 orbit, zero on the boundary.
pub fn hyperdeterminant(g: &Tensor3) -> Result<f64, TensorError> {
    require_222(g)?;
    Ok(PencilQuadratic::new(&g.slice_222(0), &g.slice_222(1)).discriminant())
}

/// Result of [`classify_orbit`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitClassification {
    pub label: OrbitLabel,
    pub hyperdeterminant: f64,
    pub mrank: [usize; 3],
    /// Set when the numerical multilinear rank matched no boundary orbit and
    /// the nearest one was reported instead.
    pub diagnostic: Option<String>,
}

pub fn classify_orbit(g: &Tensor3, rel_tol: f64) -> Result<OrbitClassification, TensorError> {
    let delta = hyperdeterminant(g)?;
    let norm_sq = g.fro_norm_sq();
    let mrank = g.mrank(MRANK_TOL);
    let done = |label| OrbitClassification {
        label,
        hyperdeterminant: delta,
        mrank,
        diagnostic: None,
    };
    if norm_sq == 0.0 {
        return Ok(done(OrbitLabel::D0));
    }
    if delta.abs() > rel_tol * norm_sq * norm_sq {
        return Ok(done(if delta > 0.0 { OrbitLabel::G2 } else { OrbitLabel::G3 }));
    }
    let label = match mrank {
        [1, 1, 1] => Some(OrbitLabel::D1),
        [2, 2, 1] => Some(OrbitLabel::D2),
        [2, 1, 2] => Some(OrbitLabel::D2p),
        [1, 2, 2] => Some(OrbitLabel::D2pp),
        [2, 2, 2] => Some(OrbitLabel::D3),
        _ => None,
    };
    if let Some(label) = label {
        return Ok(done(label));
    }
    let nearest = if mrank.contains(&0) {
        OrbitLabel::D0
    } else {
        match mrank.iter().filter(|&&r| r == 2).count() {
            2 => match mrank.iter().position(|&r| r == 1) {
                Some(0) => OrbitLabel::D2pp,
                Some(1) => OrbitLabel::D2p,
                _ => OrbitLabel::D2,
            },
            _ => OrbitLabel::D1,
        }
    };
    Ok(OrbitClassification {
        label: nearest,
        hyperdeterminant: delta,
        mrank,
        diagnostic: Some(format!(
            "multilinear rank {mrank:?} with vanishing hyperdeterminant matches no orbit; reporting nearest"
        )),
    })
}

/// Interior / boundary / exterior via the slice pencil.
pub fn point_class(g: &Tensor3) -> Result<PointClass, TensorError> {
    require_222(g)?;
    Ok(
        match eig_class_2x2_pencil(&g.slice_222(0), &g.slice_222(1), PENCIL_TOL) {
            PencilClass::RealDistinct => PointClass::Interior,
            PencilClass::ComplexPair => PointClass::Exterior,
            PencilClass::RealRepeated { .. } | PencilClass::DegeneratePencil => PointClass::Boundary,
        },
    )
}

/// 2x2x2 core with upper-triangular frontal slices
/// `H1 = [[h111, h121], [0, h221]]`, `H2 = [[h112, h122], [0, h222]]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriangularCore222 {
    pub h111: f64,
    pub h121: f64,
    pub h221: f64,
    pub h112: f64,
    pub h122: f64,
    pub h222: f64,
    /// `h112` is pinned to zero.
    pub rog_restricted: bool,
}

impl TriangularCore222 {
    pub fn new(h111: f64, h121: f64, h221: f64, h112: f64, h122: f64, h222: f64) -> Self {
        TriangularCore222 {
            h111,
            h121,
            h221,
            h112,
            h122,
            h222,
            rog_restricted: false,
        }
    }

    /// Restricted form with `h112 = 0`.
    pub fn new_rog(h111: f64, h121: f64, h221: f64, h122: f64, h222: f64) -> Self {
        TriangularCore222 {
            h111,
            h121,
            h221,
            h112: 0.0,
            h122,
            h222,
            rog_restricted: true,
        }
    }

    /// Upper-triangular parts of the two slices of `g`.
    pub fn from_core(g: &Tensor3) -> Result<Self, TensorError> {
        require_222(g)?;
        Ok(TriangularCore222::new(
            g.get(0, 0, 0),
            g.get(0, 1, 0),
            g.get(1, 1, 0),
            g.get(0, 0, 1),
            g.get(0, 1, 1),
            g.get(1, 1, 1),
        ))
    }

    pub fn to_tensor(&self) -> Tensor3 {
        Tensor3::from_slices_222(
            [[self.h111, self.h121], [0.0, self.h221]],
            [[self.h112, self.h122], [0.0, self.h222]],
        )
    }

    pub fn norm(&self) -> f64 {
        [self.h111, self.h121, self.h221, self.h112, self.h122, self.h222]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Angle of the slice rotation `H1' = c H1 + s H2`, `H2' = -s H1 + c H2`
    /// that zeroes `h112` with `h111' >= 0`.
    pub fn rog_angle(&self) -> f64 {
        if self.h111 == 0.0 && self.h112 == 0.0 {
            0.0
        } else {
            self.h112.atan2(self.h111)
        }
    }

    /// Equivalent restricted core, obtained by an orthogonal mixing of the
    /// two slices. Norm and orbit are unchanged.
    pub fn to_rog(&self) -> Self {
        if self.rog_restricted {
            return *self;
        }
        let (s, c) = self.rog_angle().sin_cos();
        let mix1 = |x: f64, y: f64| c * x + s * y;
        let mix2 = |x: f64, y: f64| -s * x + c * y;
        TriangularCore222 {
            h111: mix1(self.h111, self.h112),
            h121: mix1(self.h121, self.h122),
            h221: mix1(self.h221, self.h222),
            h112: 0.0,
            h122: mix2(self.h121, self.h122),
            h222: mix2(self.h221, self.h222),
            rog_restricted: true,
        }
    }
}

/// Verdict of the `h222 = 0` test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MethodAVerdict {
    Rank2,
    Rank3,
    /// The nonzero side conditions failed; carries the orbit of the core.
    Degenerate(OrbitLabel),
}

/// Rank of a restricted triangular core from `h222` alone, with all
/// thresholds relative to `|H|_F`. Unrestricted cores are first rotated
/// into restricted form.
pub fn core_rank_method_a(h: &TriangularCore222, tau: f64) -> MethodAVerdict {
    let h = h.to_rog();
    let band = tau * h.norm();
    let side = h.h111.abs().min(h.h221.abs()).min(h.h122.abs());
    if h.h222.abs() <= band && side > band {
        MethodAVerdict::Rank3
    } else if h.h222.abs() > band {
        MethodAVerdict::Rank2
    } else {
        let orbit = classify_orbit(&h.to_tensor(), ORBIT_TOL)
            .map(|c| c.label)
            .unwrap_or(OrbitLabel::D0);
        MethodAVerdict::Degenerate(orbit)
    }
}

/// Rank class of a 2x2x2 core from the realness of its pencil eigenvalues.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoreRank {
    Rank2,
    Rank3,
    BoundaryRepeated,
}

pub fn core_rank_method_c(g: &Tensor3) -> Result<CoreRank, TensorError> {
    require_222(g)?;
    Ok(
        match eig_class_2x2_pencil(&g.slice_222(0), &g.slice_222(1), PENCIL_TOL) {
            PencilClass::ComplexPair => CoreRank::Rank3,
            PencilClass::RealDistinct => CoreRank::Rank2,
            PencilClass::RealRepeated { .. } | PencilClass::DegeneratePencil => CoreRank::BoundaryRepeated,
        },
    )
}

/// Tensor rank of a 2x2x2 core read off its orbit.
pub fn core_tensor_rank(g: &Tensor3) -> Result<usize, TensorError> {
    Ok(classify_orbit(g, ORBIT_TOL)?.label.rank())
}
