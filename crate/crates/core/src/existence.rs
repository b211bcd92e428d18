//! Multistart orchestration, deduplication of local minima, subset labels
//! and the existence verdict for a best rank-2 approximation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{
    classify_orbit, core_rank_method_a, core_rank_method_c, CoreRank, MethodAVerdict, TriangularCore222, H222_TOL,
    ORBIT_TOL,
};
use crate::engines::{hosvd_init, solve, EngineConfig, LocalMinimum, Problem, DEFAULT_REL_TOL, MULTISTART_MAX_ITER};
use crate::error::{ExistenceError, TensorError};
use crate::seeds;
use crate::tensor::{FactorTriple, Tensor3};

pub const DEFAULT_STARTS: usize = 40;

/// Stream tag for random starting factors. Shared by all problems so that
/// different engines start from the same points.
const START_TAG: u64 = 0x53_5441_5254;

/// Relative fit gap under which a real and a complex best minimum tie.
pub const TIE_TOL: f64 = 1e-9;

/// Below this fraction of `|Z|^2` the closure fit counts as exact.
pub const EXACT_FIT_TOL: f64 = 1e-12;

/// Distinctness threshold on `|X1 - X2|^2`: 0.1 for large tensors
/// (30x10x5 scale), 0.001 otherwise.
pub fn default_dedup_eps(dims: [usize; 3]) -> f64 {
    if dims.iter().product::<usize>() >= 500 {
        0.1
    } else {
        0.001
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultistartConfig {
    pub n_starts: usize,
    pub seed: u64,
    pub rel_tol: f64,
    pub max_iter: usize,
    pub dedup_eps: f64,
}

impl MultistartConfig {
    pub fn for_dims(dims: [usize; 3], seed: u64) -> Self {
        MultistartConfig {
            n_starts: DEFAULT_STARTS,
            seed,
            rel_tol: DEFAULT_REL_TOL,
            max_iter: MULTISTART_MAX_ITER,
            dedup_eps: default_dedup_eps(dims),
        }
    }

    pub fn engine(&self) -> EngineConfig {
        EngineConfig {
            rel_tol: self.rel_tol,
            max_iter: self.max_iter,
        }
    }

    pub fn validate(&self) -> Result<(), ExistenceError> {
        if self.n_starts == 0 {
            return Err(ExistenceError::Config("n_starts must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            return Err(ExistenceError::Config(format!(
                "rel_tol must be positive, got {}",
                self.rel_tol
            )));
        }
        if self.max_iter == 0 {
            return Err(ExistenceError::Config("max_iter must be at least 1".into()));
        }
        if !(self.dedup_eps > 0.0 && self.dedup_eps.is_finite()) {
            return Err(ExistenceError::Config(format!(
                "dedup_eps must be positive, got {}",
                self.dedup_eps
            )));
        }
        Ok(())
    }
}

/// Starting factors for run `index` (0 is the HOSVD start).
pub fn starting_factors(z: &Tensor3, seed: u64, index: usize) -> Result<FactorTriple, TensorError> {
    if index == 0 {
        hosvd_init(z, [2, 2, 2])
    } else {
        FactorTriple::random(z.dims(), [2, 2, 2], seeds::derive(seed, START_TAG, index as u64))
    }
}

/// Runs `cfg.n_starts` engines in parallel. Output order follows start
/// index, so results do not depend on scheduling.
pub fn multistart(z: &Tensor3, problem: Problem, cfg: &MultistartConfig) -> Result<Vec<LocalMinimum>, ExistenceError> {
    cfg.validate()?;
    let dims = z.dims();
    if dims.iter().any(|&d| d < 2) {
        return Err(TensorError::DimensionMismatch(format!("every dimension must be at least 2, got {dims:?}")).into());
    }
    let engine = cfg.engine();
    let runs: Result<Vec<_>, TensorError> = (0..cfg.n_starts)
        .into_par_iter()
        .map(|k| {
            let init = starting_factors(z, cfg.seed, k)?;
            solve(z, problem, &init, &engine)
        })
        .collect();
    Ok(runs?)
}

/// Greedy clustering in ascending-fit order: a minimum joins the first
/// representative within squared distance `eps`, otherwise it becomes one.
pub fn dedup(minima: &[LocalMinimum], eps: f64) -> Vec<LocalMinimum> {
    let mut order: Vec<usize> = (0..minima.len()).collect();
    order.sort_by(|&a, &b| minima[a].fit.total_cmp(&minima[b].fit).then(a.cmp(&b)));
    let mut reps: Vec<(usize, Tensor3)> = Vec::new();
    for idx in order {
        let x = minima[idx].reconstruction();
        let dup = reps
            .iter()
            .any(|(_, r)| r.fro_dist_sq(&x).map(|d| d <= eps).unwrap_or(false));
        if !dup {
            reps.push((idx, x));
        }
    }
    reps.into_iter().map(|(i, _)| minima[i].clone()).collect()
}

/// Converged runs only, deduplicated.
pub fn distinct_converged(minima: &[LocalMinimum], eps: f64) -> Vec<LocalMinimum> {
    let conv: Vec<LocalMinimum> = minima.iter().filter(|m| m.converged).cloned().collect();
    dedup(&conv, eps)
}

/// Whether a 2x2x2 core is a rank-2 point. Boundary cores with a repeated
/// eigenvalue are settled by their orbit.
pub fn core_is_real(core: &Tensor3) -> Result<bool, TensorError> {
    Ok(match core_rank_method_c(core)? {
        CoreRank::Rank2 => true,
        CoreRank::Rank3 => false,
        CoreRank::BoundaryRepeated => classify_orbit(core, ORBIT_TOL)?.label.rank() <= 2,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SubsetLabel {
    AllReal,
    MixedReal,
    AllComplex,
    MixedComplex,
}

impl SubsetLabel {
    pub const ALL: [SubsetLabel; 4] = [
        SubsetLabel::AllReal,
        SubsetLabel::MixedReal,
        SubsetLabel::AllComplex,
        SubsetLabel::MixedComplex,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SubsetLabel::AllReal => "all_real",
            SubsetLabel::MixedReal => "mixed_real",
            SubsetLabel::AllComplex => "all_complex",
            SubsetLabel::MixedComplex => "mixed_complex",
        }
    }
}

impl std::fmt::Display for SubsetLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetOutcome {
    pub label: SubsetLabel,
    /// A real and a complex minimum share the best fit.
    pub tie: bool,
}

/// Labels a list of rank-(2,2,2) minima by the realness of their cores.
pub fn subset_label(minima: &[LocalMinimum]) -> Result<SubsetOutcome, ExistenceError> {
    if minima.is_empty() {
        return Err(ExistenceError::Config("subset label of an empty list".into()));
    }
    let real: Vec<bool> = minima.iter().map(|m| core_is_real(&m.core)).collect::<Result<_, _>>()?;
    if real.iter().all(|&r| r) {
        return Ok(SubsetOutcome {
            label: SubsetLabel::AllReal,
            tie: false,
        });
    }
    if real.iter().all(|&r| !r) {
        return Ok(SubsetOutcome {
            label: SubsetLabel::AllComplex,
            tie: false,
        });
    }
    let best = (0..minima.len())
        .min_by(|&a, &b| minima[a].fit.total_cmp(&minima[b].fit))
        .expect("nonempty");
    let best_fit = minima[best].fit;
    let band = TIE_TOL * best_fit.abs().max(f64::MIN_POSITIVE);
    let tie = (0..minima.len()).any(|k| real[k] != real[best] && (minima[k].fit - best_fit).abs() <= band);
    let label = if tie || !real[best] {
        SubsetLabel::MixedComplex
    } else {
        SubsetLabel::MixedReal
    };
    Ok(SubsetOutcome { label, tie })
}

/// Best converged boundary candidate with its restricted-core readout.
#[derive(Clone, Debug, Serialize)]
pub struct BoundaryCandidate {
    pub problem: Problem,
    pub fit: f64,
    pub h222_abs: f64,
    pub h_norm: f64,
    pub method_a: MethodAVerdict,
    pub minimum: LocalMinimum,
}

impl BoundaryCandidate {
    pub fn from_minimum(m: &LocalMinimum, h222_tol: f64) -> Result<Self, TensorError> {
        let h = TriangularCore222::from_core(&m.core)?.to_rog();
        Ok(BoundaryCandidate {
            problem: m.problem,
            fit: m.fit,
            h222_abs: h.h222.abs(),
            h_norm: h.norm(),
            method_a: core_rank_method_a(&h, h222_tol),
            minimum: m.clone(),
        })
    }
}

/// `|h222|` of the restricted form of a triangular core.
pub fn h222_abs(core: &Tensor3) -> Result<f64, TensorError> {
    Ok(TriangularCore222::from_core(core)?.to_rog().h222.abs())
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundaryEvidence {
    pub h222_tol: f64,
    pub triu: Option<BoundaryCandidate>,
    pub rog: Option<BoundaryCandidate>,
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum ExistenceVerdict {
    Exists {
        approx: LocalMinimum,
    },
    NotExists {
        witnesses: Vec<LocalMinimum>,
    },
    Inconclusive {
        best: LocalMinimum,
        reason: String,
        evidence: Option<Box<BoundaryEvidence>>,
    },
}

impl ExistenceVerdict {
    pub fn name(&self) -> &'static str {
        match self {
            ExistenceVerdict::Exists { .. } => "exists",
            ExistenceVerdict::NotExists { .. } => "not_exists",
            ExistenceVerdict::Inconclusive { .. } => "inconclusive",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExistenceReport {
    pub verdict: ExistenceVerdict,
    pub subset: Option<SubsetOutcome>,
    /// The closure fit vanished and the verdict follows from the orbit of Z.
    pub exact: bool,
    pub n_starts: usize,
    pub n_converged: usize,
    pub n_distinct: usize,
    pub seed: u64,
    pub rel_tol: f64,
    pub dedup_eps: f64,
    pub h222_tol: f64,
}

/// Multistart results already computed for one tensor.
pub struct Runs<'a> {
    pub m222: &'a [LocalMinimum],
    pub triu: &'a [LocalMinimum],
    /// Only consulted for inconclusive cases; computed on demand if absent.
    pub rog: Option<&'a [LocalMinimum]>,
}

fn best_converged(minima: &[LocalMinimum]) -> Option<&LocalMinimum> {
    minima
        .iter()
        .filter(|m| m.converged)
        .min_by(|a, b| a.fit.total_cmp(&b.fit))
}

/// Full decision: closure multistart for the exactness guard, rank-(2,2,2)
/// multistart for the verdict, and restricted multistart for evidence when
/// the verdict is inconclusive.
pub fn decide_existence(z: &Tensor3, cfg: &MultistartConfig, h222_tol: f64) -> Result<ExistenceReport, ExistenceError> {
    let triu = multistart(z, Problem::S2barTriu, cfg)?;
    let m222 = multistart(z, Problem::M222, cfg)?;
    decide_from_runs(
        z,
        Runs {
            m222: &m222,
            triu: &triu,
            rog: None,
        },
        cfg,
        h222_tol,
    )
}

pub fn decide_from_runs(
    z: &Tensor3,
    runs: Runs<'_>,
    cfg: &MultistartConfig,
    h222_tol: f64,
) -> Result<ExistenceReport, ExistenceError> {
    let nz = z.fro_norm_sq();
    let n_converged = runs.m222.iter().filter(|m| m.converged).count();
    let report = |verdict, subset, exact, n_distinct| ExistenceReport {
        verdict,
        subset,
        exact,
        n_starts: runs.m222.len(),
        n_converged,
        n_distinct,
        seed: cfg.seed,
        rel_tol: cfg.rel_tol,
        dedup_eps: cfg.dedup_eps,
        h222_tol,
    };

    if let Some(best) = best_converged(runs.triu) {
        if best.fit <= EXACT_FIT_TOL * nz {
            let rank = classify_orbit(&best.core, ORBIT_TOL)?.label.rank();
            let verdict = if rank <= 2 {
                ExistenceVerdict::Exists { approx: best.clone() }
            } else {
                ExistenceVerdict::NotExists {
                    witnesses: vec![best.clone()],
                }
            };
            return Ok(report(verdict, None, true, 1));
        }
    }

    let distinct = distinct_converged(runs.m222, cfg.dedup_eps);
    if distinct.is_empty() {
        return Err(ExistenceError::NoConvergence {
            problem: Problem::M222.name().into(),
            runs: runs.m222.len(),
        });
    }
    let subset = subset_label(&distinct)?;
    let n_distinct = distinct.len();
    let best = distinct[0].clone();
    let verdict = match subset.label {
        SubsetLabel::AllReal | SubsetLabel::MixedReal => ExistenceVerdict::Exists { approx: best },
        SubsetLabel::AllComplex if runs.m222.len() >= DEFAULT_STARTS => {
            ExistenceVerdict::NotExists { witnesses: distinct }
        }
        SubsetLabel::AllComplex => ExistenceVerdict::Inconclusive {
            best,
            reason: format!("all minima have rank 3 but only {} starts were run", runs.m222.len()),
            evidence: None,
        },
        SubsetLabel::MixedComplex => {
            let owned_rog;
            let rog = match runs.rog {
                Some(r) => r,
                None => {
                    owned_rog = multistart(z, Problem::S2barRog, cfg)?;
                    &owned_rog
                }
            };
            let evidence = BoundaryEvidence {
                h222_tol,
                triu: best_converged(runs.triu)
                    .map(|m| BoundaryCandidate::from_minimum(m, h222_tol))
                    .transpose()?,
                rog: best_converged(rog)
                    .map(|m| BoundaryCandidate::from_minimum(m, h222_tol))
                    .transpose()?,
            };
            let reason = if subset.tie {
                "real and complex minima tie at the best fit".to_string()
            } else {
                "best minimum has rank 3 but rank-2 minima also occur".to_string()
            };
            ExistenceVerdict::Inconclusive {
                best,
                reason,
                evidence: Some(Box::new(evidence)),
            }
        }
    };
    Ok(report(verdict, Some(subset), false, n_distinct))
}

/// Default threshold for the `h222` evidence test.
pub fn default_h222_tol() -> f64 {
    H222_TOL
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::OrbitLabel;
    use crate::engines::MlrankResiduals;
    use crate::engines::Stationarity;

    fn fake(core: Tensor3, fit: f64, shift: f64) -> LocalMinimum {
        let mut s = crate::tensor::Matrix::zeros(3, 2);
        s[(0, 0)] = 1.0;
        s[(1, 1)] = 1.0;
        let id = crate::tensor::Matrix::identity(2, 2);
        let core = core
            .add(&Tensor3::from_fn([2, 2, 2], |p, _, _| if p == 0 { shift } else { 0.0 }))
            .unwrap();
        LocalMinimum {
            problem: Problem::M222,
            factors: FactorTriple::new(s, id.clone(), id).unwrap(),
            core,
            fit,
            objective: 0.0,
            iterations: 1,
            converged: true,
            grad_residual: 0.0,
            stationarity: Stationarity::Mlrank(MlrankResiduals {
                row: 0.0,
                col: 0.0,
                slice: 0.0,
            }),
            history: vec![],
        }
    }

    #[test]
    fn eps_heuristic() {
        assert_eq!(default_dedup_eps([4, 4, 4]), 0.001);
        assert_eq!(default_dedup_eps([30, 10, 5]), 0.1);
    }

    #[test]
    fn dedup_threshold_semantics() {
        let g = OrbitLabel::G2.canonical();
        let a = fake(g.clone(), 1.0, 0.0);
        let b = fake(g.clone(), 1.5, 0.0);
        assert_eq!(dedup(&[a.clone(), b.clone()], 1e-3).len(), 1);
        assert_eq!(dedup(&[b.clone(), a.clone()], 1e-3)[0].fit, 1.0);

        // shift of one first-row entry set: distance = 4 * shift^2
        let eps = 1e-3;
        let shift = (2.0 * eps / 4.0f64).sqrt();
        let c = fake(g.clone(), 2.0, shift);
        let d = dedup(&[a.clone(), c], eps);
        assert_eq!(d.len(), 2);
        let shift = (0.5 * eps / 4.0f64).sqrt();
        let c = fake(g, 2.0, shift);
        assert_eq!(dedup(&[a, c], eps).len(), 1);
    }

    #[test]
    fn subset_labels() {
        let real = OrbitLabel::G2.canonical();
        let cplx = OrbitLabel::G3.canonical();
        let lbl = |v: Vec<LocalMinimum>| subset_label(&v).unwrap();
        assert_eq!(
            lbl(vec![fake(real.clone(), 1.0, 0.0), fake(real.clone(), 2.0, 0.0)]).label,
            SubsetLabel::AllReal
        );
        assert_eq!(lbl(vec![fake(cplx.clone(), 1.0, 0.0)]).label, SubsetLabel::AllComplex);
        assert_eq!(
            lbl(vec![fake(cplx.clone(), 1.0, 0.0), fake(real.clone(), 2.0, 0.0)]).label,
            SubsetLabel::MixedComplex
        );
        assert_eq!(
            lbl(vec![fake(real.clone(), 1.0, 0.0), fake(cplx.clone(), 2.0, 0.0)]).label,
            SubsetLabel::MixedReal
        );
        let tie = lbl(vec![fake(real.clone(), 1.0, 0.0), fake(cplx.clone(), 1.0 + 1e-12, 0.0)]);
        assert_eq!(tie.label, SubsetLabel::MixedComplex);
        assert!(tie.tie);
        assert!(subset_label(&[]).is_err());
        // D3 sits on the boundary with a repeated eigenvalue and counts as complex
        assert_eq!(
            lbl(vec![fake(OrbitLabel::D3.canonical(), 1.0, 0.0)]).label,
            SubsetLabel::AllComplex
        );
    }

    #[test]
    fn multistart_is_deterministic_and_exact_on_model() {
        let g = Tensor3::random_gaussian([2, 2, 2], 3);
        let f = FactorTriple::random([4, 4, 4], [2, 2, 2], 4).unwrap();
        let z = f.expand(&g).unwrap();
        let cfg = MultistartConfig {
            n_starts: 6,
            ..MultistartConfig::for_dims(z.dims(), 11)
        };
        let a = multistart(&z, Problem::M222, &cfg).unwrap();
        let b = multistart(&z, Problem::M222, &cfg).unwrap();
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.fit.to_bits(), y.fit.to_bits());
            assert_eq!(x.core, y.core);
            assert!(x.fit <= 1e-18 * z.fro_norm_sq());
        }
    }

    #[test]
    fn config_validation() {
        let mut c = MultistartConfig::for_dims([4, 4, 4], 0);
        assert!(c.validate().is_ok());
        c.n_starts = 0;
        assert!(c.validate().is_err());
        let z = Tensor3::random_gaussian([1, 4, 4], 0);
        assert!(multistart(&z, Problem::M222, &MultistartConfig::for_dims([1, 4, 4], 0)).is_err());
    }

    #[test]
    fn g3_has_no_best_rank2() {
        let z = OrbitLabel::G3.canonical();
        let cfg = MultistartConfig::for_dims(z.dims(), 5);
        let rep = decide_existence(&z, &cfg, H222_TOL).unwrap();
        assert!(
            matches!(rep.verdict, ExistenceVerdict::NotExists { .. }),
            "{}",
            rep.verdict.name()
        );
        assert_eq!(rep.subset.unwrap().label, SubsetLabel::AllComplex);
    }

    #[test]
    fn embedded_g2_exists_exactly() {
        let f = FactorTriple::random([4, 3, 5], [2, 2, 2], 9).unwrap();
        let z = f.expand(&OrbitLabel::G2.canonical()).unwrap();
        let cfg = MultistartConfig {
            n_starts: 8,
            ..MultistartConfig::for_dims(z.dims(), 5)
        };
        let rep = decide_existence(&z, &cfg, H222_TOL).unwrap();
        match rep.verdict {
            ExistenceVerdict::Exists { approx } => assert!(approx.fit <= 1e-12 * z.fro_norm_sq()),
            other => panic!("{}", other.name()),
        }
        assert!(rep.exact);
    }
}
