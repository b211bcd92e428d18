//! Simulation campaigns over random Gaussian tensors and the
//! finite-difference Hessian check of converged minima.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{core_rank_method_c, CoreRank, H222_TOL};
use crate::engines::{CoreMask, LocalMinimum, Problem, DEFAULT_REL_TOL, MULTISTART_MAX_ITER};
use crate::error::{ExistenceError, HarnessError, TensorError};
use crate::existence::{
    core_is_real, decide_from_runs, default_dedup_eps, distinct_converged, h222_abs, multistart, MultistartConfig,
    Runs, SubsetLabel, DEFAULT_STARTS,
};
use crate::kernels::{apply_givens, complete_basis, sym_max_eigenvalue, Side};
use crate::seeds;
use crate::tensor::{FactorTriple, Matrix, Tensor3, MRANK_TOL};

const TENSOR_TAG: u64 = 0x5445_4E53;
const START_SEED_TAG: u64 = 0x5345_4544;

/// Central-difference step for the Hessian.
pub const HESSIAN_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub dims: [usize; 3],
    pub n_tensors: usize,
    pub starts: usize,
    pub seed: u64,
    pub dedup_eps: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
    pub h222_tol: f64,
    pub engines: Vec<Problem>,
    /// Number of leading tensors whose best minima get a Hessian check.
    pub hessian_sample: usize,
}

impl SimulationConfig {
    pub fn new(dims: [usize; 3], n_tensors: usize, seed: u64) -> Self {
        SimulationConfig {
            dims,
            n_tensors,
            starts: DEFAULT_STARTS,
            seed,
            dedup_eps: default_dedup_eps(dims),
            rel_tol: DEFAULT_REL_TOL,
            max_iter: MULTISTART_MAX_ITER,
            h222_tol: H222_TOL,
            engines: Problem::ALL.to_vec(),
            hessian_sample: 0,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n_tensors == 0 {
            return Err(HarnessError::Config("n_tensors must be at least 1".into()));
        }
        if self.dims.iter().any(|&d| d < 2) {
            return Err(HarnessError::Config(format!(
                "every dimension must be at least 2, got {:?}",
                self.dims
            )));
        }
        if self.engines.is_empty() {
            return Err(HarnessError::Config("no engines selected".into()));
        }
        self.multistart(0)
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Multistart settings for tensor `id`.
    pub fn multistart(&self, id: usize) -> MultistartConfig {
        MultistartConfig {
            n_starts: self.starts,
            seed: seeds::derive(self.seed, START_SEED_TAG, id as u64),
            rel_tol: self.rel_tol,
            max_iter: self.max_iter,
            dedup_eps: self.dedup_eps,
        }
    }

    pub fn tensor(&self, id: usize) -> Tensor3 {
        Tensor3::random_gaussian(self.dims, seeds::derive(self.seed, TENSOR_TAG, id as u64))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineSummary {
    pub problem: Problem,
    pub n_runs: usize,
    pub n_converged: usize,
    pub n_distinct: usize,
    pub best_fit: Option<f64>,
    /// `|h222|` of the best closure minimum in restricted form.
    pub best_h222: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HessianRecord {
    pub problem: Problem,
    pub largest_eigenvalue: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub tensor_id: usize,
    pub engines: Vec<EngineSummary>,
    pub subset: Option<SubsetLabel>,
    pub tie: bool,
    pub verdict: Option<String>,
    /// Distinct rank-(2,2,2) minima with a rank-2 core.
    pub n_real_min: usize,
    /// Of those, how many match a distinct triangular-closure minimum.
    pub n_shared: usize,
    /// The best rank-(2,2,2) minimum is rank 2 and equals the best closure minimum.
    pub best_shared: bool,
    /// `|h222|` of the closure minima matched above.
    pub shared_h222: Vec<f64>,
    /// Distinct closure minima whose core has mrank below (2,2,2).
    pub low_mrank_closure_minima: usize,
    /// Distinct rank-(2,2,2) minima with a repeated pencil eigenvalue.
    pub boundary_repeated_minima: usize,
    pub hessian: Vec<HessianRecord>,
}

impl TensorRecord {
    pub fn engine(&self, p: Problem) -> Option<&EngineSummary> {
        self.engines.iter().find(|e| e.problem == p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub engine: Problem,
    pub n_distinct: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub subset: SubsetLabel,
    pub n_tensors: usize,
    pub n_real_min: usize,
    pub n_shared: usize,
    pub n_shared_best: usize,
    /// Range of `|h222|` over shared minima.
    pub h222_min: Option<f64>,
    pub h222_max: Option<f64>,
    /// Range of `|h222|` over the best closure minima of the subset.
    pub best_h222_min: Option<f64>,
    pub best_h222_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub config: SimulationConfig,
    pub records: Vec<TensorRecord>,
    pub table1: Vec<Table1Row>,
    pub table2: Vec<Table2Row>,
    /// Soft-check violations; expected empty.
    pub warnings: Vec<String>,
}

fn summarize(problem: Problem, runs: &[LocalMinimum], distinct: &[LocalMinimum]) -> Result<EngineSummary, TensorError> {
    let best = distinct.first();
    let best_h222 = match (problem, best) {
        (Problem::S2barTriu | Problem::S2barRog, Some(m)) => Some(h222_abs(&m.core)?),
        _ => None,
    };
    Ok(EngineSummary {
        problem,
        n_runs: runs.len(),
        n_converged: runs.iter().filter(|m| m.converged).count(),
        n_distinct: distinct.len(),
        best_fit: best.map(|m| m.fit),
        best_h222,
    })
}

fn mask_of(problem: Problem) -> CoreMask {
    problem.mask()
}

/// Runs every requested engine on one tensor and condenses the results.
pub fn process_tensor(cfg: &SimulationConfig, id: usize) -> Result<TensorRecord, HarnessError> {
    let z = cfg.tensor(id);
    let ms = cfg.multistart(id);
    let mut runs: BTreeMap<usize, Vec<LocalMinimum>> = BTreeMap::new();
    for (k, &p) in Problem::ALL.iter().enumerate() {
        if cfg.engines.contains(&p) {
            runs.insert(k, multistart(&z, p, &ms).map_err(existence_to_harness)?);
        }
    }
    let get = |p: Problem| runs.get(&Problem::ALL.iter().position(|&q| q == p).expect("known problem"));
    let distinct: BTreeMap<usize, Vec<LocalMinimum>> = runs
        .iter()
        .map(|(&k, r)| (k, distinct_converged(r, cfg.dedup_eps)))
        .collect();
    let get_distinct = |p: Problem| distinct.get(&Problem::ALL.iter().position(|&q| q == p).expect("known problem"));

    let mut engines = Vec::new();
    for (&k, r) in &runs {
        engines.push(summarize(Problem::ALL[k], r, &distinct[&k])?);
    }

    let m222 = get_distinct(Problem::M222);
    let triu = get_distinct(Problem::S2barTriu);

    let mut subset = None;
    let mut tie = false;
    let mut verdict = None;
    if let (Some(m_runs), Some(t_runs)) = (get(Problem::M222), get(Problem::S2barTriu)) {
        match decide_from_runs(
            &z,
            Runs {
                m222: m_runs,
                triu: t_runs,
                rog: get(Problem::S2barRog).map(|v| v.as_slice()),
            },
            &ms,
            cfg.h222_tol,
        ) {
            Ok(rep) => {
                if let Some(s) = rep.subset {
                    subset = Some(s.label);
                    tie = s.tie;
                }
                verdict = Some(rep.verdict.name().to_string());
            }
            Err(ExistenceError::NoConvergence { .. }) => verdict = Some("no_convergence".into()),
            Err(e) => return Err(existence_to_harness(e)),
        }
    } else if let Some(m) = m222 {
        if !m.is_empty() {
            let s = crate::existence::subset_label(m).map_err(existence_to_harness)?;
            subset = Some(s.label);
            tie = s.tie;
        }
    }

    let mut n_real_min = 0;
    let mut n_shared = 0;
    let mut shared_h222 = Vec::new();
    let mut best_shared = false;
    let mut boundary_repeated_minima = 0;
    if let Some(m) = m222 {
        for (idx, mm) in m.iter().enumerate() {
            if core_rank_method_c(&mm.core)? == CoreRank::BoundaryRepeated {
                boundary_repeated_minima += 1;
            }
            if !core_is_real(&mm.core)? {
                continue;
            }
            n_real_min += 1;
            let Some(t) = triu else { continue };
            let x = mm.reconstruction();
            let mut matched = None;
            for (ti, tm) in t.iter().enumerate() {
                if tm.reconstruction().fro_dist_sq(&x)? <= cfg.dedup_eps {
                    matched = Some(ti);
                    break;
                }
            }
            if let Some(ti) = matched {
                n_shared += 1;
                shared_h222.push(h222_abs(&t[ti].core)?);
                if idx == 0 && ti == 0 {
                    best_shared = true;
                }
            }
        }
    }

    let mut low_mrank_closure_minima = 0;
    for p in [Problem::S2barTriu, Problem::S2barRog] {
        if let Some(t) = get_distinct(p) {
            low_mrank_closure_minima += t.iter().filter(|m| m.core.mrank(MRANK_TOL) != [2, 2, 2]).count();
        }
    }

    let mut hessian = Vec::new();
    if id < cfg.hessian_sample {
        for (&k, d) in &distinct {
            if let Some(best) = d.first() {
                let p = Problem::ALL[k];
                hessian.push(HessianRecord {
                    problem: p,
                    largest_eigenvalue: hessian_check(&z, &best.factors, mask_of(p))?,
                });
            }
        }
    }

    Ok(TensorRecord {
        tensor_id: id,
        engines,
        subset,
        tie,
        verdict,
        n_real_min,
        n_shared,
        best_shared,
        shared_h222,
        low_mrank_closure_minima,
        boundary_repeated_minima,
        hessian,
    })
}

fn existence_to_harness(e: ExistenceError) -> HarnessError {
    match e {
        ExistenceError::Tensor(t) => HarnessError::Tensor(t),
        other => HarnessError::Config(other.to_string()),
    }
}

fn range(values: impl Iterator<Item = f64>) -> (Option<f64>, Option<f64>) {
    values.fold((None, None), |(lo, hi), v| {
        (
            Some(lo.map_or(v, |l: f64| l.min(v))),
            Some(hi.map_or(v, |h: f64| h.max(v))),
        )
    })
}

/// Aggregates per-tensor records into the two summary tables.
pub fn aggregate(records: &[TensorRecord], engines: &[Problem]) -> (Vec<Table1Row>, Vec<Table2Row>) {
    let mut table1 = Vec::new();
    for &p in Problem::ALL.iter().filter(|p| engines.contains(p)) {
        let counts: Vec<usize> = records
            .iter()
            .filter_map(|r| r.engine(p).map(|e| e.n_distinct))
            .collect();
        let (Some(&lo), Some(&hi)) = (counts.iter().min(), counts.iter().max()) else {
            continue;
        };
        for n in lo..=hi {
            table1.push(Table1Row {
                engine: p,
                n_distinct: n,
                count: counts.iter().filter(|&&c| c == n).count(),
            });
        }
    }
    let mut table2 = Vec::new();
    for label in SubsetLabel::ALL {
        let rs: Vec<&TensorRecord> = records.iter().filter(|r| r.subset == Some(label)).collect();
        let (h222_min, h222_max) = range(rs.iter().flat_map(|r| r.shared_h222.iter().copied()));
        let (best_h222_min, best_h222_max) = range(
            rs.iter()
                .filter_map(|r| r.engine(Problem::S2barTriu).and_then(|e| e.best_h222)),
        );
        table2.push(Table2Row {
            subset: label,
            n_tensors: rs.len(),
            n_real_min: rs.iter().map(|r| r.n_real_min).sum(),
            n_shared: rs.iter().map(|r| r.n_shared).sum(),
            n_shared_best: rs.iter().filter(|r| r.best_shared).count(),
            h222_min,
            h222_max,
            best_h222_min,
            best_h222_max,
        });
    }
    (table1, table2)
}

fn soft_checks(records: &[TensorRecord], table2: &[Table2Row]) -> Vec<String> {
    let mut out = Vec::new();
    let shared_min = table2.iter().filter_map(|r| r.h222_min).fold(f64::INFINITY, f64::min);
    if let Some(allc) = table2
        .iter()
        .find(|r| r.subset == SubsetLabel::AllComplex)
        .and_then(|r| r.best_h222_max)
    {
        if shared_min.is_finite() && shared_min <= allc {
            out.push(format!(
                "smallest shared |h222| {shared_min} does not exceed the all-complex maximum {allc}"
            ));
        }
    }
    for r in records {
        if r.low_mrank_closure_minima > 0 {
            out.push(format!(
                "tensor {}: {} closure minima with mrank below (2,2,2)",
                r.tensor_id, r.low_mrank_closure_minima
            ));
        }
        if r.boundary_repeated_minima > 0 {
            out.push(format!(
                "tensor {}: {} rank-(2,2,2) minima with a repeated eigenvalue",
                r.tensor_id, r.boundary_repeated_minima
            ));
        }
        if r.verdict.as_deref() == Some("no_convergence") {
            out.push(format!("tensor {}: no rank-(2,2,2) start converged", r.tensor_id));
        }
    }
    out
}

/// Full campaign. Tensors are processed in parallel; records are kept in
/// tensor order so the report does not depend on scheduling.
pub fn simulate(cfg: &SimulationConfig) -> Result<SimulationReport, HarnessError> {
    cfg.validate()?;
    let records: Vec<TensorRecord> = (0..cfg.n_tensors)
        .into_par_iter()
        .map(|id| process_tensor(cfg, id))
        .collect::<Result<_, _>>()?;
    let (table1, table2) = aggregate(&records, &cfg.engines);
    let warnings = soft_checks(&records, &table2);
    Ok(SimulationReport {
        config: cfg.clone(),
        records,
        table1,
        table2,
        warnings,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn table1_csv(report: &SimulationReport) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["engine", "n_distinct", "count"])?;
    for r in &report.table1 {
        w.write_record([
            r.engine.name().to_string(),
            r.n_distinct.to_string(),
            r.count.to_string(),
        ])?;
    }
    finish(w)
}

pub fn table2_csv(report: &SimulationReport) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "subset",
        "n_tensors",
        "n_real_min",
        "n_shared",
        "n_shared_best",
        "h222_min",
        "h222_max",
    ])?;
    for r in &report.table2 {
        w.write_record([
            r.subset.name().to_string(),
            r.n_tensors.to_string(),
            r.n_real_min.to_string(),
            r.n_shared.to_string(),
            r.n_shared_best.to_string(),
            opt(r.h222_min),
            opt(r.h222_max),
        ])?;
    }
    finish(w)
}

pub fn h222_series_csv(report: &SimulationReport) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["tensor_id", "h222_best_triu"])?;
    for r in &report.records {
        let h = r.engine(Problem::S2barTriu).and_then(|e| e.best_h222);
        w.write_record([r.tensor_id.to_string(), opt(h)])?;
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String, HarnessError> {
    let bytes = w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn report_json(report: &SimulationReport) -> Result<String, HarnessError> {
    Ok(serde_json::to_string_pretty(report)?)
}

/// Writes `table1.csv`, `table2.csv`, `h222_series.csv` and `report.json`.
pub fn write_outputs(report: &SimulationReport, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("table1.csv"), table1_csv(report)?)?;
    std::fs::write(dir.join("table2.csv"), table2_csv(report)?)?;
    std::fs::write(dir.join("h222_series.csv"), h222_series_csv(report)?)?;
    std::fs::write(dir.join("report.json"), report_json(report)? + "\n")?;
    Ok(())
}

/// Masked leading-core norm with each factor replaced by `Q_m^T F_m`, where
/// `Q_m` is the ordered product of plane rotations over all index pairs.
struct RotationObjective<'a> {
    z: &'a Tensor3,
    factors: [Matrix; 3],
    mask: CoreMask,
    params: Vec<(usize, usize, usize)>,
}

impl<'a> RotationObjective<'a> {
    fn new(z: &'a Tensor3, f: &FactorTriple, mask: CoreMask) -> Self {
        let dims = z.dims();
        let mut params = Vec::new();
        for (m, &n) in dims.iter().enumerate() {
            for a in 0..n {
                for b in a + 1..n {
                    params.push((m, a, b));
                }
            }
        }
        RotationObjective {
            z,
            factors: [f.s.clone(), f.t.clone(), f.u.clone()],
            mask,
            params,
        }
    }

    /// Objective with the listed parameters set (all others zero).
    fn eval(&self, set: &[(usize, f64)]) -> Result<f64, TensorError> {
        let mut f = self.factors.clone();
        let mut set = set.to_vec();
        set.sort_by_key(|&(p, _)| p);
        // Q = G(p1) G(p2) ..., so Q^T F applies the lowest index first
        for &(p, theta) in &set {
            let (m, a, b) = self.params[p];
            apply_givens(&mut f[m], Side::Rows, a, b, theta).expect("parameter indices are in range");
        }
        let [s, t, u] = f;
        let core = crate::tensor::multilinear_transform(&s.transpose(), &t.transpose(), &u.transpose(), self.z)?;
        Ok(self.mask.norm_sq(&core))
    }
}

/// Largest eigenvalue of the finite-difference Hessian of the masked
/// objective in all plane-rotation angles, at the given factors. A local
/// maximum gives a value near zero.
pub fn hessian_check(z: &Tensor3, factors: &FactorTriple, mask: CoreMask) -> Result<f64, TensorError> {
    if factors.ranks() != [2, 2, 2] {
        return Err(TensorError::DimensionMismatch(format!(
            "Hessian check needs two columns per factor, got {:?}",
            factors.ranks()
        )));
    }
    let obj = RotationObjective::new(z, factors, mask);
    let n = obj.params.len();
    let h = HESSIAN_STEP;
    let f0 = obj.eval(&[])?;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>, TensorError> {
            let mut row = vec![0.0; n];
            let fp = obj.eval(&[(i, h)])?;
            let fm = obj.eval(&[(i, -h)])?;
            row[i] = (fp - 2.0 * f0 + fm) / (h * h);
            for (j, slot) in row.iter_mut().enumerate().skip(i + 1) {
                let pp = obj.eval(&[(i, h), (j, h)])?;
                let pm = obj.eval(&[(i, h), (j, -h)])?;
                let mp = obj.eval(&[(i, -h), (j, h)])?;
                let mm = obj.eval(&[(i, -h), (j, -h)])?;
                *slot = (pp - pm - mp + mm) / (4.0 * h * h);
            }
            Ok(row)
        })
        .collect::<Result<_, _>>()?;
    let mut hess = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            hess[(i, j)] = rows[i][j];
            hess[(j, i)] = rows[i][j];
        }
    }
    Ok(sym_max_eigenvalue(&hess))
}

/// Factors with the first column of `S` swapped for a complement
/// direction: a quarter turn in the plane of basis vectors 1 and 3.
pub fn swap_perturbation(factors: &FactorTriple) -> FactorTriple {
    let mut s = complete_basis(&factors.s);
    if s.ncols() > 2 {
        apply_givens(&mut s, Side::Cols, 0, 2, std::f64::consts::FRAC_PI_2).expect("three columns present");
    }
    FactorTriple {
        s: s.columns(0, factors.s.ncols()).clone_owned(),
        t: factors.t.clone(),
        u: factors.u.clone(),
    }
}
