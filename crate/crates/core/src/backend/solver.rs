//! Levenberg-Marquardt on the product manifold of keyframe states and
//! landmarks, with landmarks eliminated through the Schur complement.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::factor::{Calibration, Factor, FactorError, FactorKind, Values, VarKey};
use crate::state::STATE_DIM;

/// Accepted steps that failed to lower the cost, across the whole process.
static ACCEPTED_STEP_VIOLATIONS: AtomicUsize = AtomicUsize::new(0);
static ACCEPTED_STEPS: AtomicUsize = AtomicUsize::new(0);

/// Number of accepted LM steps (process-wide) whose re-evaluated cost did not
/// decrease. The solver contract requires this to stay zero.
pub fn accepted_step_violations() -> usize {
    ACCEPTED_STEP_VIOLATIONS.load(Ordering::Relaxed)
}

/// Number of accepted LM steps taken so far in this process.
pub fn accepted_steps() -> usize {
    ACCEPTED_STEPS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub relative_cost_tolerance: f64,
    pub step_tolerance: f64,
    pub initial_lambda: f64,
    pub max_lambda: f64,
    /// Costs below this are treated as already converged.
    pub absolute_cost_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            relative_cost_tolerance: 1e-8,
            step_tolerance: 1e-10,
            initial_lambda: 1e-4,
            max_lambda: 1e14,
            absolute_cost_tolerance: 1e-24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("window has no factors")]
    NoFactors,
    #[error("no fixed state or prior anchors the window (gauge freedom)")]
    Gauge,
    #[error("cost became non-finite")]
    Diverged,
    #[error(transparent)]
    Factor(#[from] FactorError),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    pub rejected_steps: usize,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// Variables, factors and the fixed set of one optimization problem.
#[derive(Debug, Clone)]
pub struct LocalWindow {
    pub values: Values,
    /// States held constant by the solver.
    pub fixed_states: BTreeSet<u64>,
    pub factors: Vec<Factor>,
    pub calib: Calibration,
}

impl LocalWindow {
    pub fn is_fixed(&self, key: VarKey) -> bool {
        match key {
            VarKey::State(id) => self.fixed_states.contains(&id),
            VarKey::Landmark(_) => false,
        }
    }

    /// Total robust cost `1/2 sum rho(|W r|^2)`.
    pub fn cost(&self) -> Result<f64, SolveError> {
        cost_of(&self.factors, &self.values, &self.calib)
    }

    /// Total cost per factor kind.
    pub fn cost_by_kind(&self) -> Result<BTreeMap<FactorKind, f64>, SolveError> {
        let mut out = BTreeMap::new();
        for f in &self.factors {
            let r = f.evaluate(&self.values, &self.calib)?;
            *out.entry(f.kind).or_insert(0.0) += 0.5 * f.robust_cost(f.whitened_sq_norm(&r));
        }
        Ok(out)
    }
}

fn cost_of(factors: &[Factor], values: &Values, calib: &Calibration) -> Result<f64, SolveError> {
    let mut c = 0.0;
    for f in factors {
        let r = f.evaluate(values, calib)?;
        c += 0.5 * f.robust_cost(f.whitened_sq_norm(&r));
    }
    if !c.is_finite() {
        return Err(SolveError::Diverged);
    }
    Ok(c)
}

/// Normal equations with landmark blocks kept separate for elimination.
struct Normal {
    hss: DMatrix<f64>,
    bs: DVector<f64>,
    hll: Vec<Matrix3<f64>>,
    bl: Vec<Vector3<f64>>,
    /// `(landmark index, state index) -> H_sl block (18x3)`.
    hsl: BTreeMap<(usize, usize), SMatrix<f64, STATE_DIM, 3>>,
}

struct Layout {
    states: BTreeMap<u64, usize>,
    landmarks: BTreeMap<u64, usize>,
    state_ids: Vec<u64>,
    landmark_ids: Vec<u64>,
}

impl Layout {
    fn new(w: &LocalWindow) -> Self {
        let state_ids: Vec<u64> = w.values.states.keys().copied().filter(|id| !w.fixed_states.contains(id)).collect();
        let landmark_ids: Vec<u64> = w.values.landmarks.keys().copied().collect();
        Self {
            states: state_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect(),
            landmarks: landmark_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect(),
            state_ids,
            landmark_ids,
        }
    }

    fn slot(&self, key: VarKey) -> Option<Slot> {
        match key {
            VarKey::State(id) => self.states.get(&id).map(|&i| Slot::State(i)),
            VarKey::Landmark(id) => self.landmarks.get(&id).map(|&i| Slot::Landmark(i)),
        }
    }
}

#[derive(Clone, Copy)]
enum Slot {
    State(usize),
    Landmark(usize),
}

fn build_normal(w: &LocalWindow, layout: &Layout) -> Result<Normal, SolveError> {
    let ns = layout.state_ids.len() * STATE_DIM;
    let nl = layout.landmark_ids.len();
    let mut n = Normal {
        hss: DMatrix::zeros(ns, ns),
        bs: DVector::zeros(ns),
        hll: vec![Matrix3::zeros(); nl],
        bl: vec![Vector3::zeros(); nl],
        hsl: BTreeMap::new(),
    };
    for f in &w.factors {
        let lin = f.linearize(&w.values, &w.calib)?;
        let mut r = &f.sqrt_info * &lin.residual;
        let mut js: Vec<DMatrix<f64>> = lin.jacobians.iter().map(|j| &f.sqrt_info * j).collect();
        if let Some(d) = f.huber {
            let s = r.norm_squared();
            let wt = super::factor::robust_weight(s, d).sqrt();
            r *= wt;
            for j in &mut js {
                *j *= wt;
            }
        }
        let slots: Vec<Option<Slot>> = f.keys.iter().map(|k| layout.slot(*k)).collect();
        for (a, sa) in slots.iter().enumerate() {
            let Some(sa) = sa else { continue };
            let ja = &js[a];
            let g = -(ja.transpose() * &r);
            match *sa {
                Slot::State(i) => {
                    let mut seg = n.bs.rows_mut(i * STATE_DIM, STATE_DIM);
                    seg += &g;
                }
                Slot::Landmark(l) => n.bl[l] += Vector3::from_column_slice(g.as_slice()),
            }
            for (b, sb) in slots.iter().enumerate() {
                let Some(sb) = sb else { continue };
                let block = ja.transpose() * &js[b];
                match (*sa, *sb) {
                    (Slot::State(i), Slot::State(k)) => {
                        let mut v = n.hss.view_mut((i * STATE_DIM, k * STATE_DIM), (STATE_DIM, STATE_DIM));
                        v += &block;
                    }
                    (Slot::State(i), Slot::Landmark(l)) => {
                        let e = n.hsl.entry((l, i)).or_insert_with(SMatrix::zeros);
                        *e += SMatrix::<f64, STATE_DIM, 3>::from_column_slice(block.as_slice());
                    }
                    (Slot::Landmark(l), Slot::Landmark(m)) if l == m => {
                        n.hll[l] += Matrix3::from_column_slice(block.as_slice());
                    }
                    _ => {}
                }
            }
        }
    }
    Ok(n)
}

/// Solves the damped system; returns the increment ordered (states, landmarks).
fn solve_damped(n: &Normal, lambda: f64) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
    let damp = |x: f64| lambda * x.max(1e-9);
    let mut s = n.hss.clone();
    for i in 0..s.nrows() {
        s[(i, i)] += damp(n.hss[(i, i)]);
    }
    let mut rhs = n.bs.clone();
    let mut hll_inv = Vec::with_capacity(n.hll.len());
    for h in &n.hll {
        let mut d = *h;
        for i in 0..3 {
            d[(i, i)] += damp(h[(i, i)]);
        }
        hll_inv.push(d.try_inverse()?);
    }
    // Group H_sl blocks per landmark.
    let mut per_landmark: Vec<Vec<(usize, &SMatrix<f64, STATE_DIM, 3>)>> = vec![Vec::new(); n.hll.len()];
    for (&(l, i), blk) in &n.hsl {
        per_landmark[l].push((i, blk));
    }
    for (l, blocks) in per_landmark.iter().enumerate() {
        let inv = hll_inv[l];
        let bl = inv * n.bl[l];
        for &(i, wi) in blocks {
            let wi_inv = wi * inv;
            let mut seg = rhs.rows_mut(i * STATE_DIM, STATE_DIM);
            seg -= wi * bl;
            for &(k, wk) in blocks {
                let mut v = s.view_mut((i * STATE_DIM, k * STATE_DIM), (STATE_DIM, STATE_DIM));
                v -= wi_inv * wk.transpose();
            }
        }
    }
    let dx = if s.nrows() == 0 {
        DVector::zeros(0)
    } else {
        let sym = (&s + s.transpose()) * 0.5;
        sym.cholesky()?.solve(&rhs)
    };
    let mut dl = Vec::with_capacity(n.hll.len());
    for (l, blocks) in per_landmark.iter().enumerate() {
        let mut b = n.bl[l];
        for &(i, wi) in blocks {
            b -= wi.transpose() * dx.rows(i * STATE_DIM, STATE_DIM);
        }
        dl.push(hll_inv[l] * b);
    }
    if dx.iter().chain(dl.iter().flat_map(|v| v.iter())).all(|x| x.is_finite()) {
        Some((dx, dl))
    } else {
        None
    }
}

fn has_anchor(w: &LocalWindow) -> bool {
    w.values.states.keys().any(|id| w.fixed_states.contains(id))
        || w.factors.iter().any(|f| f.kind == FactorKind::FixedPrior)
}

/// Minimizes the window cost in place.
pub fn solve(w: &mut LocalWindow, cfg: &SolverConfig) -> Result<SolveReport, SolveError> {
    if w.factors.is_empty() {
        return Err(SolveError::NoFactors);
    }
    if !has_anchor(w) {
        return Err(SolveError::Gauge);
    }
    let layout = Layout::new(w);
    let mut cost = w.cost()?;
    let mut report = SolveReport { initial_cost: cost, final_cost: cost, cost_history: vec![cost], ..Default::default() };
    if layout.state_ids.is_empty() && layout.landmark_ids.is_empty() {
        report.converged = true;
        return Ok(report);
    }
    let mut lambda = cfg.initial_lambda;
    let mut normal = build_normal(w, &layout)?;
    while report.iterations < cfg.max_iterations {
        if cost <= cfg.absolute_cost_tolerance {
            report.converged = true;
            break;
        }
        report.iterations += 1;
        let Some((dx, dl)) = solve_damped(&normal, lambda) else {
            lambda *= 10.0;
            report.rejected_steps += 1;
            if lambda > cfg.max_lambda {
                report.converged = true;
                break;
            }
            continue;
        };
        let step_norm = (dx.norm_squared() + dl.iter().map(|v| v.norm_squared()).sum::<f64>()).sqrt();
        let mut trial = w.values.clone();
        for (k, id) in layout.state_ids.iter().enumerate() {
            trial.retract(VarKey::State(*id), dx.rows(k * STATE_DIM, STATE_DIM).as_slice());
        }
        for (k, id) in layout.landmark_ids.iter().enumerate() {
            trial.retract(VarKey::Landmark(*id), dl[k].as_slice());
        }
        let new_cost = match cost_of(&w.factors, &trial, &w.calib) {
            Ok(c) => c,
            Err(SolveError::Diverged) | Err(SolveError::Factor(FactorError::Visual(_))) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        if new_cost < cost {
            let old = cost;
            w.values = trial;
            cost = cost_of(&w.factors, &w.values, &w.calib)?;
            ACCEPTED_STEPS.fetch_add(1, Ordering::Relaxed);
            if cost >= old {
                ACCEPTED_STEP_VIOLATIONS.fetch_add(1, Ordering::Relaxed);
            }
            debug_assert!(cost < old, "accepted LM step raised the cost from {old:e} to {cost:e}");
            report.cost_history.push(cost);
            lambda = (lambda / 10.0).max(1e-12);
            if (old - cost) <= cfg.relative_cost_tolerance * old || step_norm < cfg.step_tolerance {
                report.converged = true;
                break;
            }
            normal = build_normal(w, &layout)?;
        } else {
            report.rejected_steps += 1;
            if step_norm < cfg.step_tolerance {
                report.converged = true;
                break;
            }
            lambda *= 10.0;
            if lambda > cfg.max_lambda {
                report.converged = true;
                break;
            }
        }
    }
    if !cost.is_finite() {
        return Err(SolveError::Diverged);
    }
    report.final_cost = cost;
    Ok(report)
}

/// Marginal covariance of each free state (Schur complement inverse),
/// evaluated at the current estimate without damping.
pub fn state_covariances(w: &LocalWindow) -> Result<BTreeMap<u64, SMatrix<f64, STATE_DIM, STATE_DIM>>, SolveError> {
    let layout = Layout::new(w);
    let n = build_normal(w, &layout)?;
    let mut s = n.hss.clone();
    for (l, h) in n.hll.iter().enumerate() {
        let Some(inv) = h.try_inverse() else { continue };
        let blocks: Vec<_> = n.hsl.iter().filter(|((ll, _), _)| *ll == l).map(|((_, i), b)| (*i, *b)).collect();
        for &(i, wi) in &blocks {
            for &(k, wk) in &blocks {
                let mut v = s.view_mut((i * STATE_DIM, k * STATE_DIM), (STATE_DIM, STATE_DIM));
                v -= wi * inv * wk.transpose();
            }
        }
    }
    let inv = ((&s + s.transpose()) * 0.5).try_inverse().ok_or(SolveError::Gauge)?;
    Ok(layout
        .state_ids
        .iter()
        .enumerate()
        .map(|(k, id)| {
            (*id, SMatrix::from_fn(|r, c| inv[(k * STATE_DIM + r, k * STATE_DIM + c)]))
        })
        .collect())
}
