//! Implicit midpoint time stepping, the outer fixed-point iteration and admissibility checks.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::constants::{bochner_norm, embedding_ratio_estimate, triple_distance, NormSpec, Spatial, Temporal, Track};
use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::model::{Frozen, Model, ModelKind, State};
use crate::sparse::{norm2, Csr, LuSolver};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveMode {
    Monolithic,
    FixedPoint,
}

impl SolveMode {
    pub fn name(self) -> &'static str {
        match self {
            SolveMode::Monolithic => "MONOLITHIC",
            SolveMode::FixedPoint => "FIXED_POINT",
        }
    }
}

impl fmt::Display for SolveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolveMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<SolveMode> {
        match s.trim().to_ascii_uppercase().as_str() {
            "MONOLITHIC" => Ok(SolveMode::Monolithic),
            "FIXED_POINT" => Ok(SolveMode::FixedPoint),
            other => Err(Error::Config(format!("unknown solver mode '{other}'"))),
        }
    }
}

/// Newton controls for one implicit midpoint step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonOptions {
    /// absolute tolerance on ‖R_free‖₂·√(element count)
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { tol: 1e-10, max_iter: 25, max_halvings: 10 }
    }
}

/// Bounds of the admissible set and the embedding-estimate controls.
#[derive(Clone, Copy, Debug)]
pub struct AdmissibilityBounds {
    pub m_bar: f64,
    pub big_m_bar: f64,
    pub kappa: f64,
    /// bound on ‖ℬv_t‖ in C(0,T;L2) for the elastic kind; `m_bar` when absent
    pub a_bar: Option<f64>,
    pub samples: usize,
    pub seed: u64,
}

impl AdmissibilityBounds {
    pub fn new(m_bar: f64, big_m_bar: f64, kappa: f64) -> AdmissibilityBounds {
        AdmissibilityBounds { m_bar, big_m_bar, kappa, a_bar: None, samples: 32, seed: 0 }
    }
}

/// One observed Bochner norm against its bound.
#[derive(Clone, Debug, PartialEq)]
pub struct Observed {
    pub name: &'static str,
    pub value: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdmissibilityRecord {
    pub m_bar: f64,
    pub big_m_bar: f64,
    pub kappa: f64,
    pub observed: Vec<Observed>,
    pub member: bool,
    /// embedding estimate used in the smallness term
    pub embedding_constant: f64,
    pub smallness_lhs: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SolveReport {
    /// Newton iterations per step (of the final sweep in fixed-point mode)
    pub newton_iters: Vec<usize>,
    /// scaled residual history per step, starting with the initial guess
    pub newton_residuals: Vec<Vec<f64>>,
    /// degeneracy margin at every time level, initial level included
    pub degeneracy_margin: Vec<f64>,
    pub fixed_point_distances: Vec<f64>,
    pub fixed_point_ratios: Vec<f64>,
    pub outer_iterations: Option<usize>,
    pub fixed_point_converged: Option<bool>,
    pub admissibility: Option<AdmissibilityRecord>,
}

impl SolveReport {
    pub fn min_margin(&self) -> f64 {
        self.degeneracy_margin.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub kind: ModelKind,
    pub mesh: Arc<Mesh>,
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub report: SolveReport,
}

impl Trajectory {
    pub fn from_states(kind: ModelKind, mesh: Arc<Mesh>, dt: f64, states: Vec<State>) -> Trajectory {
        let times = states.iter().map(|s| s.t).collect();
        Trajectory { kind, mesh, dt, times, states, report: SolveReport::default() }
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn final_state(&self) -> &State {
        self.states.last().expect("trajectory holds the initial state")
    }

    pub fn final_time(&self) -> f64 {
        self.final_state().t
    }

    /// (u_t^{n+1} − u_t^n)/Δt, one per step.
    pub fn accelerations(&self) -> Vec<Vec<f64>> {
        self.states
            .windows(2)
            .map(|w| w[1].ut.iter().zip(&w[0].ut).map(|(a, b)| (a - b) / self.dt).collect())
            .collect()
    }

    /// Level-wise difference self − other.
    pub fn difference(&self, other: &Trajectory) -> Result<Trajectory> {
        if self.states.len() != other.states.len() || (self.dt - other.dt).abs() > 1e-14 * self.dt {
            return Err(Error::InvalidArgument("trajectories live on different time grids".into()));
        }
        let states = self
            .states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| {
                if a.u.len() != b.u.len() {
                    return Err(Error::InvalidArgument("trajectories have different sizes".into()));
                }
                Ok(State {
                    t: a.t,
                    u: a.u.iter().zip(&b.u).map(|(x, y)| x - y).collect(),
                    ut: a.ut.iter().zip(&b.ut).map(|(x, y)| x - y).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Trajectory::from_states(self.kind, self.mesh.clone(), self.dt, states))
    }

    /// Copy with every field multiplied by `a`.
    pub fn scaled(&self, a: f64) -> Trajectory {
        let states = self
            .states
            .iter()
            .map(|s| State { t: s.t, u: s.u.iter().map(|x| a * x).collect(), ut: s.ut.iter().map(|x| a * x).collect() })
            .collect();
        Trajectory::from_states(self.kind, self.mesh.clone(), self.dt, states)
    }

    /// max_n max_i |u_{n+1} − u_n − Δt/2 (u_t^n + u_t^{n+1})|.
    pub fn midpoint_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for w in self.states.windows(2) {
            for i in 0..w[0].u.len() {
                let d = w[1].u[i] - w[0].u[i] - 0.5 * self.dt * (w[0].ut[i] + w[1].ut[i]);
                worst = worst.max(d.abs());
            }
        }
        worst
    }
}

fn step_count(t_final: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("time step {dt} must be positive")));
    }
    if !(t_final >= 0.0) || !t_final.is_finite() {
        return Err(Error::InvalidArgument(format!("final time {t_final} must be nonnegative")));
    }
    let n = (t_final / dt).round();
    if (n * dt - t_final).abs() > 1e-9 * t_final.max(dt) {
        return Err(Error::InvalidArgument(format!("T = {t_final} is not a multiple of dt = {dt}")));
    }
    Ok(n as usize)
}

fn check_initial(model: &Model, initial: &State) -> Result<f64> {
    let n = model.n_dofs();
    if initial.u.len() != n || initial.ut.len() != n {
        return Err(Error::InvalidArgument(format!(
            "initial state has sizes ({}, {}), model expects {}",
            initial.u.len(),
            initial.ut.len(),
            n
        )));
    }
    let nn = model.mesh().n_nodes();
    for c in 0..model.components() {
        for i in model.mesh().boundary_nodes() {
            if initial.u[c * nn + i] != 0.0 || initial.ut[c * nn + i] != 0.0 {
                return Err(Error::InvalidArgument(format!("initial data nonzero at boundary node {i}")));
            }
        }
    }
    if initial.u.iter().chain(&initial.ut).any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("initial data not finite".into()));
    }
    let margin = model.margin_from(&initial.u, &initial.ut);
    if !(margin > model.floor()) {
        return Err(Error::Degeneracy { time: initial.t, margin, floor: model.floor() });
    }
    Ok(margin)
}

struct StepOutcome {
    state: State,
    history: Vec<f64>,
}

/// Midpoint quantities for a trial end velocity.
fn midpoint(s: &State, vt1: &[f64], dt: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = vt1.len();
    let mut um = Vec::with_capacity(n);
    let mut vm = Vec::with_capacity(n);
    let mut am = Vec::with_capacity(n);
    for i in 0..n {
        um.push(s.u[i] + 0.25 * dt * (s.ut[i] + vt1[i]));
        vm.push(0.5 * (s.ut[i] + vt1[i]));
        am.push((vt1[i] - s.ut[i]) / dt);
    }
    (um, vm, am)
}

/// One implicit midpoint step solved by damped Newton in the end velocity.
fn midpoint_step(
    model: &Model,
    s: &State,
    dt: f64,
    frozen: Option<(&[f64], &[f64])>,
    opts: &NewtonOptions,
) -> Result<StepOutcome> {
    let t_mid = s.t + 0.5 * dt;
    let t_end = s.t + dt;
    let scale = (model.mesh().n_elements() as f64).sqrt();
    let fz = frozen.map(|(v, vt)| Frozen { v, vt });
    let eval = |x: &[f64]| -> Result<(Vec<f64>, f64)> {
        let vt1 = model.expand(x);
        let (um, vm, am) = midpoint(s, &vt1, dt);
        let r = model.restrict(&model.residual_at(t_mid, &um, &vm, &am, fz)?);
        let nr = norm2(&r) * scale;
        Ok((r, if nr.is_finite() { nr } else { f64::INFINITY }))
    };

    let mut x = model.restrict(&s.ut);
    let (mut r, mut norm) = eval(&x)?;
    let mut history = vec![norm];
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let vt1 = model.expand(&x);
        let (um, vm, am) = midpoint(s, &vt1, dt);
        let jac = model.jacobians_at(t_mid, &um, &vm, &am, fz)?;
        let sparse = Csr::linear_combination(&[(1.0 / dt, &jac.m), (0.5, &jac.c), (0.25 * dt, &jac.k)]);
        let sparse = sparse.restrict(model.free_dofs());
        let lu = match &jac.c_dense {
            None => LuSolver::new(&sparse)?,
            Some(cd) => {
                let free = model.free_dofs();
                let mut d = sparse.to_dense();
                for (a, &i) in free.iter().enumerate() {
                    for (b, &j) in free.iter().enumerate() {
                        d[(a, b)] += 0.5 * cd[(i, j)];
                    }
                }
                LuSolver::from_dense(d)?
            }
        };
        let dx = lu.solve(&r);
        let mut lambda = 1.0;
        let mut accepted = None;
        let mut last_err = None;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a - lambda * b).collect();
            match eval(&trial) {
                Ok((rt, nt)) => {
                    let ok = nt <= norm || nt <= opts.tol;
                    accepted = Some((trial, rt, nt));
                    if ok {
                        break;
                    }
                }
                Err(e @ Error::Degeneracy { .. }) => last_err = Some(e),
                Err(e) => return Err(e),
            }
            lambda *= 0.5;
        }
        match accepted {
            Some((xt, rt, nt)) => {
                x = xt;
                r = rt;
                norm = nt;
            }
            None => return Err(last_err.expect("no trial evaluated").at_time(t_end)),
        }
        history.push(norm);
        if norm <= opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NewtonFailure { time: t_end, iterations: history.len() - 1, residual: norm });
    }
    let ut = model.expand(&x);
    let u: Vec<f64> = (0..ut.len()).map(|i| s.u[i] + 0.5 * dt * (s.ut[i] + ut[i])).collect();
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NewtonFailure { time: t_end, iterations: history.len() - 1, residual: norm });
    }
    Ok(StepOutcome { state: State { t: t_end, u, ut }, history })
}

fn record_step(report: &mut SolveReport, model: &Model, out: &StepOutcome) -> Result<()> {
    let margin = model.margin_from(&out.state.u, &out.state.ut);
    if !(margin > model.floor()) {
        return Err(Error::Degeneracy { time: out.state.t, margin, floor: model.floor() });
    }
    report.degeneracy_margin.push(margin);
    report.newton_iters.push(out.history.len() - 1);
    report.newton_residuals.push(out.history.clone());
    Ok(())
}

/// Monolithic implicit midpoint integration over [t₀, t₀ + T].
pub fn integrate(model: &Model, initial: &State, t_final: f64, dt: f64) -> Result<Trajectory> {
    integrate_with(model, initial, t_final, dt, &NewtonOptions::default())
}

pub fn integrate_with(model: &Model, initial: &State, t_final: f64, dt: f64, opts: &NewtonOptions) -> Result<Trajectory> {
    let n = step_count(t_final, dt)?;
    let margin0 = check_initial(model, initial)?;
    let mut report = SolveReport { degeneracy_margin: vec![margin0], ..Default::default() };
    let mut states = Vec::with_capacity(n + 1);
    states.push(initial.clone());
    for k in 0..n {
        let mut out = midpoint_step(model, &states[k], dt, None, opts)?;
        out.state.t = initial.t + (k + 1) as f64 * dt;
        record_step(&mut report, model, &out)?;
        states.push(out.state);
    }
    let mut traj = Trajectory::from_states(model.kind(), model.mesh_arc(), dt, states);
    traj.report = report;
    Ok(traj)
}

/// One application of the fixed-point operator: the frozen problem over the whole window.
pub fn apply_fixed_point_operator(model: &Model, prev: &Trajectory, opts: &NewtonOptions) -> Result<Trajectory> {
    let initial = &prev.states[0];
    let mut report = SolveReport { degeneracy_margin: vec![model.margin_from(&initial.u, &initial.ut)], ..Default::default() };
    let mut states = Vec::with_capacity(prev.states.len());
    states.push(initial.clone());
    for k in 0..prev.steps() {
        let (a, b) = (&prev.states[k], &prev.states[k + 1]);
        let v: Vec<f64> = a.u.iter().zip(&b.u).map(|(x, y)| 0.5 * (x + y)).collect();
        let vt: Vec<f64> = a.ut.iter().zip(&b.ut).map(|(x, y)| 0.5 * (x + y)).collect();
        let mut out = midpoint_step(model, &states[k], prev.dt, Some((&v, &vt)), opts)?;
        out.state.t = prev.states[k + 1].t;
        record_step(&mut report, model, &out)?;
        states.push(out.state);
    }
    let mut traj = Trajectory::from_states(model.kind(), model.mesh_arc(), prev.dt, states);
    traj.report = report;
    Ok(traj)
}

/// Outer fixed-point iteration v^{m+1} = 𝒯 v^m started from the constant extension of
/// the initial state. Stops at the first m with |||v^{m+1} − v^m||| ≤ tol; that m is
/// reported as the iteration count. Non-convergence is reported, not raised.
pub fn fixed_point_outer(model: &Model, initial: &State, t_final: f64, dt: f64, max_outer: usize, tol: f64) -> Result<Trajectory> {
    fixed_point_outer_with(model, initial, t_final, dt, max_outer, tol, &NewtonOptions::default())
}

pub fn fixed_point_outer_with(
    model: &Model,
    initial: &State,
    t_final: f64,
    dt: f64,
    max_outer: usize,
    tol: f64,
    opts: &NewtonOptions,
) -> Result<Trajectory> {
    let n = step_count(t_final, dt)?;
    check_initial(model, initial)?;
    if max_outer == 0 {
        return Err(Error::InvalidArgument("max_outer must be >= 1".into()));
    }
    let states = (0..=n).map(|k| State { t: initial.t + k as f64 * dt, ..initial.clone() }).collect();
    let mut prev = Trajectory::from_states(model.kind(), model.mesh_arc(), dt, states);
    let mut distances: Vec<f64> = Vec::new();
    let mut ratios = Vec::new();
    let mut converged_at = None;
    for m in 0..=max_outer {
        let next = apply_fixed_point_operator(model, &prev, opts)?;
        let d = triple_distance(&next, &prev)?;
        if let Some(&last) = distances.last() {
            ratios.push(if last > 0.0 { d / last } else { 0.0 });
        }
        distances.push(d);
        prev = next;
        if d <= tol {
            converged_at = Some(m);
            break;
        }
    }
    let mut report = std::mem::take(&mut prev.report);
    report.fixed_point_distances = distances;
    report.fixed_point_ratios = ratios;
    report.outer_iterations = Some(converged_at.unwrap_or(max_outer));
    report.fixed_point_converged = Some(converged_at.is_some());
    prev.report = report;
    Ok(prev)
}

fn max_exponent<F: Fn(&crate::material::ElementMaterial) -> f64>(model: &Model, f: F) -> f64 {
    model.material().elements().iter().map(f).fold(1.0, f64::max)
}

/// Observed Bochner norms of the trajectory against the admissible-set bounds.
pub fn check_admissibility(traj: &Trajectory, model: &Model, bounds: &AdmissibilityBounds) -> Result<AdmissibilityRecord> {
    let t_span = traj.final_time() - traj.states[0].t;
    let norm = |s, t, tr| bochner_norm(traj, NormSpec::new(s, t, tr));
    let m = bounds.m_bar;
    let big = bounds.big_m_bar;
    let (observed, r, smallness_norm) = match model.kind() {
        ModelKind::PressurePlaplace => {
            let p = max_exponent(model, |e| e.p);
            let o3 = norm(Spatial::GradLqPlus1(p), Temporal::Sup, Track::U)?;
            (
                vec![
                    Observed { name: "ut_Linf_L2", value: norm(Spatial::L2, Temporal::Sup, Track::Ut)?, bound: m },
                    Observed { name: "grad_ut_L2_L2", value: norm(Spatial::GradL2, Temporal::L2, Track::Ut)?, bound: m },
                    Observed { name: "grad_u_Linf_Lp1", value: o3, bound: big },
                ],
                p + 1.0,
                o3,
            )
        }
        ModelKind::PotentialViscosity => {
            let q = max_exponent(model, |e| e.q);
            let o3 = norm(Spatial::GradLqPlus1(q), Temporal::Sup, Track::Ut)?;
            (
                vec![
                    Observed { name: "utt_L2_L2", value: norm(Spatial::L2, Temporal::L2, Track::Utt)?, bound: m },
                    Observed { name: "grad_ut_C_L2", value: norm(Spatial::GradL2, Temporal::Sup, Track::Ut)?, bound: m },
                    Observed { name: "grad_ut_C_Lq1", value: o3, bound: big },
                ],
                q + 1.0,
                o3,
            )
        }
        ModelKind::ElasticCoupled => {
            let q = max_exponent(model, |e| e.q);
            let o3 = norm(Spatial::VoigtLqPlus1(q), Temporal::Sup, Track::Ut)?;
            (
                vec![
                    Observed { name: "utt_L2_L2", value: norm(Spatial::L2, Temporal::L2, Track::Utt)?, bound: m },
                    Observed {
                        name: "But_C_L2",
                        value: norm(Spatial::VoigtL2, Temporal::Sup, Track::Ut)?,
                        bound: bounds.a_bar.unwrap_or(m),
                    },
                    Observed { name: "But_C_Lq1", value: o3, bound: big },
                ],
                q + 1.0,
                o3,
            )
        }
        _ => {
            let q = max_exponent(model, |e| e.q);
            let o3 = norm(Spatial::GradLqPlus1(q), Temporal::LqPlus1(q), Track::Ut)?;
            (
                vec![
                    Observed { name: "utt_L2_L2", value: norm(Spatial::L2, Temporal::L2, Track::Utt)?, bound: m },
                    Observed { name: "grad_ut_Linf_L2", value: norm(Spatial::GradL2, Temporal::Sup, Track::Ut)?, bound: m },
                    Observed { name: "grad_ut_Lq1_Lq1", value: o3, bound: big },
                ],
                q + 1.0,
                o3,
            )
        }
    };
    let member = observed.iter().all(|o| o.value <= o.bound);
    let k = model.material().max_abs_k();
    let embedding_constant = if model.mesh().interior_nodes().is_empty() {
        0.0
    } else {
        embedding_ratio_estimate(model.mesh(), Spatial::GradLqPlus1(r - 1.0), Spatial::LInf, bounds.samples.max(1), bounds.seed)?
    };
    let smallness_lhs = if model.kind() == ModelKind::PressurePlaplace {
        2.0 * k * embedding_constant * smallness_norm
    } else {
        let q = r - 1.0;
        2.0 * k * embedding_constant * (bounds.kappa + t_span.powf(q / (q + 1.0)) * smallness_norm)
    };
    Ok(AdmissibilityRecord {
        m_bar: bounds.m_bar,
        big_m_bar: bounds.big_m_bar,
        kappa: bounds.kappa,
        observed,
        member,
        embedding_constant,
        smallness_lhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::interpolate_dirichlet;
    use crate::material::{ElementMaterial, MaterialSpec};
    use crate::mesh::interval_mesh;

    fn model(kind: ModelKind, n: usize, m: ElementMaterial) -> Model {
        let mesh = Arc::new(interval_mesh(n, 1.0).unwrap());
        let mat = MaterialSpec::uniform(&mesh, m);
        Model::new(kind, mesh, mat).unwrap()
    }

    fn sine_state(model: &Model, amp: f64) -> State {
        State { t: 0.0, u: interpolate_dirichlet(model.mesh(), |x| amp * (std::f64::consts::PI * x[0]).sin()), ut: vec![0.0; model.n_dofs()] }
    }

    fn linear_energy(model: &Model, s: &State) -> f64 {
        let mesh = model.mesh();
        let m = crate::fem::mass_matrix(mesh, crate::fem::Weight::Const(1.0));
        let k = crate::fem::stiffness_matrix(mesh, &vec![1.0; mesh.n_elements()]);
        0.5 * crate::sparse::dot(&s.ut, &m.matvec(&s.ut)) + 0.5 * crate::sparse::dot(&s.u, &k.matvec(&s.u))
    }

    #[test]
    fn linear_wave_conserves_energy() {
        let m = model(ModelKind::PressureViscosity, 32, ElementMaterial::default());
        let s0 = sine_state(&m, 1.0);
        let traj = integrate(&m, &s0, 2.0, 1.0 / 64.0).unwrap();
        let e0 = linear_energy(&m, &s0);
        for s in &traj.states {
            assert!((linear_energy(&m, s) - e0).abs() < 1e-9 * e0);
        }
        assert!(traj.midpoint_defect() < 1e-12);
    }

    #[test]
    fn damped_energy_decreases() {
        let m = model(ModelKind::PressureViscosity, 32, ElementMaterial { b: 0.5, ..Default::default() });
        let traj = integrate(&m, &sine_state(&m, 1.0), 1.0, 1.0 / 32.0).unwrap();
        let e: Vec<f64> = traj.states.iter().map(|s| linear_energy(&m, s)).collect();
        assert!(e.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn k_zero_fixed_point_one_iteration() {
        let m = model(ModelKind::PressureViscosity, 16, ElementMaterial { b: 1.0, delta: 0.5, q: 3.0, ..Default::default() });
        let s0 = sine_state(&m, 0.1);
        let fp = fixed_point_outer(&m, &s0, 0.25, 1.0 / 32.0, 5, 1e-12).unwrap();
        assert_eq!(fp.report.outer_iterations, Some(1));
        let mono = integrate(&m, &s0, 0.25, 1.0 / 32.0).unwrap();
        assert!(triple_distance(&fp, &mono).unwrap() < 1e-10);
    }

    #[test]
    fn small_data_fixed_point_contracts() {
        let m = model(
            ModelKind::PressureViscosity,
            16,
            ElementMaterial { b: 1.0, delta: 0.5, q: 3.0, k: 1.0, ..Default::default() },
        );
        let s0 = sine_state(&m, 1e-3);
        let fp = fixed_point_outer(&m, &s0, 0.25, 1.0 / 32.0, 8, 1e-11).unwrap();
        assert_eq!(fp.report.fixed_point_converged, Some(true));
        assert!(fp.report.fixed_point_ratios.iter().all(|&r| r < 1.0));
        let mono = integrate(&m, &s0, 0.25, 1.0 / 32.0).unwrap();
        assert!(triple_distance(&fp, &mono).unwrap() < 1e-10);
    }

    #[test]
    fn degeneracy_is_reported() {
        let m = model(ModelKind::PressureViscosity, 16, ElementMaterial { b: 1.0, k: 1.0, ..Default::default() });
        match integrate(&m, &sine_state(&m, 0.6), 0.5, 1.0 / 32.0) {
            Err(Error::Degeneracy { margin, .. }) => assert!(margin <= 0.05),
            other => panic!("expected degeneracy, got {other:?}"),
        }
    }

    #[test]
    fn admissibility_trivial_cases() {
        let m = model(ModelKind::PressureViscosity, 16, ElementMaterial { b: 1.0, k: 0.5, q: 2.0, ..Default::default() });
        let zero = integrate(&m, &State::zeros(0.0, m.n_dofs()), 0.25, 1.0 / 16.0).unwrap();
        let b = AdmissibilityBounds::new(1.0, 1.0, 0.3);
        let rec = check_admissibility(&zero, &m, &b).unwrap();
        assert!(rec.member);
        assert!((rec.smallness_lhs - 2.0 * 0.5 * rec.embedding_constant * 0.3).abs() < 1e-15);

        let traj = integrate(&m, &sine_state(&m, 0.1), 0.25, 1.0 / 16.0).unwrap();
        assert!(!check_admissibility(&traj, &m, &AdmissibilityBounds::new(0.0, 0.0, 0.0)).unwrap().member);
        let a = check_admissibility(&traj, &m, &b).unwrap();
        let s = check_admissibility(&traj.scaled(-3.0), &m, &b).unwrap();
        for (x, y) in a.observed.iter().zip(&s.observed) {
            assert!((y.value - 3.0 * x.value).abs() < 1e-12 * (1.0 + y.value));
        }
    }

    #[test]
    fn rejects_bad_grid() {
        let m = model(ModelKind::PressureViscosity, 8, ElementMaterial::default());
        assert!(integrate(&m, &State::zeros(0.0, m.n_dofs()), 1.0, 0.3).is_err());
        assert!(integrate(&m, &State::zeros(0.0, m.n_dofs()), 1.0, 0.0).is_err());
    }
}
