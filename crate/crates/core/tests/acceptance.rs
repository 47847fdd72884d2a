//! Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use westervelt::constants::{
    lp_norm, poincare_constant, random_field, triple_distance, uniform_grid, young_check, young_constant_valid,
    young_constant_verbatim, Exponent,
};
use westervelt::energy::{decay_fit, equipartition_residual, interface_jump, tol_energy, EnergyReport};
use westervelt::error::exit_code;
use westervelt::fem::{interpolate, interpolate_dirichlet, poisson_solve, PowerLaw};
use westervelt::manufactured::{l2_error, SineCos};
use westervelt::material::{ElementMaterial, MaterialSpec};
use westervelt::mesh::{interval_mesh, rect_mesh, tag_elements, Mesh, Tag};
use westervelt::model::{Frozen, Model, ModelKind, State};
use westervelt::stepper::{fixed_point_outer, integrate, Trajectory};
use westervelt::Error;

fn verdict(id: &str, title: &str, pass: bool, detail: String) {
    println!("[{}] {id} {title}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn sci(xs: &[f64]) -> String {
    let v: Vec<String> = xs.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", v.join(", "))
}

fn within(t: Instant, limit: Duration) -> bool {
    t.elapsed() <= limit
}

fn model_1d(kind: ModelKind, n: usize, m: ElementMaterial) -> Model {
    let mesh = Arc::new(interval_mesh(n, 1.0).unwrap());
    let mat = MaterialSpec::uniform(&mesh, m);
    Model::new(kind, mesh, mat).unwrap()
}

fn sine_state(model: &Model, amp: f64) -> State {
    State {
        t: 0.0,
        u: interpolate_dirichlet(model.mesh(), |x| amp * (PI * x[0]).sin()),
        ut: vec![0.0; model.n_dofs()],
    }
}

fn decay_material() -> ElementMaterial {
    ElementMaterial { c2: 1.0, b: 1.0, k: 1.0, eps: 1.0, p: 3.0, ..Default::default() }
}

// C1 -----------------------------------------------------------------------------------
const C1_N: usize = 128;
const C1_DT: f64 = 1.0 / 256.0;
const C1_T: f64 = 10.0;
const C1_WINDOW: (f64, f64) = (2.5, 10.0);
const C1_MIN_R2: f64 = 0.98;
const C1_LIMIT: Duration = Duration::from_secs(30);

#[test]
fn c1_exponential_decay() {
    let start = Instant::now();
    let m = model_1d(ModelKind::PressurePlaplace, C1_N, decay_material());
    let traj = integrate(&m, &sine_state(&m, 1e-2), C1_T, C1_DT).unwrap();
    let mut rep = EnergyReport::new(&traj, &m).unwrap();
    let tol = tol_energy(m.mesh());
    let increase = rep.max_increase();
    let fit = rep.fit_decay(C1_WINDOW).unwrap();
    let fast = within(start, C1_LIMIT);
    let pass = increase <= tol && fit.omega > 0.0 && fit.r_squared >= C1_MIN_R2 && fast;
    verdict(
        "C1",
        "exponential decay",
        pass,
        format!(
            "max step increase {increase:.3e} (tol {tol:.3e}), omega {:.4}, r2 {:.6} (>= {C1_MIN_R2}), {:.1?}",
            fit.omega,
            fit.r_squared,
            start.elapsed()
        ),
    );
    assert!(pass);
}

// C2 -----------------------------------------------------------------------------------
const C2_T: f64 = 50.0;
const C2_MIN_MARGIN: f64 = 0.9;
const C2_LIMIT: Duration = Duration::from_secs(180);

#[test]
fn c2_global_in_time() {
    let start = Instant::now();
    let m = model_1d(ModelKind::PressurePlaplace, C1_N, decay_material());
    let traj = integrate(&m, &sine_state(&m, 1e-2), C2_T, C1_DT).unwrap();
    let margin = traj.report.min_margin();
    let done = (traj.final_time() - C2_T).abs() < 1e-9;
    let pass = done && margin >= C2_MIN_MARGIN && within(start, C2_LIMIT);
    verdict(
        "C2",
        "global-in-time run",
        pass,
        format!("reached t = {:.3}, min margin {margin:.6} (>= {C2_MIN_MARGIN}), {:.1?}", traj.final_time(), start.elapsed()),
    );
    assert!(pass);
}

// C3 -----------------------------------------------------------------------------------
const C3_TOL: f64 = 1e-9;
const C3_MAX_OUTER: usize = 8;
const C3_AGREE: f64 = 1e-7;
const C3_LIMIT: Duration = Duration::from_secs(60);

#[test]
fn c3_fixed_point_contraction() {
    let start = Instant::now();
    let m = model_1d(
        ModelKind::PressureViscosity,
        64,
        ElementMaterial { c2: 1.0, b: 1.0, delta: 0.5, q: 3.0, k: 1.0, ..Default::default() },
    );
    let s0 = sine_state(&m, 1e-3);
    let fp = fixed_point_outer(&m, &s0, 0.5, 1.0 / 128.0, C3_MAX_OUTER, C3_TOL).unwrap();
    let mono = integrate(&m, &s0, 0.5, 1.0 / 128.0).unwrap();
    let dist = triple_distance(&fp, &mono).unwrap();
    let ratios = &fp.report.fixed_point_ratios;
    let contracting = ratios.iter().all(|&r| r < 1.0);
    let iters = fp.report.outer_iterations.unwrap();
    let converged = fp.report.fixed_point_converged == Some(true) && iters <= C3_MAX_OUTER;
    let pass = contracting && converged && dist <= C3_AGREE && within(start, C3_LIMIT);
    verdict(
        "C3",
        "fixed-point contraction",
        pass,
        format!(
            "{iters} outer iterations, ratios {:?}, |||fp - mono||| {dist:.3e} (<= {C3_AGREE}), {:.1?}",
            ratios.iter().map(|r| format!("{r:.2e}")).collect::<Vec<_>>(),
            start.elapsed()
        ),
    );
    assert!(pass);
}

// C4 -----------------------------------------------------------------------------------
const C4_LIMIT: Duration = Duration::from_secs(10);

#[test]
fn c4_degeneracy_detection() {
    let start = Instant::now();
    let m = model_1d(ModelKind::PressureViscosity, 64, ElementMaterial { b: 1.0, delta: 0.5, q: 3.0, k: 1.0, ..Default::default() });
    let lib = integrate(&m, &sine_state(&m, 0.6), 1.0, 1.0 / 64.0);
    let lib_ok = match &lib {
        Err(e @ Error::Degeneracy { time, margin, floor }) => {
            e.exit_code() == exit_code::DEGENERACY && time.is_finite() && margin.is_finite() && margin <= floor
        }
        _ => false,
    };
    let out = tempfile::tempdir().unwrap();
    let run = std::process::Command::new(env!("CARGO_BIN_EXE_westervelt"))
        .args(["run", "degeneracy_1d", "--out"])
        .arg(out.path())
        .output()
        .unwrap();
    let stderr = String::from_utf8_lossy(&run.stderr).to_string();
    let cli_ok = run.status.code() == Some(exit_code::DEGENERACY)
        && stderr.contains("degeneracy at t =")
        && stderr.contains("margin")
        && !stderr.to_ascii_lowercase().contains("nan");
    let pass = lib_ok && cli_ok && within(start, C4_LIMIT);
    verdict(
        "C4",
        "degeneracy detection",
        pass,
        format!(
            "library: {}, cli exit {:?}: {}, {:.1?}",
            lib.as_ref().err().map(|e| e.to_string()).unwrap_or_else(|| "no error".into()),
            run.status.code(),
            stderr.trim(),
            start.elapsed()
        ),
    );
    assert!(pass);
}

// C5 -----------------------------------------------------------------------------------
const C5_LEVELS: [usize; 3] = [16, 32, 64];
const C5_RATE: (f64, f64) = (1.8, 2.2);
const C5_LIMIT: Duration = Duration::from_secs(60);

fn mms_error(n: usize) -> f64 {
    let mat = ElementMaterial { c2: 1.0, k: 0.1, b: 0.1, delta: 0.5, q: 3.0, ..Default::default() };
    let exact = SineCos::from_material(&mat);
    let m = model_1d(ModelKind::PressureViscosity, n, mat).with_forcing(exact.forcing());
    let traj = integrate(&m, &exact.initial_state(m.mesh()).unwrap(), 1.0, 1.0 / n as f64).unwrap();
    traj.states.iter().map(|s| l2_error(m.mesh(), &s.u, |x| exact.u(x[0], s.t))).fold(0.0, f64::max)
}

#[test]
fn c5_manufactured_convergence() {
    let start = Instant::now();
    let errors: Vec<f64> = C5_LEVELS.iter().map(|&n| mms_error(n)).collect();
    let rates: Vec<f64> = errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let pass = rates.iter().all(|r| (C5_RATE.0..=C5_RATE.1).contains(r)) && within(start, C5_LIMIT);
    verdict(
        "C5",
        "manufactured-solution convergence",
        pass,
        format!("errors {}, rates {rates:.3?} (in [{}, {}]), {:.1?}", sci(&errors), C5_RATE.0, C5_RATE.1, start.elapsed()),
    );
    assert!(pass);
}

// C6 -----------------------------------------------------------------------------------
const C6_PAIRS: usize = 10_000;
const C6_STATES: usize = 100;
const C6_JVP_TOL: f64 = 1e-5;
const C6_POINCARE_REL: f64 = 0.01;
const C6_YOUNG_R: [f64; 4] = [1.5, 2.0, 3.0, 4.0];
const C6_LIMIT: Duration = Duration::from_secs(60);

fn monotonicity_violations(rng: &mut ChaCha8Rng) -> usize {
    let mut bad = 0;
    for q in [1.0, 2.0, 3.0, 5.0] {
        for _ in 0..C6_PAIRS {
            let delta: f64 = rng.random_range(0.0..=1.0);
            let law = PowerLaw { scale: vec![1.0], lin: vec![1.0 - delta], pow: vec![delta], r: vec![q] };
            let d = rng.random_range(1..=3usize);
            let g1: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let g2: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (f1, f2) = (law.flux(0, &g1), law.flux(0, &g2));
            let s: f64 = (0..d).map(|c| (f1[c] - f2[c]) * (g1[c] - g2[c])).sum();
            if s < -1e-14 {
                bad += 1;
            }
        }
    }
    bad
}

fn jvp_models() -> Vec<Model> {
    let line = Arc::new(interval_mesh(12, 1.0).unwrap());
    let pv = ElementMaterial { c2: 1.3, b: 0.8, delta: 0.4, q: 3.0, k: 0.7, ..Default::default() };
    let pp = ElementMaterial { c2: 1.1, b: 0.6, k: 0.9, eps: 0.7, p: 3.0, ..Default::default() };
    let lens = tag_elements(&line, |x| if x[0] > 0.5 { Tag::Solid } else { Tag::Fluid });
    let fluid = ElementMaterial { lambda: 1.4, rho: 0.9, b: 0.7, delta: 0.5, q: 3.0, k: 0.8, ..Default::default() };
    let solid = ElementMaterial { lambda: 2.5, rho: 1.7, b: 0.3, delta: 0.2, q: 2.0, k: 0.0, ..Default::default() };
    let ac_mat = MaterialSpec::by_tag(&lens, fluid, &BTreeMap::from([(Tag::Solid, solid)]));
    let rect = rect_mesh(4, 4, 1.0, 1.0).unwrap();
    let rect = Arc::new(tag_elements(&rect, |x| if x[0] > 0.5 { Tag::Solid } else { Tag::Fluid }));
    let ef = ElementMaterial { lambda: 1.2, rho: 1.1, b_hat: 0.9, delta: 0.5, q: 3.0, k: 0.6, ..Default::default() };
    let es = ElementMaterial { lambda: 1.0, mu: 0.7, rho: 1.3, b_hat: 0.5, delta: 0.3, q: 3.0, ..Default::default() };
    let el_mat = MaterialSpec::by_tag(&rect, ef, &BTreeMap::from([(Tag::Solid, es)]));
    vec![
        Model::new(ModelKind::PressureViscosity, line.clone(), MaterialSpec::uniform(&line, pv.clone())).unwrap(),
        Model::new(ModelKind::PressurePlaplace, line.clone(), MaterialSpec::uniform(&line, pp)).unwrap(),
        Model::new(ModelKind::PotentialViscosity, line.clone(), MaterialSpec::uniform(&line, pv)).unwrap(),
        Model::new(ModelKind::AcousticCoupled, Arc::new(lens), ac_mat).unwrap(),
        Model::new(ModelKind::ElasticCoupled, rect.clone(), el_mat).unwrap(),
    ]
}

fn random_vec(m: &Model, seed: u64, idx: u64, amp: f64) -> Vec<f64> {
    let n = m.mesh().n_nodes();
    let mut v = Vec::with_capacity(m.n_dofs());
    for c in 0..m.components() as u64 {
        v.extend(random_field(m.mesh(), seed, idx * 8 + c).iter().map(|x| amp * x));
    }
    debug_assert_eq!(v.len(), m.components() * n);
    v
}

fn add(a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + s * y).collect()
}

/// Worst relative mismatch between the Jacobian action and central differences.
fn jvp_error(m: &Model, sample: u64, frozen: bool) -> f64 {
    let seed = 1000 + m.kind() as u64;
    let u = random_vec(m, seed, 6 * sample, 0.15);
    let ut = random_vec(m, seed, 6 * sample + 1, 0.15);
    let utt = random_vec(m, seed, 6 * sample + 2, 0.5);
    let du = random_vec(m, seed, 6 * sample + 3, 1.0);
    let dut = random_vec(m, seed, 6 * sample + 4, 1.0);
    let dutt = random_vec(m, seed, 6 * sample + 5, 1.0);
    let v = random_vec(m, seed + 1, sample, 0.15);
    let vt = random_vec(m, seed + 2, sample, 0.15);
    let fz = if frozen { Some(Frozen { v: &v, vt: &vt }) } else { None };
    let j = m.jacobians_at(0.0, &u, &ut, &utt, fz).unwrap();
    let mut jd = j.m.matvec(&dutt);
    let c = j.c.matvec(&dut);
    let k = j.k.matvec(&du);
    for i in 0..jd.len() {
        jd[i] += c[i] + k[i];
    }
    if let Some(cd) = &j.c_dense {
        let x = cd * nalgebra::DVector::from_column_slice(&dut);
        for i in 0..jd.len() {
            jd[i] += x[i];
        }
    }
    let h = 1e-6;
    let rp = m.residual_at(0.0, &add(&u, &du, h), &add(&ut, &dut, h), &add(&utt, &dutt, h), fz).unwrap();
    let rm = m.residual_at(0.0, &add(&u, &du, -h), &add(&ut, &dut, -h), &add(&utt, &dutt, -h), fz).unwrap();
    let free = m.free_dofs();
    let mut num = 0.0;
    let mut den = 0.0;
    for &i in free {
        let fd = (rp[i] - rm[i]) / (2.0 * h);
        num += (fd - jd[i]).powi(2);
        den += jd[i].powi(2);
    }
    num.sqrt() / den.sqrt().max(1e-300)
}

#[test]
fn c6_invariant_suites() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mono_bad = monotonicity_violations(&mut rng);

    let mut jvp_worst = BTreeMap::new();
    for m in jvp_models() {
        let mut worst: f64 = 0.0;
        for s in 0..C6_STATES as u64 {
            worst = worst.max(jvp_error(&m, s, false));
            if s % 5 == 0 {
                worst = worst.max(jvp_error(&m, s, true));
            }
        }
        jvp_worst.insert(m.kind().name(), worst);
    }
    let jvp_ok = jvp_worst.values().all(|&w| w <= C6_JVP_TOL);

    let mesh = interval_mesh(64, 1.0).unwrap();
    let cpf = poincare_constant(&mesh).unwrap();
    let cpf_ok = (cpf - 1.0 / PI).abs() <= C6_POINCARE_REL / PI;
    let pf_fields_ok = (0..100u64).all(|i| {
        let f = random_field(&mesh, 77, i);
        let l2 = lp_norm(&mesh, &f, Exponent::Finite(2.0), false).unwrap();
        let g = lp_norm(&mesh, &f, Exponent::Finite(2.0), true).unwrap();
        l2 <= cpf * g * (1.0 + 1e-10)
    });

    let grid = uniform_grid(20.0, 400);
    let young_ok = C6_YOUNG_R.iter().all(|&r| {
        [0.01, 0.1, 1.0, 10.0].iter().all(|&eps| young_check(young_constant_valid(eps, r).unwrap(), eps, r, &grid))
    });
    let verbatim_fails = !young_check(young_constant_verbatim(0.01, 2.0).unwrap(), 0.01, 2.0, &grid);

    let pass = mono_bad == 0 && jvp_ok && cpf_ok && pf_fields_ok && young_ok && verbatim_fails && within(start, C6_LIMIT);
    verdict(
        "C6",
        "invariant suites",
        pass,
        format!(
            "monotonicity violations {mono_bad}/{}; worst JVP rel err {} (<= {C6_JVP_TOL}); C_PF {cpf:.6} vs 1/pi {:.6}, fields ok {pf_fields_ok}; Young valid ok {young_ok}, verbatim fails {verbatim_fails}; {:.1?}",
            4 * C6_PAIRS,
            jvp_worst.iter().map(|(k, v)| format!("{k}={v:.2e}")).collect::<Vec<_>>().join(" "),
            1.0 / PI,
            start.elapsed()
        ),
    );
    assert!(pass);
}

// C7 -----------------------------------------------------------------------------------
const C7_AGREE: f64 = 1e-10;
const C7_LEVELS: [usize; 3] = [32, 64, 128];
const C7_LIMIT: Duration = Duration::from_secs(120);

/// Lens problem: nonlinear fluid on x < 0.5, a linear lens with other λ, ϱ, b on x > 0.5.
pub fn lens_model(n: usize) -> Model {
    let mesh = interval_mesh(n, 1.0).unwrap();
    let mesh = Arc::new(tag_elements(&mesh, |x| if x[0] > 0.5 { Tag::Solid } else { Tag::Fluid }));
    let fluid = ElementMaterial { lambda: 1.0, rho: 1.0, b: 0.2, delta: 0.5, q: 3.0, k: 1.0, ..Default::default() };
    let lens = ElementMaterial { lambda: 3.0, rho: 1.5, b: 0.05, delta: 0.0, q: 1.0, k: 0.0, ..Default::default() };
    let mat = MaterialSpec::by_tag(&mesh, fluid, &BTreeMap::from([(Tag::Solid, lens)]));
    Model::new(ModelKind::AcousticCoupled, mesh, mat).unwrap()
}

fn lens_jump(n: usize) -> f64 {
    let m = lens_model(n);
    let s0 = State {
        t: 0.0,
        u: interpolate_dirichlet(m.mesh(), |x| 0.05 * (-((x[0] - 0.4) / 0.1).powi(2)).exp()),
        ut: vec![0.0; m.n_dofs()],
    };
    let traj = integrate(&m, &s0, 0.5, 0.5 / n as f64).unwrap();
    let nodes = m.mesh().tag_interface_nodes();
    interface_jump(&traj, &m, &nodes).unwrap().normalized
}

#[test]
fn c7_coupling_consistency() {
    let start = Instant::now();
    let (lambda, rho, b_ac) = (2.0, 1.6, 0.5);
    let common = ElementMaterial { delta: 0.5, q: 3.0, k: 0.8, ..Default::default() };
    let ac = model_1d(ModelKind::AcousticCoupled, 64, ElementMaterial { lambda, rho, b: b_ac, ..common.clone() });
    let pv = model_1d(ModelKind::PressureViscosity, 64, ElementMaterial { c2: lambda / rho, b: lambda * b_ac, ..common });
    let s0 = sine_state(&pv, 0.05);
    let ta = integrate(&ac, &s0, 0.5, 1.0 / 128.0).unwrap();
    let tp = integrate(&pv, &s0, 0.5, 1.0 / 128.0).unwrap();
    let diff = triple_distance(
        &Trajectory::from_states(ModelKind::PressureViscosity, ta.mesh.clone(), ta.dt, ta.states.clone()),
        &tp,
    )
    .unwrap();
    let jumps: Vec<f64> = C7_LEVELS.iter().map(|&n| lens_jump(n)).collect();
    let decreasing = jumps.windows(2).all(|w| w[1] < w[0]);
    let pass = diff <= C7_AGREE && decreasing && within(start, C7_LIMIT);
    verdict(
        "C7",
        "coupling consistency",
        pass,
        format!("|||AC - PV||| {diff:.3e} (<= {C7_AGREE}); lens jumps {} for n = {C7_LEVELS:?}; {:.1?}", sci(&jumps), start.elapsed()),
    );
    assert!(pass);
}

// C8 -----------------------------------------------------------------------------------
const C8_N: usize = 16;
const C8_REL: f64 = 0.1;
const C8_POISSON_RATE: (f64, f64) = (1.8, 2.2);
const C8_LIMIT: Duration = Duration::from_secs(180);

fn bump(x: &[f64]) -> f64 {
    ((PI * x[0]).sin() * (PI * x[1]).sin()).powi(2)
}

fn grad_bump(x: &[f64]) -> [f64; 2] {
    let (sx, sy) = ((PI * x[0]).sin(), (PI * x[1]).sin());
    [PI * (2.0 * PI * x[0]).sin() * sy * sy, PI * (2.0 * PI * x[1]).sin() * sx * sx]
}

fn poisson_error(n: usize) -> f64 {
    let mesh = rect_mesh(n, n, 1.0, 1.0).unwrap();
    let psi = |x: &[f64]| (PI * x[0]).sin() * (PI * x[1]).sin();
    let mut u = interpolate(&mesh, |x| PI * (PI * x[0]).cos() * (PI * x[1]).sin());
    u.extend(interpolate(&mesh, |x| PI * (PI * x[0]).sin() * (PI * x[1]).cos()));
    let rec = poisson_solve(&mesh, &u).unwrap();
    l2_error(&mesh, &rec, psi)
}

fn elastic_vs_potential() -> (f64, f64) {
    let (lambda, rho, b_hat, k, amp) = (2.0, 2.0, 0.2, 0.5, 0.05);
    let mesh: Arc<Mesh> = Arc::new(tag_elements(&rect_mesh(C8_N, C8_N, 1.0, 1.0).unwrap(), |_| Tag::Fluid));
    let el = ElementMaterial { lambda, rho, mu: 0.0, b_hat, delta: 0.5, q: 1.0, k, ..Default::default() };
    let em = Model::new(ModelKind::ElasticCoupled, mesh.clone(), MaterialSpec::uniform(&mesh, el)).unwrap();
    let pm_mat = ElementMaterial { c2: lambda / rho, b: b_hat / rho, delta: 0.5, q: 1.0, k, ..Default::default() };
    let pm = Model::new(ModelKind::PotentialViscosity, mesh.clone(), MaterialSpec::uniform(&mesh, pm_mat)).unwrap();
    let n = mesh.n_nodes();
    let mut u1 = interpolate_dirichlet(&mesh, |x| amp * grad_bump(x)[0]);
    u1.extend(interpolate_dirichlet(&mesh, |x| amp * grad_bump(x)[1]));
    let es = State { t: 0.0, u: vec![0.0; 2 * n], ut: u1 };
    let ps = State { t: 0.0, u: vec![0.0; n], ut: interpolate_dirichlet(&mesh, |x| amp * bump(x)) };
    let (t_end, dt) = (0.5, 1.0 / 64.0);
    let te = integrate(&em, &es, t_end, dt).unwrap();
    let tp = integrate(&pm, &ps, t_end, dt).unwrap();
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (a, b) in te.states.iter().zip(&tp.states) {
        let psi = poisson_solve(&mesh, &a.u).unwrap();
        let d: Vec<f64> = psi.iter().zip(&b.u).map(|(x, y)| x - y).collect();
        diff = diff.max(lp_norm(&mesh, &d, Exponent::Finite(2.0), false).unwrap());
        scale = scale.max(lp_norm(&mesh, &b.u, Exponent::Finite(2.0), false).unwrap());
    }
    (diff / scale, scale)
}

#[test]
fn c8_elastic_chain() {
    let start = Instant::now();
    let (rel, scale) = elastic_vs_potential();
    let errs: Vec<f64> = [8, 16, 32].iter().map(|&n| poisson_error(n)).collect();
    let rates: Vec<f64> = errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let rates_ok = rates.iter().all(|r| (C8_POISSON_RATE.0..=C8_POISSON_RATE.1).contains(r));
    let pass = rel <= C8_REL && rates_ok && within(start, C8_LIMIT);
    verdict(
        "C8",
        "elastic chain",
        pass,
        format!(
            "max_t |psi_el - psi_pot| / max_t |psi_pot| = {rel:.4e} (<= {C8_REL}, scale {scale:.3e}); Poisson errors {}, rates {rates:.3?}; {:.1?}",
            sci(&errs),
            start.elapsed()
        ),
    );
    assert!(pass);
}

// C9 -----------------------------------------------------------------------------------
const C9_T: f64 = 1.0;
const C9_DTS: [f64; 3] = [1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0];
const C9_FACTOR: (f64, f64) = (3.0, 5.0);
const C9_LIMIT: Duration = Duration::from_secs(60);

#[test]
fn c9_equipartition_order() {
    let start = Instant::now();
    let m = model_1d(ModelKind::PressurePlaplace, C1_N, decay_material());
    let res: Vec<f64> = C9_DTS
        .iter()
        .map(|&dt| {
            let traj = integrate(&m, &sine_state(&m, 1e-2), C9_T, dt).unwrap();
            equipartition_residual(&traj, &m).unwrap().corrected
        })
        .collect();
    let factors: Vec<f64> = res.windows(2).map(|w| w[0] / w[1]).collect();
    let pass = factors.iter().all(|f| (C9_FACTOR.0..=C9_FACTOR.1).contains(f)) && within(start, C9_LIMIT);
    verdict(
        "C9",
        "equipartition residual order",
        pass,
        format!(
            "residuals {} for dt = {C9_DTS:?}, reduction factors {factors:.3?} (in [{}, {}]), orders {:.3?}; {:.1?}",
            sci(&res),
            C9_FACTOR.0,
            C9_FACTOR.1,
            factors.iter().map(|f| f.log2()).collect::<Vec<_>>(),
            start.elapsed()
        ),
    );
    assert!(pass);
}

#[test]
fn decay_fit_recovers_synthetic_rate() {
    let t: Vec<f64> = (0..=100).map(|i| i as f64 * 0.05).collect();
    let e: Vec<f64> = t.iter().map(|t| 0.7 * (-1.3 * t).exp()).collect();
    let fit = decay_fit(&t, &e, (0.0, 5.0)).unwrap();
    assert!((fit.omega - 1.3).abs() < 1e-8);
}
