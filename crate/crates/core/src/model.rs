//! The five model equations as residual/Jacobian providers over (u, u_t, u_tt).

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fem::{
    self, elastic_damping_jacobian, elastic_residuals_with, elastic_stiffness, field_gradient, free_dofs,
    load_vector, mass_matrix, mass_matrix_by, power_jacobian, power_residual, product_load, stiffness_matrix,
    vector_mass, PoissonSolver, PowerLaw, VoigtTensors, Weight,
};
use crate::material::{Floors, MaterialSpec};
use crate::mesh::Mesh;
use crate::sparse::{Csr, Triplets};

/// Lower bound on 1 − 2ku (or 1 − 2k̃ψ_t) accepted by the solver.
pub const DEGENERACY_FLOOR: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    PressureViscosity,
    PressurePlaplace,
    PotentialViscosity,
    AcousticCoupled,
    ElasticCoupled,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::PressureViscosity,
        ModelKind::PressurePlaplace,
        ModelKind::PotentialViscosity,
        ModelKind::AcousticCoupled,
        ModelKind::ElasticCoupled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::PressureViscosity => "PRESSURE_VISCOSITY",
            ModelKind::PressurePlaplace => "PRESSURE_PLAPLACE",
            ModelKind::PotentialViscosity => "POTENTIAL_VISCOSITY",
            ModelKind::AcousticCoupled => "ACOUSTIC_COUPLED",
            ModelKind::ElasticCoupled => "ELASTIC_COUPLED",
        }
    }

    /// Kinds whose unknown is a pressure and whose mass weight is 1 − 2ku.
    pub fn is_pressure(self) -> bool {
        matches!(
            self,
            ModelKind::PressureViscosity | ModelKind::PressurePlaplace | ModelKind::AcousticCoupled
        )
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == up)
            .ok_or_else(|| Error::Config(format!("unknown model kind '{s}'")))
    }
}

/// Source term g(x, t) added to the right-hand side.
pub type Forcing = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;

/// (u, u_t) at time t; full-length nodal vectors with boundary zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub t: f64,
    pub u: Vec<f64>,
    pub ut: Vec<f64>,
}

impl State {
    pub fn zeros(t: f64, n: usize) -> State {
        State { t, u: vec![0.0; n], ut: vec![0.0; n] }
    }
}

/// Coefficient sources for the linearized problem: the quasilinear coefficients
/// are evaluated from (v, v_t) instead of the unknown.
#[derive(Clone, Copy, Debug)]
pub struct Frozen<'a> {
    pub v: &'a [f64],
    pub vt: &'a [f64],
}

/// Partial derivatives of the residual.
pub struct Jacobians {
    /// ∂R/∂u_tt
    pub m: Csr,
    /// ∂R/∂u_t (sparse part)
    pub c: Csr,
    /// ∂R/∂u
    pub k: Csr,
    /// dense addition to ∂R/∂u_t (elastic α through the Poisson solve)
    pub c_dense: Option<DMatrix<f64>>,
}

/// Frozen-in-time coefficients of the linearized problem.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenCoefficients {
    /// pressure kinds: α = −2kv per element vertex; potential: c²/(1−2k̃v_t) per vertex; elastic: per element
    pub alpha: Vec<f64>,
    /// pressure kinds: f = −2kv_t per element vertex; empty otherwise
    pub f: Vec<f64>,
    /// always zero
    pub g: Vec<f64>,
}

pub struct Model {
    kind: ModelKind,
    mesh: Arc<Mesh>,
    mat: MaterialSpec,
    floor: f64,
    forcing: Option<Forcing>,
    free: Vec<usize>,
    mass_coef: Vec<f64>,
    k_lin: Csr,
    qlaw: PowerLaw,
    plaw: PowerLaw,
    mass: Csr,
    poisson: Option<PoissonSolver>,
    voigt: Option<VoigtTensors>,
    poisson_dense: OnceLock<DMatrix<f64>>,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("kind", &self.kind)
            .field("nodes", &self.mesh.n_nodes())
            .field("elements", &self.mesh.n_elements())
            .finish()
    }
}

impl Model {
    pub fn new(kind: ModelKind, mesh: Arc<Mesh>, mat: MaterialSpec) -> Result<Model> {
        Model::with_floors(kind, mesh, mat, &Floors::default())
    }

    pub fn with_floors(kind: ModelKind, mesh: Arc<Mesh>, mat: MaterialSpec, floors: &Floors) -> Result<Model> {
        mat.validate(&mesh, kind, floors)?;
        let el = mat.elements();
        let mass_coef: Vec<f64> = match kind {
            ModelKind::AcousticCoupled => el.iter().map(|m| 1.0 / m.lambda).collect(),
            ModelKind::ElasticCoupled => el.iter().map(|m| m.rho).collect(),
            _ => vec![1.0; el.len()],
        };
        let lin_coef: Vec<f64> = match kind {
            ModelKind::AcousticCoupled => el.iter().map(|m| 1.0 / m.rho).collect(),
            ModelKind::PressurePlaplace => el.iter().map(|m| m.b).collect(),
            _ => el.iter().map(|m| m.c2).collect(),
        };
        let (mass, poisson, voigt, components) = if kind == ModelKind::ElasticCoupled {
            (
                vector_mass(&mesh, &mass_coef),
                Some(PoissonSolver::new(&mesh)?),
                Some(VoigtTensors::new(&mesh, &mat)),
                mesh.dim(),
            )
        } else {
            (mass_matrix(&mesh, Weight::Element(&mass_coef)), None, None, 1)
        };
        Ok(Model {
            kind,
            free: free_dofs(&mesh, components),
            k_lin: stiffness_matrix(&mesh, &lin_coef),
            qlaw: PowerLaw::qdamping(&mat),
            plaw: PowerLaw::plaplace(&mat),
            mass_coef,
            mass,
            poisson,
            voigt,
            poisson_dense: OnceLock::new(),
            mesh,
            mat,
            floor: DEGENERACY_FLOOR,
            forcing: None,
        })
    }

    pub fn with_forcing(mut self, g: Forcing) -> Model {
        self.forcing = Some(g);
        self
    }

    pub fn with_floor(mut self, floor: f64) -> Model {
        self.floor = floor;
        self
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn mesh_arc(&self) -> Arc<Mesh> {
        self.mesh.clone()
    }

    pub fn material(&self) -> &MaterialSpec {
        &self.mat
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn forcing(&self) -> Option<&Forcing> {
        self.forcing.as_ref()
    }

    /// Field components per node (d for the elastic kind, else 1).
    pub fn components(&self) -> usize {
        if self.kind == ModelKind::ElasticCoupled {
            self.mesh.dim()
        } else {
            1
        }
    }

    pub fn n_dofs(&self) -> usize {
        self.components() * self.mesh.n_nodes()
    }

    pub fn free_dofs(&self) -> &[usize] {
        &self.free
    }

    /// Plain (weighted) mass matrix: M, M/λ or ϱM.
    pub fn base_mass(&self) -> &Csr {
        &self.mass
    }

    pub fn poisson(&self) -> Option<&PoissonSolver> {
        self.poisson.as_ref()
    }

    /// ψ_t from a velocity field for the elastic kind.
    pub fn potential_of(&self, u: &[f64]) -> Result<Vec<f64>> {
        match &self.poisson {
            Some(p) => Ok(p.solve(u)),
            None => Err(Error::KindMismatch(format!("{} has no Poisson sub-problem", self.kind))),
        }
    }

    /// Minimum over vertices of k ≠ 0 elements of 1 − 2k·s, with s = u (pressure kinds),
    /// u_t (potential) or ψ_t (elastic).
    pub fn margin_from(&self, cu: &[f64], cut: &[f64]) -> f64 {
        let src: Vec<f64>;
        let s: &[f64] = match self.kind {
            k if k.is_pressure() => cu,
            ModelKind::PotentialViscosity => cut,
            _ => {
                src = self.poisson.as_ref().expect("elastic model has a Poisson solver").solve(cut);
                &src
            }
        };
        let mut margin: f64 = 1.0;
        for e in 0..self.mesh.n_elements() {
            let k = self.mat.get(e).k;
            if k == 0.0 {
                continue;
            }
            for &i in self.mesh.element(e) {
                margin = margin.min(1.0 - 2.0 * k * s[i]);
            }
        }
        margin
    }

    fn check_margin(&self, t: f64, cu: &[f64], cut: &[f64]) -> Result<f64> {
        let margin = self.margin_from(cu, cut);
        if !(margin > self.floor) {
            return Err(Error::Degeneracy { time: t, margin, floor: self.floor });
        }
        Ok(margin)
    }

    fn forcing_load(&self, t: f64) -> Option<Vec<f64>> {
        self.forcing.as_ref().map(|g| load_vector(&self.mesh, |x| g(x, t)))
    }

    /// Vertex values of the potential-kind coefficient c²/(1 − 2k̃ s).
    fn potential_alpha(&self, e: usize, s: &[f64]) -> [f64; 4] {
        let m = self.mat.get(e);
        let mut a = [0.0; 4];
        for (j, &i) in self.mesh.element(e).iter().enumerate() {
            a[j] = m.c2 / (1.0 - 2.0 * m.k * s[i]);
        }
        a
    }

    /// Element averages of 1/(1 − 2k̃ψ_t).
    fn elastic_alpha(&self, psi_t: &[f64]) -> Vec<f64> {
        let nv = self.mesh.nv() as f64;
        (0..self.mesh.n_elements())
            .map(|e| {
                let k = self.mat.get(e).k;
                self.mesh.element(e).iter().map(|&i| 1.0 / (1.0 - 2.0 * k * psi_t[i])).sum::<f64>() / nv
            })
            .collect()
    }

    /// Weak residual R(u, u_t, u_tt; t). Coefficients come from `frozen` when given.
    pub fn residual_at(&self, t: f64, u: &[f64], ut: &[f64], utt: &[f64], frozen: Option<Frozen>) -> Result<Vec<f64>> {
        let (cu, cut) = match frozen {
            Some(f) => (f.v, f.vt),
            None => (u, ut),
        };
        self.check_margin(t, cu, cut)?;
        let mesh = &*self.mesh;
        let mut r = match self.kind {
            ModelKind::PressureViscosity | ModelKind::AcousticCoupled | ModelKind::PressurePlaplace => {
                let mw = mass_matrix_by(mesh, |e, a| {
                    let m = self.mat.get(e);
                    self.mass_coef[e] * (1.0 - 2.0 * m.k * cu[mesh.element(e)[a]])
                });
                let mut r = mw.matvec(utt);
                let (stiff, damp) = if self.kind == ModelKind::PressurePlaplace {
                    (power_residual(mesh, &self.plaw, u), self.k_lin.matvec(ut))
                } else {
                    (self.k_lin.matvec(u), power_residual(mesh, &self.qlaw, ut))
                };
                let coef: Vec<f64> = (0..mesh.n_elements())
                    .map(|e| 2.0 * self.mat.get(e).k * self.mass_coef[e])
                    .collect();
                let src = product_load(mesh, &coef, cut, ut);
                for i in 0..r.len() {
                    r[i] += stiff[i] + damp[i] - src[i];
                }
                r
            }
            ModelKind::PotentialViscosity => {
                let mut r = self.mass.matvec(utt);
                let damp = power_residual(mesh, &self.qlaw, ut);
                for (i, d) in damp.iter().enumerate() {
                    r[i] += d;
                }
                let nv = mesh.nv();
                for e in 0..mesh.n_elements() {
                    let al = self.potential_alpha(e, cut);
                    let abar = al[..nv].iter().sum::<f64>() / nv as f64;
                    let gu = field_gradient(mesh, e, u);
                    let mut galpha = [0.0; 3];
                    for a in 0..nv {
                        for (c, g) in mesh.grad(e, a).iter().enumerate() {
                            galpha[c] += al[a] * g;
                        }
                    }
                    let cross: f64 = galpha.iter().zip(&gu).map(|(x, y)| x * y).sum();
                    let meas = mesh.measure(e);
                    for (a, &i) in mesh.element(e).iter().enumerate() {
                        let gd: f64 = mesh.grad(e, a).iter().zip(&gu).map(|(x, y)| x * y).sum();
                        r[i] += meas * (abar * gd + cross / nv as f64);
                    }
                }
                r
            }
            ModelKind::ElasticCoupled => {
                let psi_t = self.potential_of(cut)?;
                let alpha = self.elastic_alpha(&psi_t);
                let vt = self.voigt.as_ref().expect("elastic model has Voigt tensors");
                let (rk, rd) = elastic_residuals_with(mesh, &self.mat, vt, &alpha, u, ut);
                let mut r = self.mass.matvec(utt);
                for i in 0..r.len() {
                    r[i] += rk[i] + rd[i];
                }
                r
            }
        };
        if let Some(load) = self.forcing_load(t) {
            if self.kind != ModelKind::ElasticCoupled {
                for (ri, li) in r.iter_mut().zip(load) {
                    *ri -= li;
                }
            }
        }
        Ok(r)
    }

    pub fn jacobians_at(&self, t: f64, u: &[f64], ut: &[f64], utt: &[f64], frozen: Option<Frozen>) -> Result<Jacobians> {
        let mono = frozen.is_none();
        let (cu, cut) = match frozen {
            Some(f) => (f.v, f.vt),
            None => (u, ut),
        };
        self.check_margin(t, cu, cut)?;
        let mesh = &*self.mesh;
        match self.kind {
            ModelKind::PressureViscosity | ModelKind::AcousticCoupled | ModelKind::PressurePlaplace => {
                let m = mass_matrix_by(mesh, |e, a| {
                    self.mass_coef[e] * (1.0 - 2.0 * self.mat.get(e).k * cu[mesh.element(e)[a]])
                });
                let (stiff, damp) = if self.kind == ModelKind::PressurePlaplace {
                    (power_jacobian(mesh, &self.plaw, u), self.k_lin.clone())
                } else {
                    (self.k_lin.clone(), power_jacobian(mesh, &self.qlaw, ut))
                };
                // source ∫2k m (cut)(u_t) φ_i
                let src = mass_matrix_by(mesh, |e, a| {
                    let i = mesh.element(e)[a];
                    let w = if mono { 2.0 * ut[i] } else { cut[i] };
                    2.0 * self.mat.get(e).k * self.mass_coef[e] * w
                });
                let c = Csr::linear_combination(&[(1.0, &damp), (-1.0, &src)]);
                let k = if mono {
                    let dm = mass_matrix_by(mesh, |e, a| {
                        -2.0 * self.mat.get(e).k * self.mass_coef[e] * utt[mesh.element(e)[a]]
                    });
                    Csr::linear_combination(&[(1.0, &stiff), (1.0, &dm)])
                } else {
                    stiff
                };
                Ok(Jacobians { m, c, k, c_dense: None })
            }
            ModelKind::PotentialViscosity => {
                let n = mesh.n_nodes();
                let nv = mesh.nv();
                let mut tk = Triplets::new(n, n);
                let mut tc = Triplets::new(n, n);
                for e in 0..mesh.n_elements() {
                    let mat = self.mat.get(e);
                    let v = mesh.element(e);
                    let al = self.potential_alpha(e, cut);
                    let abar = al[..nv].iter().sum::<f64>() / nv as f64;
                    let mut galpha = [0.0; 3];
                    for a in 0..nv {
                        for (c, g) in mesh.grad(e, a).iter().enumerate() {
                            galpha[c] += al[a] * g;
                        }
                    }
                    let meas = mesh.measure(e);
                    let gu = field_gradient(mesh, e, u);
                    for a in 0..nv {
                        let ga = mesh.grad(e, a);
                        let gd_a: f64 = ga.iter().zip(&gu).map(|(x, y)| x * y).sum();
                        for b in 0..nv {
                            let gb = mesh.grad(e, b);
                            let kab: f64 = abar * ga.iter().zip(gb).map(|(x, y)| x * y).sum::<f64>()
                                + galpha.iter().zip(gb).map(|(x, y)| x * y).sum::<f64>() / nv as f64;
                            tk.push(v[a], v[b], meas * kab);
                            if mono && mat.k != 0.0 {
                                // ∂α_b/∂u_t,b
                                let den = 1.0 - 2.0 * mat.k * cut[v[b]];
                                let dal = mat.c2 * 2.0 * mat.k / (den * den);
                                let gb_u: f64 = gb.iter().zip(&gu).map(|(x, y)| x * y).sum();
                                tc.push(v[a], v[b], meas * dal * (gd_a + gb_u) / nv as f64);
                            }
                        }
                    }
                }
                let dq = power_jacobian(mesh, &self.qlaw, ut);
                tc.extend_scaled(&dq, 1.0);
                Ok(Jacobians { m: self.mass.clone(), c: tc.to_csr(), k: tk.to_csr(), c_dense: None })
            }
            ModelKind::ElasticCoupled => {
                let vt = self.voigt.as_ref().expect("elastic model has Voigt tensors");
                let psi_t = self.potential_of(cut)?;
                let alpha = self.elastic_alpha(&psi_t);
                let k = elastic_stiffness(mesh, vt, &alpha);
                let c = elastic_damping_jacobian(mesh, &self.mat, vt, ut);
                let c_dense = if mono && self.mat.max_abs_k() != 0.0 {
                    Some(self.alpha_coupling(u, &psi_t))
                } else {
                    None
                };
                Ok(Jacobians { m: self.mass.clone(), c, k, c_dense })
            }
        }
    }

    /// Dense ∂/∂U_t of ∫α(ψ_t(U_t))(ℬφ)ᵀ[c]ℬU.
    fn alpha_coupling(&self, u: &[f64], psi_t: &[f64]) -> DMatrix<f64> {
        let mesh = &*self.mesh;
        let n = mesh.n_nodes();
        let d = mesh.dim();
        let nv = mesh.nv();
        // W[(dof), node] = Σ_e ∂α_e/∂ψ_j · (unit-α stiffness residual)
        let mut w = DMatrix::<f64>::zeros(d * n, n);
        let vt = self.voigt.as_ref().expect("elastic model has Voigt tensors");
        for e in 0..mesh.n_elements() {
            let k = self.mat.get(e).k;
            if k == 0.0 {
                continue;
            }
            let rk = element_stiffness_residual(mesh, vt, e, u);
            for &j in mesh.element(e) {
                let den = 1.0 - 2.0 * k * psi_t[j];
                let da = 2.0 * k / (den * den) / nv as f64;
                for (dof, val) in &rk {
                    w[(*dof, j)] += da * val;
                }
            }
        }
        let p = self.poisson_dense.get_or_init(|| {
            let ps = self.poisson.as_ref().expect("elastic model has a Poisson solver");
            let b = ps.divergence().to_dense();
            let mut p = DMatrix::<f64>::zeros(n, d * n);
            for col in 0..d * n {
                let x = ps.solve_load(b.column(col).as_slice());
                p.column_mut(col).copy_from_slice(&x);
            }
            p
        });
        w * p
    }

    /// Flux part ∫ 𝐯_u·∇φ_i of the residual summed over the elements with `mask[e]`:
    /// stiffness plus damping, without inertia, source or forcing.
    pub fn flux_residual(&self, u: &[f64], ut: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
        let mesh = &*self.mesh;
        if mask.len() != mesh.n_elements() {
            return Err(Error::InvalidArgument("element mask has the wrong length".into()));
        }
        let off = |v: &[f64]| -> Vec<f64> { v.iter().zip(mask).map(|(x, &m)| if m { *x } else { 0.0 }).collect() };
        let masked = |law: &PowerLaw| PowerLaw { scale: off(&law.scale), ..law.clone() };
        let el = self.mat.elements();
        let r = match self.kind {
            ModelKind::PressureViscosity | ModelKind::AcousticCoupled => {
                let lin: Vec<f64> = match self.kind {
                    ModelKind::AcousticCoupled => el.iter().map(|m| 1.0 / m.rho).collect(),
                    _ => el.iter().map(|m| m.c2).collect(),
                };
                let mut r = stiffness_matrix(mesh, &off(&lin)).matvec(u);
                let d = power_residual(mesh, &masked(&self.qlaw), ut);
                r.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                r
            }
            ModelKind::PressurePlaplace => {
                let mut r = power_residual(mesh, &masked(&self.plaw), u);
                let b: Vec<f64> = el.iter().map(|m| m.b).collect();
                let d = stiffness_matrix(mesh, &off(&b)).matvec(ut);
                r.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                r
            }
            ModelKind::PotentialViscosity => {
                let nv = mesh.nv();
                let abar: Vec<f64> = (0..mesh.n_elements())
                    .map(|e| self.potential_alpha(e, ut)[..nv].iter().sum::<f64>() / nv as f64)
                    .collect();
                let mut r = stiffness_matrix(mesh, &off(&abar)).matvec(u);
                let d = power_residual(mesh, &masked(&self.qlaw), ut);
                r.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                r
            }
            ModelKind::ElasticCoupled => {
                let vt = self.voigt.as_ref().expect("elastic model has Voigt tensors");
                let alpha = off(&self.elastic_alpha(&self.potential_of(ut)?));
                let zero = vec![0.0; vt.nvt * vt.nvt];
                let vtm = VoigtTensors {
                    nvt: vt.nvt,
                    c: vt.c.clone(),
                    b: vt.b.iter().zip(mask).map(|(b, &m)| if m { b.clone() } else { zero.clone() }).collect(),
                };
                let (rk, rd) = elastic_residuals_with(mesh, &self.mat, &vtm, &alpha, u, ut);
                rk.iter().zip(rd).map(|(a, b)| a + b).collect()
            }
        };
        Ok(r)
    }

    /// Residual at a state (monolithic coefficients).
    pub fn residual(&self, state: &State, utt: &[f64]) -> Result<Vec<f64>> {
        self.residual_at(state.t, &state.u, &state.ut, utt, None)
    }

    /// (M_eff, C_eff, K_eff) at a state and acceleration.
    pub fn jacobians(&self, state: &State, utt: &[f64]) -> Result<Jacobians> {
        self.jacobians_at(state.t, &state.u, &state.ut, utt, None)
    }

    /// Coefficients of the linearized problem frozen from (v, v_t).
    pub fn frozen_coefficients(&self, v: &[f64], vt: &[f64], t: f64) -> Result<FrozenCoefficients> {
        let mesh = &*self.mesh;
        let nv = mesh.nv();
        let (alpha, f) = match self.kind {
            k if k.is_pressure() => {
                let mut alpha = Vec::with_capacity(mesh.n_elements() * nv);
                let mut f = Vec::with_capacity(mesh.n_elements() * nv);
                for e in 0..mesh.n_elements() {
                    let k = self.mat.get(e).k;
                    for &i in mesh.element(e) {
                        alpha.push(-2.0 * k * v[i]);
                        f.push(-2.0 * k * vt[i]);
                    }
                }
                (alpha, f)
            }
            ModelKind::PotentialViscosity => {
                let mut alpha = Vec::with_capacity(mesh.n_elements() * nv);
                for e in 0..mesh.n_elements() {
                    alpha.extend_from_slice(&self.potential_alpha(e, vt)[..nv]);
                }
                (alpha, Vec::new())
            }
            _ => (self.elastic_alpha(&self.potential_of(vt)?), Vec::new()),
        };
        let margin = self.margin_from(v, vt);
        if !(margin > self.floor) {
            return Err(Error::Degeneracy { time: t, margin, floor: self.floor });
        }
        let g = vec![0.0; self.n_dofs()];
        Ok(FrozenCoefficients { alpha, f, g })
    }

    /// Restrict a full vector to the free dofs.
    pub fn restrict(&self, v: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&i| v[i]).collect()
    }

    /// Expand free-dof values to a full vector with boundary zeros.
    pub fn expand(&self, x: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.n_dofs()];
        for (k, &i) in self.free.iter().enumerate() {
            v[i] = x[k];
        }
        v
    }

    /// Zero the boundary entries of a full vector.
    pub fn apply_dirichlet(&self, v: &mut [f64]) {
        let n = self.mesh.n_nodes();
        for c in 0..self.components() {
            for i in 0..n {
                if self.mesh.is_boundary(i) {
                    v[c * n + i] = 0.0;
                }
            }
        }
    }
}

/// (dof, value) pairs of ∫(ℬφ)ᵀ[c]ℬU on one element with α = 1.
fn element_stiffness_residual(mesh: &Mesh, vt: &VoigtTensors, e: usize, u: &[f64]) -> Vec<(usize, f64)> {
    let n = mesh.n_nodes();
    let d = mesh.dim();
    let nvt = vt.nvt;
    let s = fem::voigt_element(mesh, e, u);
    let mut cs = [0.0; 6];
    for r in 0..nvt {
        cs[r] = (0..nvt).map(|c| vt.c[e][r * nvt + c] * s[c]).sum();
    }
    let mut out = Vec::with_capacity(mesh.nv() * d);
    for (a, &i) in mesh.element(e).iter().enumerate() {
        let g = mesh.grad(e, a);
        // (ℬφ_a e_c)ᵀ cs
        for c in 0..d {
            let val = voigt_row_dot(d, g, c, &cs);
            out.push((c * n + i, mesh.measure(e) * val));
        }
    }
    out
}

/// (ℬ(λ e_c))ᵀ σ for a barycentric gradient g.
fn voigt_row_dot(d: usize, g: &[f64], c: usize, s: &[f64; 6]) -> f64 {
    match (d, c) {
        (2, 0) => g[0] * s[0] + g[1] * s[2],
        (2, 1) => g[1] * s[1] + g[0] * s[2],
        (3, 0) => g[0] * s[0] + g[2] * s[4] + g[1] * s[5],
        (3, 1) => g[1] * s[1] + g[2] * s[3] + g[0] * s[5],
        (3, 2) => g[2] * s[2] + g[1] * s[3] + g[0] * s[4],
        _ => unreachable!("Voigt rows exist only in 2D and 3D"),
    }
}

/// Degeneracy margin of a state.
pub fn degeneracy_guard(model: &Model, state: &State) -> f64 {
    model.margin_from(&state.u, &state.ut)
}

/// Lower estimate of the margin from the embedding chain: 1 − 2|k| C ‖∇s‖_{L_r}.
pub fn degeneracy_bound(model: &Model, state: &State, embedding_constant: f64) -> Result<f64> {
    let mesh = model.mesh();
    let (field, r) = match model.kind() {
        ModelKind::PressurePlaplace => (state.u.clone(), max_exponent(model, |m| m.p) + 1.0),
        k if k.is_pressure() => (state.u.clone(), max_exponent(model, |m| m.q) + 1.0),
        ModelKind::PotentialViscosity => (state.ut.clone(), max_exponent(model, |m| m.q) + 1.0),
        _ => (model.potential_of(&state.ut)?, max_exponent(model, |m| m.q) + 1.0),
    };
    let g = crate::constants::lp_norm(mesh, &field, crate::constants::Exponent::Finite(r), true)?;
    Ok(1.0 - 2.0 * model.material().max_abs_k() * embedding_constant * g)
}

fn max_exponent<F: Fn(&crate::material::ElementMaterial) -> f64>(model: &Model, f: F) -> f64 {
    model.material().elements().iter().map(f).fold(1.0, f64::max)
}
