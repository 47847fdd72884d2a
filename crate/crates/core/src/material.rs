//! Piecewise-constant material coefficients and their admissibility checks.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Tag};
use crate::model::ModelKind;

/// Coefficients on one element. `k` doubles as k̃ for the potential and elastic kinds.
#[derive(Clone, Debug, PartialEq)]
pub struct ElementMaterial {
    pub c2: f64,
    pub b: f64,
    pub delta: f64,
    pub k: f64,
    pub eps: f64,
    pub p: f64,
    pub q: f64,
    pub rho: f64,
    pub lambda: f64,
    pub mu: f64,
    pub b_hat: f64,
    /// Row-major symmetric Voigt stiffness overriding the isotropic (λ, μ) pattern.
    pub c_voigt: Option<Vec<f64>>,
    /// Row-major symmetric Voigt damping overriding the b̂ pattern.
    pub b_voigt: Option<Vec<f64>>,
}

impl Default for ElementMaterial {
    fn default() -> Self {
        ElementMaterial {
            c2: 1.0,
            b: 0.0,
            delta: 0.0,
            k: 0.0,
            eps: 0.0,
            p: 1.0,
            q: 1.0,
            rho: 1.0,
            lambda: 1.0,
            mu: 0.0,
            b_hat: 0.0,
            c_voigt: None,
            b_voigt: None,
        }
    }
}

/// Number of Voigt components: 3 in 2D (plane strain), 6 in 3D.
pub fn voigt_size(dim: usize) -> usize {
    match dim {
        2 => 3,
        3 => 6,
        _ => 0,
    }
}

impl ElementMaterial {
    /// [c] in Voigt form, row-major.
    pub fn c_matrix(&self, dim: usize) -> Vec<f64> {
        if let Some(c) = &self.c_voigt {
            return c.clone();
        }
        let nvt = voigt_size(dim);
        let mut c = vec![0.0; nvt * nvt];
        for i in 0..dim {
            for j in 0..dim {
                c[i * nvt + j] = self.lambda;
            }
            c[i * nvt + i] += 2.0 * self.mu;
        }
        for i in dim..nvt {
            c[i * nvt + i] = self.mu;
        }
        c
    }

    /// [b] in Voigt form: b̂ on the normal block for fluids, b̂·I for solids unless overridden.
    pub fn b_matrix(&self, dim: usize) -> Vec<f64> {
        if let Some(b) = &self.b_voigt {
            return b.clone();
        }
        let nvt = voigt_size(dim);
        let mut b = vec![0.0; nvt * nvt];
        if self.is_fluid() {
            for i in 0..dim {
                for j in 0..dim {
                    b[i * nvt + j] = self.b_hat;
                }
            }
        } else {
            for i in 0..nvt {
                b[i * nvt + i] = self.b_hat;
            }
        }
        b
    }

    /// Vanishing shear modulus and no anisotropic override.
    pub fn is_fluid(&self) -> bool {
        self.mu == 0.0 && self.c_voigt.is_none()
    }

    fn scalars(&self) -> [(&'static str, f64); 11] {
        [
            ("c2", self.c2),
            ("b", self.b),
            ("delta", self.delta),
            ("k", self.k),
            ("eps", self.eps),
            ("p", self.p),
            ("q", self.q),
            ("rho", self.rho),
            ("lambda", self.lambda),
            ("mu", self.mu),
            ("b_hat", self.b_hat),
        ]
    }
}

/// Lower bounds used by validation.
#[derive(Clone, Debug, PartialEq)]
pub struct Floors {
    pub b_lower: f64,
    pub delta_lower: f64,
    pub delta_upper: f64,
    pub lambda_lower: f64,
    pub rho_lower: f64,
    pub c_lower: f64,
    pub gamma_lower: f64,
}

impl Default for Floors {
    fn default() -> Self {
        Floors {
            b_lower: 1e-12,
            delta_lower: 1e-12,
            delta_upper: 1.0 - 1e-12,
            lambda_lower: 1e-12,
            rho_lower: 1e-12,
            c_lower: 1e-12,
            gamma_lower: 1e-12,
        }
    }
}

/// Per-element coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialSpec {
    elements: Vec<ElementMaterial>,
}

impl MaterialSpec {
    pub fn uniform(mesh: &Mesh, m: ElementMaterial) -> MaterialSpec {
        MaterialSpec { elements: vec![m; mesh.n_elements()] }
    }

    /// Pick coefficients by element tag, falling back to `default` for unlisted tags.
    pub fn by_tag(mesh: &Mesh, default: ElementMaterial, per_tag: &BTreeMap<Tag, ElementMaterial>) -> MaterialSpec {
        let elements = mesh
            .tags()
            .iter()
            .map(|t| per_tag.get(t).cloned().unwrap_or_else(|| default.clone()))
            .collect();
        MaterialSpec { elements }
    }

    pub fn from_elements(elements: Vec<ElementMaterial>) -> MaterialSpec {
        MaterialSpec { elements }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn get(&self, e: usize) -> &ElementMaterial {
        &self.elements[e]
    }

    pub fn elements(&self) -> &[ElementMaterial] {
        &self.elements
    }

    pub fn max_abs_k(&self) -> f64 {
        self.elements.iter().fold(0.0, |m, e| m.max(e.k.abs()))
    }

    /// Same spec with every element transformed by `f`.
    pub fn map<F: Fn(&ElementMaterial) -> ElementMaterial>(&self, f: F) -> MaterialSpec {
        MaterialSpec { elements: self.elements.iter().map(f).collect() }
    }

    pub fn validate(&self, mesh: &Mesh, kind: ModelKind, floors: &Floors) -> Result<()> {
        if self.elements.len() != mesh.n_elements() {
            return Err(Error::Material(format!(
                "{} element entries for a mesh with {} elements",
                self.elements.len(),
                mesh.n_elements()
            )));
        }
        for (e, m) in self.elements.iter().enumerate() {
            let fail = |msg: String| Error::Material(format!("element {e} ({}): {msg}", mesh.tag(e)));
            for (name, v) in m.scalars() {
                if !v.is_finite() {
                    return Err(fail(format!("{name} is not finite")));
                }
            }
            if !(0.0..=1.0).contains(&m.delta) {
                return Err(fail(format!("delta = {} outside [0, 1]", m.delta)));
            }
            if m.p < 1.0 || m.q < 1.0 {
                return Err(fail("p and q must be >= 1".into()));
            }
            if m.eps < 0.0 || m.b < 0.0 || m.b_hat < 0.0 || m.mu < 0.0 || m.lambda < 0.0 {
                return Err(fail("eps, b, b_hat, lambda, mu must be nonnegative".into()));
            }
            let nonlinear = m.k != 0.0;
            match kind {
                ModelKind::PressureViscosity | ModelKind::PressurePlaplace | ModelKind::PotentialViscosity => {
                    if !(m.c2 > 0.0) {
                        return Err(fail("c2 must be positive".into()));
                    }
                    if nonlinear && m.b < floors.b_lower {
                        return Err(fail(format!("b = {} below floor where k != 0", m.b)));
                    }
                }
                ModelKind::AcousticCoupled => {
                    if m.k < 0.0 {
                        return Err(fail("k must be nonnegative".into()));
                    }
                    if m.lambda < floors.lambda_lower || m.rho < floors.rho_lower {
                        return Err(fail("lambda and rho must exceed their floors".into()));
                    }
                    if nonlinear && (m.b < floors.b_lower || m.delta < floors.delta_lower) {
                        return Err(fail("b and delta must exceed their floors where k != 0".into()));
                    }
                }
                ModelKind::ElasticCoupled => validate_elastic(mesh, e, m, floors).map_err(fail)?,
            }
        }
        Ok(())
    }
}

fn sym_eigenvalues(a: &[f64], n: usize) -> std::result::Result<Vec<f64>, String> {
    if a.len() != n * n {
        return Err(format!("Voigt matrix needs {} entries, got {}", n * n, a.len()));
    }
    let m = DMatrix::from_row_slice(n, n, a);
    let scale = m.amax().max(1.0);
    if (&m - m.transpose()).amax() > 1e-12 * scale {
        return Err("Voigt matrix is not symmetric".into());
    }
    Ok(SymmetricEigen::new(m).eigenvalues.iter().copied().collect())
}

fn validate_elastic(mesh: &Mesh, e: usize, m: &ElementMaterial, f: &Floors) -> std::result::Result<(), String> {
    let dim = mesh.dim();
    if dim < 2 {
        return Err("elastic model needs dim >= 2".into());
    }
    let nvt = voigt_size(dim);
    if m.rho < f.rho_lower {
        return Err("rho below floor".into());
    }
    let tag = mesh.tag(e);
    if tag == Tag::Fluid && m.mu != 0.0 {
        return Err("mu must vanish on FLUID elements".into());
    }
    if tag == Tag::Solid && !(m.mu > 0.0 || m.c_voigt.is_some()) {
        return Err("mu must be positive on SOLID elements".into());
    }
    let ec = sym_eigenvalues(&m.c_matrix(dim), nvt)?;
    let eb = sym_eigenvalues(&m.b_matrix(dim), nvt)?;
    let tol = 1e-12;
    let cmin = ec.iter().copied().fold(f64::INFINITY, f64::min);
    let bmin = eb.iter().copied().fold(f64::INFINITY, f64::min);
    let cscale = ec.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let bscale = eb.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if cmin < -tol * cscale || bmin < -tol * bscale {
        return Err("[c] and [b] must be positive semidefinite".into());
    }
    let nonlinear = m.k != 0.0;
    if m.is_fluid() {
        if m.lambda < f.lambda_lower {
            return Err("lambda below floor on fluid element".into());
        }
        if nonlinear {
            if m.b_hat < f.b_lower {
                return Err("b_hat below floor where k != 0".into());
            }
            if m.delta < f.delta_lower || m.delta > f.delta_upper {
                return Err(format!("delta = {} outside [delta_lower, delta_upper] where k != 0", m.delta));
            }
        }
    } else {
        if nonlinear {
            return Err("nonlinear region must lie in the fluid".into());
        }
        if cmin < f.c_lower {
            return Err(format!("lambda_min([c]) = {cmin:.3e} below floor"));
        }
        if (1.0 - m.delta) * bmin < f.gamma_lower {
            return Err(format!("(1-delta) lambda_min([b]) = {:.3e} below floor", (1.0 - m.delta) * bmin));
        }
    }
    Ok(())
}
