//! Manufactured solution u*(x, t) = sin(πx) cos t for the pressure form with q-viscosity damping in 1D.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::interpolate_dirichlet;
use crate::material::ElementMaterial;
use crate::mesh::Mesh;
use crate::model::{Forcing, State};
use crate::quadrature::simplex_rule;

/// u* = sin(πx) cos t on (0, 1) together with the forcing that makes it exact.
#[derive(Clone, Debug)]
pub struct SineCos {
    pub c2: f64,
    pub b: f64,
    pub delta: f64,
    pub q: f64,
    pub k: f64,
}

impl SineCos {
    pub fn from_material(m: &ElementMaterial) -> SineCos {
        SineCos { c2: m.c2, b: m.b, delta: m.delta, q: m.q, k: m.k }
    }

    pub fn u(&self, x: f64, t: f64) -> f64 {
        (PI * x).sin() * t.cos()
    }

    pub fn ut(&self, x: f64, t: f64) -> f64 {
        -(PI * x).sin() * t.sin()
    }

    /// g = (1−2ku)u_tt − c²u_xx − b((1−δ) + qδ|u_xt|^{q−1})u_xxt − 2k u_t².
    pub fn g(&self, x: f64, t: f64) -> f64 {
        let (s, c) = ((PI * x).sin(), (PI * x).cos());
        let u = s * t.cos();
        let ut = -s * t.sin();
        let utt = -s * t.cos();
        let uxx = -PI * PI * s * t.cos();
        let uxt = -PI * c * t.sin();
        let uxxt = PI * PI * s * t.sin();
        let w = (1.0 - self.delta) + self.q * self.delta * uxt.abs().powf(self.q - 1.0);
        (1.0 - 2.0 * self.k * u) * utt - self.c2 * uxx - self.b * w * uxxt - 2.0 * self.k * ut * ut
    }

    pub fn forcing(&self) -> Forcing {
        let me = self.clone();
        Arc::new(move |x: &[f64], t: f64| me.g(x[0], t))
    }

    pub fn initial_state(&self, mesh: &Mesh) -> Result<State> {
        if mesh.dim() != 1 {
            return Err(Error::InvalidArgument("the sine-cosine solution lives on an interval".into()));
        }
        Ok(State {
            t: 0.0,
            u: interpolate_dirichlet(mesh, |x| self.u(x[0], 0.0)),
            ut: interpolate_dirichlet(mesh, |x| self.ut(x[0], 0.0)),
        })
    }
}

/// ‖u_h − f‖_{L2} with the element Gauss rule.
pub fn l2_error<F: Fn(&[f64]) -> f64>(mesh: &Mesh, uh: &[f64], f: F) -> f64 {
    let rule = simplex_rule(mesh.dim());
    let d = mesh.dim();
    let mut acc = 0.0;
    for e in 0..mesh.n_elements() {
        let v = mesh.element(e);
        let mut s = 0.0;
        for qp in &rule {
            let mut x = [0.0; 3];
            let mut val = 0.0;
            for (a, &i) in v.iter().enumerate() {
                val += qp.bary[a] * uh[i];
                for c in 0..d {
                    x[c] += qp.bary[a] * mesh.node(i)[c];
                }
            }
            s += qp.weight * (val - f(&x[..d])).powi(2);
        }
        acc += mesh.measure(e) * s;
    }
    acc.sqrt()
}
