//! P1 assembly: mass, stiffness, power-law fluxes, sources, Voigt elasticity, Poisson.
//!
//! Element contributions are computed independently (in parallel above a size
//! threshold) and scattered in element order, so results do not depend on the
//! number of threads.

use rayon::prelude::*;

use crate::error::Result;
use crate::material::{voigt_size, MaterialSpec};
use crate::mesh::Mesh;
use crate::quadrature::{pair_moment, simplex_rule, triple_moment};
use crate::sparse::{Csr, LuSolver, Triplets};

/// Regularization of |∇v| inside |∇v|^{r-1} and |∇v|^{r-3}.
pub const GRAD_ETA: f64 = 1e-10;

const PAR_THRESHOLD: usize = 4096;

pub(crate) fn map_elements<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if n >= PAR_THRESHOLD {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// Weight for mass-type matrices.
#[derive(Clone, Copy, Debug)]
pub enum Weight<'a> {
    Const(f64),
    Element(&'a [f64]),
    /// P1 interpolant of nodal values.
    Nodal(&'a [f64]),
}

/// ∇u on element `e` (zero-padded to 3 components).
pub fn field_gradient(mesh: &Mesh, e: usize, u: &[f64]) -> [f64; 3] {
    let mut g = [0.0; 3];
    for (a, &i) in mesh.element(e).iter().enumerate() {
        for (c, gc) in mesh.grad(e, a).iter().enumerate() {
            g[c] += u[i] * gc;
        }
    }
    g
}

fn dot3(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn scatter_matrix(mesh: &Mesh, n: usize, locals: Vec<[f64; 16]>) -> Csr {
    let nv = mesh.nv();
    let mut t = Triplets::with_capacity(n, n, locals.len() * nv * nv);
    for (e, loc) in locals.iter().enumerate() {
        let v = mesh.element(e);
        for a in 0..nv {
            for b in 0..nv {
                t.push(v[a], v[b], loc[a * 4 + b]);
            }
        }
    }
    t.to_csr()
}

fn scatter_vector(mesh: &Mesh, locals: Vec<[f64; 4]>) -> Vec<f64> {
    let mut r = vec![0.0; mesh.n_nodes()];
    for (e, loc) in locals.iter().enumerate() {
        for (a, &i) in mesh.element(e).iter().enumerate() {
            r[i] += loc[a];
        }
    }
    r
}

/// Mass matrix with vertex weights `w(e, a)` interpolated linearly on each element.
pub fn mass_matrix_by<F>(mesh: &Mesh, w: F) -> Csr
where
    F: Fn(usize, usize) -> f64 + Sync + Send,
{
    let d = mesh.dim();
    let nv = mesh.nv();
    let locals = map_elements(mesh.n_elements(), |e| {
        let ww: Vec<f64> = (0..nv).map(|c| w(e, c)).collect();
        let mut loc = [0.0; 16];
        for a in 0..nv {
            for b in 0..nv {
                let s: f64 = (0..nv).map(|c| ww[c] * triple_moment(d, a, b, c)).sum();
                loc[a * 4 + b] = mesh.measure(e) * s;
            }
        }
        loc
    });
    scatter_matrix(mesh, mesh.n_nodes(), locals)
}

/// M_ij = ∫ weight φ_i φ_j.
pub fn mass_matrix(mesh: &Mesh, weight: Weight) -> Csr {
    match weight {
        Weight::Const(c) => {
            let d = mesh.dim();
            let nv = mesh.nv();
            let locals = map_elements(mesh.n_elements(), |e| {
                let mut loc = [0.0; 16];
                for a in 0..nv {
                    for b in 0..nv {
                        loc[a * 4 + b] = c * mesh.measure(e) * pair_moment(d, a, b);
                    }
                }
                loc
            });
            scatter_matrix(mesh, mesh.n_nodes(), locals)
        }
        Weight::Element(we) => {
            let d = mesh.dim();
            let nv = mesh.nv();
            let locals = map_elements(mesh.n_elements(), |e| {
                let mut loc = [0.0; 16];
                for a in 0..nv {
                    for b in 0..nv {
                        loc[a * 4 + b] = we[e] * mesh.measure(e) * pair_moment(d, a, b);
                    }
                }
                loc
            });
            scatter_matrix(mesh, mesh.n_nodes(), locals)
        }
        Weight::Nodal(wn) => mass_matrix_by(mesh, |e, a| wn[mesh.element(e)[a]]),
    }
}

/// K_ij = ∫ coeff ∇φ_i·∇φ_j with element-constant coefficient.
pub fn stiffness_matrix(mesh: &Mesh, coeff: &[f64]) -> Csr {
    let nv = mesh.nv();
    let locals = map_elements(mesh.n_elements(), |e| {
        let mut loc = [0.0; 16];
        for a in 0..nv {
            for b in 0..nv {
                loc[a * 4 + b] = coeff[e] * mesh.measure(e) * dot3(mesh.grad(e, a), mesh.grad(e, b));
            }
        }
        loc
    });
    scatter_matrix(mesh, mesh.n_nodes(), locals)
}

/// Flux law σ(g) = s_e (α_e + β_e |g|_reg^{r_e - 1}) g.
#[derive(Clone, Debug)]
pub struct PowerLaw {
    pub scale: Vec<f64>,
    pub lin: Vec<f64>,
    pub pow: Vec<f64>,
    pub r: Vec<f64>,
}

impl PowerLaw {
    /// b((1-δ) + δ|g|^{q-1}) from the q-viscosity damping.
    pub fn qdamping(mat: &MaterialSpec) -> PowerLaw {
        let m = mat.elements();
        PowerLaw {
            scale: m.iter().map(|x| x.b).collect(),
            lin: m.iter().map(|x| 1.0 - x.delta).collect(),
            pow: m.iter().map(|x| x.delta).collect(),
            r: m.iter().map(|x| x.q).collect(),
        }
    }

    /// c²(1 + ε|g|^{p-1}) from the p-Laplace stiffness.
    pub fn plaplace(mat: &MaterialSpec) -> PowerLaw {
        let m = mat.elements();
        PowerLaw {
            scale: m.iter().map(|x| x.c2).collect(),
            lin: vec![1.0; m.len()],
            pow: m.iter().map(|x| x.eps).collect(),
            r: m.iter().map(|x| x.p).collect(),
        }
    }

    /// Pointwise flux σ_e(g).
    pub fn flux(&self, e: usize, g: &[f64]) -> [f64; 3] {
        let g2: f64 = g.iter().map(|x| x * x).sum();
        let w = self.weight(e, g2);
        let mut out = [0.0; 3];
        for (o, x) in out.iter_mut().zip(g) {
            *o = w * x;
        }
        out
    }

    #[inline]
    fn weight(&self, e: usize, g2: f64) -> f64 {
        let r = self.r[e];
        let pw = if r == 1.0 || self.pow[e] == 0.0 { 1.0 } else { reg_pow(g2, r - 1.0) };
        self.scale[e] * (self.lin[e] + self.pow[e] * pw)
    }
}

/// (|g|² + η²)^{e/2}
#[inline]
pub fn reg_pow(g2: f64, e: f64) -> f64 {
    (g2 + GRAD_ETA * GRAD_ETA).powf(0.5 * e)
}

/// r_i = ∫ σ(∇v)·∇φ_i.
pub fn power_residual(mesh: &Mesh, law: &PowerLaw, v: &[f64]) -> Vec<f64> {
    let nv = mesh.nv();
    let locals = map_elements(mesh.n_elements(), |e| {
        let g = field_gradient(mesh, e, v);
        let w = law.weight(e, dot3(&g, &g)) * mesh.measure(e);
        let mut loc = [0.0; 4];
        for (a, l) in loc.iter_mut().enumerate().take(nv) {
            *l = w * dot3(&g, mesh.grad(e, a));
        }
        loc
    });
    scatter_vector(mesh, locals)
}

/// ∂r/∂v with the regularized F′(g) = |g|^{r-1}I + (r-1)|g|^{r-3} g gᵀ.
pub fn power_jacobian(mesh: &Mesh, law: &PowerLaw, v: &[f64]) -> Csr {
    let nv = mesh.nv();
    let d = mesh.dim();
    let locals = map_elements(mesh.n_elements(), |e| {
        let g = field_gradient(mesh, e, v);
        let g2 = dot3(&g, &g);
        let w = law.weight(e, g2);
        let r = law.r[e];
        let extra = if r == 1.0 || law.pow[e] == 0.0 {
            0.0
        } else {
            law.scale[e] * law.pow[e] * (r - 1.0) * reg_pow(g2, r - 3.0)
        };
        let mut loc = [0.0; 16];
        for a in 0..nv {
            let ga = mesh.grad(e, a);
            for b in 0..nv {
                let gb = mesh.grad(e, b);
                let mut s = w * dot3(ga, gb);
                if extra != 0.0 {
                    s += extra * dot3(&g[..d], ga) * dot3(&g[..d], gb);
                }
                loc[a * 4 + b] = mesh.measure(e) * s;
            }
        }
        loc
    });
    scatter_matrix(mesh, mesh.n_nodes(), locals)
}

pub fn qdamping_residual(mesh: &Mesh, mat: &MaterialSpec, v: &[f64]) -> Vec<f64> {
    power_residual(mesh, &PowerLaw::qdamping(mat), v)
}

pub fn qdamping_jacobian(mesh: &Mesh, mat: &MaterialSpec, v: &[f64]) -> Csr {
    power_jacobian(mesh, &PowerLaw::qdamping(mat), v)
}

pub fn plaplace_residual(mesh: &Mesh, mat: &MaterialSpec, u: &[f64]) -> Vec<f64> {
    power_residual(mesh, &PowerLaw::plaplace(mat), u)
}

pub fn plaplace_jacobian(mesh: &Mesh, mat: &MaterialSpec, u: &[f64]) -> Csr {
    power_jacobian(mesh, &PowerLaw::plaplace(mat), u)
}

/// g_i = ∫ coef f g φ_i with f, g nodal (exact).
pub fn product_load(mesh: &Mesh, coef: &[f64], f: &[f64], g: &[f64]) -> Vec<f64> {
    let d = mesh.dim();
    let nv = mesh.nv();
    let locals = map_elements(mesh.n_elements(), |e| {
        let mut loc = [0.0; 4];
        if coef[e] == 0.0 {
            return loc;
        }
        let v = mesh.element(e);
        for (a, l) in loc.iter_mut().enumerate().take(nv) {
            let mut s = 0.0;
            for b in 0..nv {
                for c in 0..nv {
                    s += f[v[b]] * g[v[c]] * triple_moment(d, a, b, c);
                }
            }
            *l = coef[e] * mesh.measure(e) * s;
        }
        loc
    });
    scatter_vector(mesh, locals)
}

/// ∫ 2k (u_t)² φ_i.
pub fn source_term(mesh: &Mesh, mat: &MaterialSpec, ut: &[f64]) -> Vec<f64> {
    let coef: Vec<f64> = mat.elements().iter().map(|m| 2.0 * m.k).collect();
    product_load(mesh, &coef, ut, ut)
}

/// ∫ g(x) φ_i by the collapsed Gauss rule.
pub fn load_vector<F: Fn(&[f64]) -> f64 + Sync>(mesh: &Mesh, g: F) -> Vec<f64> {
    let rule = simplex_rule(mesh.dim());
    let nv = mesh.nv();
    let d = mesh.dim();
    let locals = map_elements(mesh.n_elements(), |e| {
        let v = mesh.element(e);
        let mut loc = [0.0; 4];
        for qp in &rule {
            let mut x = [0.0; 3];
            for a in 0..nv {
                for c in 0..d {
                    x[c] += qp.bary[a] * mesh.node(v[a])[c];
                }
            }
            let gv = g(&x[..d]) * qp.weight * mesh.measure(e);
            for a in 0..nv {
                loc[a] += gv * qp.bary[a];
            }
        }
        loc
    });
    scatter_vector(mesh, locals)
}

/// Nodal interpolant.
pub fn interpolate<F: Fn(&[f64]) -> f64>(mesh: &Mesh, f: F) -> Vec<f64> {
    (0..mesh.n_nodes()).map(|i| f(mesh.node(i))).collect()
}

/// Interpolant with Dirichlet zeros.
pub fn interpolate_dirichlet<F: Fn(&[f64]) -> f64>(mesh: &Mesh, f: F) -> Vec<f64> {
    (0..mesh.n_nodes())
        .map(|i| if mesh.is_boundary(i) { 0.0 } else { f(mesh.node(i)) })
        .collect()
}

/// Degrees of freedom (component-major) that are not on the boundary.
pub fn free_dofs(mesh: &Mesh, components: usize) -> Vec<usize> {
    let n = mesh.n_nodes();
    let mut out = Vec::new();
    for c in 0..components {
        for i in 0..n {
            if !mesh.is_boundary(i) {
                out.push(c * n + i);
            }
        }
    }
    out
}

/// Local Voigt operator of barycentric function `a` on element `e`: nvt×dim, row-major.
fn voigt_local(mesh: &Mesh, e: usize, a: usize) -> [[f64; 3]; 6] {
    let g = mesh.grad(e, a);
    let mut b = [[0.0; 3]; 6];
    match mesh.dim() {
        2 => {
            b[0][0] = g[0];
            b[1][1] = g[1];
            b[2][0] = g[1];
            b[2][1] = g[0];
        }
        3 => {
            b[0][0] = g[0];
            b[1][1] = g[1];
            b[2][2] = g[2];
            b[3][1] = g[2];
            b[3][2] = g[1];
            b[4][0] = g[2];
            b[4][2] = g[0];
            b[5][0] = g[1];
            b[5][1] = g[0];
        }
        d => panic!("Voigt operator undefined in dimension {d}"),
    }
    b
}

/// ℬU on element `e`.
pub fn voigt_element(mesh: &Mesh, e: usize, u: &[f64]) -> [f64; 6] {
    let n = mesh.n_nodes();
    let d = mesh.dim();
    let nvt = voigt_size(d);
    let mut s = [0.0; 6];
    for (a, &i) in mesh.element(e).iter().enumerate() {
        let b = voigt_local(mesh, e, a);
        for r in 0..nvt {
            for c in 0..d {
                s[r] += b[r][c] * u[c * n + i];
            }
        }
    }
    s
}

/// Element-constant Voigt strain ℬU (only the first 3 or 6 entries are meaningful).
pub fn voigt_apply(mesh: &Mesh, u: &[f64]) -> Result<Vec<[f64; 6]>> {
    if mesh.dim() < 2 {
        return Err(crate::error::Error::InvalidArgument(
            "Voigt operator needs dim >= 2".into(),
        ));
    }
    Ok((0..mesh.n_elements()).map(|e| voigt_element(mesh, e, u)).collect())
}

fn matvec_sym(m: &[f64], nvt: usize, s: &[f64]) -> [f64; 6] {
    let mut out = [0.0; 6];
    for r in 0..nvt {
        out[r] = (0..nvt).map(|c| m[r * nvt + c] * s[c]).sum();
    }
    out
}

/// Element-constant Voigt tensors [c] and [b].
#[derive(Clone, Debug)]
pub struct VoigtTensors {
    pub nvt: usize,
    pub c: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl VoigtTensors {
    pub fn new(mesh: &Mesh, mat: &MaterialSpec) -> VoigtTensors {
        let d = mesh.dim();
        VoigtTensors {
            nvt: voigt_size(d),
            c: mat.elements().iter().map(|m| m.c_matrix(d)).collect(),
            b: mat.elements().iter().map(|m| m.b_matrix(d)).collect(),
        }
    }
}

/// Weak-form vectors ∫ α (ℬφ)ᵀ[c]ℬU and ∫ ((1-δ)+δ|ℬU_t|^{q-1})(ℬφ)ᵀ[b]ℬU_t.
pub fn elastic_residuals(
    mesh: &Mesh,
    mat: &MaterialSpec,
    alpha: &[f64],
    u: &[f64],
    ut: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let vt = VoigtTensors::new(mesh, mat);
    elastic_residuals_with(mesh, mat, &vt, alpha, u, ut)
}

pub(crate) fn elastic_residuals_with(
    mesh: &Mesh,
    mat: &MaterialSpec,
    vt: &VoigtTensors,
    alpha: &[f64],
    u: &[f64],
    ut: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = mesh.n_nodes();
    let d = mesh.dim();
    let nv = mesh.nv();
    let nvt = vt.nvt;
    let locals = map_elements(mesh.n_elements(), |e| {
        let m = mat.get(e);
        let s = voigt_element(mesh, e, u);
        let st = voigt_element(mesh, e, ut);
        let cs = matvec_sym(&vt.c[e], nvt, &s);
        let bs = matvec_sym(&vt.b[e], nvt, &st);
        let s2: f64 = st[..nvt].iter().map(|x| x * x).sum();
        let w = (1.0 - m.delta) + if m.delta == 0.0 || m.q == 1.0 { m.delta } else { m.delta * reg_pow(s2, m.q - 1.0) };
        let mut ks = [[0.0; 3]; 4];
        let mut ds = [[0.0; 3]; 4];
        for a in 0..nv {
            let ba = voigt_local(mesh, e, a);
            for c in 0..d {
                let mut x = 0.0;
                let mut y = 0.0;
                for r in 0..nvt {
                    x += ba[r][c] * cs[r];
                    y += ba[r][c] * bs[r];
                }
                ks[a][c] = alpha[e] * mesh.measure(e) * x;
                ds[a][c] = w * mesh.measure(e) * y;
            }
        }
        (ks, ds)
    });
    let mut rk = vec![0.0; d * n];
    let mut rd = vec![0.0; d * n];
    for (e, (ks, ds)) in locals.iter().enumerate() {
        for (a, &i) in mesh.element(e).iter().enumerate() {
            for c in 0..d {
                rk[c * n + i] += ks[a][c];
                rd[c * n + i] += ds[a][c];
            }
        }
    }
    (rk, rd)
}

/// Block matrix ∫ α (ℬφ_j)ᵀ[c](ℬφ_i).
pub(crate) fn elastic_stiffness(mesh: &Mesh, vt: &VoigtTensors, alpha: &[f64]) -> Csr {
    let n = mesh.n_nodes();
    let d = mesh.dim();
    let nv = mesh.nv();
    let nvt = vt.nvt;
    let mut t = Triplets::with_capacity(d * n, d * n, mesh.n_elements() * nv * nv * d * d);
    for e in 0..mesh.n_elements() {
        let v = mesh.element(e);
        let locals: Vec<[[f64; 3]; 6]> = (0..nv).map(|a| voigt_local(mesh, e, a)).collect();
        for a in 0..nv {
            for b in 0..nv {
                for ci in 0..d {
                    for cj in 0..d {
                        let mut s = 0.0;
                        for r in 0..nvt {
                            for k in 0..nvt {
                                s += locals[a][r][ci] * vt.c[e][r * nvt + k] * locals[b][k][cj];
                            }
                        }
                        t.push(ci * n + v[a], cj * n + v[b], alpha[e] * mesh.measure(e) * s);
                    }
                }
            }
        }
    }
    t.to_csr()
}

/// ∂(damping part)/∂U_t.
pub(crate) fn elastic_damping_jacobian(mesh: &Mesh, mat: &MaterialSpec, vt: &VoigtTensors, ut: &[f64]) -> Csr {
    let n = mesh.n_nodes();
    let d = mesh.dim();
    let nv = mesh.nv();
    let nvt = vt.nvt;
    let mut t = Triplets::with_capacity(d * n, d * n, mesh.n_elements() * nv * nv * d * d);
    for e in 0..mesh.n_elements() {
        let m = mat.get(e);
        let v = mesh.element(e);
        let st = voigt_element(mesh, e, ut);
        let s2: f64 = st[..nvt].iter().map(|x| x * x).sum();
        let nonlin = m.delta != 0.0 && m.q != 1.0;
        let w = (1.0 - m.delta) + if nonlin { m.delta * reg_pow(s2, m.q - 1.0) } else { m.delta };
        let extra = if nonlin { m.delta * (m.q - 1.0) * reg_pow(s2, m.q - 3.0) } else { 0.0 };
        let bs = matvec_sym(&vt.b[e], nvt, &st);
        // D = w[b] + extra ([b]s) sᵀ
        let mut dm = vec![0.0; nvt * nvt];
        for r in 0..nvt {
            for k in 0..nvt {
                dm[r * nvt + k] = w * vt.b[e][r * nvt + k] + extra * bs[r] * st[k];
            }
        }
        let locals: Vec<[[f64; 3]; 6]> = (0..nv).map(|a| voigt_local(mesh, e, a)).collect();
        for a in 0..nv {
            for b in 0..nv {
                for ci in 0..d {
                    for cj in 0..d {
                        let mut s = 0.0;
                        for r in 0..nvt {
                            for k in 0..nvt {
                                s += locals[a][r][ci] * dm[r * nvt + k] * locals[b][k][cj];
                            }
                        }
                        t.push(ci * n + v[a], cj * n + v[b], mesh.measure(e) * s);
                    }
                }
            }
        }
    }
    t.to_csr()
}

/// Component-wise mass block diag(ϱM, …, ϱM).
pub(crate) fn vector_mass(mesh: &Mesh, rho: &[f64]) -> Csr {
    let n = mesh.n_nodes();
    let d = mesh.dim();
    let m = mass_matrix(mesh, Weight::Element(rho));
    let mut t = Triplets::with_capacity(d * n, d * n, d * m.nnz());
    for c in 0..d {
        for r in 0..n {
            for k in m.row_ptr[r]..m.row_ptr[r + 1] {
                t.push(c * n + r, c * n + m.col_idx[k], m.vals[k]);
            }
        }
    }
    t.to_csr()
}

/// Matrix B with (BU)_i = ∫ U·∇φ_i, shape n × d·n.
pub fn divergence_matrix(mesh: &Mesh) -> Csr {
    let n = mesh.n_nodes();
    let d = mesh.dim();
    let nv = mesh.nv();
    let mut t = Triplets::with_capacity(n, d * n, mesh.n_elements() * nv * nv * d);
    for e in 0..mesh.n_elements() {
        let v = mesh.element(e);
        let w = mesh.measure(e) / nv as f64;
        for a in 0..nv {
            let g = mesh.grad(e, a);
            for &j in v {
                for c in 0..d {
                    t.push(v[a], c * n + j, w * g[c]);
                }
            }
        }
    }
    t.to_csr()
}

/// Dirichlet Poisson solver for −Δψ = −div U, factored once.
pub struct PoissonSolver {
    n: usize,
    free: Vec<usize>,
    lu: LuSolver,
    div: Csr,
}

impl PoissonSolver {
    pub fn new(mesh: &Mesh) -> Result<PoissonSolver> {
        let ones = vec![1.0; mesh.n_elements()];
        let k = stiffness_matrix(mesh, &ones);
        let free = free_dofs(mesh, 1);
        let lu = LuSolver::new(&k.restrict(&free))?;
        Ok(PoissonSolver { n: mesh.n_nodes(), free, lu, div: divergence_matrix(mesh) })
    }

    /// Solve K ψ = b for a nodal load vector b.
    pub fn solve_load(&self, b: &[f64]) -> Vec<f64> {
        let rhs: Vec<f64> = self.free.iter().map(|&i| b[i]).collect();
        let x = self.lu.solve(&rhs);
        let mut psi = vec![0.0; self.n];
        for (k, &i) in self.free.iter().enumerate() {
            psi[i] = x[k];
        }
        psi
    }

    pub fn solve(&self, u: &[f64]) -> Vec<f64> {
        self.solve_load(&self.div.matvec(u))
    }

    pub fn divergence(&self) -> &Csr {
        &self.div
    }
}

/// ψ solving ∫∇ψ·∇φ = ∫U·∇φ with ψ = 0 on the boundary.
pub fn poisson_solve(mesh: &Mesh, u: &[f64]) -> Result<Vec<f64>> {
    Ok(PoissonSolver::new(mesh)?.solve(u))
}

/// L2 projection of ∇ψ onto Dirichlet-zero P1 vector fields (component-major).
pub fn gradient_projection(mesh: &Mesh, psi: &[f64]) -> Result<Vec<f64>> {
    let n = mesh.n_nodes();
    let d = mesh.dim();
    let m = mass_matrix(mesh, Weight::Const(1.0));
    let free = free_dofs(mesh, 1);
    let lu = LuSolver::new(&m.restrict(&free))?;
    let mut out = vec![0.0; d * n];
    for c in 0..d {
        let mut b = vec![0.0; n];
        for e in 0..mesh.n_elements() {
            let g = field_gradient(mesh, e, psi);
            let w = g[c] * mesh.measure(e) / mesh.nv() as f64;
            for &i in mesh.element(e) {
                b[i] += w;
            }
        }
        let rhs: Vec<f64> = free.iter().map(|&i| b[i]).collect();
        let x = lu.solve(&rhs);
        for (k, &i) in free.iter().enumerate() {
            out[c * n + i] = x[k];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::ElementMaterial;
    use crate::mesh::{box_mesh, interval_mesh, rect_mesh};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn unit_mass_and_stiffness() {
        let m = interval_mesh(1, 1.0).unwrap();
        let mm = mass_matrix(&m, Weight::Const(1.0));
        assert!(close(mm.get(0, 0), 1.0 / 3.0, 1e-15) && close(mm.get(0, 1), 1.0 / 6.0, 1e-15));
        let k = stiffness_matrix(&m, &[1.0]);
        assert!(close(k.get(0, 0), 1.0, 1e-15) && close(k.get(0, 1), -1.0, 1e-15));
    }

    #[test]
    fn mass_weight_linearity() {
        let m = rect_mesh(3, 2, 1.0, 1.0).unwrap();
        let one = mass_matrix(&m, Weight::Const(1.0));
        let two = mass_matrix(&m, Weight::Nodal(&vec![2.0; m.n_nodes()]));
        let zero = mass_matrix(&m, Weight::Element(&vec![0.0; m.n_elements()]));
        for r in 0..m.n_nodes() {
            for c in 0..m.n_nodes() {
                assert!(close(two.get(r, c), 2.0 * one.get(r, c), 1e-14));
                assert_eq!(zero.get(r, c), 0.0);
            }
        }
    }

    #[test]
    fn piecewise_stiffness_middle_entry() {
        let m = interval_mesh(2, 1.0).unwrap();
        let (a, b) = (3.0, 5.0);
        let k = stiffness_matrix(&m, &[a, b]);
        assert!(close(k.get(1, 1), 2.0 * (a + b), 1e-14));
    }

    #[test]
    fn qdamping_cubic_slope() {
        let m = interval_mesh(1, 1.0).unwrap();
        let mat = MaterialSpec::uniform(&m, ElementMaterial { q: 3.0, delta: 1.0, b: 1.0, ..Default::default() });
        let s = 0.7;
        let r = qdamping_residual(&m, &mat, &[0.0, s]);
        assert!(close(r[0], -s * s * s, 1e-12) && close(r[1], s * s * s, 1e-12));
    }

    #[test]
    fn source_unit_velocity() {
        let m = interval_mesh(1, 1.0).unwrap();
        let mat = MaterialSpec::uniform(&m, ElementMaterial { k: 0.5, ..Default::default() });
        let g = source_term(&m, &mat, &[1.0, 1.0]);
        assert!(close(g[0], 0.5, 1e-15) && close(g[1], 0.5, 1e-15));
    }

    #[test]
    fn voigt_examples() {
        let m = box_mesh(2, 2, 2, 1.0, 1.0, 1.0).unwrap();
        let n = m.n_nodes();
        let mut u = vec![0.0; 3 * n];
        for i in 0..n {
            u[i] = m.node(i)[0];
        }
        for s in voigt_apply(&m, &u).unwrap() {
            let want = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
            assert!(s.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        let r = rect_mesh(3, 3, 1.0, 1.0).unwrap();
        let n = r.n_nodes();
        let mut rot = vec![0.0; 2 * n];
        for i in 0..n {
            rot[i] = -r.node(i)[1];
            rot[n + i] = r.node(i)[0];
        }
        for s in voigt_apply(&r, &rot).unwrap() {
            assert!(s[..3].iter().all(|x| x.abs() < 1e-12));
        }
        assert!(voigt_apply(&interval_mesh(2, 1.0).unwrap(), &[0.0; 3]).is_err());
    }

    #[test]
    fn poisson_zero_and_gradient_roundtrip() {
        let m = rect_mesh(4, 4, 1.0, 1.0).unwrap();
        let z = poisson_solve(&m, &vec![0.0; 2 * m.n_nodes()]).unwrap();
        assert!(z.iter().all(|&x| x == 0.0));
    }
}
