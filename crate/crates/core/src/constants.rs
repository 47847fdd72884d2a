//! Norms, Bochner norms and the auxiliary constants (Poincaré, embeddings, Young).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::{field_gradient, free_dofs, mass_matrix, stiffness_matrix, voigt_element, Weight};
use crate::material::voigt_size;
use crate::mesh::Mesh;
use crate::quadrature::simplex_rule;
use crate::sparse::{dot, LuSolver};
use crate::stepper::Trajectory;

/// Integrability exponent of a spatial norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Exponent {
    Finite(f64),
    Infinity,
}

/// Spatial part of a norm. Vector fields use the pointwise Euclidean norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Spatial {
    L2,
    L4,
    /// L_{q+1} of the field
    LqPlus1(f64),
    GradL2,
    /// L_{q+1} of the gradient
    GradLqPlus1(f64),
    LInf,
    /// L2 of the Voigt strain ℬU
    VoigtL2,
    /// L_{q+1} of the Voigt strain ℬU
    VoigtLqPlus1(f64),
}

/// Temporal part of a Bochner norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Temporal {
    /// value at one time level
    At(usize),
    /// maximum over the grid
    Sup,
    /// trapezoid rule (midpoint rule for midpoint-sampled tracks)
    L2,
    LqPlus1(f64),
}

/// Which time-dependent field a Bochner norm is taken of.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Track {
    U,
    Ut,
    /// (u_t^{n+1} − u_t^n)/Δt at the step midpoints
    Utt,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormSpec {
    pub spatial: Spatial,
    pub temporal: Temporal,
    pub track: Track,
}

impl NormSpec {
    pub fn new(spatial: Spatial, temporal: Temporal, track: Track) -> NormSpec {
        NormSpec { spatial, temporal, track }
    }
}

fn components(mesh: &Mesh, field: &[f64]) -> Result<usize> {
    let n = mesh.n_nodes();
    if field.is_empty() || field.len() % n != 0 {
        return Err(Error::InvalidArgument(format!(
            "field of length {} does not match {} nodes",
            field.len(),
            n
        )));
    }
    Ok(field.len() / n)
}

/// ‖f‖_{L_p} or ‖∇f‖_{L_p}. Gradient norms are exact for P1 fields.
pub fn lp_norm(mesh: &Mesh, field: &[f64], p: Exponent, of_gradient: bool) -> Result<f64> {
    if let Exponent::Finite(pv) = p {
        if !(pv >= 1.0) {
            return Err(Error::InvalidArgument(format!("norm exponent {pv} < 1")));
        }
    }
    let nc = components(mesh, field)?;
    let n = mesh.n_nodes();
    if of_gradient {
        let mut acc = 0.0f64;
        for e in 0..mesh.n_elements() {
            let mut g2 = 0.0;
            for c in 0..nc {
                let g = field_gradient(mesh, e, &field[c * n..(c + 1) * n]);
                g2 += g.iter().map(|x| x * x).sum::<f64>();
            }
            let g = g2.sqrt();
            match p {
                Exponent::Infinity => acc = acc.max(g),
                Exponent::Finite(pv) => acc += mesh.measure(e) * g.powf(pv),
            }
        }
        return Ok(match p {
            Exponent::Infinity => acc,
            Exponent::Finite(pv) => acc.powf(1.0 / pv),
        });
    }
    match p {
        Exponent::Infinity => {
            // P1 fields attain their extrema at vertices
            let mut m = 0.0f64;
            for i in 0..n {
                let s: f64 = (0..nc).map(|c| field[c * n + i].powi(2)).sum();
                m = m.max(s.sqrt());
            }
            Ok(m)
        }
        Exponent::Finite(pv) => {
            let rule = simplex_rule(mesh.dim());
            let mut acc = 0.0;
            for e in 0..mesh.n_elements() {
                let v = mesh.element(e);
                let mut s = 0.0;
                for qp in &rule {
                    let mut m2 = 0.0;
                    for c in 0..nc {
                        let val: f64 = v.iter().enumerate().map(|(a, &i)| qp.bary[a] * field[c * n + i]).sum();
                        m2 += val * val;
                    }
                    s += qp.weight * m2.sqrt().powf(pv);
                }
                acc += mesh.measure(e) * s;
            }
            Ok(acc.powf(1.0 / pv))
        }
    }
}

/// ‖ℬU‖_{L_p} with the Euclidean norm of the Voigt vector.
pub fn voigt_norm(mesh: &Mesh, field: &[f64], p: Exponent) -> Result<f64> {
    let nvt = voigt_size(mesh.dim());
    if nvt == 0 || field.len() != mesh.dim() * mesh.n_nodes() {
        return Err(Error::InvalidArgument("Voigt norm needs a d-vector field, d >= 2".into()));
    }
    let mut acc = 0.0f64;
    for e in 0..mesh.n_elements() {
        let s = voigt_element(mesh, e, field);
        let g = s[..nvt].iter().map(|x| x * x).sum::<f64>().sqrt();
        match p {
            Exponent::Infinity => acc = acc.max(g),
            Exponent::Finite(pv) => acc += mesh.measure(e) * g.powf(pv),
        }
    }
    Ok(match p {
        Exponent::Infinity => acc,
        Exponent::Finite(pv) => acc.powf(1.0 / pv),
    })
}

pub fn spatial_norm(mesh: &Mesh, field: &[f64], spatial: Spatial) -> Result<f64> {
    use Exponent::{Finite, Infinity};
    match spatial {
        Spatial::L2 => lp_norm(mesh, field, Finite(2.0), false),
        Spatial::L4 => lp_norm(mesh, field, Finite(4.0), false),
        Spatial::LqPlus1(q) => lp_norm(mesh, field, Finite(q + 1.0), false),
        Spatial::GradL2 => lp_norm(mesh, field, Finite(2.0), true),
        Spatial::GradLqPlus1(q) => lp_norm(mesh, field, Finite(q + 1.0), true),
        Spatial::LInf => lp_norm(mesh, field, Infinity, false),
        Spatial::VoigtL2 => voigt_norm(mesh, field, Finite(2.0)),
        Spatial::VoigtLqPlus1(q) => voigt_norm(mesh, field, Finite(q + 1.0)),
    }
}

/// Smallest generalized eigenvalue of K x = λ M x on the free dofs, by inverse iteration.
pub fn smallest_dirichlet_eigenvalue(mesh: &Mesh) -> Result<f64> {
    let free = free_dofs(mesh, 1);
    if free.is_empty() {
        return Err(Error::InvalidArgument("mesh has no interior nodes".into()));
    }
    let k = stiffness_matrix(mesh, &vec![1.0; mesh.n_elements()]).restrict(&free);
    let m = mass_matrix(mesh, Weight::Const(1.0)).restrict(&free);
    let lu = LuSolver::new(&k)?;
    let mut x = vec![1.0; free.len()];
    let mut lambda_old = f64::INFINITY;
    for _ in 0..2000 {
        let mx = m.matvec(&x);
        let mut y = lu.solve(&mx);
        let ky = k.matvec(&y);
        let my = m.matvec(&y);
        let lambda = dot(&y, &ky) / dot(&y, &my);
        let nrm = dot(&y, &my).sqrt();
        y.iter_mut().for_each(|v| *v /= nrm);
        x = y;
        if ((lambda - lambda_old) / lambda).abs() < 1e-8 {
            return Ok(lambda);
        }
        lambda_old = lambda;
    }
    Err(Error::NoConvergence("inverse power iteration for the Poincaré constant".into()))
}

/// C_PF = λ₁^{-1/2} of the discrete Dirichlet Laplacian.
pub fn poincare_constant(mesh: &Mesh) -> Result<f64> {
    Ok(1.0 / smallest_dirichlet_eigenvalue(mesh)?.sqrt())
}

fn bounding_lengths(mesh: &Mesh) -> Vec<f64> {
    let d = mesh.dim();
    let mut hi = vec![f64::NEG_INFINITY; d];
    for i in 0..mesh.n_nodes() {
        for c in 0..d {
            hi[c] = hi[c].max(mesh.node(i)[c]);
        }
    }
    hi
}

/// Pyramid min_c min(x_c, L_c − x_c), zero on the boundary of the box.
pub fn center_tent(mesh: &Mesh) -> Vec<f64> {
    let lens = bounding_lengths(mesh);
    (0..mesh.n_nodes())
        .map(|i| {
            if mesh.is_boundary(i) {
                return 0.0;
            }
            mesh.node(i)
                .iter()
                .zip(&lens)
                .map(|(x, l)| x.min(l - x))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Sample `index` of the random Dirichlet-zero fields used by the embedding estimate.
pub fn random_field(mesh: &Mesh, seed: u64, index: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let lens = bounding_lengths(mesh);
    let d = mesh.dim();
    let modes = rng.random_range(1..=4usize);
    let mut terms = Vec::with_capacity(modes);
    for _ in 0..modes {
        let amp: f64 = rng.random_range(-1.0..1.0);
        let k: Vec<f64> = (0..d).map(|_| rng.random_range(1..=4u32) as f64).collect();
        terms.push((amp, k));
    }
    let noise: f64 = rng.random_range(0.0..0.2);
    (0..mesh.n_nodes())
        .map(|i| {
            if mesh.is_boundary(i) {
                return 0.0;
            }
            let x = mesh.node(i);
            let smooth: f64 = terms
                .iter()
                .map(|(a, k)| {
                    a * (0..d)
                        .map(|c| (k[c] * std::f64::consts::PI * x[c] / lens[c]).sin())
                        .product::<f64>()
                })
                .sum();
            smooth + noise * rng.random_range(-1.0..1.0)
        })
        .collect()
}

/// Lower bound on the discrete embedding constant sup ‖u‖_target / ‖u‖_source over
/// `samples` seeded random fields and the center tent.
pub fn embedding_ratio_estimate(mesh: &Mesh, source: Spatial, target: Spatial, samples: usize, seed: u64) -> Result<f64> {
    if samples == 0 {
        return Err(Error::InvalidArgument("samples must be >= 1".into()));
    }
    let ratio = |f: &[f64]| -> Result<Option<f64>> {
        let s = spatial_norm(mesh, f, source)?;
        if s == 0.0 {
            return Ok(None);
        }
        Ok(Some(spatial_norm(mesh, f, target)? / s))
    };
    let tent = ratio(&center_tent(mesh))?.unwrap_or(0.0);
    let sampled: Vec<Option<f64>> = (0..samples as u64)
        .into_par_iter()
        .map(|i| ratio(&random_field(mesh, seed, i)))
        .collect::<Result<_>>()?;
    Ok(sampled.into_iter().flatten().fold(tent, f64::max))
}

/// Young constant in the uncorrected form: (r−1) r^{r/(r−1)} ε^{−1/(1−r)}.
pub fn young_constant_verbatim(eps: f64, r: f64) -> Result<f64> {
    check_young(eps, r)?;
    Ok((r - 1.0) * r.powf(r / (r - 1.0)) * eps.powf(-1.0 / (1.0 - r)))
}

/// Constant making ab ≤ ε a^r + C b^{r/(r−1)} valid: (r−1) r^{−r/(r−1)} ε^{−1/(r−1)}.
pub fn young_constant_valid(eps: f64, r: f64) -> Result<f64> {
    check_young(eps, r)?;
    Ok((r - 1.0) * r.powf(-r / (r - 1.0)) * eps.powf(-1.0 / (r - 1.0)))
}

/// Both variants of the Young constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YoungConstants {
    pub verbatim: f64,
    pub valid: f64,
}

pub fn young_constant(eps: f64, r: f64) -> Result<YoungConstants> {
    Ok(YoungConstants { verbatim: young_constant_verbatim(eps, r)?, valid: young_constant_valid(eps, r)? })
}

fn check_young(eps: f64, r: f64) -> Result<()> {
    if !(r > 1.0) {
        return Err(Error::InvalidArgument(format!("Young exponent r = {r} must exceed 1")));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("Young weight eps = {eps} must be positive")));
    }
    Ok(())
}

/// First (a, b) on the grid where ab > ε a^r + C b^{r/(r−1)}, if any.
pub fn young_violation(c: f64, eps: f64, r: f64, grid: &[f64]) -> Option<(f64, f64)> {
    let rs = r / (r - 1.0);
    for &a in grid {
        for &b in grid {
            let rhs = eps * a.powf(r) + c * b.powf(rs);
            if a * b > rhs * (1.0 + 1e-12) + 1e-300 {
                return Some((a, b));
            }
        }
    }
    None
}

/// Whether Young's inequality with constant `c` holds on the grid.
pub fn young_check(c: f64, eps: f64, r: f64, grid: &[f64]) -> bool {
    young_violation(c, eps, r, grid).is_none()
}

/// Uniform grid on [0, hi] with `n` intervals.
pub fn uniform_grid(hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| hi * i as f64 / n as f64).collect()
}

/// Per-level spatial norms of one track; midpoint samples for `Track::Utt`.
pub fn track_norms(traj: &Trajectory, spatial: Spatial, track: Track) -> Result<Vec<f64>> {
    let mesh = traj.mesh();
    match track {
        Track::U => traj.states.iter().map(|s| spatial_norm(mesh, &s.u, spatial)).collect(),
        Track::Ut => traj.states.iter().map(|s| spatial_norm(mesh, &s.ut, spatial)).collect(),
        Track::Utt => traj.accelerations().iter().map(|a| spatial_norm(mesh, a, spatial)).collect(),
    }
}

/// Bochner norm of a trajectory. Sup is exact over the grid; integrals use the
/// trapezoid rule on grid levels and the midpoint rule on midpoint samples.
pub fn bochner_norm(traj: &Trajectory, spec: NormSpec) -> Result<f64> {
    if traj.states.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let vals = track_norms(traj, spec.spatial, spec.track)?;
    let dt = traj.dt();
    let midpoint = spec.track == Track::Utt;
    let integrate = |r: f64| -> f64 {
        if vals.is_empty() {
            return 0.0;
        }
        let s = if midpoint {
            vals.iter().map(|v| v.powf(r)).sum::<f64>() * dt
        } else {
            trapezoid(&vals.iter().map(|v| v.powf(r)).collect::<Vec<_>>(), dt)
        };
        s.powf(1.0 / r)
    };
    Ok(match spec.temporal {
        Temporal::At(i) => *vals
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("time index {i} out of range")))?,
        Temporal::Sup => vals.iter().copied().fold(0.0, f64::max),
        Temporal::L2 => integrate(2.0),
        Temporal::LqPlus1(q) => integrate(q + 1.0),
    })
}

/// Composite trapezoid rule for uniformly spaced samples.
pub fn trapezoid(vals: &[f64], dt: f64) -> f64 {
    if vals.len() < 2 {
        return 0.0;
    }
    let inner: f64 = vals[1..vals.len() - 1].iter().sum();
    dt * (inner + 0.5 * (vals[0] + vals[vals.len() - 1]))
}

/// |||v||| = ‖v_t‖_{L∞(L2)} + ‖∇v‖_{L∞(L2)} + ‖∇v_t‖_{L2(L2)}.
pub fn triple_norm(traj: &Trajectory) -> Result<f64> {
    let a = bochner_norm(traj, NormSpec::new(Spatial::L2, Temporal::Sup, Track::Ut))?;
    let b = bochner_norm(traj, NormSpec::new(Spatial::GradL2, Temporal::Sup, Track::U))?;
    let c = bochner_norm(traj, NormSpec::new(Spatial::GradL2, Temporal::L2, Track::Ut))?;
    Ok(a + b + c)
}

/// |||v − w||| for trajectories on the same grid.
pub fn triple_distance(v: &Trajectory, w: &Trajectory) -> Result<f64> {
    triple_norm(&v.difference(w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::interpolate_dirichlet;
    use crate::mesh::{interval_mesh, rect_mesh};

    #[test]
    fn zero_field_norms() {
        let m = rect_mesh(3, 3, 1.0, 1.0).unwrap();
        let z = vec![0.0; m.n_nodes()];
        for p in [Exponent::Finite(1.0), Exponent::Finite(2.5), Exponent::Infinity] {
            assert_eq!(lp_norm(&m, &z, p, false).unwrap(), 0.0);
            assert_eq!(lp_norm(&m, &z, p, true).unwrap(), 0.0);
        }
        assert!(lp_norm(&m, &z, Exponent::Finite(0.5), false).is_err());
    }

    #[test]
    fn unit_slope_gradient() {
        let m = interval_mesh(7, 1.0).unwrap();
        let f: Vec<f64> = (0..m.n_nodes()).map(|i| m.node(i)[0]).collect();
        assert!((lp_norm(&m, &f, Exponent::Finite(2.0), true).unwrap() - 1.0).abs() < 1e-14);
        let m = interval_mesh(5, 2.0).unwrap();
        let f: Vec<f64> = (0..m.n_nodes()).map(|i| -3.0 * m.node(i)[0]).collect();
        for p in [1.0, 2.0, 3.5] {
            let want = 3.0 * 2.0f64.powf(1.0 / p);
            assert!((lp_norm(&m, &f, Exponent::Finite(p), true).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn poincare_interval_and_scaling() {
        let c = poincare_constant(&interval_mesh(64, 1.0).unwrap()).unwrap();
        assert!((c - 1.0 / std::f64::consts::PI).abs() < 0.01 / std::f64::consts::PI);
        let c2 = poincare_constant(&interval_mesh(64, 3.0).unwrap()).unwrap();
        assert!((c2 / c - 3.0).abs() < 1e-6);
    }

    #[test]
    fn tent_ratio_half() {
        let m = interval_mesh(16, 1.0).unwrap();
        let t = center_tent(&m);
        let g = lp_norm(&m, &t, Exponent::Finite(2.0), true).unwrap();
        let inf = lp_norm(&m, &t, Exponent::Infinity, false).unwrap();
        assert!((g - 1.0).abs() < 1e-14 && (inf - 0.5).abs() < 1e-15);
        let est = embedding_ratio_estimate(&m, Spatial::GradL2, Spatial::LInf, 8, 1).unwrap();
        assert!(est >= 0.5);
    }

    #[test]
    fn identical_norms_ratio_one() {
        let m = interval_mesh(16, 1.0).unwrap();
        let est = embedding_ratio_estimate(&m, Spatial::L2, Spatial::L2, 5, 3).unwrap();
        assert!((est - 1.0).abs() < 1e-14);
    }

    #[test]
    fn young_examples() {
        assert!((young_constant_verbatim(1.0, 2.0).unwrap() - 4.0).abs() < 1e-15);
        assert!((young_constant_valid(1.0, 2.0).unwrap() - 0.25).abs() < 1e-15);
        let grid = uniform_grid(10.0, 100);
        assert!(young_check(0.25, 1.0, 2.0, &grid));
        let c = young_constant_verbatim(0.01, 2.0).unwrap();
        assert!(0.01 + c < 1.0);
        assert!(!young_check(c, 0.01, 2.0, &[1.0]));
        assert!(young_constant_verbatim(1.0, 1.0).is_err());
    }

    #[test]
    fn field_l2_of_sine() {
        let m = interval_mesh(256, 1.0).unwrap();
        let f = interpolate_dirichlet(&m, |x| (std::f64::consts::PI * x[0]).sin());
        let l2 = lp_norm(&m, &f, Exponent::Finite(2.0), false).unwrap();
        assert!((l2 - 0.5f64.sqrt()).abs() < 1e-4);
    }
}
